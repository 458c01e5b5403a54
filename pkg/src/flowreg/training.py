"""Dual-quaternion losses, the optimizer and the training loop.

Losses (batch means)::

    L_real = mean || p - p_hat / ||p_hat|| ||^2
    L_dual = mean || q - q_hat ||^2
    L      = beta * L_real + L_dual
"""
import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (ConfigurationError, DegenerateInputError, EmptyDatasetError,
                     InvalidArgumentError, TrainingDivergenceError)
from .geometry import DEGENERATE_NORM, DualQuaternion, dualquat_from_transform
from .network import (ModelConfig, batch_forward, init_params, prepare_set_abstraction,
                      save_checkpoint)


@dataclass(frozen=True)
class LossConfig:
    beta: float = 1.0

    def __post_init__(self):
        if not self.beta >= 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}")

    @classmethod
    def kitti(cls):
        return cls(beta=200.0)

    @classmethod
    def modelnet(cls):
        return cls(beta=1.0)


def _as_rows(x):
    if isinstance(x, DualQuaternion):
        return x.as_array().reshape(1, 8)
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], DualQuaternion):
        return np.stack([d.as_array() for d in x])
    return np.asarray(x, dtype=np.float64).reshape(-1, 8)


# --- tape losses ------------------------------------------------------------------

def loss_tensors(pred, gt, config):
    """``(L, L_real, L_dual)`` tensors for predictions ``[B, 8]`` and labels ``[B, 8]``."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 8)
    if pred.shape != gt.shape:
        raise InvalidArgumentError(f"prediction shape {pred.shape} vs label shape {gt.shape}")
    p_hat = ad.columns(pred, 0, 4)
    if np.any(np.linalg.norm(p_hat.value, axis=1) <= DEGENERATE_NORM):
        raise DegenerateInputError("predicted real part has zero norm")
    l_real = ad.mean_squared_norm(ad.sub(ad.constant(gt[:, :4]), ad.normalize_rows(p_hat)))
    l_dual = ad.mean_squared_norm(ad.sub(ad.constant(gt[:, 4:]), ad.columns(pred, 4, 8)))
    total = ad.add(ad.scale(l_real, config.beta), l_dual)
    return total, l_real, l_dual


# --- numpy conveniences -------------------------------------------------------------

def loss_real(pred, gt):
    p_hat = _as_rows(pred)[:, :4]
    norm = np.linalg.norm(p_hat, axis=1, keepdims=True)
    if np.any(norm <= DEGENERATE_NORM):
        raise DegenerateInputError("predicted real part has zero norm")
    r = _as_rows(gt)[:, :4] - p_hat / norm
    return float(np.mean(np.sum(r * r, axis=1)))


def loss_dual(pred, gt):
    r = _as_rows(gt)[:, 4:] - _as_rows(pred)[:, 4:]
    return float(np.mean(np.sum(r * r, axis=1)))


def loss_combined(pred, gt, config):
    return config.beta * loss_real(pred, gt) + loss_dual(pred, gt)


# --- optimizer ----------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params, grads, state):
    """Adaptive-moment step with decoupled weight decay, in place on ``params.arrays``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2, lr = state.beta1, state.beta2, state.lr
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    decay = 1.0 - lr * state.weight_decay
    for name, p in params.arrays.items():
        g = grads[name]
        if p.shape != g.shape:
            raise InvalidArgumentError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# --- training loop ------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    decay_every: int = 0
    decay_gamma: float = 0.5
    checkpoint_every: int = 0
    checkpoint_dir: str = None
    cache_geometry: bool = True
    init_scheme: str = "he-uniform"

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")


@dataclass
class TrainResult:
    params: object
    history: list
    checkpoints: list = field(default_factory=list)


class TrainingAborted(TrainingDivergenceError):
    def __init__(self, message, last_good):
        super().__init__(message)
        self.last_good = last_good


def pair_label(gt_transform):
    """8-vector label with the real part canonicalized to w > 0."""
    d = dualquat_from_transform(gt_transform)
    if not d.real.w > 0:
        raise InvalidArgumentError("ground-truth rotation of 180 degrees (w = 0) cannot be a label")
    return d.as_array()


def train_step(params, pairs_geometry, labels, loss_config, state):
    tape = ad.Tape()
    try:
        weights = params.as_tensors(tape)
        pred = batch_forward(pairs_geometry, weights, params.config)
        total, l_real, l_dual = loss_tensors(pred, labels, loss_config)
        values = (float(l_real.value), float(l_dual.value), float(total.value))
        if not all(math.isfinite(v) for v in values):
            raise TrainingDivergenceError(f"non-finite loss {values[2]}")
        tape.backward(total)
        optimizer_step(params, {k: w.grad for k, w in weights.items()}, state)
    finally:
        tape.clear()
    return values


def train(dataset, model_config, loss_config=None, schedule=None, params=None, log=None):
    """Minimize the combined loss over ``dataset`` of ``(template, source, gt)``.

    ``dataset`` only needs ``len`` and integer indexing, so lazily generated
    datasets work. Each epoch visits a seeded permutation; ``schedule.steps``
    counts optimizer steps. History rows are ``(step, L_real, L_dual, L)``.
    """
    loss_config = loss_config or LossConfig()
    schedule = schedule or Schedule()
    n = len(dataset)
    if n == 0:
        raise EmptyDatasetError("training dataset is empty")
    if params is None:
        params = init_params(model_config, schedule.seed, schedule.init_scheme)
    params = params.copy()
    state = OptimizerState(lr=schedule.lr, weight_decay=schedule.weight_decay,
                           beta1=schedule.betas[0], beta2=schedule.betas[1])
    rng = np.random.default_rng(schedule.seed)
    cache = {}
    history, checkpoints = [], []
    last_good = params.copy()
    order, cursor = rng.permutation(n), 0

    def geometry(i):
        if i in cache:
            return cache[i]
        template, source, gt = dataset[i]
        item = ((prepare_set_abstraction(template, model_config),
                 prepare_set_abstraction(source, model_config)), pair_label(gt))
        if schedule.cache_geometry:
            cache[i] = item
        return item

    for step in range(1, schedule.steps + 1):
        if schedule.decay_every and step > 1 and (step - 1) % schedule.decay_every == 0:
            state.lr *= schedule.decay_gamma
        batch = []
        for _ in range(min(schedule.batch_size, n)):
            if cursor == n:
                order, cursor = rng.permutation(n), 0
            batch.append(geometry(int(order[cursor])))
            cursor += 1
        try:
            values = train_step(params, [b[0] for b in batch], np.stack([b[1] for b in batch]),
                                loss_config, state)
        except TrainingDivergenceError as exc:
            raise TrainingAborted(f"step {step}: {exc}", last_good) from exc
        history.append((step,) + values)
        if log is not None:
            log(step, values)
        if schedule.checkpoint_every and step % schedule.checkpoint_every == 0:
            last_good = params.copy()
            if schedule.checkpoint_dir:
                path = Path(schedule.checkpoint_dir) / f"checkpoint_step{step:06d}.ckpt"
                save_checkpoint(path, params, {"step": step})
                checkpoints.append(str(path))
    return TrainResult(params, history, checkpoints)


def write_loss_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "L_real", "L_dual", "L"])
        for step, lr_, ld, lt in history:
            w.writerow([step, repr(lr_), repr(ld), repr(lt)])


def read_loss_history(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]


# --- manifest -----------------------------------------------------------------------

@dataclass
class TrainingManifest:
    """JSON training manifest.

    Keys: ``model`` (preset name ``kitti``/``modelnet``/``reduced``/``toy`` or a config
    dict, optionally with ``preset`` plus overrides), ``loss`` (``{"beta"}``),
    ``optimizer`` (``lr``, ``weight_decay``, ``betas``, ``decay_every``,
    ``decay_gamma``), ``seed``, ``datasets`` (directories written by
    ``gen-data``, or ``{"synthetic": {...}}`` specs generated on the fly),
    ``epochs`` or ``steps``, ``batch_size``, ``augment_duplicates`` (bool),
    ``init_scheme`` (default ``he-uniform``).
    """

    model: ModelConfig
    loss: LossConfig
    schedule: Schedule
    datasets: list
    epochs: int = 0
    augment_duplicates: bool = False
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d, base_dir="."):
        model = d.get("model", "modelnet")
        if isinstance(model, str):
            model = {"preset": model}
        model = dict(model)
        preset = model.pop("preset", None)
        factory = {"kitti": ModelConfig.kitti, "modelnet": ModelConfig.modelnet,
                   "toy": ModelConfig.toy, "reduced": ModelConfig.reduced, None: ModelConfig}.get(preset)
        if factory is None:
            raise ConfigurationError(f"unknown model preset {preset!r}")
        model_config = factory(**model)
        loss = LossConfig(**d.get("loss", {}))
        opt = d.get("optimizer", {})
        datasets = [p if isinstance(p, dict) else str(Path(base_dir) / p)
                    for p in d.get("datasets", [])]
        schedule = Schedule(steps=int(d.get("steps", 0)), batch_size=int(d.get("batch_size", 8)),
                            lr=float(opt.get("lr", 1e-3)),
                            weight_decay=float(opt.get("weight_decay", 1e-4)),
                            betas=tuple(opt.get("betas", (0.9, 0.999))),
                            seed=int(d.get("seed", 0)),
                            decay_every=int(opt.get("decay_every", 0)),
                            decay_gamma=float(opt.get("decay_gamma", 0.5)),
                            init_scheme=str(d.get("init_scheme", "he-uniform")))
        return cls(model_config, loss, schedule, datasets, int(d.get("epochs", 0)),
                   bool(d.get("augment_duplicates", False)), d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                from .errors import ParseError
                raise ParseError(path, exc.lineno, exc.msg) from None
        return cls.from_dict(d, base_dir=os.path.dirname(os.path.abspath(path)))

    def snapshot(self):
        return {"model": self.model.to_dict(), "loss": asdict(self.loss),
                "schedule": {k: (list(v) if isinstance(v, tuple) else v)
                             for k, v in asdict(self.schedule).items()},
                "datasets": self.datasets, "epochs": self.epochs,
                "augment_duplicates": self.augment_duplicates}
