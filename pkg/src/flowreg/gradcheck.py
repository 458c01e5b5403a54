"""Central finite-difference checks for the autodiff primitives and the model.

Relative error of a gradient tensor is ``|a - n| / max(|a|, |n|)`` in the
Euclidean norm (0 when both vanish), with ``a`` the analytic and ``n`` the
numeric gradient.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import ShapeDistribution, SyntheticPairDataset, PerturbationSpec
from .network import ModelConfig, batch_forward, init_params, prepare_set_abstraction
from .training import LossConfig, loss_tensors, pair_label

STEP = 1e-6
PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    trial: int
    rel_error: float
    tol: float

    @property
    def passed(self):
        return bool(self.rel_error < self.tol)


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def numeric_gradient(f, arrays, h=STEP):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arrays`` (perturbed in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = f()
            arr[idx] = orig - h
            fm = f()
            arr[idx] = orig
            g[idx] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def _project(out, weights):
    """Scalar ``sum(out * weights)`` built from tape primitives."""
    if out.value.ndim == 0:
        return out
    flat = ad.reshape(out, (-1, out.shape[-1])) if out.value.ndim > 1 else out
    return ad.sum_all(ad.matmul(flat, ad.constant(weights)))


def _primitive_cases(rng):
    n, c = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    offs = np.array([0, 2, 2, n + 3])
    idx = rng.integers(0, n, size=7)
    return {
        "matmul": ([(n, c), (c, 3)], lambda x, w: ad.matmul(x, w)),
        "bias_add": ([(n, c), (c,)], lambda x, b: ad.bias_add(x, b)),
        "add": ([(n, c), (n, c)], lambda a, b: ad.add(a, b)),
        "sub": ([(n, c), (n, c)], lambda a, b: ad.sub(a, b)),
        "relu": ([(n, c)], lambda x: ad.relu(x)),
        "sigmoid": ([(n, c)], lambda x: ad.sigmoid(x)),
        "tanh": ([(n, c)], lambda x: ad.tanh(x)),
        "concat": ([(n, c), (n, 2)], lambda a, b: ad.concat([a, b])),
        "scale": ([(n, c)], lambda x: ad.scale(x, -1.7)),
        "sum": ([(n, c)], lambda x: ad.sum_all(x)),
        "mean_squared_norm": ([(n, c)], lambda x: ad.mean_squared_norm(x)),
        "columns": ([(n, c + 2)], lambda x: ad.columns(x, 1, c)),
        "reshape": ([(n, c)], lambda x: ad.reshape(x, (c, n))),
        "normalize_rows": ([(n, 4)], lambda x: ad.normalize_rows(x)),
        "gather_rows": ([(n, c)], lambda x: ad.gather_rows(x, idx)),
        "max_pool_set": ([(n, c)], lambda x: ad.max_pool_set(x)),
        "segment_max": ([(n + 3, c)], lambda x: ad.segment_max(x, offs)),
    }


def check_primitives(trials=20, seed=0, tol=PRIMITIVE_TOL):
    results = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        for name, (shapes, fn) in _primitive_cases(rng).items():
            arrays = [rng.normal(size=s) for s in shapes]
            probe = fn(*[ad.Tensor(a) for a in arrays])
            weights = rng.normal(size=(probe.shape[-1], 1)) if probe.value.ndim else None

            def f():
                return float(_project(fn(*[ad.Tensor(a) for a in arrays]), weights).value)

            tape = ad.Tape()
            leaves = [tape.leaf(a) for a in arrays]
            tape.backward(_project(fn(*leaves), weights))
            numeric = numeric_gradient(f, arrays)
            err = max(relative_error(l.grad, g) for l, g in zip(leaves, numeric))
            results.append(CheckResult(name, trial, err, tol))
    return results


def toy_problem(seed=0, n_points=32, pairs=2, config=None):
    """Toy config, prepared pair geometry, labels and parameters with random biases.

    Biases are randomized so no ReLU input sits exactly on its kink.
    """
    config = config or ModelConfig.toy()
    rng = np.random.default_rng(seed)
    ds = SyntheticPairDataset(pairs, ShapeDistribution(count=n_points),
                              PerturbationSpec.modelnet(0.02), seed=seed)
    items = [ds[i] for i in range(pairs)]
    geoms = [(prepare_set_abstraction(t, config), prepare_set_abstraction(s, config))
             for t, s, _ in items]
    labels = np.stack([pair_label(gt) for _, _, gt in items])
    params = init_params(config, seed)
    for name, arr in params.arrays.items():
        if name.endswith(".b"):
            arr[:] = rng.uniform(-0.1, 0.1, size=arr.shape)
    return config, geoms, labels, params


def model_gradients(config, geoms, labels, params, loss_config):
    tape = ad.Tape()
    weights = params.as_tensors(tape)
    total = loss_tensors(batch_forward(geoms, weights, config), labels, loss_config)[0]
    tape.backward(total)
    return {k: w.grad for k, w in weights.items()}


def model_loss(config, geoms, labels, params, loss_config):
    weights = params.as_tensors()
    return float(loss_tensors(batch_forward(geoms, weights, config), labels, loss_config)[0].value)


def check_model_full(seed=0, tol=MODEL_TOL, loss_config=None):
    """Entry-by-entry check of every parameter tensor of the toy model + loss."""
    loss_config = loss_config or LossConfig(beta=1.0)
    config, geoms, labels, params = toy_problem(seed)
    analytic = model_gradients(config, geoms, labels, params, loss_config)
    names = params.names()
    numeric = numeric_gradient(lambda: model_loss(config, geoms, labels, params, loss_config),
                               [params.arrays[n] for n in names])
    return [CheckResult(f"model:{n}", 0, relative_error(analytic[n], g), tol)
            for n, g in zip(names, numeric)]


def check_model_directional(trials=20, seed=0, tol=MODEL_TOL, loss_config=None):
    """Per trial: derivative along one random direction in the full parameter space."""
    loss_config = loss_config or LossConfig(beta=200.0)
    results = []
    for trial in range(trials):
        config, geoms, labels, params = toy_problem(seed + 1 + trial)
        analytic = model_gradients(config, geoms, labels, params, loss_config)
        rng = np.random.default_rng([seed, trial, 7])
        direction = {n: rng.normal(size=a.shape) for n, a in params.arrays.items()}
        orig = {n: a.copy() for n, a in params.arrays.items()}

        def shifted(sign):
            for n, a in params.arrays.items():
                a[:] = orig[n] + sign * STEP * direction[n]
            return model_loss(config, geoms, labels, params, loss_config)

        numeric = (shifted(1.0) - shifted(-1.0)) / (2 * STEP)
        for n, a in params.arrays.items():
            a[:] = orig[n]
        exact = sum(float(np.sum(analytic[n] * direction[n])) for n in direction)
        results.append(CheckResult("model:directional", trial, relative_error(exact, numeric), tol))
    return results


def run_suite(trials=20, seed=0):
    return (check_primitives(trials, seed) + check_model_full(seed)
            + check_model_directional(trials, seed))
