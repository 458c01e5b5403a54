"""Correspondence-free registration network.

Pipeline for a (template, source) pair:

1. Set abstraction, shared weights for both clouds: FPS down to ``n_fps``
   centers, multi-scale grouping, per radius a shared MLP over
   ``[displacement, neighbor features]`` rows and a max pool.
2. Flow embedding: every template sample pools an MLP over
   ``[source_xyz - template_xyz, template feature, source feature]`` for the
   source samples within ``fe_radius``. Samples with no neighbor get zeros.
3. Head: a mini-PointNet over ``[xyz, flow feature]`` gives one global
   vector, an MLP maps it to 8 numbers, and the real part is squashed with
   sigmoid (w) and tanh (x, y, z).

Geometry (sampling, neighbor search) never needs gradients, so it is
computed up front in numpy and only the MLP/pooling part runs on the tape.
All hidden and shared-MLP layers use ReLU; only the last FC layer is linear.

With ``normalize_displacements`` (the default) every displacement fed to an
MLP is divided by the radius of its search (SA radius or ``fe_radius``).
That is a fixed rescaling of the first layer's inputs, so the function class
is unchanged; it only keeps KITTI-scale (10 m) and unit-scale inputs in a
similar range.
"""
import hashlib
import json
import struct
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import (CacheInvalidError, ConfigurationError, EmptySetError,
                     InsufficientPointsError, ParseError)
from .geometry import DualQuaternion, dualquat_to_transform
from .spatial import NeighborIndex, farthest_point_sampling, group_multi_scale

CHECKPOINT_MAGIC = b"FLOWREG-CKPT\n"
CHECKPOINT_VERSION = 1

# Instrumentation for tests and the CLI (set abstraction call count etc.).
CALL_COUNTS = Counter()


@dataclass(frozen=True)
class ModelConfig:
    n_fps: int = 512
    sa_radii: tuple = (0.05, 0.1)
    sa_caps: tuple = (256, 512)
    fe_radius: float = 0.2
    fe_cap: int = 30
    mlp_sa: tuple = (16, 16, 32)
    mlp_fe: tuple = (128, 128, 256)
    mlp_pn: tuple = (256, 512, 512, 1024)
    mlp_fc: tuple = (512, 256, 8)
    in_features: int = 0
    normalize_displacements: bool = True

    def __post_init__(self):
        for name in ("sa_radii", "sa_caps", "mlp_sa", "mlp_fe", "mlp_pn", "mlp_fc"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "sa_radii", tuple(float(r) for r in self.sa_radii))
        if len(self.sa_radii) != len(self.sa_caps) or not self.sa_radii:
            raise ConfigurationError("sa_radii and sa_caps must have the same nonzero length")
        if any(b <= a for a, b in zip(self.sa_radii, self.sa_radii[1:])):
            raise ConfigurationError(f"sa_radii must be strictly increasing: {self.sa_radii}")
        if not self.mlp_fc or self.mlp_fc[-1] != 8:
            raise ConfigurationError(f"mlp_fc must end with width 8, got {self.mlp_fc}")
        widths = self.mlp_sa + self.mlp_fe + self.mlp_pn + self.mlp_fc
        if not (self.mlp_sa and self.mlp_fe and self.mlp_pn) or min(widths) < 1:
            raise ConfigurationError("all MLP widths must be >= 1 and every MLP nonempty")
        if self.n_fps < 1 or self.fe_cap < 1 or min(self.sa_caps) < 1:
            raise ConfigurationError("n_fps and neighbor caps must be >= 1")
        if self.fe_radius <= 0 or self.sa_radii[0] <= 0:
            raise ConfigurationError("radii must be positive")
        if self.in_features < 0:
            raise ConfigurationError("in_features must be >= 0")

    @classmethod
    def kitti(cls, **overrides):
        base = dict(n_fps=1024, sa_radii=(0.5, 1.0), sa_caps=(512, 1024),
                    fe_radius=10.0, fe_cap=15)
        return cls(**{**base, **overrides})

    @classmethod
    def modelnet(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def reduced(cls, **overrides):
        """Desk-scale ModelNet variant sized for the CPU learning smoke test.

        FE radius 0.2 still covers the largest 0.1-unit offset plus sampling gaps.
        """
        base = dict(n_fps=128, sa_radii=(0.1, 0.2), sa_caps=(8, 16), fe_radius=0.2, fe_cap=16,
                    mlp_sa=(16, 16, 32), mlp_fe=(32, 32, 64), mlp_pn=(64, 128), mlp_fc=(64, 8))
        return cls(**{**base, **overrides})

    @classmethod
    def toy(cls, **overrides):
        base = dict(n_fps=8, sa_radii=(0.3, 0.6), sa_caps=(8, 16), fe_radius=0.6, fe_cap=8,
                    mlp_sa=(4, 4, 8), mlp_fe=(8, 8, 16), mlp_pn=(16, 32), mlp_fc=(16, 8))
        return cls(**{**base, **overrides})

    @property
    def n_radii(self):
        return len(self.sa_radii)

    @property
    def sa_width(self):
        return self.n_radii * self.mlp_sa[-1]

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def layer_shapes(config):
    """Parameter names and shapes in declaration order."""
    shapes = []

    def mlp(prefix, fan_in, widths):
        for k, width in enumerate(widths):
            shapes.append((f"{prefix}.{k}.w", (fan_in, width)))
            shapes.append((f"{prefix}.{k}.b", (width,)))
            fan_in = width

    for level in range(config.n_radii):
        mlp(f"sa{level}", 3 + config.in_features, config.mlp_sa)
    mlp("fe", 3 + 2 * config.sa_width, config.mlp_fe)
    mlp("pn", 3 + config.mlp_fe[-1], config.mlp_pn)
    mlp("fc", config.mlp_pn[-1], config.mlp_fc)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict
    seed: int = 0
    init_scheme: str = "uniform-fan-in"

    def names(self):
        return list(self.arrays)

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()},
                           self.seed, self.init_scheme)

    def num_parameters(self):
        return int(sum(v.size for v in self.arrays.values()))

    def fingerprint(self):
        h = hashlib.sha256(self.config.fingerprint().encode())
        for name, arr in self.arrays.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def as_tensors(self, tape=None):
        """Wrap arrays as tape leaves (training) or constants (inference)."""
        if tape is None:
            return {k: ad.Tensor(v) for k, v in self.arrays.items()}
        return {k: tape.leaf(v, name=k) for k, v in self.arrays.items()}


INIT_SCHEMES = {
    "uniform-fan-in": lambda fan_in: 1.0 / np.sqrt(fan_in),
    # keeps activation scale through stacked ReLU layers; used for training
    "he-uniform": lambda fan_in: np.sqrt(6.0 / fan_in),
}


def init_params(config, seed=0, scheme="uniform-fan-in"):
    """Weights ~ U(-bound, bound), biases zero.

    ``bound`` is ``1/sqrt(fan_in)`` for the default scheme and
    ``sqrt(6/fan_in)`` for ``"he-uniform"``, which also zeroes the last FC
    weight so training starts from the identity-like output (0.5, 0, ..., 0).
    """
    if scheme not in INIT_SCHEMES:
        raise ConfigurationError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    arrays = {}
    shapes = layer_shapes(config)
    last = shapes[-2][0]
    for name, shape in shapes:
        if name.endswith(".w"):
            bound = INIT_SCHEMES[scheme](shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
            if scheme == "he-uniform" and name == last:
                arrays[name][:] = 0.0
        else:
            arrays[name] = np.zeros(shape)
    return ModelParams(config, arrays, seed, scheme)


def _layers(weights, prefix):
    k, out = 0, []
    while f"{prefix}.{k}.w" in weights:
        out.append((weights[f"{prefix}.{k}.w"], weights[f"{prefix}.{k}.b"]))
        k += 1
    return out


def apply_mlp(x, layers, relu_last=True):
    for k, (w, b) in enumerate(layers):
        x = ad.bias_add(ad.matmul(x, w), b)
        if relu_last or k < len(layers) - 1:
            x = ad.relu(x)
    return x


def mini_pointnet(features, layers):
    """Shared-weight MLP on every set element followed by a channel-wise max."""
    x = ad.constant(features)
    if x.shape[0] == 0:
        raise EmptySetError("mini-PointNet over an empty set")
    return ad.max_pool_set(apply_mlp(x, layers))


# --- set abstraction ------------------------------------------------------------

@dataclass(frozen=True)
class SAGeometry:
    """Gradient-free part of set abstraction for one cloud."""

    centers: np.ndarray          # indices into the input cloud
    xyz: np.ndarray              # [n_fps, 3]
    rows: tuple                  # per radius: [rows, 3 + c] = displacement | features
    offsets: tuple               # per radius: [n_fps + 1]


def prepare_set_abstraction(cloud, config):
    if cloud.n < config.n_fps:
        raise InsufficientPointsError(
            f"set abstraction needs at least n_fps={config.n_fps} points, got {cloud.n}")
    if cloud.c != config.in_features:
        raise ConfigurationError(f"cloud has {cloud.c} feature channels, model expects {config.in_features}")
    centers = farthest_point_sampling(cloud.points, config.n_fps)
    index = NeighborIndex(cloud.points, config.sa_radii[-1])
    groups = group_multi_scale(cloud.points, centers, config.sa_radii, config.sa_caps, index=index)
    rows, offsets = [], []
    for level, nb in enumerate(groups.scales):
        disp = groups.displacements[level]
        if config.normalize_displacements:
            disp = disp / config.sa_radii[level]
        rows.append(np.concatenate([disp, cloud.features[nb.indices]], axis=1))
        offsets.append(nb.offsets)
    return SAGeometry(centers, cloud.points[centers], tuple(rows), tuple(offsets))


def _stack_offsets(offset_list):
    parts, shift = [np.zeros(1, dtype=np.int64)], 0
    for off in offset_list:
        parts.append(off[1:] + shift)
        shift += off[-1]
    return np.concatenate(parts)


def set_abstraction_features(geoms, weights, config):
    """Tensor ``[sum n_fps, n_r * c']`` for one or more clouds stacked in order."""
    per_level = []
    for level in range(config.n_radii):
        rows = ad.constant(np.concatenate([g.rows[level] for g in geoms], axis=0))
        offsets = _stack_offsets([g.offsets[level] for g in geoms])
        h = apply_mlp(rows, _layers(weights, f"sa{level}"))
        per_level.append(ad.segment_max(h, offsets))
    CALL_COUNTS["set_abstraction"] += len(geoms)
    return per_level[0] if len(per_level) == 1 else ad.concat(per_level, axis=-1)


@dataclass(frozen=True, eq=False)
class AbstractedCloud:
    """FPS sample coordinates with their multi-scale features.

    ``features`` is a :class:`~flowreg.autodiff.Tensor` so it can be reused on a
    tape; ``fingerprint`` ties it to the config and parameters that made it.
    """

    xyz: np.ndarray
    features: ad.Tensor
    fingerprint: str = ""

    @property
    def n(self):
        return self.xyz.shape[0]

    def as_array(self):
        return np.concatenate([self.xyz, self.features.value], axis=1)


def set_abstraction(cloud, config, params, weights=None):
    geom = prepare_set_abstraction(cloud, config)
    weights = weights if weights is not None else params.as_tensors()
    feats = set_abstraction_features([geom], weights, config)
    return AbstractedCloud(geom.xyz, feats, _cache_key(config, params))


# --- flow embedding -------------------------------------------------------------

@dataclass(frozen=True)
class FlowGeometry:
    template_rows: np.ndarray    # row -> template sample
    source_rows: np.ndarray      # row -> source sample
    displacements: np.ndarray    # source_xyz - template_xyz per row
    offsets: np.ndarray          # [n_template + 1]


def prepare_flow_embedding(template_xyz, source_xyz, config):
    index = NeighborIndex(source_xyz, config.fe_radius)
    nb = index.query_many(template_xyz, config.fe_radius, config.fe_cap)
    trow = nb.segment_ids()
    disp = source_xyz[nb.indices] - template_xyz[trow]
    if config.normalize_displacements:
        disp = disp / config.fe_radius
    return FlowGeometry(trow, nb.indices, disp, nb.offsets)


@dataclass(frozen=True, eq=False)
class FlowCloud:
    xyz: np.ndarray
    features: ad.Tensor


def flow_features(template_feats, source_feats, flow_geoms, template_counts, source_counts,
                  weights):
    """Flow features for stacked pairs; rows index into the stacked SA outputs."""
    t_shift = np.concatenate([[0], np.cumsum(template_counts)[:-1]])
    s_shift = np.concatenate([[0], np.cumsum(source_counts)[:-1]])
    trows = np.concatenate([g.template_rows + t for g, t in zip(flow_geoms, t_shift)])
    srows = np.concatenate([g.source_rows + s for g, s in zip(flow_geoms, s_shift)])
    disp = np.concatenate([g.displacements for g in flow_geoms], axis=0)
    offsets = _stack_offsets([g.offsets for g in flow_geoms])
    x = ad.concat([ad.constant(disp), ad.gather_rows(template_feats, trows),
                   ad.gather_rows(source_feats, srows)], axis=-1)
    h = apply_mlp(x, _layers(weights, "fe"))
    CALL_COUNTS["flow_embedding"] += len(flow_geoms)
    return ad.segment_max(h, offsets)


def flow_embedding(template, source, config, params, weights=None):
    if template.features.shape[1] != source.features.shape[1]:
        raise ConfigurationError("template and source abstractions have different feature widths")
    weights = weights if weights is not None else params.as_tensors()
    geom = prepare_flow_embedding(template.xyz, source.xyz, config)
    feats = flow_features(template.features, source.features, [geom], [template.n], [source.n],
                          weights)
    return FlowCloud(template.xyz, feats)


# --- output head ----------------------------------------------------------------

def head_outputs(xyz, flow, offsets, weights):
    """Constrained dual-quaternion outputs ``[pairs, 8]`` from stacked flow clouds."""
    if np.any(np.diff(offsets) == 0):
        raise EmptySetError("output head needs at least one flow sample per pair")
    x = ad.concat([ad.constant(xyz), flow], axis=-1)
    h = apply_mlp(x, _layers(weights, "pn"))
    g = ad.segment_max(h, offsets)
    raw = apply_mlp(g, _layers(weights, "fc"), relu_last=False)
    return constrain_raw(raw)


def constrain_raw(raw):
    """sigmoid on w, tanh on x, y, z, dual part untouched."""
    return ad.concat([ad.sigmoid(ad.columns(raw, 0, 1)), ad.tanh(ad.columns(raw, 1, 4)),
                      ad.columns(raw, 4, 8)], axis=-1)


def output_head(flow, params, weights=None):
    weights = weights if weights is not None else params.as_tensors()
    out = head_outputs(flow.xyz, flow.features, np.array([0, flow.xyz.shape[0]]), weights)
    return DualQuaternion.from_array(out.value[0])


# --- full model -----------------------------------------------------------------

def _check_pair(template, source, config):
    if template.c != source.c:
        raise ConfigurationError(f"feature widths differ: {template.c} vs {source.c}")
    for name, cloud in (("template", template), ("source", source)):
        if cloud.n < config.n_fps:
            raise InsufficientPointsError(f"{name} has {cloud.n} points, n_fps={config.n_fps}")


def _predict_from_abstractions(t_sa, s_sa, config, weights):
    fgeom = prepare_flow_embedding(t_sa.xyz, s_sa.xyz, config)
    flow = flow_features(t_sa.features, s_sa.features, [fgeom], [t_sa.n], [s_sa.n], weights)
    out = head_outputs(t_sa.xyz, flow, np.array([0, t_sa.n]), weights)
    dq = DualQuaternion.from_array(out.value[0])
    return dq, dualquat_to_transform(dq)


def model_forward(template, source, config, params):
    """Predicted ``(DualQuaternion, RigidTransform)`` aligning source onto template."""
    _check_pair(template, source, config)
    weights = params.as_tensors()
    t_sa = set_abstraction(template, config, params, weights)
    s_sa = set_abstraction(source, config, params, weights)
    return _predict_from_abstractions(t_sa, s_sa, config, weights)


def _cache_key(config, params):
    return f"{config.fingerprint()}:{params.fingerprint()}"


def odometry_forward_cached(prev_sa, new_cloud, config, params):
    """Register ``new_cloud`` against the previous scan's cached abstraction.

    Returns ``(prediction, new_sa)``; ``prediction`` is ``None`` for the first
    scan (``prev_sa is None``), otherwise the ``(DualQuaternion,
    RigidTransform)`` pair :func:`model_forward` would give for
    ``(previous scan, new_cloud)``.
    """
    weights = params.as_tensors()
    new_sa = set_abstraction(new_cloud, config, params, weights)
    if prev_sa is None:
        return None, new_sa
    if prev_sa.fingerprint != new_sa.fingerprint:
        raise CacheInvalidError("cached set abstraction was produced by a different config or params")
    return _predict_from_abstractions(prev_sa, new_sa, config, weights), new_sa


def batch_forward(pairs_geometry, weights, config):
    """Tape-aware forward over several prepared pairs; returns ``[pairs, 8]``.

    ``pairs_geometry`` is a list of ``(template SAGeometry, source SAGeometry)``.
    """
    t_geoms = [p[0] for p in pairs_geometry]
    s_geoms = [p[1] for p in pairs_geometry]
    t_feat = set_abstraction_features(t_geoms, weights, config)
    s_feat = set_abstraction_features(s_geoms, weights, config)
    fgeoms = [prepare_flow_embedding(t.xyz, s.xyz, config) for t, s in zip(t_geoms, s_geoms)]
    counts = [g.xyz.shape[0] for g in t_geoms]
    flow = flow_features(t_feat, s_feat, fgeoms, counts, [g.xyz.shape[0] for g in s_geoms], weights)
    xyz = np.concatenate([g.xyz for g in t_geoms], axis=0)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return head_outputs(xyz, flow, offsets, weights)


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, params, extra=None):
    """Write a self-describing checkpoint.

    Layout: magic line, 4-byte little-endian header length, UTF-8 JSON header
    (version, config, fingerprint, seed, array names/shapes in declaration
    order), then every array as little-endian float64 in header order.
    """
    names = params.names()
    header = {
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "config_fingerprint": params.config.fingerprint(),
        "seed": params.seed,
        "init_scheme": params.init_scheme,
        "arrays": [[n, list(params.arrays[n].shape)] for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params.arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ParseError(path, 1, "not a flowreg checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    if len(data) < pos + 4:
        raise ParseError(path, 1, "truncated header length")
    (hlen,) = struct.unpack("<I", data[pos:pos + 4])
    pos += 4
    try:
        header = json.loads(data[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(path, 2, f"corrupt header: {exc}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise ParseError(path, 2, f"unsupported checkpoint version {header.get('version')}")
    pos += hlen
    config = ModelConfig.from_dict(header["config"])
    arrays = {}
    for name, shape in header["arrays"]:
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(data):
            raise ParseError(path, 2, f"truncated data for array {name}")
        arrays[name] = np.frombuffer(data[pos:pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(data):
        raise ParseError(path, 2, f"{len(data) - pos} trailing bytes after arrays")
    expected = [n for n, _ in layer_shapes(config)]
    if list(arrays) != expected:
        raise ParseError(path, 2, "array names do not match the config layout")
    return ModelParams(config, arrays, header["seed"], header.get("init_scheme", "")), header.get("extra", {})
