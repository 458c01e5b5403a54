"""Synthetic registration data, augmentation and file formats.

File formats:

* ASCII PLY point clouds: ``x y z`` plus optional ``nx ny nz`` and/or
  ``intensity`` vertex properties; the feature width follows the header.
* KITTI scan binaries: little-endian float32 quadruplets ``x y z intensity``.
* Pose files: one line per pose, 12 numbers, row-major ``[R | t]``.
* Dataset directories: ``manifest.json`` listing pair files plus a pose file of
  ground-truth labels (one row per pair).
"""
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError, ParseError
from .geometry import (PointCloud, RigidTransform, apply, axis_angle_to_rotation,
                       euler_zyx_to_rotation, inverse, random_rotation, rotation_to_quat)

SHAPE_FAMILIES = ("sphere", "box", "cylinder", "torus", "plane")
DATASET_VERSION = 1


# --- shapes -------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeSpec:
    """Surface to sample, centered at the origin.

    ``size`` meaning per family: sphere ``(radius,)``; box ``(sx, sy, sz)``
    full side lengths; cylinder ``(radius, height)``; torus ``(major, minor)``;
    plane ``(sx, sy)``.
    """

    family: str
    size: tuple
    count: int = 512
    with_normals: bool = False

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        if self.family not in SHAPE_FAMILIES:
            raise ConfigurationError(f"unknown shape family {self.family!r}")
        needed = {"sphere": 1, "box": 3, "cylinder": 2, "torus": 2, "plane": 2}[self.family]
        if len(self.size) != needed or min(self.size) <= 0:
            raise ConfigurationError(f"{self.family} needs {needed} positive sizes, got {self.size}")
        if self.count < 1:
            raise ConfigurationError("sample count must be >= 1")
        if self.family == "torus" and self.size[1] >= self.size[0]:
            raise ConfigurationError("torus minor radius must be smaller than the major radius")


def _unit(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_sphere(rng, n, size):
    (r,) = size
    normals = _unit(rng.normal(size=(n, 3)))
    return r * normals, normals


def _sample_box(rng, n, size):
    sx, sy, sz = size
    half = np.array(size) / 2.0
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-half, half, size=(n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    normals = np.zeros((n, 3))
    normals[np.arange(n), axis] = sign
    return pts, normals


def _sample_cylinder(rng, n, size):
    r, h = size
    lateral, cap = 2 * np.pi * r * h, np.pi * r * r
    kind = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    z = rng.uniform(-h / 2, h / 2, size=n)
    rho = r * np.sqrt(rng.uniform(0, 1, size=n))
    on_side = kind == 0
    radial = np.where(on_side, r, rho)
    pts = np.stack([radial * np.cos(theta), radial * np.sin(theta),
                    np.where(on_side, z, np.where(kind == 1, h / 2, -h / 2))], axis=1)
    normals = np.zeros((n, 3))
    normals[on_side, 0] = np.cos(theta[on_side])
    normals[on_side, 1] = np.sin(theta[on_side])
    normals[kind == 1, 2] = 1.0
    normals[kind == 2, 2] = -1.0
    return pts, normals


def _sample_torus(rng, n, size):
    big, small = size
    u = np.empty(n)
    v = np.empty(n)
    filled = 0
    while filled < n:
        uu = rng.uniform(0, 2 * np.pi, size=2 * n)
        vv = rng.uniform(0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(0, 1, size=2 * n) < (big + small * np.cos(vv)) / (big + small)
        take = min(n - filled, int(keep.sum()))
        u[filled:filled + take] = uu[keep][:take]
        v[filled:filled + take] = vv[keep][:take]
        filled += take
    normals = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    ring = big + small * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)
    return pts, normals


def _sample_plane(rng, n, size):
    sx, sy = size
    pts = np.zeros((n, 3))
    pts[:, 0] = rng.uniform(-sx / 2, sx / 2, size=n)
    pts[:, 1] = rng.uniform(-sy / 2, sy / 2, size=n)
    normals = np.zeros((n, 3))
    normals[:, 2] = 1.0
    return pts, normals


_SAMPLERS = {"sphere": _sample_sphere, "box": _sample_box, "cylinder": _sample_cylinder,
             "torus": _sample_torus, "plane": _sample_plane}


def sample_shape(spec, seed):
    """Area-uniform surface samples, with outward unit normals as features if requested."""
    rng = np.random.default_rng(seed)
    pts, normals = _SAMPLERS[spec.family](rng, spec.count, spec.size)
    return PointCloud(pts, normals if spec.with_normals else None)


# --- perturbations ------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbationSpec:
    """Distribution of ground-truth transforms and point noise.

    ``mode="uniform"``: translation magnitude uniform in ``translation_range``
    along a uniform direction; rotation angle uniform in ``rotation_range_deg``
    about a uniform axis. ``mode="gaussian"``: per-axis translation std
    ``translation_std`` and Z-Y-X Euler std ``rotation_std_deg`` given as
    ``(roll, pitch, yaw)``-order stds about x, y, z. Point noise is isotropic
    Gaussian with ``noise_std``.
    """

    translation_range: tuple = (0.0, 0.1)
    rotation_range_deg: tuple = (0.0, 5.0)
    noise_std: float = 0.0
    mode: str = "uniform"
    translation_std: tuple = (0.0, 0.0, 0.0)
    rotation_std_deg: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("translation_range", "rotation_range_deg", "translation_std", "rotation_std_deg"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        lo, hi = self.translation_range
        alo, ahi = self.rotation_range_deg
        if not (0 <= lo <= hi and 0 <= alo <= ahi <= 180):
            raise ConfigurationError("perturbation ranges must be nonnegative and ordered")
        if self.noise_std < 0 or min(self.translation_std + self.rotation_std_deg) < 0:
            raise ConfigurationError("standard deviations must be nonnegative")
        if self.mode not in ("uniform", "gaussian"):
            raise ConfigurationError(f"unknown perturbation mode {self.mode!r}")

    @classmethod
    def modelnet(cls, noise_std=0.02):
        return cls((0.0, 0.1), (0.0, 5.0), noise_std)

    @classmethod
    def kitti_training(cls):
        """Odometry augmentation preset; rotation stds are about x, y, z."""
        return cls(mode="gaussian", translation_std=(0.2, 0.02, 0.02),
                   rotation_std_deg=(0.1, 0.1, 1.0), noise_std=0.01)

    def replace(self, **kw):
        return PerturbationSpec(**{**asdict(self), **kw})


def sample_transform(perturb, rng):
    """Draw a ground-truth pose whose real quaternion has w > 0."""
    while True:
        if perturb.mode == "uniform":
            angle = rng.uniform(*perturb.rotation_range_deg)
            axis = rng.normal(size=3)
            r = axis_angle_to_rotation(axis, np.radians(angle))
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            t = rng.uniform(*perturb.translation_range) * direction
        else:
            roll, pitch, yaw = rng.normal(0.0, perturb.rotation_std_deg)
            r = euler_zyx_to_rotation(yaw, pitch, roll)
            t = rng.normal(0.0, perturb.translation_std)
        if rotation_to_quat(r).w > 0:
            return RigidTransform(r, t)


def _noisy(cloud, std, rng):
    if std == 0:
        return cloud
    return cloud.with_points(cloud.points + rng.normal(0.0, std, size=cloud.points.shape))


def _move(cloud, transform, normals):
    moved = apply(transform, cloud)
    if normals:
        moved = PointCloud(moved.points, cloud.features @ transform.rotation.T)
    return moved


def make_pair(cloud, perturb, seed, normals=None):
    """``(template, source, gt)`` with ``apply(gt, source)`` aligned to ``template``.

    Noise is drawn independently for both clouds after transforming. When
    ``normals`` (default: feature width 3) the features rotate with the cloud.
    """
    rng = np.random.default_rng(seed)
    normals = cloud.c == 3 if normals is None else normals
    gt = sample_transform(perturb, rng)
    source = _move(cloud, inverse(gt), normals)
    return _noisy(cloud, perturb.noise_std, rng), _noisy(source, perturb.noise_std, rng), gt


def duplicate_template_augment(pairs, perturb, seed, normals=None):
    """Append, per pair, a pair whose source is a re-transformed, re-noised template copy."""
    pairs = list(pairs)
    rng = np.random.default_rng(seed)
    extra = []
    for template, _, _ in pairs:
        sub_seed = int(rng.integers(0, 2 ** 63 - 1))
        pair_rng = np.random.default_rng(sub_seed)
        use_normals = template.c == 3 if normals is None else normals
        gt = sample_transform(perturb, pair_rng)
        source = _noisy(_move(template, inverse(gt), use_normals), perturb.noise_std, pair_rng)
        extra.append((template, source, gt))
    return pairs + extra


# --- lazily generated datasets ------------------------------------------------------

@dataclass(frozen=True)
class ShapeDistribution:
    """Random shapes for synthetic datasets: family plus uniform size ranges."""

    families: tuple = ("box",)
    size_range: tuple = (0.5, 1.5)
    count: int = 512
    with_normals: bool = False
    random_orientation: bool = True

    def draw(self, rng):
        family = self.families[int(rng.integers(len(self.families)))]
        lo, hi = self.size_range
        if family == "sphere":
            size = (rng.uniform(lo, hi) / 2,)
        elif family == "box":
            size = tuple(rng.uniform(lo, hi, size=3))
        elif family == "cylinder":
            size = (rng.uniform(lo, hi) / 2, rng.uniform(lo, hi))
        elif family == "torus":
            big = rng.uniform(lo, hi) / 2
            size = (big, big * rng.uniform(0.2, 0.5))
        else:
            size = tuple(rng.uniform(lo, hi, size=2))
        return ShapeSpec(family, size, self.count, self.with_normals)


class SyntheticPairDataset:
    """Indexable dataset of perturbed shape pairs, generated on access.

    Item ``i`` depends only on ``(seed, i)``.
    """

    def __init__(self, n_pairs, shapes=None, perturb=None, seed=0):
        self.n_pairs = int(n_pairs)
        self.shapes = shapes or ShapeDistribution()
        self.perturb = perturb or PerturbationSpec.modelnet()
        self.seed = int(seed)

    def __len__(self):
        return self.n_pairs

    def __getitem__(self, i):
        if not 0 <= i < self.n_pairs:
            raise IndexError(i)
        rng = np.random.default_rng([self.seed, int(i)])
        spec = self.shapes.draw(rng)
        cloud = sample_shape(spec, int(rng.integers(0, 2 ** 63 - 1)))
        if self.shapes.random_orientation:
            orient = RigidTransform(random_rotation(rng), np.zeros(3))
            cloud = _move(cloud, orient, spec.with_normals)
        return make_pair(cloud, self.perturb, int(rng.integers(0, 2 ** 63 - 1)))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


# --- point cloud IO -----------------------------------------------------------------

_PLY_LAYOUTS = {0: [], 1: ["intensity"], 3: ["nx", "ny", "nz"], 4: ["nx", "ny", "nz", "intensity"]}


def write_ply(path, cloud):
    """ASCII PLY with ``x y z`` and, per feature width, normals and/or intensity."""
    if cloud.c not in _PLY_LAYOUTS:
        raise InvalidArgumentError(f"PLY export supports feature widths 0, 1, 3, 4; got {cloud.c}")
    props = ["x", "y", "z"] + _PLY_LAYOUTS[cloud.c]
    lines = ["ply", "format ascii 1.0", f"element vertex {cloud.n}"]
    lines += [f"property double {p}" for p in props]
    lines.append("end_header")
    data = np.concatenate([cloud.points, cloud.features], axis=1)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for row in data:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_ply(path):
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0].strip() != "ply":
        raise ParseError(path, 1, "missing 'ply' magic")
    count, props, lineno = None, [], 1
    while True:
        if lineno >= len(lines):
            raise ParseError(path, lineno, "header has no end_header")
        tokens = lines[lineno].split()
        lineno += 1
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1:2] != ["ascii"]:
                raise ParseError(path, lineno, f"unsupported PLY format {' '.join(tokens[1:])}")
        elif tokens[0] == "element":
            if tokens[1] != "vertex" or count is not None:
                raise ParseError(path, lineno, "only a single vertex element is supported")
            try:
                count = int(tokens[2])
            except (IndexError, ValueError):
                raise ParseError(path, lineno, "bad vertex count") from None
        elif tokens[0] == "property":
            if len(tokens) != 3:
                raise ParseError(path, lineno, "bad property line")
            props.append(tokens[2])
        elif tokens[0] == "end_header":
            break
        else:
            raise ParseError(path, lineno, f"unexpected header keyword {tokens[0]!r}")
    if count is None or props[:3] != ["x", "y", "z"]:
        raise ParseError(path, lineno, "header must declare a vertex element starting with x y z")
    extra = props[3:]
    if extra not in _PLY_LAYOUTS.values():
        raise ParseError(path, lineno, f"unsupported vertex properties {extra}")
    body = lines[lineno:lineno + count]
    if len(body) < count:
        raise ParseError(path, lineno + len(body) + 1, f"expected {count} vertices, found {len(body)}")
    data = np.empty((count, len(props)))
    for k, line in enumerate(body):
        vals = line.split()
        if len(vals) != len(props):
            raise ParseError(path, lineno + k + 1, f"expected {len(props)} values, got {len(vals)}")
        try:
            data[k] = [float(v) for v in vals]
        except ValueError:
            raise ParseError(path, lineno + k + 1, "non-numeric value") from None
    trailing = [ln for ln in lines[lineno + count:] if ln.strip()]
    if trailing:
        raise ParseError(path, lineno + count + 1, "extra rows after the declared vertex count")
    return PointCloud(data[:, :3], data[:, 3:])


def write_kitti_bin(path, cloud):
    """KITTI scan layout; a missing intensity channel is written as zeros."""
    if cloud.c not in (0, 1):
        raise InvalidArgumentError(f"KITTI binaries hold one intensity channel, cloud has {cloud.c}")
    intensity = cloud.features if cloud.c == 1 else np.zeros((cloud.n, 1))
    np.concatenate([cloud.points, intensity], axis=1).astype("<f4").tofile(path)


def read_kitti_bin(path, with_intensity=True):
    raw = np.fromfile(path, dtype="<f4")
    size = os.path.getsize(path)
    if size % 16:
        raise ParseError(path, 1, f"file size {size} is not a multiple of 16 bytes")
    data = raw.reshape(-1, 4).astype(np.float64)
    return PointCloud(data[:, :3], data[:, 3:] if with_intensity else None)


def read_cloud(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix == ".bin":
        return read_kitti_bin(path)
    raise InvalidArgumentError(f"unknown point cloud format {suffix!r}")


def write_cloud(path, cloud):
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return write_ply(path, cloud)
    if suffix == ".bin":
        return write_kitti_bin(path, cloud)
    raise InvalidArgumentError(f"unknown point cloud format {suffix!r}")


# --- poses --------------------------------------------------------------------------

def format_pose(transform):
    m = np.concatenate([transform.rotation, transform.translation[:, None]], axis=1)
    return " ".join(_fmt(v) for v in m.reshape(-1))


def _fmt(v):
    v = float(v)
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def write_poses(path, poses):
    with open(path, "w") as fh:
        for p in poses:
            fh.write(format_pose(p) + "\n")


def read_poses(path):
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            vals = line.split()
            if len(vals) != 12:
                raise ParseError(path, lineno, f"expected 12 numbers, got {len(vals)}")
            try:
                m = np.array([float(v) for v in vals]).reshape(3, 4)
            except ValueError:
                raise ParseError(path, lineno, "non-numeric value") from None
            poses.append(RigidTransform(m[:, :3], m[:, 3]))
    return poses


# --- dataset directories -------------------------------------------------------------

def write_dataset(directory, pairs, metadata=None, cloud_suffix=".ply"):
    """Write pairs as cloud files plus ``labels.txt`` and ``manifest.json``."""
    directory = Path(directory)
    (directory / "pairs").mkdir(parents=True, exist_ok=True)
    entries, labels = [], []
    for k, (template, source, gt) in enumerate(pairs):
        t_name = f"pairs/{k:05d}_template{cloud_suffix}"
        s_name = f"pairs/{k:05d}_source{cloud_suffix}"
        write_cloud(directory / t_name, template)
        write_cloud(directory / s_name, source)
        entries.append({"template": t_name, "source": s_name})
        labels.append(gt)
    write_poses(directory / "labels.txt", labels)
    manifest = {"version": DATASET_VERSION, "pairs": entries, "labels": "labels.txt",
                "metadata": metadata or {}}
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory / "manifest.json"


class PairDataset:
    """Pairs listed in a dataset directory manifest, read on access."""

    def __init__(self, directory):
        self.directory = Path(directory)
        path = self.directory / "manifest.json"
        try:
            with open(path) as fh:
                self.manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(path, exc.lineno, exc.msg) from None
        if self.manifest.get("version") != DATASET_VERSION:
            raise ParseError(path, 1, f"unsupported dataset version {self.manifest.get('version')}")
        self.entries = self.manifest["pairs"]
        self.labels = read_poses(self.directory / self.manifest["labels"])
        if len(self.labels) != len(self.entries):
            raise ParseError(self.directory / self.manifest["labels"], len(self.labels) + 1,
                             f"{len(self.labels)} labels for {len(self.entries)} pairs")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        e = self.entries[i]
        return (read_cloud(self.directory / e["template"]), read_cloud(self.directory / e["source"]),
                self.labels[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def sequence_from_trajectory(cloud_world, poses, noise_std, seed):
    """Scans of a static world seen from ``poses`` (sensor-to-world), one per pose."""
    rng = np.random.default_rng(seed)
    return [_noisy(apply(inverse(p), cloud_world), noise_std, rng) for p in poses]

