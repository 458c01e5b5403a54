"""Closed-form rigid alignment and iterative closest point baselines."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, NoOverlapError
from .geometry import PointCloud, RigidTransform, apply, axis_angle_to_rotation, compose
from .spatial import NeighborIndex

PIVOT_TOL = 1e-10


def rigid_align_closed_form(source, target, weights=None):
    """Least-squares ``(R, t)`` with ``R @ source[i] + t ~ target[i]`` (Kabsch).

    The sign of the smallest singular direction is flipped when needed so the
    result is a proper rotation.
    """
    src = np.asarray(getattr(source, "points", source), dtype=np.float64)
    dst = np.asarray(getattr(target, "points", target), dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise DegenerateInputError(f"need matching (n, 3) point arrays, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise DegenerateInputError(f"need at least 3 correspondences, got {src.shape[0]}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    h = (src - mu_s).T @ ((dst - mu_d) * w[:, None])
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateInputError("correspondences are collinear or coincident")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ u.T
    return RigidTransform(r, mu_d - r @ mu_s)


@dataclass(frozen=True)
class IcpConfig:
    max_correspondence_distance: float = 0.2
    max_iterations: int = 50
    convergence_threshold: float = 1e-10
    variant: str = "point2point"

    def __post_init__(self):
        if not (self.max_correspondence_distance > 0 and self.convergence_threshold > 0):
            raise ConfigurationError("correspondence distance and threshold must be positive")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if self.variant not in ("point2point", "point2plane"):
            raise ConfigurationError(f"unknown ICP variant {self.variant!r}")


@dataclass
class IcpResult:
    transform: RigidTransform
    iterations: int
    residual: float
    converged: bool
    residual_trace: list = field(default_factory=list)


def _associate(template_pts, moved_source, gate, iteration):
    index = NeighborIndex(moved_source, gate)
    nb = index.query_many(template_pts, gate, cap=1)
    has = nb.counts() > 0
    if not has.any():
        raise NoOverlapError(iteration)
    return np.flatnonzero(has), nb.indices, nb.dist2


def transform_change(a, b):
    """Translation difference plus relative rotation angle (radians).

    The angle uses the chordal form; arccos of the trace bottoms out near 1e-8.
    """
    chord = np.linalg.norm(a.rotation - b.rotation) / np.sqrt(8.0)
    angle = 2.0 * np.arcsin(min(1.0, chord))
    return float(np.linalg.norm(a.translation - b.translation) + angle)


def _point_to_plane_step(p, q, n):
    """Small-angle update ``(R, t)`` reducing sum(((R p + t - q) . n)^2)."""
    jac = np.concatenate([np.cross(p, n), n], axis=1)
    r = np.einsum("ij,ij->i", p - q, n)
    a = jac.T @ jac
    b = -jac.T @ r
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise DegenerateInputError("point-to-plane normal equations are singular") from None
    if np.min(np.diag(chol)) ** 2 < PIVOT_TOL:
        raise DegenerateInputError("point-to-plane normal equations are ill-conditioned")
    x = np.linalg.solve(a, b)
    angle = np.linalg.norm(x[:3])
    rot = np.eye(3) if angle == 0 else axis_angle_to_rotation(x[:3], angle)
    return RigidTransform(rot, x[3:])


def icp(template, source, config=None, init=None):
    """Estimate ``T`` with ``apply(T, source) ~ template``.

    Each iteration pairs every template point with its nearest transformed
    source point inside the gate, then re-solves the pose. The residual trace
    holds the RMS pair distance seen at each association step.
    """
    config = config or IcpConfig()
    if not isinstance(template, PointCloud):
        template = PointCloud(template)
    if not isinstance(source, PointCloud):
        source = PointCloud(source)
    if template.n == 0 or source.n == 0:
        raise NoOverlapError(0, "empty point cloud")
    if config.variant == "point2plane" and template.c != 3:
        raise ConfigurationError("point-to-plane ICP needs template normals (3 feature channels)")
    tpl = template.points
    src = source.points
    current = init or RigidTransform.identity()
    trace = []
    converged = False
    it = 0
    for it in range(1, config.max_iterations + 1):
        moved = apply(current, src)
        ti, sj, d2 = _associate(tpl, moved, config.max_correspondence_distance, it)
        trace.append(float(np.sqrt(np.mean(d2))))
        if config.variant == "point2point":
            updated = rigid_align_closed_form(src[sj], tpl[ti])
        else:
            step = _point_to_plane_step(moved[sj], tpl[ti], template.features[ti])
            updated = compose(step, current)
        change = transform_change(updated, current)
        current = updated
        if change < config.convergence_threshold:
            converged = True
            break
    try:
        _, _, d2 = _associate(tpl, apply(current, src), config.max_correspondence_distance, it)
        residual = float(np.sqrt(np.mean(d2)))
    except NoOverlapError:
        residual = float("inf")
    return IcpResult(current, it, residual, converged, trace)
