"""Rigid-body transforms, quaternions, dual-quaternions and pose error metrics.

Conventions used throughout the package:

* Quaternions are stored ``(w, x, y, z)`` and multiplied with the Hamilton
  product.
* A pose dual-quaternion is ``p + eps q`` with ``q = 0.5 * (0, t) * p``.
  Ground-truth real parts are canonicalized to ``w >= 0``.
* A :class:`RigidTransform` ``T`` maps source-frame coordinates into the
  template frame: ``apply(T, source)`` lines up with ``template``. Chaining
  odometry increments is ``P[t+1] = P[t] @ T[t]``.
* Euler angles are intrinsic Z-Y-X (yaw, pitch, roll), in degrees.

Tolerances (double precision):

* ``ROTATION_TOL`` (1e-9): orthonormality / determinant check for rotations,
  unit-norm check for rotation quaternions, ``p . q = 0`` for pose
  dual-quaternions.
* ``DEGENERATE_NORM`` (1e-12): below this a quaternion norm is treated as zero.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, EmptyDatasetError, InvalidArgumentError

ROTATION_TOL = 1e-9
DEGENERATE_NORM = 1e-12


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """``n`` XYZ points plus ``c`` feature channels per point."""

    points: np.ndarray
    features: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            if pts.size == 0:
                pts = pts.reshape(0, 3)
            else:
                raise InvalidArgumentError(f"points must have shape (n, 3), got {pts.shape}")
        if self.features is None:
            feats = np.zeros((pts.shape[0], 0))
        else:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim == 1:
                feats = feats.reshape(-1, 1)
            if feats.shape[0] != pts.shape[0]:
                raise InvalidArgumentError(
                    f"features have {feats.shape[0]} rows for {pts.shape[0]} points")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "features", _frozen(feats))

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def c(self):
        return self.features.shape[1]

    def __len__(self):
        return self.n

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return PointCloud(self.points[indices], self.features[indices])

    def with_points(self, points):
        return PointCloud(points, self.features)


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def as_array(self):
        return np.array([self.w, self.x, self.y, self.z])

    def norm(self):
        return float(np.linalg.norm(self.as_array()))

    def normalized(self):
        n = self.norm()
        if n <= DEGENERATE_NORM:
            raise DegenerateInputError(f"quaternion norm {n:.3e} is too small to normalize")
        return Quaternion.from_array(self.as_array() / n)

    def canonical(self):
        """Same rotation with ``w >= 0``."""
        return Quaternion.from_array(-self.as_array()) if self.w < 0 else self


@dataclass(frozen=True, eq=False)
class DualQuaternion:
    real: Quaternion
    dual: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        if not isinstance(self.real, Quaternion):
            object.__setattr__(self, "real", Quaternion.from_array(self.real))
        d = np.asarray(self.dual, dtype=np.float64).reshape(4)
        object.__setattr__(self, "dual", _frozen(d))

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64).reshape(8)
        return cls(Quaternion.from_array(a[:4]), a[4:])

    def as_array(self):
        return np.concatenate([self.real.as_array(), self.dual])

    def is_valid_pose(self, tol=ROTATION_TOL):
        p = self.real.as_array()
        return abs(np.linalg.norm(p) - 1.0) <= tol and abs(float(p @ self.dual)) <= tol


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise InvalidArgumentError(f"rotation must be 3x3, got {r.shape}")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_valid(self, tol=ROTATION_TOL):
        r = self.rotation
        return (np.all(np.isfinite(r)) and np.all(np.isfinite(self.translation))
                and np.max(np.abs(r.T @ r - np.eye(3))) <= tol
                and abs(np.linalg.det(r) - 1.0) <= tol)

    def __matmul__(self, other):
        return compose(self, other)


# --- quaternion algebra -----------------------------------------------------

def quat_multiply(a, b):
    """Hamilton product of two ``(w, x, y, z)`` arrays."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(a):
    return np.array([a[0], -a[1], -a[2], -a[3]])


def quat_to_rotation(q):
    """Rotation matrix of the normalized quaternion ``q``."""
    a = q.as_array() if isinstance(q, Quaternion) else np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(a)
    if not n > DEGENERATE_NORM:
        raise DegenerateInputError(f"quaternion norm {n:.3e} is too small to convert")
    w, x, y, z = a / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quat(r):
    """Unit quaternion with ``w >= 0`` for a rotation matrix (Shepperd's method)."""
    r = np.asarray(r, dtype=np.float64)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    diag = (tr, r[0, 0], r[1, 1], r[2, 2])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return Quaternion.from_array(q).canonical()


def axis_angle_to_rotation(axis, angle_rad):
    """Rodrigues' formula; ``axis`` need not be normalized."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1 - np.cos(angle_rad)) * (k @ k)


def rotation_angle(r):
    """Geodesic rotation angle of ``r`` in radians, from the trace."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# --- dual-quaternions ---------------------------------------------------------

def dualquat_from_transform(T):
    p = rotation_to_quat(T.rotation)
    pa = p.as_array()
    q = 0.5 * quat_multiply(np.concatenate([[0.0], T.translation]), pa)
    return DualQuaternion(p, q)


def dualquat_to_transform(d):
    """Pose of ``d``; the real part is normalized, the dual part is used as-is."""
    p = d.real.as_array()
    n = np.linalg.norm(p)
    if not n > DEGENERATE_NORM:
        raise DegenerateInputError(f"real part norm {n:.3e} is too small to convert")
    p = p / n
    t = 2.0 * quat_multiply(np.asarray(d.dual), quat_conjugate(p))[1:]
    return RigidTransform(quat_to_rotation(p), t)


# --- transform algebra --------------------------------------------------------

def compose(a, b):
    """``a @ b``: apply ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a):
    rt = a.rotation.T
    return RigidTransform(rt, -rt @ a.translation)


def apply(a, cloud):
    """Transform coordinates; feature channels pass through unchanged."""
    if isinstance(cloud, PointCloud):
        return PointCloud(cloud.points @ a.rotation.T + a.translation, cloud.features)
    pts = np.asarray(cloud, dtype=np.float64)
    return pts @ a.rotation.T + a.translation


# --- error metrics ------------------------------------------------------------

def translation_error(pred, gt):
    """Euclidean distance between the two translations."""
    return float(np.linalg.norm(pred.translation - gt.translation))


def rotation_error_chordal(pred, gt):
    """Chordal rotation error in degrees, ``2 asin(||R1 - R2||_F / sqrt 8)``."""
    s = np.linalg.norm(pred.rotation - gt.rotation, "fro") / np.sqrt(8.0)
    return float(np.degrees(2.0 * np.arcsin(np.clip(s, 0.0, 1.0))))


def rotation_to_euler_zyx(r):
    """Intrinsic Z-Y-X angles ``(yaw, pitch, roll)`` in degrees."""
    r = np.asarray(r)
    pitch = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
    yaw = np.arctan2(r[1, 0], r[0, 0])
    roll = np.arctan2(r[2, 1], r[2, 2])
    return np.degrees([yaw, pitch, roll])


def euler_zyx_to_rotation(yaw, pitch, roll):
    """Inverse of :func:`rotation_to_euler_zyx`; angles in degrees."""
    y, p, r = np.radians([yaw, pitch, roll])
    rz = np.array([[np.cos(y), -np.sin(y), 0], [np.sin(y), np.cos(y), 0], [0, 0, 1]])
    ry = np.array([[np.cos(p), 0, np.sin(p)], [0, 1, 0], [-np.sin(p), 0, np.cos(p)]])
    rx = np.array([[1, 0, 0], [0, np.cos(r), -np.sin(r)], [0, np.sin(r), np.cos(r)]])
    return rz @ ry @ rx


def wrap_degrees(a):
    """Wrap angles into (-180, 180]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + 180.0, 360.0) - 180.0
    return np.where(w == -180.0, 180.0, w)


def euler_rmse(preds, gts):
    """RMSE of translation components (units) and Z-Y-X Euler residuals (degrees)."""
    preds, gts = list(preds), list(gts)
    if not preds or len(preds) != len(gts):
        raise EmptyDatasetError(
            f"need equal-length nonempty pose lists, got {len(preds)} and {len(gts)}")
    dt = np.array([p.translation - g.translation for p, g in zip(preds, gts)])
    de = np.array([wrap_degrees(rotation_to_euler_zyx(p.rotation) - rotation_to_euler_zyx(g.rotation))
                   for p, g in zip(preds, gts)])
    return float(np.sqrt(np.mean(dt ** 2))), float(np.sqrt(np.mean(de ** 2)))


def random_rotation(rng, max_angle_deg=180.0, min_angle_deg=0.0):
    """Rotation about a uniformly random axis by an angle uniform in the range."""
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-8:
        axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(min_angle_deg, max_angle_deg))
    return axis_angle_to_rotation(axis, angle)


def random_transform(rng, max_angle_deg=180.0, max_translation=1.0):
    """Random pose for tests and round-trip harnesses."""
    if max_translation < 0:
        raise InvalidArgumentError("max_translation must be nonnegative")
    r = random_rotation(rng, max_angle_deg)
    return RigidTransform(r, rng.uniform(-max_translation, max_translation, size=3))
