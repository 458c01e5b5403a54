"""Dataset-level registration metrics and report export.

CSV layouts (column order is stable):

* pair report: ``pair, status, t_err, r_err, time_s, dtx, dty, dtz, dyaw,
  dpitch, droll`` where the ``d*`` columns are the translation residual and
  the wrapped Z-Y-X Euler residual (degrees) used for the RMSE aggregates.
* noise sweep: ``noise_std, method, n_pairs, n_failed, mean_r_err, std_r_err,
  max_r_err, mean_t_err, std_t_err, max_t_err, r_rmse, t_rmse, mean_time_s``.
"""
import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import FlowRegError, InvalidArgumentError
from .geometry import (RigidTransform, compose, inverse, rotation_error_chordal,
                       rotation_to_euler_zyx, translation_error, wrap_degrees)

SEGMENT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)

REPORT_COLUMNS = ["pair", "status", "t_err", "r_err", "time_s",
                  "dtx", "dty", "dtz", "dyaw", "dpitch", "droll"]
SWEEP_COLUMNS = ["noise_std", "method", "n_pairs", "n_failed", "mean_r_err", "std_r_err",
                 "max_r_err", "mean_t_err", "std_t_err", "max_t_err", "r_rmse", "t_rmse",
                 "mean_time_s"]


# --- trajectories -----------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """Poses ``P_0 .. P_k`` with ``P_0`` the identity."""

    poses: tuple

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def __iter__(self):
        return iter(self.poses)

    def relative(self):
        """Increments ``T_t`` with ``P_{t+1} = P_t T_t``."""
        return [compose(inverse(a), b) for a, b in zip(self.poses, self.poses[1:])]

    def arc_length(self):
        t = np.array([p.translation for p in self.poses])
        steps = np.linalg.norm(np.diff(t, axis=0), axis=1) if len(t) > 1 else np.zeros(0)
        return np.concatenate([[0.0], np.cumsum(steps)])


def accumulate_odometry(relative):
    """Left fold ``P_{t+1} = P_t @ T_t`` starting at the identity."""
    poses = [RigidTransform.identity()]
    for t in relative:
        poses.append(compose(poses[-1], t))
    return Trajectory(poses)


def _poses(traj):
    return traj.poses if isinstance(traj, Trajectory) else tuple(traj)


@dataclass(frozen=True)
class SegmentErrors:
    translation_pct: float
    rotation_deg_per_100m: float
    n_segments: int

    @property
    def empty(self):
        return self.n_segments == 0


def _segment_end(dist, first, length):
    """First index after ``first`` whose arc length from it is >= ``length``."""
    target = dist[first] + length
    j = int(np.searchsorted(dist, target, side="left"))
    j = max(j, first + 1)
    while j - 1 > first and dist[j - 1] - dist[first] >= length:
        j -= 1
    while j < len(dist) and dist[j] - dist[first] < length:
        j += 1
    return j if j < len(dist) else None


def kitti_segment_errors(gt, pred, lengths=SEGMENT_LENGTHS):
    """Mean relative translation error (%) and rotation error (deg per 100 m).

    Every frame starts one segment per length; the segment ends at the first
    frame whose ground-truth arc length reaches the length. The rotation part
    uses the chordal angle of the relative-pose error.
    """
    gt, pred = _poses(gt), _poses(pred)
    if len(gt) != len(pred):
        raise InvalidArgumentError(f"trajectories differ in length: {len(gt)} vs {len(pred)}")
    dist = Trajectory(gt).arc_length()
    gt_m = np.array([p.as_matrix() for p in gt])
    pr_m = np.array([p.as_matrix() for p in pred])
    t_errs, r_errs = [], []
    identity = RigidTransform.identity()
    for first in range(len(gt)):
        for length in lengths:
            last = _segment_end(dist, first, length)
            if last is None:
                continue
            d_gt = np.linalg.solve(gt_m[first], gt_m[last])
            d_pr = np.linalg.solve(pr_m[first], pr_m[last])
            err = RigidTransform.from_matrix(np.linalg.solve(d_pr, d_gt))
            t_errs.append(np.linalg.norm(err.translation) / length)
            r_errs.append(rotation_error_chordal(err, identity) / length)
    if not t_errs:
        return SegmentErrors(0.0, 0.0, 0)
    return SegmentErrors(100.0 * float(np.mean(t_errs)), 100.0 * float(np.mean(r_errs)), len(t_errs))


# --- pair evaluation ----------------------------------------------------------------

@dataclass
class PairRow:
    pair: int
    status: str
    t_err: float = math.nan
    r_err: float = math.nan
    time_s: float = math.nan
    residual: tuple = (math.nan,) * 6

    def as_csv(self):
        return [self.pair, self.status, repr(self.t_err), repr(self.r_err), repr(self.time_s),
                *(repr(float(v)) for v in self.residual)]


@dataclass
class EvaluationReport:
    method: str
    rows: list = field(default_factory=list)
    wall_time_s: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def ok_rows(self):
        return [r for r in self.rows if r.status == "ok"]

    def _col(self, name):
        return np.array([getattr(r, name) for r in self.ok_rows], dtype=np.float64)

    def aggregates(self):
        ok = self.ok_rows
        out = {"n_pairs": len(self.rows), "n_failed": len(self.rows) - len(ok)}
        if not ok:
            return out
        for name in ("r_err", "t_err", "time_s"):
            v = self._col(name)
            out[f"mean_{name}"] = float(v.mean())
            out[f"std_{name}"] = float(v.std())
            out[f"max_{name}"] = float(v.max())
        res = np.array([r.residual for r in ok])
        out["t_rmse"] = float(np.sqrt(np.mean(res[:, :3] ** 2)))
        out["r_rmse"] = float(np.sqrt(np.mean(res[:, 3:] ** 2)))
        return out

    def summary(self):
        return {"method": self.method, "metadata": self.metadata, "aggregates": self.aggregates()}


def _as_transform(result):
    if isinstance(result, RigidTransform):
        return result
    if hasattr(result, "transform"):
        return result.transform
    if isinstance(result, tuple) and len(result) == 2 and isinstance(result[1], RigidTransform):
        return result[1]
    raise InvalidArgumentError(f"method returned {type(result).__name__}, expected a transform")


def evaluate_pairs(method, dataset, name="method", metadata=None, timing=True):
    """Run ``method(template, source)`` on every pair and record errors and timing.

    A pair whose method call raises is kept as a failed row. With
    ``timing=False`` the time columns hold NaN so reports are reproducible
    byte for byte.
    """
    report = EvaluationReport(name, metadata=dict(metadata or {}))
    start = time.perf_counter()
    for k in range(len(dataset)):
        template, source, gt = dataset[k]
        t0 = time.perf_counter()
        try:
            pred = _as_transform(method(template, source))
        except (FlowRegError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            elapsed = time.perf_counter() - t0 if timing else math.nan
            report.rows.append(PairRow(k, f"failed:{getattr(exc, 'category', type(exc).__name__)}",
                                       time_s=elapsed))
            continue
        elapsed = time.perf_counter() - t0 if timing else math.nan
        de = wrap_degrees(rotation_to_euler_zyx(pred.rotation) - rotation_to_euler_zyx(gt.rotation))
        dt = pred.translation - gt.translation
        report.rows.append(PairRow(k, "ok", translation_error(pred, gt),
                                   rotation_error_chordal(pred, gt), elapsed,
                                   tuple(float(v) for v in np.concatenate([dt, de]))))
    report.wall_time_s = time.perf_counter() - start if timing else math.nan
    return report


# --- export -------------------------------------------------------------------------

def export_report(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for row in report.rows:
            w.writerow(row.as_csv())


def read_report(path, method="imported"):
    report = EvaluationReport(method)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != REPORT_COLUMNS:
        raise InvalidArgumentError(f"{path}: not a pair report (unexpected header)")
    for r in rows[1:]:
        vals = [float(v) for v in r[2:]]
        report.rows.append(PairRow(int(r[0]), r[1], vals[0], vals[1], vals[2], tuple(vals[3:])))
    return report


def write_summary(path, report, extra=None):
    payload = report.summary()
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def noise_sweep(methods, make_dataset, noise_levels, timing=True):
    """Evaluate every method on ``make_dataset(noise_std)`` for each noise level."""
    results = []
    for noise in noise_levels:
        dataset = make_dataset(noise)
        for name, method in methods.items():
            results.append((float(noise), evaluate_pairs(method, dataset, name, timing=timing)))
    return results


def export_noise_sweep(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for noise, report in results:
            agg = report.aggregates()
            w.writerow([repr(float(noise)), report.method, agg["n_pairs"], agg["n_failed"]]
                       + [repr(agg.get(c, math.nan)) for c in SWEEP_COLUMNS[4:]])
