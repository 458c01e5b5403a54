"""Command-line front end: ``flowreg <command> [flags]``.

Commands: gen-data, train, register, odometry, evaluate, gradcheck, bench.

Every failure prints one line ``error: <category>: <detail>`` to stderr and
exits 2 (usage), 3 (data) or 4 (numerical). ``FLOWREG_NUM_THREADS`` caps
the BLAS/OpenMP/numba thread pools; it must be read before numpy loads, so
it is applied at import time.
"""
import os

_threads = os.environ.get("FLOWREG_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import asdict, dataclass, field, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from . import data, evaluation, gradcheck, icp, network, training  # noqa: E402
from ._accel import backend_name  # noqa: E402
from .errors import ConfigurationError, EmptyDatasetError, FlowRegError  # noqa: E402
from .geometry import RigidTransform  # noqa: E402

USAGE, DATA, NUMERICAL = 2, 3, 4


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    """Written next to every output so a run can be repeated."""

    command: str
    config: dict
    seed: int = None
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    version: str = __version__

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        return path


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (tuple, set, np.ndarray)):
        return list(v)
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# --- shared option groups ------------------------------------------------------------

def _add_shape_flags(p):
    p.add_argument("--families", default="box",
                   help="comma-separated shape families (sphere, box, cylinder, torus, plane)")
    p.add_argument("--size-range-units", nargs=2, type=float, default=(0.5, 1.5), metavar=("LO", "HI"))
    p.add_argument("--points", type=int, default=512, help="points per shape")
    p.add_argument("--normals", action="store_true", help="store unit normals as features")
    p.add_argument("--aligned", action="store_true",
                   help="keep shapes axis-aligned instead of randomly oriented")


def _add_perturb_flags(p):
    p.add_argument("--translation-range-units", nargs=2, type=float, default=(0.0, 0.1),
                   metavar=("LO", "HI"))
    p.add_argument("--rotation-range-deg", nargs=2, type=float, default=(0.0, 5.0),
                   metavar=("LO", "HI"))
    p.add_argument("--noise-std-units", type=float, default=0.02)


def _add_icp_flags(p):
    p.add_argument("--icp-max-dist-units", type=float, default=0.2,
                   help="correspondence gate")
    p.add_argument("--icp-max-iterations", type=int, default=50)
    p.add_argument("--icp-threshold", type=float, default=1e-10,
                   help="stop when translation change + rotation change (rad) falls below")
    p.add_argument("--icp-variant", choices=("point2point", "point2plane"), default="point2point")


def _shape_distribution(args):
    return data.ShapeDistribution(families=tuple(f.strip() for f in args.families.split(",")),
                                  size_range=tuple(args.size_range_units), count=args.points,
                                  with_normals=args.normals, random_orientation=not args.aligned)


def _perturbation(args, noise=None):
    return data.PerturbationSpec(translation_range=tuple(args.translation_range_units),
                                 rotation_range_deg=tuple(args.rotation_range_deg),
                                 noise_std=args.noise_std_units if noise is None else noise)


def _icp_config(args):
    return icp.IcpConfig(args.icp_max_dist_units, args.icp_max_iterations, args.icp_threshold,
                         args.icp_variant)


def synthetic_from_dict(spec):
    """``SyntheticPairDataset`` from a manifest ``{"synthetic": {...}}`` entry."""
    s = dict(spec.get("synthetic", spec))
    shapes = data.ShapeDistribution(families=tuple(s.get("families", ("box",))),
                                    size_range=tuple(s.get("size_range", (0.5, 1.5))),
                                    count=int(s.get("points", 512)),
                                    with_normals=bool(s.get("normals", False)),
                                    random_orientation=not s.get("aligned", False))
    perturb = data.PerturbationSpec(translation_range=tuple(s.get("translation_range", (0.0, 0.1))),
                                    rotation_range_deg=tuple(s.get("rotation_range_deg", (0.0, 5.0))),
                                    noise_std=float(s.get("noise_std", 0.02)))
    return data.SyntheticPairDataset(int(s["n_pairs"]), shapes, perturb, int(s.get("seed", 0)))


class _Concat:
    def __init__(self, parts):
        self.parts = list(parts)
        self.bounds = np.cumsum([0] + [len(p) for p in self.parts])

    def __len__(self):
        return int(self.bounds[-1])

    def __getitem__(self, i):
        k = int(np.searchsorted(self.bounds, i, side="right")) - 1
        return self.parts[k][i - int(self.bounds[k])]


def _load_checkpoint(path):
    params, extra = network.load_checkpoint(path)
    return params, extra


def _network_method(params):
    def method(template, source):
        return network.model_forward(template, source, params.config, params)[1]
    return method


def _icp_method(config):
    def method(template, source):
        return icp.icp(template, source, config).transform
    return method


def _methods(args):
    methods = {}
    for name in (m.strip() for m in args.methods.split(",")):
        if name == "network":
            if not args.checkpoint:
                raise UsageError("method 'network' needs --checkpoint")
            methods[name] = _network_method(_load_checkpoint(args.checkpoint)[0])
        elif name == "icp":
            methods[name] = _icp_method(_icp_config(args))
        elif name == "identity":
            methods[name] = lambda template, source: RigidTransform.identity()
        else:
            raise UsageError(f"unknown method {name!r} (network, icp, identity)")
    return methods


# --- commands ------------------------------------------------------------------------

def cmd_gen_data(args):
    shapes = _shape_distribution(args)
    perturb = _perturbation(args)
    ds = data.SyntheticPairDataset(args.n_pairs, shapes, perturb, args.seed)
    pairs = [ds[i] for i in range(len(ds))]
    if args.augment_duplicates:
        pairs = data.duplicate_template_augment(pairs, perturb, args.seed + 1)
    suffix = ".bin" if args.format == "bin" else ".ply"
    config = {"shapes": asdict(shapes), "perturbation": asdict(perturb),
              "n_pairs": args.n_pairs, "augment_duplicates": args.augment_duplicates,
              "format": args.format}
    manifest = data.write_dataset(args.out, pairs, config, cloud_suffix=suffix)
    RunManifest("gen-data", config, args.seed, [], [str(manifest)]).write(
        Path(args.out) / "run_manifest.json")
    _log(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def _training_dataset(manifest):
    parts = []
    for entry in manifest.datasets:
        parts.append(synthetic_from_dict(entry) if isinstance(entry, dict)
                     else data.PairDataset(entry))
    if not parts:
        raise EmptyDatasetError("training manifest lists no datasets")
    dataset = parts[0] if len(parts) == 1 else _Concat(parts)
    if manifest.augment_duplicates:
        perturb = data.PerturbationSpec.modelnet()
        dataset = data.duplicate_template_augment([dataset[i] for i in range(len(dataset))],
                                                  perturb, manifest.schedule.seed + 1)
    return dataset


def cmd_train(args):
    manifest = training.TrainingManifest.load(args.manifest)
    schedule = manifest.schedule
    dataset = _training_dataset(manifest)
    steps = args.steps if args.steps is not None else schedule.steps
    if not steps and manifest.epochs:
        steps = manifest.epochs * int(np.ceil(len(dataset) / schedule.batch_size))
    if steps <= 0:
        raise ConfigurationError("manifest gives neither steps nor epochs")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schedule = replace(schedule, steps=steps,
                       checkpoint_every=args.checkpoint_every,
                       checkpoint_dir=str(out) if args.checkpoint_every else None)

    def log(step, values):
        if args.log_every and step % args.log_every == 0:
            _log(f"step {step} L_real={values[0]:.6g} L_dual={values[1]:.6g} L={values[2]:.6g}")

    try:
        result = training.train(dataset, manifest.model, manifest.loss, schedule, log=log)
    except training.TrainingAborted as exc:
        network.save_checkpoint(out / "last_good.ckpt", exc.last_good, {"aborted": True})
        raise
    ckpt = out / "model.ckpt"
    network.save_checkpoint(ckpt, result.params, {"steps": steps})
    hist = out / "loss_history.csv"
    training.write_loss_history(hist, result.history)
    snapshot = manifest.snapshot()
    snapshot["schedule"]["steps"] = steps
    RunManifest("train", snapshot, schedule.seed, [str(args.manifest)],
                [str(ckpt), str(hist)] + result.checkpoints).write(out / "run_manifest.json")
    _log(f"trained {steps} steps; final L={result.history[-1][3]:.6g}")
    return 0


def _write_or_print(path, text):
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_register(args):
    template = data.read_cloud(args.template)
    source = data.read_cloud(args.source)
    if args.method == "network":
        if not args.checkpoint:
            raise UsageError("--method network needs --checkpoint")
        method = _network_method(_load_checkpoint(args.checkpoint)[0])
        config = {"method": "network", "checkpoint": args.checkpoint}
    elif args.method == "icp":
        method = _icp_method(_icp_config(args))
        config = {"method": "icp", "icp": asdict(_icp_config(args))}
    else:
        method = lambda t, s: RigidTransform.identity()  # noqa: E731
        config = {"method": "identity"}
    t0 = time.perf_counter()
    transform = method(template, source)
    elapsed = time.perf_counter() - t0
    _write_or_print(args.out, data.format_pose(transform) + "\n")
    _log(f"time_s {elapsed:.6f}")
    if args.out:
        RunManifest("register", config, None, [args.template, args.source], [args.out]).write(
            Path(args.out).with_suffix(".manifest.json"))
    return 0


def _scan_paths(args):
    paths = list(args.scans or [])
    if args.scan_list:
        base = Path(args.scan_list).parent
        for line in Path(args.scan_list).read_text().splitlines():
            if line.strip():
                p = Path(line.strip())
                paths.append(str(p if p.is_absolute() else base / p))
    if not paths:
        raise UsageError("no scans given (--scans or --scan-list)")
    return paths


def cmd_odometry(args):
    paths = _scan_paths(args)
    params, _ = _load_checkpoint(args.checkpoint)
    before = network.CALL_COUNTS["set_abstraction"]
    relative, prev = [], None
    for path in paths:
        pred, prev = network.odometry_forward_cached(prev, data.read_cloud(path), params.config, params)
        if pred is not None:
            relative.append(pred[1])
    calls = network.CALL_COUNTS["set_abstraction"] - before
    trajectory = evaluation.accumulate_odometry(relative)
    data.write_poses(args.out, trajectory.poses)
    _log(f"set_abstraction_calls {calls} scans {len(paths)}")
    RunManifest("odometry", {"checkpoint": args.checkpoint, "set_abstraction_calls": calls},
                None, paths, [args.out]).write(Path(args.out).with_suffix(".manifest.json"))
    return 0


def cmd_evaluate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timing = not args.omit_timing
    if args.trajectory_gt or args.trajectory_pred:
        if not (args.trajectory_gt and args.trajectory_pred):
            raise UsageError("--trajectory-gt and --trajectory-pred go together")
        seg = evaluation.kitti_segment_errors(data.read_poses(args.trajectory_gt),
                                              data.read_poses(args.trajectory_pred))
        path = out / "segment_errors.json"
        with open(path, "w") as fh:
            json.dump(asdict(seg), fh, indent=2, sort_keys=True)
            fh.write("\n")
        RunManifest("evaluate", {"mode": "trajectory"}, None,
                    [args.trajectory_gt, args.trajectory_pred], [str(path)]).write(
            out / "run_manifest.json")
        print(f"translation_pct {seg.translation_pct!r} rotation_deg_per_100m "
              f"{seg.rotation_deg_per_100m!r} segments {seg.n_segments}")
        return 0
    methods = _methods(args)
    config = {"methods": list(methods), "checkpoint": args.checkpoint,
              "icp": asdict(_icp_config(args)), "timing": timing}
    if args.noise_sweep_units:
        shapes = _shape_distribution(args)
        config.update(mode="noise-sweep", noise_levels=args.noise_sweep_units,
                      shapes=asdict(shapes), perturbation=asdict(_perturbation(args)),
                      n_pairs=args.n_pairs)

        def make(noise):
            return data.SyntheticPairDataset(args.n_pairs, shapes, _perturbation(args, noise), args.seed)

        results = evaluation.noise_sweep(methods, make, args.noise_sweep_units, timing=timing)
        path = out / "noise_sweep.csv"
        evaluation.export_noise_sweep(results, path)
        outputs = [str(path)]
    else:
        if not args.dataset:
            raise UsageError("give --dataset or --noise-sweep-units")
        dataset = data.PairDataset(args.dataset)
        config["mode"] = "dataset"
        outputs = []
        for name, method in methods.items():
            report = evaluation.evaluate_pairs(method, dataset, name, timing=timing)
            path = out / f"report_{name}.csv"
            evaluation.export_report(report, path)
            evaluation.write_summary(out / f"summary_{name}.json", report)
            outputs += [str(path), str(out / f"summary_{name}.json")]
            agg = report.aggregates()
            _log(f"{name}: pairs {agg['n_pairs']} failed {agg['n_failed']} "
                 f"mean_r_err {agg.get('mean_r_err', float('nan')):.4f} "
                 f"mean_t_err {agg.get('mean_t_err', float('nan')):.5f}")
    RunManifest("evaluate", config, args.seed, [args.dataset] if args.dataset else [],
                outputs).write(out / "run_manifest.json")
    return 0


def cmd_gradcheck(args):
    results = gradcheck.run_suite(args.trials, args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} trial={r.trial} "
              f"rel_error={r.rel_error:.3e} tol={r.tol:.0e}")
    worst = max(r.rel_error for r in results)
    print(f"checks {len(results)} failed {len(failed)} max_rel_error {worst:.3e}")
    if failed:
        _fail("gradient-check", f"{len(failed)} of {len(results)} checks above tolerance")
        return NUMERICAL
    return 0


def _bench_config(args):
    if args.checkpoint:
        params, _ = _load_checkpoint(args.checkpoint)
        return params.config, params
    factory = {"toy": network.ModelConfig.toy, "modelnet": network.ModelConfig.modelnet,
               "kitti": network.ModelConfig.kitti, "reduced": network.ModelConfig.reduced}
    config = factory[args.preset]()
    return config, network.init_params(config, args.seed, "he-uniform")


def cmd_bench(args):
    config, params = _bench_config(args)
    shapes = data.ShapeDistribution(count=args.points, size_range=(0.5, 1.5))
    ds = data.SyntheticPairDataset(args.repeats + 1, shapes, data.PerturbationSpec.modelnet(), args.seed)
    weights = params.as_tensors()
    stages = {"set_abstraction": [], "flow_embedding": [], "head": [], "total": []}
    for k in range(args.repeats + 1):
        template, source, _ = ds[k]
        t0 = time.perf_counter()
        t_sa = network.set_abstraction(template, config, params, weights)
        s_sa = network.set_abstraction(source, config, params, weights)
        t1 = time.perf_counter()
        flow = network.flow_embedding(t_sa, s_sa, config, params, weights)
        t2 = time.perf_counter()
        network.output_head(flow, params, weights)
        t3 = time.perf_counter()
        if k == 0:
            continue  # warm-up (numba compilation)
        for name, v in zip(stages, (t1 - t0, t2 - t1, t3 - t2, t3 - t0)):
            stages[name].append(v)
    rows = {name: {"mean_ms": 1e3 * float(np.mean(v)), "max_ms": 1e3 * float(np.max(v))}
            for name, v in stages.items()}
    for name, r in rows.items():
        print(f"{name:16s} mean {r['mean_ms']:9.3f} ms  max {r['max_ms']:9.3f} ms")
    result = {"backend": backend_name(), "config": config.to_dict(), "points": args.points,
              "repeats": args.repeats, "stages": rows}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


# --- parser --------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="flowreg", description="Point cloud registration toolkit.")
    parser.add_argument("--version", action="version", version=f"flowreg {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic pair dataset")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--n-pairs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("ply", "bin"), default="ply")
    p.add_argument("--augment-duplicates", action="store_true")
    _add_shape_flags(p)
    _add_perturb_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a JSON manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, default=None, help="override the manifest step count")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register one source cloud onto a template")
    p.add_argument("--template", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--method", choices=("network", "icp", "identity"), default="network")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="pose file (default: stdout)")
    _add_icp_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("odometry", help="chain consecutive scans into a trajectory")
    p.add_argument("--scans", nargs="*")
    p.add_argument("--scan-list", help="text file with one scan path per line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="trajectory file (KITTI pose rows)")
    p.set_defaults(func=cmd_odometry)

    p = sub.add_parser("evaluate", help="evaluate methods on a dataset or noise sweep")
    p.add_argument("--dataset")
    p.add_argument("--methods", default="network,icp")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--noise-sweep-units", type=_floats,
                   help="comma-separated noise levels; generates data per level")
    p.add_argument("--n-pairs", type=int, default=50, help="pairs per noise level")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--omit-timing", action="store_true",
                   help="write NaN timings so reports are byte-reproducible")
    p.add_argument("--trajectory-gt")
    p.add_argument("--trajectory-pred")
    _add_icp_flags(p)
    _add_shape_flags(p)
    _add_perturb_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="per-stage inference timing")
    p.add_argument("--preset", choices=("toy", "reduced", "modelnet", "kitti"), default="reduced")
    p.add_argument("--checkpoint")
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSON result file")
    p.set_defaults(func=cmd_bench)
    return parser


def _fail(category, detail):
    print(f"error: {category}: {' '.join(str(detail).split())}", file=sys.stderr, flush=True)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("missing command (see --help)")
        return args.func(args)
    except UsageError as exc:
        _fail("usage", exc)
        return USAGE
    except FlowRegError as exc:
        _fail(exc.category, exc)
        return exc.exit_code if exc.exit_code in (USAGE, DATA, NUMERICAL) else NUMERICAL
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        _fail("io", exc)
        return DATA
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        _fail("numerical", exc)
        return NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
