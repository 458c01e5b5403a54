"""Time the hot kernels under numba and under the numpy fallback.

Each backend runs in its own interpreter (the choice is fixed at import by
FLOWREG_DISABLE_NUMBA). The first call of every kernel is a warm-up so JIT
compilation is not counted.

    python benchmarks/bench_kernels.py [--repeats 5] [--out results.json]
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from flowreg import autodiff as ad, network as nw
from flowreg._accel import backend_name
from flowreg.data import PerturbationSpec, ShapeDistribution, SyntheticPairDataset
from flowreg.spatial import NeighborIndex, farthest_point_sampling

repeats = int(sys.argv[1])
rng = np.random.default_rng(0)
cloud = rng.uniform(-1, 1, size=(4096, 3))
centers = cloud[farthest_point_sampling(cloud, 512)]
x = rng.normal(size=(512 * 32, 64))
offsets = np.arange(0, 512 * 32 + 1, 32)
config = nw.ModelConfig.reduced()
params = nw.init_params(config, 0, "he-uniform")
pairs = SyntheticPairDataset(4, ShapeDistribution(count=512), PerturbationSpec.modelnet(), 0)
geoms = [(nw.prepare_set_abstraction(t, config), nw.prepare_set_abstraction(s, config))
         for t, s, _ in pairs]

def train_step():
    tape = ad.Tape()
    w = params.as_tensors(tape)
    tape.backward(ad.sum_all(nw.batch_forward(geoms, w, config)))

def segment_max():
    tape = ad.Tape()
    leaf = tape.leaf(x)
    tape.backward(ad.sum_all(ad.segment_max(leaf, offsets)))

kernels = {
    "fps_4096_to_512": lambda: farthest_point_sampling(cloud, 512),
    "radius_512x4096_cap32": lambda: NeighborIndex(cloud, 0.2).query_many(centers, 0.2, 32),
    "segment_max_fwd_bwd": segment_max,
    "reduced_model_fwd_bwd_batch4": train_step,
}
out = {}
for name, fn in kernels.items():
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    out[name] = {"mean_ms": 1e3 * float(np.mean(times)), "min_ms": 1e3 * float(np.min(times))}
print(json.dumps({"backend": backend_name(), "kernels": out}))
"""


def run(disable, repeats):
    env = dict(os.environ, FLOWREG_DISABLE_NUMBA="1" if disable else "0")
    proc = subprocess.run([sys.executable, "-c", WORKER, str(repeats)], capture_output=True,
                          text=True, env=env, check=True)
    return json.loads(proc.stdout)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--out")
    args = parser.parse_args()
    fast, plain = run(False, args.repeats), run(True, args.repeats)
    print(f"{'kernel':32s} {fast['backend']:>12s} {plain['backend']:>12s} {'speedup':>8s}")
    for name, a in fast["kernels"].items():
        b = plain["kernels"][name]
        print(f"{name:32s} {a['mean_ms']:9.2f} ms {b['mean_ms']:9.2f} ms "
              f"{b['mean_ms'] / a['mean_ms']:7.1f}x")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"numba": fast, "numpy": plain}, fh, indent=2, sort_keys=True)
            fh.write("\n")


if __name__ == "__main__":
    main()
