"""Prints digests of kernel outputs; run once per backend and compare."""
import hashlib
import json

import numpy as np

from flowreg import autodiff as ad
from flowreg import network as nw
from flowreg._accel import backend_name
from flowreg.data import PerturbationSpec, ShapeDistribution, SyntheticPairDataset
from flowreg.spatial import NeighborIndex, farthest_point_sampling


def digest(chunks):
    h = hashlib.sha256()
    for c in chunks:
        h.update(np.ascontiguousarray(c).tobytes())
    return h.hexdigest()


def main():
    rng = np.random.default_rng(0)
    fps, radius, segmax = [], [], []
    for _ in range(30):
        pts = rng.integers(-4, 5, size=(int(rng.integers(1, 200)), 3)) * 0.25
        fps.append(farthest_point_sampling(pts, int(rng.integers(1, len(pts) + 1))))
        nb = NeighborIndex(pts, 0.5).query_many(pts[:10], 0.6, cap=int(rng.integers(1, 12)))
        radius += [nb.offsets, nb.indices, nb.dist2]
        n = int(rng.integers(1, 60))
        x = rng.integers(-3, 3, size=(n, 5)).astype(float)
        offsets = np.concatenate([[0], np.sort(rng.integers(0, n + 1, size=4)), [n]])
        tape = ad.Tape()
        leaf = tape.leaf(x)
        y = ad.gather_rows(ad.segment_max(leaf, offsets), rng.integers(0, len(offsets) - 1, size=9))
        tape.backward(ad.sum_all(ad.matmul(y, ad.constant(rng.normal(size=(5, 1))))))
        segmax += [y.value, leaf.grad]
    config = nw.ModelConfig.toy()
    params = nw.init_params(config, 0)
    template, source, _ = SyntheticPairDataset(1, ShapeDistribution(count=60),
                                               PerturbationSpec.modelnet(), 0)[0]
    tape = ad.Tape()
    weights = params.as_tensors(tape)
    geoms = [(nw.prepare_set_abstraction(template, config), nw.prepare_set_abstraction(source, config))]
    pred = nw.batch_forward(geoms, weights, config)
    tape.backward(ad.sum_all(pred))
    model = [pred.value] + [weights[k].grad for k in sorted(weights)]
    print(json.dumps({"backend": backend_name(), "fps": digest(fps), "radius": digest(radius),
                      "segment_max": digest(segmax), "model": digest(model),
                      "pred": pred.value.tolist()}))


if __name__ == "__main__":
    main()
