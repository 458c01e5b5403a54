import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowreg import autodiff as ad
from flowreg import network as nw
from flowreg.data import PerturbationSpec, ShapeDistribution, SyntheticPairDataset, sample_shape, ShapeSpec
from flowreg.errors import (CacheInvalidError, ConfigurationError, EmptySetError,
                            InsufficientPointsError, ParseError)
from flowreg.geometry import PointCloud, RigidTransform, apply
from flowreg.gradcheck import check_model_full

seeds = st.integers(0, 2**32 - 1)
TOY = nw.ModelConfig.toy()


def toy_pair(seed=0, n=40, config=TOY):
    ds = SyntheticPairDataset(1, ShapeDistribution(count=n), PerturbationSpec.modelnet(0.01), seed)
    return ds[0]


@pytest.fixture(scope="module")
def params():
    return nw.init_params(TOY, 3)


# --- config and params -------------------------------------------------------------

def test_table_presets():
    k, m = nw.ModelConfig.kitti(), nw.ModelConfig.modelnet()
    assert (k.n_fps, k.sa_radii, k.sa_caps, k.fe_radius, k.fe_cap) == (1024, (0.5, 1.0), (512, 1024), 10.0, 15)
    assert (m.n_fps, m.sa_radii, m.sa_caps, m.fe_radius, m.fe_cap) == (512, (0.05, 0.1), (256, 512), 0.2, 30)
    assert (m.mlp_sa, m.mlp_fe, m.mlp_pn, m.mlp_fc) == ((16, 16, 32), (128, 128, 256),
                                                        (256, 512, 512, 1024), (512, 256, 8))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        nw.ModelConfig(mlp_fc=(16, 7))
    with pytest.raises(ConfigurationError):
        nw.ModelConfig(sa_radii=(0.1,), sa_caps=(4, 8))
    with pytest.raises(ConfigurationError):
        nw.ModelConfig(mlp_sa=(0, 4))
    with pytest.raises(ConfigurationError):
        nw.ModelConfig(sa_radii=(0.2, 0.1))


def test_config_dict_round_trip_and_fingerprint():
    c = nw.ModelConfig.toy(in_features=3)
    assert nw.ModelConfig.from_dict(c.to_dict()) == c
    assert c.fingerprint() == nw.ModelConfig.from_dict(c.to_dict()).fingerprint()
    assert c.fingerprint() != TOY.fingerprint()


def test_init_params_default_scheme():
    a, b, c = nw.init_params(TOY, 1), nw.init_params(TOY, 1), nw.init_params(TOY, 2)
    for name, shape in nw.layer_shapes(TOY):
        assert a.arrays[name].shape == shape
        assert np.array_equal(a.arrays[name], b.arrays[name])
        if name.endswith(".w"):
            assert np.all(np.abs(a.arrays[name]) <= 1 / np.sqrt(shape[0]))
            assert not np.array_equal(a.arrays[name], c.arrays[name])
        else:
            assert not a.arrays[name].any()
    assert a.init_scheme == "uniform-fan-in" and a.seed == 1


def test_he_scheme_starts_from_identity_like_output():
    p = nw.init_params(TOY, 0, "he-uniform")
    template, source, _ = toy_pair()
    dq, T = nw.model_forward(template, source, TOY, p)
    assert np.array_equal(dq.as_array(), [0.5, 0, 0, 0, 0, 0, 0, 0])
    assert np.array_equal(T.as_matrix(), np.eye(4))
    with pytest.raises(ConfigurationError):
        nw.init_params(TOY, 0, "xavier")


def test_layer_input_widths():
    shapes = dict(nw.layer_shapes(nw.ModelConfig.modelnet()))
    assert shapes["sa0.0.w"] == (3, 16)
    assert shapes["fe.0.w"] == (3 + 2 * 64, 128)
    assert shapes["pn.0.w"] == (3 + 256, 256)
    assert shapes["fc.0.w"] == (1024, 512)
    assert shapes["fc.2.w"] == (256, 8)


# --- mini-PointNet -----------------------------------------------------------------

def test_mini_pointnet_singleton_and_permutation(params):
    w = params.as_tensors()
    layers = nw._layers(w, "pn")
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 3 + TOY.mlp_fe[-1]))
    single = nw.mini_pointnet(x, layers).value
    assert np.array_equal(single, nw.apply_mlp(ad.constant(x), layers).value[0])
    xs = rng.normal(size=(9, x.shape[1]))
    a = nw.mini_pointnet(xs, layers).value
    b = nw.mini_pointnet(xs[rng.permutation(9)], layers).value
    assert np.array_equal(a, b)
    with pytest.raises(EmptySetError):
        nw.mini_pointnet(np.zeros((0, x.shape[1])), layers)


# --- set abstraction ---------------------------------------------------------------

def test_set_abstraction_shape_with_table_widths():
    config = nw.ModelConfig.modelnet()
    cloud = sample_shape(ShapeSpec("sphere", (1.0,), 600), 0)
    sa = nw.set_abstraction(cloud, config, nw.init_params(config, 0))
    assert sa.as_array().shape == (512, 3 + 2 * 32)
    # samples are a subset of the input coordinates
    rows = {tuple(p) for p in cloud.points}
    assert all(tuple(p) in rows for p in sa.xyz)


def test_set_abstraction_isolated_center(params):
    pts = np.concatenate([np.random.default_rng(0).uniform(0, 0.1, (20, 3)), [[5.0, 5.0, 5.0]]])
    cloud = PointCloud(pts)
    sa = nw.set_abstraction(cloud, TOY, params)
    k = int(np.flatnonzero(np.all(sa.xyz == [5.0, 5.0, 5.0], axis=1))[0])
    w = params.as_tensors()
    expect = [nw.apply_mlp(ad.constant(np.zeros((1, 3))), nw._layers(w, f"sa{lvl}")).value[0]
              for lvl in range(TOY.n_radii)]
    assert np.array_equal(sa.features.value[k], np.concatenate(expect))


def test_set_abstraction_needs_n_fps_points(params):
    with pytest.raises(InsufficientPointsError):
        nw.set_abstraction(PointCloud(np.zeros((TOY.n_fps - 1, 3))), TOY, params)


def test_siamese_branches_share_parameters(params):
    template, _, _ = toy_pair()
    w = params.as_tensors()
    a = nw.set_abstraction(template, TOY, params, w)
    b = nw.set_abstraction(template, TOY, params, w)
    assert a.features.value.tobytes() == b.features.value.tobytes()
    # one batched call over two clouds uses a single weight set for both
    geoms = [nw.prepare_set_abstraction(template, TOY)] * 2
    both = nw.set_abstraction_features(geoms, w, TOY).value
    assert np.array_equal(both[:TOY.n_fps], both[TOY.n_fps:])


# --- flow embedding ----------------------------------------------------------------

def test_flow_embedding_self_match(params):
    template, _, _ = toy_pair()
    sa = nw.set_abstraction(template, TOY, params)
    geom = nw.prepare_flow_embedding(sa.xyz, sa.xyz, TOY)
    for i in range(sa.n):
        rows = slice(geom.offsets[i], geom.offsets[i + 1])
        assert i in geom.source_rows[rows]
        assert np.array_equal(geom.displacements[rows][0], [0, 0, 0])


def test_flow_embedding_separated_clusters_give_zeros(params):
    rng = np.random.default_rng(1)
    a = PointCloud(rng.uniform(0, 0.2, size=(30, 3)))
    b = PointCloud(rng.uniform(0, 0.2, size=(30, 3)) + 10.0)
    sa_a, sa_b = nw.set_abstraction(a, TOY, params), nw.set_abstraction(b, TOY, params)
    flow = nw.flow_embedding(sa_a, sa_b, TOY, params)
    assert flow.features.shape == (TOY.n_fps, TOY.mlp_fe[-1])
    assert not flow.features.value.any()


def test_flow_embedding_source_permutation_invariance(params):
    template, source, _ = toy_pair(2)
    sa_t, sa_s = nw.set_abstraction(template, TOY, params), nw.set_abstraction(source, TOY, params)
    perm = np.random.default_rng(0).permutation(sa_s.n)
    shuffled = nw.AbstractedCloud(sa_s.xyz[perm], ad.Tensor(sa_s.features.value[perm]), sa_s.fingerprint)
    a = nw.flow_embedding(sa_t, sa_s, TOY, params).features.value
    b = nw.flow_embedding(sa_t, shuffled, TOY, params).features.value
    assert np.array_equal(a, b)


# --- head --------------------------------------------------------------------------

def test_head_zero_raw_output():
    out = nw.constrain_raw(ad.Tensor(np.zeros((1, 8)))).value[0]
    assert np.array_equal(out, [0.5, 0, 0, 0, 0, 0, 0, 0])


@given(seeds)
def test_head_output_ranges(seed):
    raw = np.random.default_rng(seed).normal(scale=30, size=(5, 8))
    out = nw.constrain_raw(ad.Tensor(raw)).value
    assert np.all((out[:, 0] >= 0) & (out[:, 0] <= 1))
    assert np.all(np.abs(out[:, 1:4]) <= 1)
    assert np.array_equal(out[:, 4:], raw[:, 4:])


def test_head_rejects_empty_flow(params):
    flow = nw.FlowCloud(np.zeros((0, 3)), ad.Tensor(np.zeros((0, TOY.mlp_fe[-1]))))
    with pytest.raises(EmptySetError):
        nw.output_head(flow, params)


def test_full_model_gradient_matches_finite_differences():
    results = check_model_full(seed=0)
    assert len(results) == len(nw.layer_shapes(TOY))
    assert max(r.rel_error for r in results) < 1e-5


# --- full model --------------------------------------------------------------------

@settings(max_examples=10, deadline=None)
@given(seeds)
def test_model_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    template, source, _ = toy_pair(seed % 1000)
    params = nw.init_params(TOY, seed % 7)
    base = nw.model_forward(template, source, TOY, params)[0].as_array()
    pt = template.subset(rng.permutation(template.n))
    ps = source.subset(rng.permutation(source.n))
    out = nw.model_forward(pt, ps, TOY, params)[0].as_array()
    assert np.max(np.abs(out - base)) < 1e-12


def test_modelnet_config_gives_valid_transform():
    config = nw.ModelConfig.modelnet()
    ds = SyntheticPairDataset(1, ShapeDistribution(count=2048), PerturbationSpec.modelnet(), 0)
    template, source, _ = ds[0]
    _, T = nw.model_forward(template, source, config, nw.init_params(config, 0))
    assert T.is_valid()


def test_model_forward_deterministic(params):
    template, source, _ = toy_pair(4)
    a = nw.model_forward(template, source, TOY, params)[0].as_array()
    b = nw.model_forward(template, source, TOY, params)[0].as_array()
    assert a.tobytes() == b.tobytes()


def test_model_forward_checks_inputs(params):
    template, source, _ = toy_pair()
    with pytest.raises(ConfigurationError):
        nw.model_forward(template, PointCloud(source.points, np.zeros((source.n, 1))), TOY, params)
    with pytest.raises(InsufficientPointsError):
        nw.model_forward(template, source.subset(np.arange(4)), TOY, params)


def test_batch_forward_matches_single_pairs(params):
    pairs = [toy_pair(s) for s in range(3)]
    geoms = [(nw.prepare_set_abstraction(t, TOY), nw.prepare_set_abstraction(s, TOY)) for t, s, _ in pairs]
    batch = nw.batch_forward(geoms, params.as_tensors(), TOY).value
    for k, (t, s, _) in enumerate(pairs):
        single = nw.model_forward(t, s, TOY, params)[0].as_array()
        assert np.allclose(batch[k], single, atol=1e-12)


# --- odometry caching --------------------------------------------------------------

def scan_sequence(k, seed=0, n=60):
    rng = np.random.default_rng(seed)
    world = PointCloud(rng.uniform(-1, 1, size=(n, 3)))
    scans, pose = [], RigidTransform.identity()
    for _ in range(k):
        scans.append(apply(pose, world).with_points(apply(pose, world).points
                                                    + rng.normal(0, 0.005, (n, 3))))
        step = RigidTransform(np.eye(3), rng.uniform(-0.05, 0.05, 3))
        pose = step @ pose
    return scans


def test_cached_odometry_matches_uncached_and_counts_sa(params):
    scans = scan_sequence(10)
    before = nw.CALL_COUNTS["set_abstraction"]
    prev, cached = None, []
    for scan in scans:
        pred, prev = nw.odometry_forward_cached(prev, scan, TOY, params)
        if pred is None:
            assert not cached
        else:
            cached.append(pred)
    assert nw.CALL_COUNTS["set_abstraction"] - before == 10
    before = nw.CALL_COUNTS["set_abstraction"]
    for (dq, T), a, b in zip(cached, scans, scans[1:]):
        dq_u, T_u = nw.model_forward(a, b, TOY, params)
        assert dq.as_array().tobytes() == dq_u.as_array().tobytes()
        assert T.as_matrix().tobytes() == T_u.as_matrix().tobytes()
    assert nw.CALL_COUNTS["set_abstraction"] - before == 2 * 9


def test_cache_fingerprint_mismatch(params):
    scans = scan_sequence(2)
    _, sa = nw.odometry_forward_cached(None, scans[0], TOY, params)
    other = nw.init_params(TOY, 99)
    with pytest.raises(CacheInvalidError):
        nw.odometry_forward_cached(sa, scans[1], TOY, other)


# --- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip_is_exact_and_byte_stable(tmp_path, params):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    nw.save_checkpoint(a, params, {"step": 3})
    nw.save_checkpoint(b, params, {"step": 3})
    assert a.read_bytes() == b.read_bytes()
    loaded, extra = nw.load_checkpoint(a)
    assert extra == {"step": 3}
    assert loaded.config == params.config and loaded.seed == params.seed
    for name in params.names():
        assert loaded.arrays[name].tobytes() == params.arrays[name].tobytes()
    assert loaded.fingerprint() == params.fingerprint()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ParseError):
        nw.load_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    nw.save_checkpoint(good, nw.init_params(TOY, 0))
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ParseError):
        nw.load_checkpoint(good)
