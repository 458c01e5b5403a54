import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowreg.data import (PairDataset, PerturbationSpec, ShapeDistribution, ShapeSpec,
                          SyntheticPairDataset, duplicate_template_augment, format_pose, make_pair,
                          read_cloud, read_kitti_bin, read_ply, read_poses, sample_shape,
                          sequence_from_trajectory, write_cloud, write_dataset, write_kitti_bin,
                          write_ply, write_poses)
from flowreg.errors import ConfigurationError, InvalidArgumentError, ParseError
from flowreg.geometry import (PointCloud, RigidTransform, apply, random_transform,
                              rotation_error_chordal, translation_error)
from flowreg.icp import IcpConfig, icp

seeds = st.integers(0, 2**32 - 1)


# --- shapes ------------------------------------------------------------------------

def test_unit_sphere_statistics():
    cloud = sample_shape(ShapeSpec("sphere", (1.0,), 10_000, with_normals=True), 0)
    assert np.max(np.abs(np.linalg.norm(cloud.points, axis=1) - 1)) < 1e-12
    assert np.linalg.norm(cloud.points.mean(axis=0)) < 0.05
    assert np.allclose(cloud.features, cloud.points, atol=1e-12)


def test_box_normals_axis_aligned_and_outward():
    cloud = sample_shape(ShapeSpec("box", (1.0, 2.0, 3.0), 2000, with_normals=True), 1)
    n = cloud.features
    assert np.allclose(np.linalg.norm(n, axis=1), 1)
    assert np.all(np.sum(np.abs(n) == 1, axis=1) == 1)
    assert np.all(np.einsum("ij,ij->i", n, cloud.points) > 0)
    # area weighting: the 2x3 faces hold the most samples
    assert np.mean(np.abs(n[:, 0]) == 1) > np.mean(np.abs(n[:, 2]) == 1)


@pytest.mark.parametrize("family,size", [("sphere", (0.5,)), ("box", (1, 1, 1)),
                                         ("cylinder", (0.5, 1.0)), ("torus", (1.0, 0.3)),
                                         ("plane", (1.0, 2.0))])
def test_every_family_is_deterministic_with_unit_normals(family, size):
    spec = ShapeSpec(family, size, 300, with_normals=True)
    a, b = sample_shape(spec, 7), sample_shape(spec, 7)
    assert a.points.tobytes() == b.points.tobytes()
    assert np.allclose(np.linalg.norm(a.features, axis=1), 1)
    assert not np.array_equal(a.points, sample_shape(spec, 8).points)


def test_torus_points_lie_on_surface():
    cloud = sample_shape(ShapeSpec("torus", (1.0, 0.25), 500), 0)
    x, y, z = cloud.points.T
    ring = np.sqrt(x ** 2 + y ** 2) - 1.0
    assert np.allclose(ring ** 2 + z ** 2, 0.25 ** 2)


def test_shape_spec_validation():
    with pytest.raises(ConfigurationError):
        ShapeSpec("sphere", (1.0,), 0)
    with pytest.raises(ConfigurationError):
        ShapeSpec("box", (1.0, -1.0, 1.0))
    with pytest.raises(ConfigurationError):
        ShapeSpec("cone", (1.0,))


# --- pairs -------------------------------------------------------------------------

def test_zero_spec_pair_is_identity():
    cloud = sample_shape(ShapeSpec("box", (1, 1, 1), 100), 0)
    template, source, gt = make_pair(cloud, PerturbationSpec((0, 0), (0, 0), 0.0), 3)
    assert np.array_equal(template.points, source.points)
    assert np.array_equal(gt.as_matrix(), np.eye(4))


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_pair_convention_and_ranges(seed):
    cloud = sample_shape(ShapeSpec("box", (1, 0.6, 0.4), 200, with_normals=True), seed % 1000)
    template, source, gt = make_pair(cloud, PerturbationSpec.modelnet(0.0), seed)
    assert np.allclose(apply(gt, source).points, template.points, atol=1e-12)
    assert rotation_error_chordal(gt, RigidTransform.identity()) <= 5.0 + 1e-9
    assert np.linalg.norm(gt.translation) <= 0.1 + 1e-12
    assert gt.is_valid()
    # normals rotate with the cloud
    assert np.allclose(source.features @ gt.rotation.T, template.features, atol=1e-12)


def test_zero_noise_pair_icp_recovers_gt():
    cloud = sample_shape(ShapeSpec("box", (1.0, 0.7, 0.5), 400), 2)
    template, source, gt = make_pair(cloud, PerturbationSpec.modelnet(0.0), 5)
    result = icp(template, source, IcpConfig())
    assert translation_error(result.transform, gt) < 1e-6


def test_noise_is_zero_mean_and_on_both_clouds():
    cloud = sample_shape(ShapeSpec("sphere", (1.0,), 5000), 0)
    sigma = 0.02
    template, source, gt = make_pair(cloud, PerturbationSpec((0, 0), (0, 0), sigma), 1)
    for noisy in (template, source):
        d = noisy.points - cloud.points
        assert np.all(np.abs(d.mean(axis=0)) < 3 * sigma / np.sqrt(cloud.n))
        assert np.std(d) == pytest.approx(sigma, rel=0.05)
    assert not np.array_equal(template.points, source.points)


def test_make_pair_is_deterministic():
    cloud = sample_shape(ShapeSpec("box", (1, 1, 1), 100), 0)
    a = make_pair(cloud, PerturbationSpec.modelnet(), 9)
    b = make_pair(cloud, PerturbationSpec.modelnet(), 9)
    assert all(np.array_equal(x.points, y.points) for x, y in zip(a[:2], b[:2]))
    assert np.array_equal(a[2].as_matrix(), b[2].as_matrix())


def test_perturbation_validation_and_presets():
    with pytest.raises(ConfigurationError):
        PerturbationSpec((0.2, 0.1))
    with pytest.raises(ConfigurationError):
        PerturbationSpec(noise_std=-1)
    k = PerturbationSpec.kitti_training()
    assert k.translation_std == (0.2, 0.02, 0.02) and k.rotation_std_deg == (0.1, 0.1, 1.0)
    assert k.noise_std == 0.01
    rng_pairs = make_pair(sample_shape(ShapeSpec("plane", (5, 5), 100), 0), k, 0)
    assert rng_pairs[2].is_valid()


def test_duplicate_augment():
    cloud = sample_shape(ShapeSpec("box", (1.0, 0.7, 0.5), 400), 0)
    spec = PerturbationSpec.modelnet(0.0)
    pairs = [make_pair(cloud, spec, s) for s in range(3)]
    out = duplicate_template_augment(pairs, spec, 1)
    assert len(out) == 6 and out[:3] == pairs
    for template, source, gt in out[3:]:
        result = icp(template, source, IcpConfig())
        assert translation_error(result.transform, gt) < 1e-6
    other = duplicate_template_augment(pairs, spec, 2)
    assert not np.array_equal(other[3][1].points, out[3][1].points)


def test_synthetic_dataset_items_depend_on_seed_and_index():
    ds = SyntheticPairDataset(5, ShapeDistribution(families=("sphere", "torus"), count=50), seed=3)
    again = SyntheticPairDataset(5, ShapeDistribution(families=("sphere", "torus"), count=50), seed=3)
    assert len(ds) == 5
    assert np.array_equal(ds[4][0].points, again[4][0].points)
    assert not np.array_equal(ds[0][0].points, ds[1][0].points)
    with pytest.raises(IndexError):
        ds[5]


# --- cloud IO ----------------------------------------------------------------------

@pytest.mark.parametrize("width", [0, 1, 3, 4])
def test_ply_round_trip_is_exact(tmp_path, width):
    rng = np.random.default_rng(width)
    cloud = PointCloud(rng.normal(size=(20, 3)), rng.normal(size=(20, width)) if width else None)
    write_ply(tmp_path / "c.ply", cloud)
    back = read_ply(tmp_path / "c.ply")
    assert back.points.tobytes() == cloud.points.tobytes()
    assert back.features.tobytes() == cloud.features.tobytes()


def test_ply_three_point_fixture(tmp_path):
    text = """ply
format ascii 1.0
comment fixture
element vertex 3
property float x
property float y
property float z
property float nx
property float ny
property float nz
end_header
0 0 0 0 0 1
1 0 0 0 0 1
0 1 0 0 0 1
"""
    path = tmp_path / "f.ply"
    path.write_text(text)
    cloud = read_cloud(path)
    assert cloud.n == 3 and cloud.c == 3


@pytest.mark.parametrize("body,line", [
    ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
     "property float z\nend_header\n0 0 0\n", 9),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
     "property float z\nend_header\n0 0\n", 8),
    ("ply\nformat binary_little_endian 1.0\n", 2),
    ("plx\n", 1),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
     "property float z\nend_header\n0 0 0\n1 1 1\n", 9),
])
def test_ply_errors_carry_line_numbers(tmp_path, body, line):
    path = tmp_path / "bad.ply"
    path.write_text(body)
    with pytest.raises(ParseError) as info:
        read_ply(path)
    assert info.value.line == line
    assert str(path) in str(info.value)


def test_kitti_bin_round_trip_and_truncation(tmp_path):
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(10, 3)), rng.uniform(size=(10, 1)))
    path = tmp_path / "scan.bin"
    write_kitti_bin(path, cloud)
    assert path.stat().st_size == 10 * 16
    back = read_kitti_bin(path)
    assert np.array_equal(back.points, cloud.points.astype(np.float32))
    assert np.array_equal(back.features, cloud.features.astype(np.float32))
    assert read_kitti_bin(path, with_intensity=False).c == 0
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ParseError):
        read_kitti_bin(path)
    with pytest.raises(InvalidArgumentError):
        write_kitti_bin(path, PointCloud(np.zeros((2, 3)), np.zeros((2, 3))))


def test_unknown_cloud_suffix(tmp_path):
    with pytest.raises(InvalidArgumentError):
        write_cloud(tmp_path / "c.xyz", PointCloud(np.zeros((1, 3))))
    with pytest.raises(InvalidArgumentError):
        read_cloud(tmp_path / "c.xyz")


# --- poses and dataset directories -------------------------------------------------

def test_identity_pose_row():
    assert format_pose(RigidTransform.identity()) == "1 0 0 0 0 1 0 0 0 0 1 0"


def test_pose_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    poses = [random_transform(rng) for _ in range(5)]
    write_poses(tmp_path / "p.txt", poses)
    back = read_poses(tmp_path / "p.txt")
    for a, b in zip(poses, back):
        assert np.array_equal(a.as_matrix(), b.as_matrix())


def test_pose_parse_errors(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0\n")
    with pytest.raises(ParseError) as info:
        read_poses(path)
    assert info.value.line == 2
    path.write_text("1 0 0 0 0 1 0 0 0 0 1 x\n")
    with pytest.raises(ParseError):
        read_poses(path)


@pytest.mark.parametrize("suffix", [".ply", ".bin"])
def test_dataset_directory_round_trip(tmp_path, suffix):
    ds = SyntheticPairDataset(3, ShapeDistribution(count=30), seed=0)
    pairs = list(ds)
    if suffix == ".bin":
        pairs = [(PointCloud(t.points), PointCloud(s.points), g) for t, s, g in pairs]
    write_dataset(tmp_path, pairs, {"seed": 0}, suffix)
    back = PairDataset(tmp_path)
    assert len(back) == 3
    for (t, s, g), (t2, s2, g2) in zip(pairs, back):
        tol = 0 if suffix == ".ply" else 1e-6
        assert np.allclose(t.points, t2.points, atol=tol, rtol=0)
        assert np.allclose(s.points, s2.points, atol=tol, rtol=0)
        assert np.array_equal(g.as_matrix(), g2.as_matrix())


def test_dataset_label_count_mismatch(tmp_path):
    ds = SyntheticPairDataset(2, ShapeDistribution(count=20), seed=0)
    write_dataset(tmp_path, list(ds))
    (tmp_path / "labels.txt").write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(ParseError):
        PairDataset(tmp_path)


def test_sequence_from_trajectory():
    world = PointCloud(np.random.default_rng(0).uniform(-5, 5, (100, 3)))
    poses = [RigidTransform.identity(), RigidTransform(np.eye(3), [1.0, 0, 0])]
    scans = sequence_from_trajectory(world, poses, 0.0, 0)
    assert np.array_equal(scans[0].points, world.points)
    assert np.allclose(apply(poses[1], scans[1]).points, world.points)
