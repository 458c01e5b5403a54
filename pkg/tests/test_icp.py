import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowreg.data import PerturbationSpec, ShapeSpec, make_pair, sample_shape
from flowreg.errors import ConfigurationError, DegenerateInputError, NoOverlapError
from flowreg.geometry import (PointCloud, RigidTransform, apply, random_rotation, random_transform,
                              rotation_error_chordal, translation_error)
from flowreg.icp import IcpConfig, icp, rigid_align_closed_form
from oracles import kabsch_objective

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=50)
@given(seeds)
def test_closed_form_exact_recovery(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(20, 3))
    T = random_transform(rng)
    est = rigid_align_closed_form(src, apply(T, src))
    assert np.max(np.abs(est.rotation - T.rotation)) < 1e-9
    assert np.max(np.abs(est.translation - T.translation)) < 1e-9
    assert np.isclose(np.linalg.det(est.rotation), 1.0)


def test_closed_form_identity():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    est = rigid_align_closed_form(pts, pts)
    assert np.allclose(est.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(est.translation, 0, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(seeds)
def test_closed_form_beats_random_search(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(30, 3))
    dst = apply(random_transform(rng), src) + rng.normal(0, 0.05, size=src.shape)
    est = rigid_align_closed_form(src, dst)
    best = kabsch_objective(src, dst, est.rotation, est.translation)
    for _ in range(1000):
        r = random_rotation(rng, 2.0) @ est.rotation
        t = est.translation + rng.normal(0, 0.01, 3)
        assert best <= kabsch_objective(src, dst, r, t) + 1e-12


def test_closed_form_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        rigid_align_closed_form(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1, 0, 0])
    with pytest.raises(DegenerateInputError):
        rigid_align_closed_form(line, line + 1)
    with pytest.raises(DegenerateInputError):
        rigid_align_closed_form(np.zeros((4, 3)), np.zeros((5, 3)))


def test_closed_form_reflection_is_corrected():
    # planar points mirrored: best proper rotation, never a reflection
    pts = np.array([[1, 0, 0], [0, 2, 0], [-1, 0, 0], [0, -1, 0]], dtype=float)
    mirrored = pts * [1, -1, 1]
    est = rigid_align_closed_form(pts, mirrored)
    assert np.isclose(np.linalg.det(est.rotation), 1.0)


def box_pair(seed, n=400, noise=0.0):
    cloud = sample_shape(ShapeSpec("box", (1.0, 0.7, 0.5), n, with_normals=True), seed)
    return make_pair(cloud, PerturbationSpec((0.0, 0.1), (0.0, 5.0), noise), seed)


def test_icp_recovers_small_perturbation():
    template, source, gt = box_pair(1)
    result = icp(template, source, IcpConfig(max_iterations=50))
    assert result.converged and result.iterations <= 50
    assert translation_error(result.transform, gt) < 1e-6
    assert rotation_error_chordal(result.transform, gt) < 1e-4


def test_icp_aligned_clouds_converge_immediately():
    template, _, _ = box_pair(2)
    result = icp(template, template)
    assert result.iterations == 1 and result.converged
    assert result.residual < 1e-12
    assert np.allclose(result.transform.as_matrix(), np.eye(4), atol=1e-12)


def test_icp_no_overlap_reports_iteration():
    template, _, _ = box_pair(3)
    far = apply(RigidTransform(np.eye(3), [20.0, 0, 0]), template)
    with pytest.raises(NoOverlapError) as info:
        icp(template, far, IcpConfig(max_correspondence_distance=0.2))
    assert info.value.iteration == 1
    with pytest.raises(NoOverlapError):
        icp(PointCloud(np.zeros((0, 3))), template)


def test_icp_residual_trace_is_non_increasing_for_point2point():
    template, source, _ = box_pair(4, noise=0.005)
    trace = icp(template, source).residual_trace
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_point_to_plane_variant():
    template, source, gt = box_pair(5)
    result = icp(template, source, IcpConfig(variant="point2plane", max_iterations=50))
    assert result.converged
    assert translation_error(result.transform, gt) < 1e-6
    assert rotation_error_chordal(result.transform, gt) < 1e-4


def test_point_to_plane_needs_normals_and_conditioning():
    template, source, _ = box_pair(6)
    with pytest.raises(ConfigurationError):
        icp(PointCloud(template.points), source, IcpConfig(variant="point2plane"))
    # every normal identical: rotations about it and in-plane shifts are unobservable
    pts = np.random.default_rng(0).uniform(-1, 1, (50, 3)) * [1, 1, 0]
    flat = PointCloud(pts, np.tile([0.0, 0.0, 1.0], (50, 1)))
    with pytest.raises(DegenerateInputError):
        icp(flat, flat, IcpConfig(variant="point2plane"))


def test_icp_config_validation():
    with pytest.raises(ConfigurationError):
        IcpConfig(max_correspondence_distance=0)
    with pytest.raises(ConfigurationError):
        IcpConfig(max_iterations=0)
    with pytest.raises(ConfigurationError):
        IcpConfig(variant="plane2plane")


def test_icp_uses_init():
    template, source, gt = box_pair(7)
    result = icp(template, source, init=gt)
    assert result.iterations <= 3
    assert translation_error(result.transform, gt) < 1e-9
