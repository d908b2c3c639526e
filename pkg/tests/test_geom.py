import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import inlier_scene, rz
from dscreg.errors import DegenerateConfiguration, SumWeightsZero
from dscreg.geom import (Correspondence, Correspondences, RigidTransform, apply_transform,
                         axis_angle, random_pose, residual, residuals, rotation_error, svd3,
                         translation_error, weighted_kabsch)


def test_apply_transform_examples(identity):
    assert np.array_equal(apply_transform(identity, [1, 2, 3]), [1, 2, 3])
    shift = RigidTransform(np.eye(3), np.array([1.0, 0, 0]))
    assert np.array_equal(apply_transform(shift, [0, 0, 0]), [1, 0, 0])
    quarter = RigidTransform(rz(90), np.zeros(3))
    assert np.allclose(apply_transform(quarter, [1, 0, 0]), [0, 1, 0], atol=1e-15)


def test_residual_examples(identity):
    assert residual(identity, Correspondence((0, 0, 0), (3, 4, 0))) == 5.0
    shift = RigidTransform(np.eye(3), np.array([1.0, 0, 0]))
    assert residual(shift, Correspondence((0, 0, 0), (1, 0, 0))) == 0.0


def test_rigid_transform_rejects_non_rotations():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(2 * np.eye(3), np.zeros(3))


def test_compose_and_inverse(rng):
    a, b = random_pose(rng), random_pose(rng)
    p = rng.standard_normal(3)
    assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)))
    assert np.allclose(a.inverse().apply(a.apply(p)), p)


def test_kabsch_identity_and_translation(rng):
    src = rng.standard_normal((8, 3))
    t = weighted_kabsch(Correspondences(src, src.copy()))
    assert np.allclose(t.rotation, np.eye(3), atol=1e-9) and np.allclose(t.translation, 0, atol=1e-9)
    t = weighted_kabsch(Correspondences(src, src + [1, 2, 3]))
    assert np.allclose(t.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(t.translation, [1, 2, 3], atol=1e-9)


def test_kabsch_mirror_gives_proper_rotation():
    src = np.array([[1.0, 0, 0], [0, 1, 0], [-1, -1, 0]])
    dst = src * [1, 1, -1] + [[0, 0, 0.1], [0, 0, -0.1], [0, 0, 0.05]]
    dst[:, 0] *= -1
    t = weighted_kabsch(Correspondences(src, dst))
    assert math.isclose(np.linalg.det(t.rotation), 1.0, abs_tol=1e-12)


def test_kabsch_weight_errors(rng):
    c, _ = inlier_scene(rng, 5)
    with pytest.raises(SumWeightsZero):
        weighted_kabsch(c, np.zeros(5))
    with pytest.raises(ValueError):
        weighted_kabsch(c, -np.ones(5))
    with pytest.raises(DegenerateConfiguration):
        weighted_kabsch(c, [1, 1, 0, 0, 0])
    collinear = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateConfiguration):
        weighted_kabsch(Correspondences(collinear, collinear))


def test_kabsch_zero_weight_ignores_outlier(rng):
    c, pose = inlier_scene(rng, 6)
    dst = c.dst.copy()
    dst[0] += 10.0
    t = weighted_kabsch(Correspondences(c.src, dst), [0, 1, 1, 1, 1, 1])
    assert rotation_error(t, pose) < 1e-9 and translation_error(t, pose) < 1e-9


def test_svd3_matches_numpy(rng):
    for _ in range(50):
        h = rng.standard_normal((3, 3))
        u, s, v = svd3(h)
        assert np.allclose(u @ np.diag(s) @ v.T, h, atol=1e-12)
        assert np.allclose(u.T @ u, np.eye(3), atol=1e-12)
        assert np.allclose(s, np.linalg.svd(h, compute_uv=False), atol=1e-12)


def test_rotation_error_examples(identity):
    assert rotation_error(identity, identity) == 0.0
    assert math.isclose(rotation_error(RigidTransform(rz(90), np.zeros(3)), identity), math.pi / 2,
                        abs_tol=1e-12)
    assert math.isclose(rotation_error(RigidTransform(rz(180), np.zeros(3)), identity), math.pi,
                        abs_tol=1e-12)


def test_translation_error_examples(identity):
    assert translation_error(identity, identity) == 0.0
    assert translation_error(RigidTransform(np.eye(3), np.array([1.0, 0, 0])), identity) == 1.0
    assert translation_error(RigidTransform(np.eye(3), np.array([3.0, 4, 0])), identity) == 5.0


@settings(max_examples=60, deadline=None)
@given(angle=st.floats(0.0, math.pi), ax=st.tuples(*[st.floats(-1, 1)] * 3))
def test_rotation_error_matches_angle(angle, ax):
    axis = np.array(ax)
    if np.linalg.norm(axis) < 1e-3:
        axis = np.array([1.0, 0, 0])
    r = RigidTransform(axis_angle(axis, angle), np.zeros(3))
    assert math.isclose(rotation_error(r, RigidTransform.identity()), angle, abs_tol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(4, 30))
def test_kabsch_recovers_random_pose(seed, n):
    rng = np.random.Generator(np.random.PCG64(seed))
    c, pose = inlier_scene(rng, n)
    t = weighted_kabsch(c, rng.uniform(0.1, 2.0, n))
    assert rotation_error(t, pose) < 1e-9 and translation_error(t, pose) < 1e-9


def test_residuals_vectorized_matches_scalar(rng):
    c, pose = inlier_scene(rng, 10, noise=0.1)
    vec = residuals(pose, c)
    assert np.allclose(vec, [residual(pose, ci) for ci in c])


def test_correspondences_views(rng):
    c, _ = inlier_scene(rng, 4)
    assert len(c) == 4 and c.coords.shape == (4, 6)
    assert c[1].gt_label is True
    sub = c.subset([0, 2])
    assert np.array_equal(sub.src, c.src[[0, 2]])
    back = Correspondences.from_list(list(c))
    assert np.array_equal(back.coords, c.coords)
