import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import inlier_scene
from dscreg.bench import SceneSpec, generate_scene
from dscreg.geom import rotation_error
from dscreg.spectral import leading_eigenvector, top_fraction, traditional_sm


def random_sym(rng, k):
    a = rng.uniform(0, 1, (k, k))
    m = (a + a.T) / 2
    np.fill_diagonal(m, 0)
    return m


def test_exchange_matrix():
    r = leading_eigenvector(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert r.converged and not r.degenerate
    assert np.allclose(r.vector, [1 / math.sqrt(2)] * 2, atol=1e-12)


def test_zero_matrix_is_flagged():
    r = leading_eigenvector(np.zeros((3, 3)))
    assert r.degenerate
    assert np.allclose(r.vector, [1 / math.sqrt(3)] * 3)


def test_clique_concentration():
    m = np.zeros((6, 6))
    m[:4, :4] = 1
    np.fill_diagonal(m, 0)
    v = leading_eigenvector(m).vector
    assert v[:4].min() > v[4:].max()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(2, 12))
def test_agrees_with_dense_oracle(seed, k):
    m = random_sym(np.random.Generator(np.random.PCG64(seed)), k)
    r = leading_eigenvector(m, tol=1e-12, max_iter=10_000)
    w, vecs = np.linalg.eigh(m)
    ref = np.abs(vecs[:, -1])
    assert np.allclose(r.vector, ref, atol=1e-6)


@pytest.mark.parametrize("c", [1e-3, 1.0, 1e3])
def test_scale_invariance(rng, c):
    m = random_sym(rng, 9)
    assert np.allclose(leading_eigenvector(c * m).vector, leading_eigenvector(m).vector, atol=1e-12)


def test_unit_norm_and_nonnegative(rng):
    r = leading_eigenvector(random_sym(rng, 20))
    assert math.isclose(np.linalg.norm(r.vector), 1.0, abs_tol=1e-12)
    assert r.vector.min() >= 0
    assert 1 <= r.iterations <= 50


def test_top_fraction_ties_to_lower_index():
    assert list(np.flatnonzero(top_fraction(np.array([1.0, 2.0, 2.0, 0.5]), 0.5))) == [1, 2]
    assert list(np.flatnonzero(top_fraction(np.ones(4), 0.25))) == [0]


def test_sm_all_inliers(rng):
    c, pose = inlier_scene(rng, 50)
    labels, t = traditional_sm(c, 0.1)
    assert labels.sum() == 5 and c.labels[labels].all()
    assert rotation_error(t, pose) < 1e-6


def test_sm_keep_everything(rng):
    c, pose = inlier_scene(rng, 12)
    labels, t = traditional_sm(c, 0.1, keep_fraction=1.0)
    assert labels.all()
    assert rotation_error(t, pose) < 1e-9


def test_sm_selects_inliers_monte_carlo():
    good = 0
    for seed in range(100):
        scene = generate_scene(SceneSpec(n_corrs=200, outlier_ratio=0.7, seed=seed))
        labels, _ = traditional_sm(scene.corrs, 0.1)
        if scene.corrs.labels[labels].mean() >= 0.9:
            good += 1
    assert good >= 95
