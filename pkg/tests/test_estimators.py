import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from densformer.estimators import entropy, entropy_from_log, fisher_information, gaussian_entropy, relative_fisher
from densformer.gmm import GmmSpec


def test_standard_normal_entropy(rng):
    X = rng.normal(size=20_000)
    est = entropy(norm.pdf(X))
    assert abs(est.zscore(0.5 * np.log(2 * np.pi * np.e))) < 3
    assert 0.5 * np.log(2 * np.pi * np.e) == pytest.approx(1.41894, abs=1e-5)


def test_uniform_entropy():
    est = entropy(np.full(10, 0.25))
    assert est.value == -np.log(0.25) and est.stderr == 0.0


def test_ten_dimensional_gaussian_entropy(rng):
    B = rng.normal(size=(10, 10))
    cov = B @ B.T / 10 + 0.5 * np.eye(10)
    mvn = multivariate_normal(rng.normal(size=10), cov)
    X = mvn.rvs(4096, random_state=3)
    est = entropy_from_log(mvn.logpdf(X))
    assert abs(est.zscore(gaussian_entropy(cov))) < 3


def test_entropy_rejects_nonpositive():
    with pytest.raises(ValueError):
        entropy([0.5, 0.0])


def test_entropy_permutation_and_shift(rng):
    X = rng.normal(size=(500, 2))
    mvn = multivariate_normal(np.zeros(2), np.eye(2))
    shifted = multivariate_normal(np.array([4.0, -1.0]), np.eye(2))
    a = entropy(mvn.pdf(X))
    assert entropy(mvn.pdf(X[rng.permutation(500)])).value == pytest.approx(a.value, abs=1e-13)
    assert entropy(shifted.pdf(X + [4.0, -1.0])).value == pytest.approx(a.value, abs=1e-12)


def test_fisher_of_scaled_gaussian(rng):
    sigma, d = 0.7, 3
    X = rng.normal(size=(8000, d)) * sigma
    est = fisher_information(-X / sigma**2)
    assert abs(est.zscore(d / sigma**2)) < 3


def test_fisher_of_zero_scores():
    assert fisher_information(np.zeros((5, 2))).value == 0.0


def test_fisher_trimodal_against_quadrature():
    spec = GmmSpec([0.3, 0.5, 0.2], [[-3.0], [0.0], [2.5]], [[0.5], [1.0], [0.3]])
    G = np.linspace(-12, 12, 200_001)[:, None]
    quad = float(((spec.score(G)[:, 0] ** 2) * spec.density(G)).sum() * (G[1, 0] - G[0, 0]))
    X = spec.sample(2**14, np.random.default_rng(0))
    est = fisher_information(spec.score(X))
    assert est.value == pytest.approx(quad, rel=0.02)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_fisher_rotation_invariant(seed, d):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(30, d))
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    assert fisher_information(S @ Q).value == pytest.approx(fisher_information(S).value, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_relative_fisher_symmetric(seed, d):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(20, d)), rng.normal(size=(20, d))
    assert relative_fisher(a, b).value == pytest.approx(relative_fisher(b, a).value, rel=1e-14)
    assert relative_fisher(a, a).value == 0.0
    assert relative_fisher(a, b).value > 0.0


def test_relative_fisher_mean_shift(rng):
    m = np.array([0.5, -1.0, 0.25])
    X = rng.normal(size=(4096, 3))
    est = relative_fisher(-(X - m), -X)
    assert est.value == pytest.approx(m @ m, rel=1e-12)


def test_relative_fisher_variance_change(rng):
    sigma = 1.5
    X = rng.normal(size=50_000)
    est = relative_fisher(-X / sigma**2, -X)
    assert abs(est.zscore((1 / sigma**2 - 1) ** 2)) < 3


def test_relative_fisher_shape_mismatch():
    with pytest.raises(ValueError):
        relative_fisher(np.zeros((3, 2)), np.zeros((3, 1)))
