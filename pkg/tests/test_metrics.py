import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnedit.errors import ConfigError, NumericError
from attnedit.metrics import frechet_distance, kl_divergence, lsd, region_preservation


def test_lsd_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 1, (32, 64))
    b = rng.uniform(0, 1, (32, 64))
    assert lsd(a, a) == 0.0
    assert lsd(a, b) == pytest.approx(lsd(b, a))
    assert lsd(a, b) > 0


def test_lsd_factor_ten_closed_form():
    rng = np.random.default_rng(1)
    b = rng.uniform(0.5, 1.0, (32, 64))
    assert lsd(10 * b, b) == pytest.approx(1.0, abs=1e-6)


def test_lsd_shape_mismatch():
    with pytest.raises(ConfigError):
        lsd(np.zeros((2, 3)), np.zeros((3, 2)))


def test_kl_identity_and_closed_form():
    p = np.array([0.2, 0.3, 0.5])
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-6)
    assert kl_divergence(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == \
        pytest.approx(np.log(2), abs=1e-6)


def test_kl_nonnegative_on_random_simplex_pairs():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        p = rng.dirichlet(np.ones(5))
        q = rng.dirichlet(np.ones(5))
        assert kl_divergence(p, q) >= -1e-12


def test_kl_asymmetric():
    p = np.array([0.9, 0.1])
    q = np.array([0.5, 0.5])
    assert kl_divergence(p, q) != pytest.approx(kl_divergence(q, p), abs=1e-6)


def test_frechet_identity_zero():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((40, 8))
    assert frechet_distance(f, f) == pytest.approx(0.0, abs=1e-8)


def test_frechet_1d_gaussian_closed_form():
    rng = np.random.default_rng(4)
    a = rng.normal(0.0, 1.0, (5000, 1))
    b = rng.normal(3.0, 2.0, (5000, 1))
    expected = (a.mean() - b.mean()) ** 2 + (a.std(ddof=1) - b.std(ddof=1)) ** 2
    assert frechet_distance(a, b) == pytest.approx(float(expected), abs=1e-8)


def test_frechet_mean_term_only():
    rng = np.random.default_rng(5)
    base = rng.standard_normal((2000, 2))
    a = base
    b = base + np.array([3.0, 4.0])
    assert frechet_distance(a, b) == pytest.approx(25.0, abs=1e-8)


def test_frechet_symmetry_and_sample_requirement():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((30, 8))
    b = rng.standard_normal((30, 8)) + 0.5
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-9)
    with pytest.raises(ConfigError):
        frechet_distance(a[:8], b)


def test_region_preservation_basics():
    rng = np.random.default_rng(7)
    src = rng.uniform(0, 1, (32, 64))
    mask = np.zeros((32, 64), dtype=bool)
    mask[:, :32] = True
    edited = src.copy()
    edited[:, 32:] += 5.0  # edit strictly outside the mask
    assert region_preservation(src, edited, mask) == 0.0
    all_true = np.ones((32, 64), dtype=bool)
    other = rng.uniform(0, 1, (32, 64))
    assert region_preservation(src, other, all_true) == pytest.approx(
        lsd(src, other), rel=1e-9)
    with pytest.raises(ConfigError):
        region_preservation(src, other, np.zeros((32, 64), dtype=bool))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_metric_nonnegativity(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 2, (8, 8))
    b = rng.uniform(0, 2, (8, 8))
    assert lsd(a, b) >= 0.0
    p = rng.dirichlet(np.ones(4))
    q = rng.dirichlet(np.ones(4))
    assert kl_divergence(p, q) >= -1e-12
