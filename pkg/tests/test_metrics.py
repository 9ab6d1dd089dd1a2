import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from flrsp.metrics import SsimParams, accuracy, ssim


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([1, 0, 2, 2], [1, 0, 2, 1]) == 0.75


def test_accuracy_errors():
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1, 2], [1])


def test_accuracy_permutation_invariant():
    rng = np.random.default_rng(0)
    pred, lab = rng.integers(0, 3, 50), rng.integers(0, 3, 50)
    perm = rng.permutation(50)
    assert accuracy(pred, lab) == accuracy(pred[perm], lab[perm])


def test_ssim_hand_example():
    # mu = (0.5, 0), var = (0.25, 0), cov = 0
    expected = (0 + 1e-4) * (0 + 9e-4) / ((0.25 + 1e-4) * (0.25 + 9e-4))
    value = ssim([0, 0, 1, 1], [0, 0, 0, 0])
    assert value == pytest.approx(expected, rel=1e-12)
    assert value == pytest.approx(1.43e-6, rel=5e-3)


def test_ssim_identical_is_one():
    x = np.random.default_rng(1).uniform(size=(1, 8, 8))
    assert ssim(x, x) == 1.0


def test_ssim_population_statistics():
    a = np.array([0.1, 0.4, 0.8])
    b = np.array([0.3, 0.2, 0.9])
    p = SsimParams()
    cov = np.cov(a, b, bias=True)
    expected = ((2 * a.mean() * b.mean() + p.C1) * (2 * cov[0, 1] + p.C2)
                / ((a.mean() ** 2 + b.mean() ** 2 + p.C1) * (cov[0, 0] + cov[1, 1] + p.C2)))
    assert ssim(a, b) == pytest.approx(expected, rel=1e-13)


def test_ssim_channels_averaged():
    rng = np.random.default_rng(2)
    x, y = rng.uniform(size=(3, 4, 4)), rng.uniform(size=(3, 4, 4))
    assert ssim(x, y) == pytest.approx(np.mean([ssim(x[c].ravel(), y[c].ravel()) for c in range(3)]))


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros(4), np.zeros(5))
    with pytest.raises(ValueError):
        ssim([0, np.nan], [0, 1])
    with pytest.raises(ValueError):
        SsimParams(C1=0)


def test_ssim_params_for_range():
    p = SsimParams.for_range(1.0)
    assert (p.C1, p.C2) == pytest.approx((1e-4, 9e-4))
    assert SsimParams.for_range(255).C1 == pytest.approx(2.55**2)


pairs = arrays(np.float64, 16, elements=st.floats(0, 1))


@settings(max_examples=100, deadline=None)
@given(pairs, pairs)
def test_ssim_symmetric_and_bounded(x, y):
    assert ssim(x, y) == ssim(y, x)
    assert abs(ssim(x, y)) <= 1.0 + 1e-12
