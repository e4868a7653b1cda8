import numpy as np
import pytest

from contrags.sh import COLOR_OFFSET, basis, basis_grad, eval_sh, num_bases


def test_degree0_offset_convention():
    rgb = eval_sh(np.zeros(3), np.array([0.0, 0.0, 1.0]), degree=0)
    assert np.allclose(rgb, 0.5)


def test_degree0_dc_constant():
    row = np.array([0.7, -0.2, 0.1])
    rgb = eval_sh(row, np.array([1.0, 0.0, 0.0]), degree=0)
    expected = np.maximum(0.2820948 * row + COLOR_OFFSET, 0.0)
    assert np.allclose(rgb, expected, atol=1e-7)


def test_color_clamped_below_at_zero():
    row = np.array([-10.0, 0.0, 0.0])
    rgb = eval_sh(row, np.array([0.0, 0.0, 1.0]), degree=0)
    assert rgb[0] == 0.0


def test_rejects_non_unit_direction():
    with pytest.raises(ValueError):
        eval_sh(np.zeros(3), np.array([0.0, 0.0, 2.0]), degree=0)


def test_same_direction_same_output():
    rng = np.random.default_rng(0)
    row = rng.normal(size=num_bases(2) * 3)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    assert np.array_equal(eval_sh(row, d, 2), eval_sh(row, d, 2))


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_basis_grad_matches_fd(degree):
    rng = np.random.default_rng(degree)
    h = 1e-6
    for _ in range(5):
        d = rng.normal(size=3)
        g = basis_grad(d, degree)
        for a in range(3):
            dp = d.copy(); dp[a] += h
            dm = d.copy(); dm[a] -= h
            fd = (basis(dp, degree) - basis(dm, degree)) / (2 * h)
            assert np.allclose(g[:, a], fd, atol=1e-6)
