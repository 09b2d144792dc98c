import math

import numpy as np
import pytest

from audiocl import oracles


class TestCentralDifference:
    def test_smooth_function(self):
        x = np.array([0.3, -1.2, 2.0])
        g = oracles.central_difference(lambda: float(np.sum(x ** 3)), x)
        np.testing.assert_allclose(g, 3 * x ** 2, rtol=1e-8)

    def test_restores_input(self):
        x = np.array([1.0, 2.0])
        oracles.central_difference(lambda: float(np.sum(np.sin(x))), x, kink_rtol=1e-3)
        np.testing.assert_array_equal(x, [1.0, 2.0])

    @pytest.mark.parametrize("offset", [3e-7, -3e-7, 4e-6, -8e-7])
    def test_kink_inside_the_stencil(self, offset):
        # relu(x - offset) evaluated at x = 0: the kink sits within the default step
        x = np.array([0.0])
        f = lambda: 0.7 * x[0] + 2.0 * max(x[0] - offset, 0.0)  # noqa: E731
        truth = 0.7 + (2.0 if offset < 0 else 0.0)
        plain = oracles.central_difference(f, x)[0]
        assert abs(plain - truth) > 0.1  # the plain quotient straddles the kink
        aware = oracles.central_difference(f, x, kink_rtol=1e-3)[0]
        assert aware == pytest.approx(truth, rel=1e-6)

    def test_curvature_keeps_the_original_step(self):
        x = np.array([1e-3])
        f = lambda: float(np.exp(50 * x[0]))  # noqa: E731
        g = oracles.central_difference(f, x, kink_rtol=1e-3)[0]
        assert g == pytest.approx(50 * math.exp(50e-3), rel=1e-7)

    def test_vanishing_gradient_stays_quiet(self):
        x = np.array([0.5])
        f = lambda: 1.5 + 0.0 * x[0]  # noqa: E731
        assert oracles.central_difference(f, x, kink_rtol=1e-3)[0] == 0.0


class TestOtherOracles:
    def test_grad_mismatch_floor(self):
        r = oracles.grad_mismatch(np.array([1e-18, 1.0]), np.array([-1e-18, 1.001]))
        assert r[0] < 1e-11 and r[1] == pytest.approx(0.001 / 1.001)

    def test_schroeder_on_exact_exponential(self):
        sr, rt60 = 8000, 0.5
        t = np.arange(int(sr * 0.8)) / sr
        h = 10 ** (-3 * t / rt60)  # amplitude falls 60 dB over rt60
        assert oracles.schroeder_rt60(h, sr) == pytest.approx(rt60, rel=0.02)

    def test_naive_convolve(self):
        np.testing.assert_array_equal(oracles.naive_convolve([1, 2, 3], [0, 1, 0.5]), [0, 1, 2.5, 4, 1.5])

    def test_jsd_bruteforce_bounds(self):
        e = np.eye(3)
        assert oracles.jsd_bruteforce(e[0], e[1], e[2]) == pytest.approx(math.log(3), abs=1e-15)
        assert oracles.jsd_bruteforce([0.2, 0.8], [0.2, 0.8], [0.2, 0.8]) == pytest.approx(0.0, abs=1e-15)

    def test_naive_dft_matches_definition(self):
        x = np.array([1.0, 0.0, -1.0, 0.0])
        np.testing.assert_allclose(oracles.naive_dft(x), [0, 2, 0, 2], atol=1e-12)
