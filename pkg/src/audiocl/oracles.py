"""Slow reference computations used to cross-check the fast paths.

Everything here is written directly from definitions with explicit loops or
dense matrices, and deliberately avoids the FFT, the autodiff engine and the
vectorized loss code it is meant to check.
"""

from __future__ import annotations

import math

import numpy as np


def naive_dft(x) -> np.ndarray:
    """Full O(n^2) DFT: X[k] = sum_n x[n] exp(-2j pi k n / N)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.size
    idx = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(idx, idx) / n) @ x


def naive_stft(x, window: int, hop: int) -> np.ndarray:
    """One-sided Hann-windowed STFT built frame by frame from :func:`naive_dft`."""
    x = np.asarray(x, dtype=np.float64)
    win = np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / window) for i in range(window)])
    cols = []
    start = 0
    while start + window <= x.size:
        cols.append(naive_dft(x[start:start + window] * win)[: window // 2 + 1])
        start += hop
    return np.array(cols).T


def naive_log_mel(x, fb: np.ndarray, window: int, hop: int, floor: float) -> np.ndarray:
    power = np.abs(naive_stft(x, window, hop)) ** 2
    return np.log(np.maximum(fb @ power, floor))


def naive_convolve(x, h) -> np.ndarray:
    """Full linear convolution by the double sum, length len(x) + len(h) - 1."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    out = np.zeros(x.size + h.size - 1)
    for j, hj in enumerate(h):
        if hj != 0.0:
            out[j:j + x.size] += hj * x
    return out


def jsd_bruteforce(p0, p1, p2, eps: float = 1e-12) -> float:
    """Three-way Jensen-Shannon divergence evaluated term by term in plain floats."""
    dists = [[float(v) for v in p] for p in (p0, p1, p2)]
    k = len(dists[0])
    mix = [(dists[0][i] + dists[1][i] + dists[2][i]) / 3.0 for i in range(k)]
    total = 0.0
    for p in dists:
        kl = 0.0
        for pi, mi in zip(p, mix):
            if pi > 0.0:
                kl += pi * (math.log(max(pi, eps)) - math.log(max(mi, eps)))
        total += kl
    return total / 3.0


def schroeder_rt60(h, sample_rate: int, lo_db: float = -5.0, hi_db: float = -35.0) -> float:
    """RT60 estimate in seconds from Schroeder backward integration.

    A least-squares line is fitted to the energy decay curve between
    ``lo_db`` and ``hi_db`` and extrapolated to -60 dB.
    """
    energy = np.asarray(h, dtype=np.float64) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    edc_db = 10.0 * np.log10(np.maximum(edc / edc[0], 1e-300))
    sel = np.flatnonzero((edc_db <= lo_db) & (edc_db >= hi_db))
    if sel.size < 2:
        raise ValueError("decay curve does not span the fitting range")
    t = sel / sample_rate
    slope, _ = np.polyfit(t, edc_db[sel], 1)
    return -60.0 / slope


def central_difference(f, x: np.ndarray, h: float = 1e-5, kink_rtol: float | None = None,
                       min_step: float = 1e-9, noise: float = 1e-8) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences; ``x`` is perturbed in place.

    For piecewise-smooth ``f`` (ReLU, max pooling) a stencil that straddles a
    kink gives a meaningless quotient. With ``kink_rtol`` set, entries whose
    forward and backward one-sided slopes disagree by more than ``kink_rtol``
    relative (and more than ``noise`` absolute, so round-off on vanishing
    gradients does not trigger) are probed again at a tenfold smaller step.
    If the gap shrinks about tenfold and the quotient moves by less than a
    tenth of ``kink_rtol`` it is curvature and the original quotient is kept. Otherwise the stencil straddles a kink and the
    step keeps shrinking (down to ``min_step``) until both slopes agree.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    base = f() if kink_rtol is not None else None

    def probe(i, step):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        right, left = (up - base) / step, (base - down) / step
        return (up - down) / (2 * step), abs(right - left), max(abs(right), abs(left))

    def agree(gap, scale):
        return gap <= max(kink_rtol * scale, noise)

    for i in range(flat.size):
        if kink_rtol is None:
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
            continue
        quotient, gap, scale = probe(i, h)
        gflat[i] = quotient
        if agree(gap, scale) or h / 10 < min_step:
            continue
        step = h / 10
        first = quotient
        quotient, new_gap, scale = probe(i, step)
        if new_gap <= 0.2 * gap and abs(quotient - first) <= max(0.1 * kink_rtol * scale, noise):
            continue  # curvature: the gap scales with the step and the quotient is stable
        while not agree(new_gap, scale) and step / 10 >= min_step:
            step /= 10
            quotient, new_gap, scale = probe(i, step)
        gflat[i] = quotient
    return grad


def grad_mismatch(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-entry relative error |a - n| / max(|a|, |n|, floor).

    The floor keeps gradients that vanish analytically (where the difference
    quotient returns pure round-off) from dividing by ~0.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
