"""Embedded oracle suites run by ``audiocl selftest``.

Each suite pits a fast code path against an independent slow reference
from :mod:`audiocl.oracles` and reports pass/fail with the worst error.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses, oracles
from .augment import apply_reverb
from .autograd import no_grad
from .nn import ModelConfig, build_model
from .signal import Waveform, stft

FAULTS = ("gradient", "dft", "convolution", "jsd")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name:<12} worst error {self.worst:.3e} "
                f"(tolerance {self.tolerance:.0e}, {self.seconds:.1f} s)")


def _rel(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def suite_dft(fault=None) -> float:
    rng = np.random.default_rng(11)
    worst = 0.0
    for n, window, hop in ((2048, 1024, 600), (1500, 256, 100), (4096, 512, 512)):
        x = rng.standard_normal(n)
        fast = stft(x, window, hop).bins
        if fault == "dft":
            fast = fast * (1 + 1e-3)
        worst = max(worst, _rel(fast, oracles.naive_stft(x, window, hop)))
    return worst


def suite_convolution(fault=None) -> float:
    rng = np.random.default_rng(12)
    worst = 0.0
    for n, m in ((1000, 200), (300, 299), (64, 1)):
        x, h = rng.standard_normal(n), rng.standard_normal(m)
        ref = oracles.naive_convolve(x, h)[:n]
        ref *= np.max(np.abs(x)) / np.max(np.abs(ref))
        fast = apply_reverb(Waveform(x, 8000), Waveform(h, 8000)).samples
        if fault == "convolution":
            fast = np.roll(fast, 1)
        worst = max(worst, _rel(fast, ref))
    return worst


def suite_jsd(fault=None) -> float:
    rng = np.random.default_rng(13)
    worst = 0.0
    for k in (2, 5, 50):
        p = rng.dirichlet(np.ones(k), size=(200, 3))
        fast = losses.js_divergence(p[:, 0], p[:, 1], p[:, 2], reduction="none").data
        if fault == "jsd":
            fast = fast * (1 + 1e-6)
        ref = np.array([oracles.jsd_bruteforce(*row) for row in p])
        worst = max(worst, float(np.max(np.abs(fast - ref))))
    return worst


def suite_gradient(fault=None) -> float:
    """Finite-difference check of the combined loss through a tiny CNN."""
    rng = np.random.default_rng(14)
    model = build_model(ModelConfig(channels=(2, 3), n_mels=4, n_classes=3, seed=5))
    x = rng.standard_normal((6, 1, 4, 4))
    y = np.array([0, 2])

    def loss():
        p = model(x)
        return losses.combined_loss(p[:2], p[2:4], p[4:], y, 5.0)

    model.zero_grad()
    loss().backward()
    worst = 0.0
    for p in model.parameters():
        analytic = p.grad.copy()
        if fault == "gradient":
            analytic *= 1.01
        with no_grad():
            numeric = oracles.central_difference(lambda: loss().item(), p.data, kink_rtol=1e-3)
        worst = max(worst, float(np.max(oracles.grad_mismatch(analytic, numeric))))
    return worst


SUITES = (
    ("dft", suite_dft, 1e-6),
    ("convolution", suite_convolution, 1e-6),
    ("jsd", suite_jsd, 1e-12),
    ("gradient", suite_gradient, 1e-3),
)


def run_all(fault: str | None = None) -> list[SuiteResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; expected one of {FAULTS}")
    results = []
    for name, fn, tol in SUITES:
        t0 = time.perf_counter()
        worst = fn(fault)
        results.append(SuiteResult(name, bool(worst <= tol), worst, tol, time.perf_counter() - t0))
    return results
