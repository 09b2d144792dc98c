"""Cross-entropy, joint cross-entropy over transformed copies, the three-way
Jensen-Shannon consistency term, their weighted combination, and the linear
ramp for the consistency weight.

Every loss accepts a single probability vector of shape (K,) or a batch of
shape (B, K), as a :class:`~audiocl.autograd.Tensor` or anything array-like,
and returns a scalar Tensor (the batch mean) that can be backpropagated.
Natural logarithms throughout; probabilities are clamped at ``EPS`` inside
logs so one-hot predictions stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, as_tensor

EPS = 1e-12


def _batched(p) -> Tensor:
    p = as_tensor(p)
    if p.ndim == 1:
        return p.reshape(1, -1)
    if p.ndim != 2:
        raise ValueError(f"expected probabilities of shape (K,) or (B, K), got {p.shape}")
    return p


def cross_entropy(p, y, reduction: str = "mean") -> Tensor:
    """-ln(max(p[y], EPS)) per row."""
    p = _batched(p)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    B, K = p.shape
    if y.shape != (B,):
        raise ValueError(f"{y.size} labels for {B} probability rows")
    if np.any(y < 0) or np.any(y >= K):
        raise IndexError(f"class index out of range for K={K}: {y[(y < 0) | (y >= K)]}")
    per = -p[np.arange(B), y].clamp_min(EPS).log()
    return _reduce(per, reduction)


def joint_ce(ps, y, reduction: str = "mean") -> Tensor:
    """Mean cross-entropy over an instance and its transformed copies."""
    ps = list(ps)
    if not ps:
        raise ValueError("joint_ce needs at least one distribution")
    ps = [_batched(p) for p in ps]
    if any(p.shape != ps[0].shape for p in ps):
        raise ValueError(f"shape mismatch among members: {[p.shape for p in ps]}")
    total = cross_entropy(ps[0], y, "none")
    for p in ps[1:]:
        total = total + cross_entropy(p, y, "none")
    return _reduce(total * (1.0 / len(ps)), reduction)


def _kl_to(p: Tensor, log_m: Tensor) -> Tensor:
    # rows with p_i = 0 contribute 0 through the leading factor
    return (p * (p.clamp_min(EPS).log() - log_m)).sum(axis=1)


def js_divergence(p0, p1, p2, reduction: str = "mean") -> Tensor:
    """Three-way JSD: mean of KL(p_i || M) with M the average of the three.

    Bounded by ln 3; gradients flow through every argument, including
    through the mixture.
    """
    p0, p1, p2 = _batched(p0), _batched(p1), _batched(p2)
    if not (p0.shape == p1.shape == p2.shape):
        raise ValueError(f"shape mismatch: {p0.shape}, {p1.shape}, {p2.shape}")
    log_m = ((p0 + p1 + p2) * (1.0 / 3.0)).clamp_min(EPS).log()
    per = (_kl_to(p0, log_m) + _kl_to(p1, log_m) + _kl_to(p2, log_m)) * (1.0 / 3.0)
    return _reduce(per, reduction)


def combined_loss(p0, p1, p2, y, lam: float, reduction: str = "mean") -> Tensor:
    """joint_ce over the triplet plus ``lam`` times the JSD consistency term."""
    if lam < 0:
        raise ValueError("consistency weight must be nonnegative")
    ce = joint_ce([p0, p1, p2], y, "none")
    return _reduce(ce + js_divergence(p0, p1, p2, "none") * lam, reduction)


def _reduce(per: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return per.mean()
    if reduction == "sum":
        return per.sum()
    if reduction == "none":
        return per
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass(frozen=True)
class LambdaSchedule:
    ramp_epochs: int = 10
    lambda_max: float = 5.0

    def __post_init__(self):
        if self.ramp_epochs < 0 or self.lambda_max < 0:
            raise ValueError("ramp_epochs and lambda_max must be nonnegative")


def lambda_at(schedule: LambdaSchedule, epoch: int) -> float:
    """lambda_max * min(epoch / ramp_epochs, 1), epochs counted from 0."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if schedule.ramp_epochs == 0:
        return float(schedule.lambda_max)
    return schedule.lambda_max * min(epoch / schedule.ramp_epochs, 1.0)
