"""Low-rank shift that absorbs residual-branch quantization error.

Starting from the truncated-SVD factors of the weight matrix, the pair
``(left, right)`` is tuned with Adam so that the quantization error of the
shifted point ``W + left @ right`` is itself as close as possible to the
shift, making the error absorbable by the additive branch.  The quantizer
is treated as locally constant when differentiating, so the gradients are
closed-form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, ShapeError
from .formats import FormatSpec, fake_quant
from .numerics import AdamState, adam_step, as_matrix, truncated_svd

__all__ = [
    "LowRankFactors",
    "AbsorbConfig",
    "init_factors",
    "absorption_loss",
    "absorption_grads",
    "optimize_factors",
]


@dataclass
class LowRankFactors:
    """A rank-``rank`` factor pair ``(left, right)``.

    The additive inference branch carries ``BRANCH_SIGN * left @ right``:
    the reconstruction is ``Q1(W - A) + A`` with ``A = -left @ right``.
    """

    left: np.ndarray
    right: np.ndarray
    rank: int

    BRANCH_SIGN = -1.0

    def __post_init__(self):
        if self.rank < 1:
            raise ParameterError(f"rank must be >= 1, got {self.rank}")
        if self.left.shape[1] != self.rank or self.right.shape[0] != self.rank:
            raise ShapeError(
                f"factor shapes {self.left.shape} x {self.right.shape} do not "
                f"carry rank {self.rank}"
            )

    def copy(self) -> "LowRankFactors":
        return LowRankFactors(self.left.copy(), self.right.copy(), self.rank)


@dataclass
class AbsorbConfig:
    """Optimizer settings for the absorption stage."""

    learning_rate: float
    steps: int
    quantizer: FormatSpec
    seed: int = 0
    keep_best: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate <= 0:
            raise ParameterError(
                f"learning rate must be positive, got {self.learning_rate}"
            )


def init_factors(w, rank: int) -> LowRankFactors:
    """SVD initialization: ``left = -L0`` and ``right = R0``.

    With this sign, ``W + left @ right`` equals the optimal rank-``rank``
    residual ``W - L0 @ R0``, the best possible starting point for the
    shifted quantization input.
    """
    l0, r0 = truncated_svd(w, rank)
    return LowRankFactors(-l0, r0, rank)


def _shift_error(w: np.ndarray, factors: LowRankFactors,
                 quantizer: FormatSpec) -> np.ndarray:
    shifted = w + factors.left @ factors.right
    return fake_quant(shifted, quantizer) - shifted


def absorption_loss(w, factors: LowRankFactors, quantizer: FormatSpec) -> float:
    """Mean squared quantization error of the shifted weight matrix."""
    w = as_matrix(w)
    err = _shift_error(w, factors, quantizer)
    return float(np.mean(np.square(err)))


def absorption_grads(w, factors: LowRankFactors,
                     quantizer: FormatSpec) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form loss gradients with the quantizer output held constant.

    With ``E = Q(W + LR) - W - LR`` and ``N = d * n`` entries, the
    gradients are ``(-2/N) E @ R.T`` and ``(-2/N) L.T @ E``.
    """
    w = as_matrix(w)
    err = _shift_error(w, factors, quantizer)
    coeff = -2.0 / err.size
    return coeff * (err @ factors.right.T), coeff * (factors.left.T @ err)


def optimize_factors(w, rank: int,
                     cfg: AbsorbConfig) -> tuple[LowRankFactors, list[float]]:
    """Run Adam on the factor pair and return (factors, loss trace).

    The trace holds one loss value per iterate, starting at the SVD
    initialization, so its length is ``cfg.steps + 1``.  With
    ``keep_best`` the lowest-loss iterate is returned; the trace always
    reflects the visited iterates.  Deterministic for fixed inputs.
    """
    w = as_matrix(w)
    factors = init_factors(w, rank)
    n_entries = w.size
    state_l = AdamState.for_param(factors.left.shape)
    state_r = AdamState.for_param(factors.right.shape)

    trace: list[float] = []
    best: LowRankFactors | None = None
    best_loss = np.inf
    current = factors

    def record(cand: LowRankFactors) -> np.ndarray:
        nonlocal best, best_loss
        with np.errstate(over="ignore"):
            shifted = w + cand.left @ cand.right
        if not np.all(np.isfinite(shifted)):
            raise NumericError(
                f"shifted weight became non-finite at step {len(trace)}",
                trace=trace,
                last_iterate=best if best is not None else factors,
            )
        err = fake_quant(shifted, cfg.quantizer) - shifted
        with np.errstate(over="ignore"):
            loss = float(np.mean(np.square(err)))
        if not np.isfinite(loss):
            raise NumericError(
                f"loss became non-finite at step {len(trace)}",
                trace=trace,
                last_iterate=best if best is not None else factors,
            )
        trace.append(loss)
        if loss < best_loss:
            best_loss = loss
            best = cand.copy()
        return err

    err = record(current)
    for _ in range(cfg.steps):
        coeff = -2.0 / n_entries
        grad_l = coeff * (err @ current.right.T)
        grad_r = coeff * (current.left.T @ err)
        new_left = adam_step(state_l, current.left, grad_l, cfg.learning_rate)
        new_right = adam_step(state_r, current.right, grad_r, cfg.learning_rate)
        if not (np.all(np.isfinite(new_left)) and np.all(np.isfinite(new_right))):
            raise NumericError(
                f"parameters became non-finite at step {len(trace)}",
                trace=trace,
                last_iterate=best if best is not None else factors,
            )
        current = LowRankFactors(new_left, new_right, rank)
        err = record(current)

    result = best if cfg.keep_best else current
    assert result is not None
    return result, trace
