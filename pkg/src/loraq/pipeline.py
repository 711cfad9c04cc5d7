"""Per-layer assembly: smoothing, factor optimization, rotation, and the
dual-quantized bundle, plus reconstruction, forward evaluation and error
reporting with the matmul-error upper bound.

The assembled bundle holds a residual branch (the weight minus the
quantized low-rank product, encoded with ``q1``) and a low-rank branch
(the fused factor pair encoded with ``q2``).  Reconstruction is
``dequantize(residual) + dequantize(left) @ dequantize(right)``.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .absorber import AbsorbConfig, init_factors, optimize_factors
from .errors import BudgetError, NumericError, ParameterError, ShapeError
from .formats import (
    FormatSpec,
    MinifloatCodec,
    QuantizedTensor,
    dequantize,
    fake_quant,
    quantize_blockwise,
)
from .numerics import as_matrix, frobenius_norm
from .rotation import RotationConfig, fuse_rotation, optimize_rotation
from .smoothing import (
    ChannelStats,
    default_migration_grid,
    grid_search_migration,
    smoothing_vector,
)

__all__ = [
    "BudgetPolicy",
    "BundleMeta",
    "LayerBundle",
    "ErrorReport",
    "RankCapWarning",
    "rank_for_budget",
    "default_absorb_lr",
    "default_rotation_lr",
    "DEFAULT_ABSORB_STEPS",
    "DEFAULT_ROTATION_STEPS",
    "assemble_layer",
    "reconstruct_weight",
    "forward",
    "error_report",
    "assemble_batch",
]

DEFAULT_ABSORB_STEPS = 1000
DEFAULT_ROTATION_STEPS = 500

# stats-only smoothing has no search signal; use balanced migration
_STATS_ONLY_MIGRATION = (0.5, 0.5)


class RankCapWarning(UserWarning):
    """The budget-derived rank exceeded the matrix dimensions."""


@dataclass(frozen=True)
class BudgetPolicy:
    """Bit budget per channel for the low-rank branch."""

    budget_bits_per_channel: int
    lowrank_bits: int

    def __post_init__(self):
        if self.budget_bits_per_channel < 1:
            raise BudgetError(
                f"budget must be positive, got {self.budget_bits_per_channel}"
            )
        if self.lowrank_bits not in (4, 6, 8, 16):
            raise ParameterError(
                f"lowrank bits must be one of 4/6/8/16, got {self.lowrank_bits}"
            )


def rank_for_budget(policy: BudgetPolicy) -> int:
    """Largest rank whose payload fits the budget: floor(budget / bits)."""
    rank = policy.budget_bits_per_channel // policy.lowrank_bits
    if rank < 1:
        raise BudgetError(
            f"budget {policy.budget_bits_per_channel} bits/channel cannot fit "
            f"a single {policy.lowrank_bits}-bit rank"
        )
    return rank


def default_absorb_lr(spec: FormatSpec) -> float:
    """1e-3 for minifloat element formats, 1e-4 for integer ones."""
    return 1e-3 if isinstance(spec.codec, MinifloatCodec) else 1e-4


def default_rotation_lr(spec: FormatSpec) -> float:
    """5e-1 for the fp16-scaled SINT family, 1e-1 for MX formats."""
    return 5e-1 if spec.scale_kind == "fp16" else 1e-1


@dataclass
class BundleMeta:
    """Everything needed to reproduce and account for a bundle."""

    q1: FormatSpec
    q2: FormatSpec
    shape: tuple[int, int]
    rank: int
    rank_requested: int
    budget_bits_per_channel: int | None
    optimized_lr: bool
    rotations: bool
    seed: int
    absorb: dict
    rotation: dict | None
    smoothing: dict | None
    lowrank_q2_mse: float
    act_format: str | None = None
    lowrank_act_format: str | None = None

    def budget_accounting(self) -> dict:
        """Payload and scale-overhead bits of the low-rank branch."""
        d, n = self.shape
        blocks_left = -(-self.rank // self.q2.block_size)
        blocks_right = -(-n // self.q2.block_size)
        if self.q2.is_passthrough:
            blocks_left = blocks_right = 0
        return {
            "payload_bits_per_channel": self.rank * self.q2.bits_per_value,
            "budget_bits_per_channel": self.budget_bits_per_channel,
            "scale_bits_per_channel_left": blocks_left * self.q2.scale_bits,
            "total_scale_bits": (d * blocks_left + self.rank * blocks_right)
            * self.q2.scale_bits,
        }

    def to_dict(self) -> dict:
        return {
            "q1": self.q1.to_dict(),
            "q2": self.q2.to_dict(),
            "shape": list(self.shape),
            "rank": self.rank,
            "rank_requested": self.rank_requested,
            "budget_bits_per_channel": self.budget_bits_per_channel,
            "optimized_lr": self.optimized_lr,
            "rotations": self.rotations,
            "seed": self.seed,
            "absorb": self.absorb,
            "rotation": self.rotation,
            "smoothing": self.smoothing,
            "lowrank_q2_mse": self.lowrank_q2_mse,
            "act_format": self.act_format,
            "lowrank_act_format": self.lowrank_act_format,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BundleMeta":
        return cls(
            q1=FormatSpec.from_dict(d["q1"]),
            q2=FormatSpec.from_dict(d["q2"]),
            shape=(int(d["shape"][0]), int(d["shape"][1])),
            rank=int(d["rank"]),
            rank_requested=int(d["rank_requested"]),
            budget_bits_per_channel=(
                None if d["budget_bits_per_channel"] is None
                else int(d["budget_bits_per_channel"])
            ),
            optimized_lr=bool(d["optimized_lr"]),
            rotations=bool(d["rotations"]),
            seed=int(d["seed"]),
            absorb=dict(d["absorb"]),
            rotation=None if d["rotation"] is None else dict(d["rotation"]),
            smoothing=None if d["smoothing"] is None else dict(d["smoothing"]),
            lowrank_q2_mse=float(d["lowrank_q2_mse"]),
            act_format=d.get("act_format"),
            lowrank_act_format=d.get("lowrank_act_format"),
        )


@dataclass
class LayerBundle:
    """A fully assembled quantized linear layer."""

    residual: QuantizedTensor
    lowrank_left: QuantizedTensor
    lowrank_right: QuantizedTensor
    gamma: np.ndarray | None
    meta: BundleMeta

    def __post_init__(self):
        d, n = self.meta.shape
        rank = self.meta.rank
        if self.residual.shape != (d, n):
            raise ShapeError(f"residual shape {self.residual.shape} != {(d, n)}")
        if self.lowrank_left.shape != (d, rank):
            raise ShapeError(
                f"left factor shape {self.lowrank_left.shape} != {(d, rank)}"
            )
        if self.lowrank_right.shape != (rank, n):
            raise ShapeError(
                f"right factor shape {self.lowrank_right.shape} != {(rank, n)}"
            )
        if self.gamma is not None and self.gamma.shape != (d,):
            raise ShapeError(f"gamma shape {self.gamma.shape} != ({d},)")

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayerBundle):
            return NotImplemented
        gammas_equal = (
            (self.gamma is None and other.gamma is None)
            or (
                self.gamma is not None
                and other.gamma is not None
                and np.array_equal(self.gamma, other.gamma)
            )
        )
        return (
            self.residual == other.residual
            and self.lowrank_left == other.lowrank_left
            and self.lowrank_right == other.lowrank_right
            and gammas_equal
            and self.meta.to_dict() == other.meta.to_dict()
        )


@dataclass
class ErrorReport:
    """Reconstruction and matmul error figures for one bundle.

    ``weight_err`` is measured in the original coordinates (de-smoothed);
    ``weight_err_smoothed``, ``matmul_err`` and ``bound_rhs`` live in the
    coordinates the quantizers acted on, which is where the upper bound
    ``matmul_err <= bound_rhs`` is guaranteed.
    """

    weight_err: float
    weight_err_rel: float
    weight_err_smoothed: float
    matmul_err: float
    matmul_err_rel: float
    bound_rhs: float
    residual_mse: float
    lowrank_q2_mse: float

    def to_dict(self) -> dict:
        return {
            "weight_err": self.weight_err,
            "weight_err_rel": self.weight_err_rel,
            "weight_err_smoothed": self.weight_err_smoothed,
            "matmul_err": self.matmul_err,
            "matmul_err_rel": self.matmul_err_rel,
            "bound_rhs": self.bound_rhs,
            "residual_mse": self.residual_mse,
            "lowrank_q2_mse": self.lowrank_q2_mse,
        }


def _trace_summary(trace: list[float], steps: int, lr: float) -> dict:
    return {
        "steps": steps,
        "learning_rate": lr,
        "init_loss": trace[0],
        "best_loss": min(trace),
        "final_loss": trace[-1],
    }


def assemble_layer(
    w,
    q1: FormatSpec,
    q2: FormatSpec,
    *,
    budget: int | None = None,
    rank: int | None = None,
    optimized_lr: bool = True,
    rotations: bool = True,
    calibration=None,
    seed: int = 0,
    absorb_steps: int | None = None,
    absorb_lr: float | None = None,
    rotation_steps: int | None = None,
    rotation_lr: float | None = None,
    smoothing_grid=None,
    smoothing_rank: int | None = None,
    keep_best: bool = True,
) -> LayerBundle:
    """Run the full per-weight pipeline and return the packed bundle.

    Stages: optional smoothing from calibration data, SVD factor
    initialization, optional absorption optimization against ``q1``,
    optional rotation optimization against ``q2``, then dual quantization
    of the fused factors and of the recomputed residual.  Exactly one of
    ``budget`` (bits per channel) and ``rank`` must be given; a rank larger
    than the matrix dimensions is capped with a warning.  Deterministic
    for fixed inputs and seed.
    """
    w = as_matrix(w, "weight")
    d, n = w.shape
    if (budget is None) == (rank is None):
        raise ParameterError("exactly one of budget and rank must be given")
    if rank is not None:
        if rank < 1:
            raise ParameterError(f"rank must be >= 1, got {rank}")
        requested = rank
    else:
        requested = rank_for_budget(BudgetPolicy(budget, q2.bits_per_value))
    effective_rank = min(requested, d, n)
    if effective_rank < requested:
        warnings.warn(
            f"rank {requested} exceeds matrix dimensions {d}x{n}; "
            f"capped to {effective_rank}",
            RankCapWarning,
            stacklevel=2,
        )

    gamma = None
    smoothing_meta = None
    work = w
    if calibration is not None:
        if isinstance(calibration, ChannelStats):
            alpha, beta = _STATS_ONLY_MIGRATION
            gamma = smoothing_vector(calibration, w, alpha, beta)
            smoothing_meta = {
                "alpha_mig": alpha,
                "beta_mig": beta,
                "search_score": None,
                "source": "stats",
            }
        else:
            grid = smoothing_grid if smoothing_grid is not None else default_migration_grid()
            found = grid_search_migration(
                calibration, w, grid,
                smoothing_rank if smoothing_rank is not None else effective_rank,
                q1,
            )
            gamma = found.gamma
            smoothing_meta = {
                "alpha_mig": found.alpha_mig,
                "beta_mig": found.beta_mig,
                "search_score": found.search_score,
                "source": "grid-search",
            }
        work = gamma[:, None] * w

    a_steps = DEFAULT_ABSORB_STEPS if absorb_steps is None else absorb_steps
    a_lr = default_absorb_lr(q1) if absorb_lr is None else absorb_lr
    r_steps = DEFAULT_ROTATION_STEPS if rotation_steps is None else rotation_steps
    r_lr = default_rotation_lr(q2) if rotation_lr is None else rotation_lr

    if optimized_lr:
        cfg = AbsorbConfig(a_lr, a_steps, q1, seed=seed, keep_best=keep_best)
        factors, trace = optimize_factors(work, effective_rank, cfg)
        absorb_meta = _trace_summary(trace, a_steps, a_lr)
    else:
        factors = init_factors(work, effective_rank)
        shifted = work + factors.left @ factors.right
        init_loss = float(np.mean(np.square(fake_quant(shifted, q1) - shifted)))
        absorb_meta = _trace_summary([init_loss], 0, a_lr)

    branch_left = -factors.left
    branch_right = factors.right

    rotation_meta = None
    if rotations and not q2.is_passthrough:
        rcfg = RotationConfig(r_lr, r_steps, q2, seed=seed, keep_best=keep_best)
        omega, rtrace = optimize_rotation(branch_left, branch_right, rcfg)
        branch_left, branch_right = fuse_rotation(branch_left, branch_right, omega)
        rotation_meta = _trace_summary(rtrace, r_steps, r_lr)

    left_q = quantize_blockwise(branch_left, q2)
    right_q = quantize_blockwise(branch_right, q2)
    left_hat = dequantize(left_q)
    right_hat = dequantize(right_q)
    lowrank_q2_mse = float(
        np.mean(np.square(left_hat - branch_left))
        + np.mean(np.square(right_hat - branch_right))
    )
    residual = work - left_hat @ right_hat
    residual_q = quantize_blockwise(residual, q1)

    meta = BundleMeta(
        q1=q1,
        q2=q2,
        shape=(d, n),
        rank=effective_rank,
        rank_requested=requested,
        budget_bits_per_channel=budget,
        optimized_lr=optimized_lr,
        rotations=rotations,
        seed=seed,
        absorb=absorb_meta,
        rotation=rotation_meta,
        smoothing=smoothing_meta,
        lowrank_q2_mse=lowrank_q2_mse,
    )
    return LayerBundle(residual_q, left_q, right_q, gamma, meta)


def reconstruct_weight(bundle: LayerBundle, *, desmoothed: bool = False) -> np.ndarray:
    """Effective weight of a bundle: residual plus the low-rank product.

    With ``desmoothed`` the result is mapped back to the original
    (pre-smoothing) coordinates for comparison against the source weight.
    """
    w_hat = dequantize(bundle.residual) + (
        dequantize(bundle.lowrank_left) @ dequantize(bundle.lowrank_right)
    )
    if desmoothed and bundle.gamma is not None:
        w_hat = w_hat / bundle.gamma[:, None]
    return w_hat


def forward(
    bundle: LayerBundle,
    x,
    activation_format: FormatSpec | None = None,
    lowrank_activation_format: FormatSpec | None = None,
) -> np.ndarray:
    """Apply the quantized layer to activations.

    Activations are divided by the smoothing vector, optionally fake
    quantized (the low-rank branch may use its own format, defaulting to
    the shared one), and pushed through both branches.
    """
    x = as_matrix(x, "activations")
    d = bundle.meta.shape[0]
    if x.shape[1] != d:
        raise ShapeError(f"activations have {x.shape[1]} columns, layer expects {d}")
    x_s = x / bundle.gamma[None, :] if bundle.gamma is not None else x
    x_res = fake_quant(x_s, activation_format) if activation_format is not None else x_s
    lr_format = (
        lowrank_activation_format
        if lowrank_activation_format is not None
        else activation_format
    )
    if lr_format is activation_format:
        x_lr = x_res
    elif lr_format is not None:
        x_lr = fake_quant(x_s, lr_format)
    else:
        x_lr = x_s
    branch = dequantize(bundle.lowrank_left) @ dequantize(bundle.lowrank_right)
    return x_res @ dequantize(bundle.residual) + x_lr @ branch


def error_report(
    w,
    x,
    bundle: LayerBundle,
    activation_format: FormatSpec | None = None,
) -> ErrorReport:
    """Measure reconstruction and matmul error and check the upper bound.

    The bound states that the matmul error cannot exceed
    ``||X - Q(X)|| * ||W|| + ||Q(X)|| * ||W - What||``; a violation beyond
    float roundoff raises :class:`NumericError`.
    """
    w = as_matrix(w, "weight")
    x = as_matrix(x, "activations")
    d, n = bundle.meta.shape
    if w.shape != (d, n):
        raise ShapeError(f"weight shape {w.shape} != bundle shape {(d, n)}")
    if x.shape[1] != d:
        raise ShapeError(f"activations have {x.shape[1]} columns, layer expects {d}")

    gamma = bundle.gamma
    w_s = gamma[:, None] * w if gamma is not None else w
    x_s = x / gamma[None, :] if gamma is not None else x
    w_hat_s = reconstruct_weight(bundle)
    x_q = fake_quant(x_s, activation_format) if activation_format is not None else x_s

    exact = x_s @ w_s
    approx = x_q @ w_hat_s
    matmul_err = float(np.linalg.norm(exact - approx, "fro"))
    weight_err_smoothed = float(np.linalg.norm(w_s - w_hat_s, "fro"))
    act_err = float(np.linalg.norm(x_s - x_q, "fro"))
    w_norm = float(np.linalg.norm(w_s, "fro"))
    x_norm = float(np.linalg.norm(x_s, "fro"))
    bound_rhs = act_err * w_norm + float(np.linalg.norm(x_q, "fro")) * weight_err_smoothed

    slack = 1e-12 * (1.0 + x_norm * w_norm)
    if matmul_err > bound_rhs + slack:
        raise NumericError(
            f"matmul error {matmul_err:.6e} exceeds its upper bound "
            f"{bound_rhs:.6e}"
        )

    if gamma is not None:
        weight_err = float(np.linalg.norm(w - w_hat_s / gamma[:, None], "fro"))
    else:
        weight_err = weight_err_smoothed

    branch = dequantize(bundle.lowrank_left) @ dequantize(bundle.lowrank_right)
    residual_exact = w_s - branch
    residual_mse = float(
        np.mean(np.square(dequantize(bundle.residual) - residual_exact))
    )

    orig_w_norm = float(np.linalg.norm(w, "fro"))
    exact_norm = float(np.linalg.norm(exact, "fro"))
    return ErrorReport(
        weight_err=weight_err,
        weight_err_rel=weight_err / orig_w_norm if orig_w_norm else 0.0,
        weight_err_smoothed=weight_err_smoothed,
        matmul_err=matmul_err,
        matmul_err_rel=matmul_err / exact_norm if exact_norm else 0.0,
        bound_rhs=bound_rhs,
        residual_mse=residual_mse,
        lowrank_q2_mse=bundle.meta.lowrank_q2_mse,
    )


def _thread_count(threads: int | None) -> int:
    if threads is not None:
        return max(1, threads)
    env = os.environ.get("LORAQ_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ParameterError(f"LORAQ_THREADS must be an integer, got {env!r}")
    return 1


def assemble_batch(
    named_weights,
    q1: FormatSpec,
    q2: FormatSpec,
    *,
    threads: int | None = None,
    seed: int = 0,
    **kwargs,
) -> list[tuple[str, LayerBundle, ErrorReport]]:
    """Assemble many weights; results keep the input order.

    Each weight gets its own derived seed (``seed + index``), so results
    are identical whether the batch runs serially or across threads.
    The worker count comes from ``threads`` or the ``LORAQ_THREADS``
    environment variable, defaulting to 1.
    """
    items = list(named_weights)

    def job(arg):
        index, (name, w) = arg
        bundle = assemble_layer(w, q1, q2, seed=seed + index, **kwargs)
        w_arr = as_matrix(w)
        report = error_report(w_arr, np.eye(w_arr.shape[0]), bundle)
        return name, bundle, report

    workers = _thread_count(threads)
    if workers == 1 or len(items) <= 1:
        return [job(arg) for arg in enumerate(items)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, enumerate(items)))
