"""Post-training quantization of dense weight matrices into a 4-bit
residual branch plus a quantized low-rank error-compensation branch,
optimized data-free, with bit-exact packed bundles and error reporting."""

from .absorber import (
    AbsorbConfig,
    LowRankFactors,
    absorption_grads,
    absorption_loss,
    init_factors,
    optimize_factors,
)
from .bundle_io import (
    BUNDLE_VERSION,
    load_bundle,
    load_stats,
    load_tensor,
    save_bundle,
    save_stats,
    save_tensor,
)
from .errors import (
    BudgetError,
    ConvergenceError,
    CorruptFileError,
    FileFormatError,
    FormatError,
    LoraqError,
    NumericError,
    ParameterError,
    ShapeError,
    UnknownFormatError,
    VersionError,
)
from .formats import (
    PASSTHROUGH,
    FormatSpec,
    IntCodec,
    MinifloatCodec,
    PassthroughCodec,
    QuantizedTensor,
    decode_element,
    dequantize,
    encode_element,
    fake_quant,
    int_test_format,
    make_format,
    minifloat_test_format,
    quantize_blockwise,
    registry_names,
)
from .numerics import (
    AdamState,
    SkewParam,
    adam_step,
    as_matrix,
    cayley_retract,
    finite_diff_grad,
    frobenius_norm,
    matmul,
    skew_project,
    truncated_svd,
)
from .pipeline import (
    DEFAULT_ABSORB_STEPS,
    DEFAULT_ROTATION_STEPS,
    BudgetPolicy,
    BundleMeta,
    ErrorReport,
    LayerBundle,
    RankCapWarning,
    assemble_batch,
    assemble_layer,
    default_absorb_lr,
    default_rotation_lr,
    error_report,
    forward,
    rank_for_budget,
    reconstruct_weight,
)
from .rotation import (
    RotationConfig,
    fuse_rotation,
    optimize_rotation,
    rotation_grad,
    rotation_loss,
)
from .smoothing import (
    ChannelStats,
    SmoothingResult,
    apply_smoothing,
    compute_channel_stats,
    default_migration_grid,
    grid_search_migration,
    smoothing_vector,
)

__version__ = "0.1.0"
