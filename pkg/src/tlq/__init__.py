"""Post-training quantization calibration engine.

Quantization primitives, per-channel smoothing, gradient-guided token
selection, layer-wise ratio search with quantized-activation propagation,
and a memory-decoupled distributed calibration protocol, all on synthetic
straight-line layer stacks.
"""

from .calibration import (
    CalibrationResult,
    LayerCalibration,
    RatioGrid,
    calibrate,
    layer_loss,
    quantize_with_result,
    search_ratio,
)
from .errors import (
    CheckpointError,
    ConfigError,
    LedgerError,
    NumericError,
    ProtocolError,
    ShapeError,
    TlqError,
)
from .importance import (
    SelectedTokens,
    TokenImportance,
    first_order_output_error,
    select_top_tokens,
    token_importance_sums,
    x_stat_baselines,
    x_stat_from_tokens,
)
from .layers import Activation, LayerStack, Linear, RMSNorm
from .model import (
    CalibrationSet,
    ForwardTrace,
    GradTrace,
    ProxyLossSpec,
    backward_token_grads,
    forward_fp,
    forward_quant,
    load_calibset,
    load_checkpoint,
    save_calibset,
    save_checkpoint,
)
from .quantizer import QuantConfig, QuantizedTensor, dequantize, quantize, rounding_error_stats, step_size
from .smoothing import SmoothScale, apply_smoothing, fuse_into_predecessor, power_scale, sqrt_scale
from .tensor import Rng, matmul, rand_normal, rand_uniform, reduce_absmax

__all__ = [name for name in dir() if not name.startswith("_")]
