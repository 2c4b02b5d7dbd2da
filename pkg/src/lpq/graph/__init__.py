"""Model graph IR, execution and transforms."""

from .execute import Backend, MissingBlobError, REFERENCE, predict, run, shadow_execute, trace
from .ir import (
    BMM,
    CONCAT,
    DEQUANTIZE,
    FC,
    FC_KINDS,
    FC_RELU,
    OP_KINDS,
    QUANTIZE,
    RELU,
    SIGMOID,
    SLS,
    SWISH,
    ModelGraph,
    Node,
    validate,
)
from .serialize import ChecksumError, ModelFormatError, load, save
from .transforms import (
    GraphValidationError,
    MissingCalibrationError,
    apply_scheme,
    calibrate,
    elide_dq_q,
    fuse_fc_relu,
    quantize_tables,
    skipped_fc_names,
    to_fp16,
)

__all__ = [
    "BMM", "CONCAT", "DEQUANTIZE", "FC", "FC_KINDS", "FC_RELU", "OP_KINDS", "QUANTIZE", "RELU", "SIGMOID",
    "SLS", "SWISH", "Backend", "ChecksumError", "GraphValidationError", "MissingBlobError",
    "MissingCalibrationError", "ModelFormatError", "ModelGraph", "Node", "REFERENCE", "apply_scheme",
    "calibrate", "elide_dq_q", "fuse_fc_relu", "load", "predict", "quantize_tables", "run", "save",
    "shadow_execute", "skipped_fc_names", "to_fp16", "trace", "validate",
]
