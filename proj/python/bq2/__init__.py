"""Extreme 2-bit quantization toolkit for a toy decoder-only transformer."""

import json

from ._bq2 import (
    CalibrationError,
    ConfigError,
    DivergenceError,
    Error,
    FormatError,
    InputError,
    ManifestError,
    Model,
    NotPsdError,
    QuantizationError,
    QuantizedModel,
    ReportError,
    RotationError,
    ShapeError,
    StepSizeError,
    TaskFormatError,
    TrainingError,
    account_size,
    decode_tokens,
    e8_nearest_point,
    encode_text,
    hadamard_matrix,
    hadamard_transform,
    inverse_hadamard_transform,
    is_e8_point,
    ldl_decompose,
    normalize_score,
    ppl_rel_degradation,
    run,
)
from . import _bq2


def read_report(directory):
    """Report written by the `report` stage, as a dict."""
    return json.loads(_bq2.report_json(str(directory)))
