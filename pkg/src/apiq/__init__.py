"""Desk-scale quantization lab: learnable-clipping quantization with
activation-preserving adapter initialization on a tiny byte-level
transformer, plus round-to-nearest / adapter-default / iterative-SVD
baselines and the matching diagnostics."""

import os as _os

# Cap math-library worker threads before numpy loads anywhere; results are
# bitwise reproducible only at a fixed thread count.
_threads = _os.environ.get("APIQ_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

from . import autodiff, calib, checkpoint, evals, linalg, model, model_io, quant  # noqa: E402
from .calib import AdamW, CalibPlan, CalibSet, quantize_model, sample_calib  # noqa: E402
from .errors import (ApiqError, ConfigError, FormatError, InputError,  # noqa: E402
                     NumericError, ShapeError, StateError)
from .model import LoraPair, ModelConfig, TinyTransformer  # noqa: E402
from .quant import ClipParams, GroupParams, PackedCodes, QuantSpec  # noqa: E402
from .rng import RngState  # noqa: E402

__version__ = "0.1.0"
