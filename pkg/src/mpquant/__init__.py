"""Low-bit mixed-precision quantization for small neural language models."""

__version__ = "0.1.0"

import os

# The workloads here are many small float64 GEMMs; multi-threaded BLAS
# spin-waits cost more than it saves. Override with MPQUANT_BLAS_THREADS.
try:
    from threadpoolctl import threadpool_limits as _tp_limits

    _tp_limits(limits=int(os.environ.get("MPQUANT_BLAS_THREADS", "1")), user_api="blas")
except Exception:  # pragma: no cover - purely a performance tweak
    pass

from .models import ModelSpec, build_model, cluster_layout, init_params
from .params import ParamVector
from .quant import PrecisionAssignment, QuantTable, QuantizedModel

__all__ = [
    "ModelSpec",
    "ParamVector",
    "PrecisionAssignment",
    "QuantTable",
    "QuantizedModel",
    "build_model",
    "cluster_layout",
    "init_params",
    "__version__",
]
