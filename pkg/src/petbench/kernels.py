"""Backend selection for the lesion kernels.

The compiled extension is used when importable; set ``PETBENCH_PURE_PYTHON=1``
to force the numpy fallback.
"""

import logging
import os

from petbench import _pykernels

logger = logging.getLogger(__name__)

_FORCE_PY = os.environ.get("PETBENCH_PURE_PYTHON", "").strip() not in ("", "0")

if _FORCE_PY:
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from petbench import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable, using numpy fallback")
        _impl = _pykernels
        BACKEND = "python"

label26 = _impl.label26
max_pairwise_distance = _impl.max_pairwise_distance
sphere_means = _impl.sphere_means

__all__ = ["BACKEND", "label26", "max_pairwise_distance", "sphere_means"]
