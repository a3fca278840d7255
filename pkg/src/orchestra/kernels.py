"""Backend selection for the rollout kernels.

The compiled extension is preferred; set ``ORCHESTRA_PURE_PYTHON=1`` to force
the numpy fallback. ``BACKEND`` names the active implementation.
"""

import os

from orchestra import _kernels_py

if os.environ.get("ORCHESTRA_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from orchestra import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "cython"

mlp_forward = _impl.mlp_forward
masked_softmax = _impl.masked_softmax
sample_index = _impl.sample_index
fits = _impl.fits

__all__ = ["BACKEND", "fits", "masked_softmax", "mlp_forward", "sample_index"]
