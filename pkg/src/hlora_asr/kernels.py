"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise (or when the
environment variable ``HLORA_PURE_PYTHON`` is set to ``1``) the numpy
fallback is used. ``BACKEND`` names the active choice.
"""
import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("HLORA_PURE_PYTHON") == "1":
        raise ImportError("pure-Python backend forced")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def ctc_forward_backward(log_probs, target, blank=0):
    """CTC negative log-likelihood and its gradient w.r.t. ``log_probs``."""
    lp = np.ascontiguousarray(log_probs, dtype=np.float64)
    tg = np.ascontiguousarray(target, dtype=np.int64)
    return _impl.ctc_forward_backward(lp, tg, int(blank))


def edit_ops(ref, hyp):
    r = np.ascontiguousarray(ref, dtype=np.int64)
    h = np.ascontiguousarray(hyp, dtype=np.int64)
    return tuple(int(v) for v in _impl.edit_ops(r, h))
