"""Hot-loop kernels with backend selection at import time.

The compiled extension (``antkv._ckernels``, built from Cython) is used
when available; otherwise the pure numpy implementations in
:mod:`antkv.kernels.pure` take over.  Setting the environment variable
``ANTKV_PURE_PYTHON=1`` forces the fallback, which is what the benchmark
in ``benchmarks/bench_kernels.py`` relies on.

Both backends expose the same three functions:

``flash_aux(Qs, Kr, V, block_q, block_k, causal)``
    Blocked online-softmax attention returning (O, L, M).
``ans_blocked(Qs, Kr, M, L, q_norms, block_q, block_k, causal)``
    Blockwise anchor-score accumulation from reconstructed scores.
``assign_nearest(X, C)``
    Nearest-centroid assignment with lowest-index tie breaking.
"""

import os

from . import pure

BACKEND = "python"

if not os.environ.get("ANTKV_PURE_PYTHON"):
    try:
        from antkv import _ckernels as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = pure
else:
    _impl = pure

flash_aux = _impl.flash_aux
ans_blocked = _impl.ans_blocked
assign_nearest = _impl.assign_nearest

__all__ = ["BACKEND", "flash_aux", "ans_blocked", "assign_nearest", "pure"]
