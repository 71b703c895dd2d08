"""Kernel dispatch: compiled Cython core when available, numpy otherwise.

Set ``ORDTWOPHASE_PURE_PYTHON=1`` before import to force the numpy versions.
"""

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("ORDTWOPHASE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

po_derivs = _impl.po_derivs
grid_probs = _impl.grid_probs
grid_po_derivs = _impl.grid_po_derivs
sieve_estep = _impl.sieve_estep
cell_terms = _pykernels.cell_terms

__all__ = [
    "BACKEND",
    "po_derivs",
    "grid_probs",
    "grid_po_derivs",
    "sieve_estep",
    "cell_terms",
]
