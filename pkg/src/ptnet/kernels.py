"""Backend selection for the window extraction kernels.

The compiled extension is used when importable; set ``PTNET_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

from . import _pykernels

if os.environ.get("PTNET_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

grid_extent = _pykernels.grid_extent
unfold = _impl.unfold
unfold_adjoint = _impl.unfold_adjoint
