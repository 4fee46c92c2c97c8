"""Backend selection for the hot loops.

The compiled extension is used when it is importable; setting the
environment variable ``EPROP_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("EPROP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"

spiking_forward = _impl.spiking_forward
leaky_filter = _impl.leaky_filter
adaptation_adjoint = _impl.adaptation_adjoint


def backends():
    """Available implementations keyed by name, for comparisons."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as compiled  # type: ignore[attr-defined]

        out["cython"] = compiled
    except ImportError:
        pass
    return out
