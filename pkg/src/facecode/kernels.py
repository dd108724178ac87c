"""Backend selection for the per-vertex kernels.

The compiled Cython module is used when it was built and importable; otherwise
the numpy implementations in ``_kernels_py`` are used. Setting the environment
variable ``FACECODE_PURE_PYTHON=1`` forces the numpy backend at import time,
and :func:`use_backend` switches at runtime (tests and the benchmark use it).
"""

import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _kernels_py}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = None


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Activate ``"cython"`` or ``"python"``; raises ``ValueError`` if unavailable."""
    global _active, accumulate_normals, normals_backward, bilinear_gather, splat_zbuffer
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} not available (have {available_backends()})")
    mod = _BACKENDS[name]
    accumulate_normals = mod.accumulate_normals
    normals_backward = mod.normals_backward
    bilinear_gather = mod.bilinear_gather
    splat_zbuffer = mod.splat_zbuffer
    _active = name
    logger.debug("kernel backend: %s", name)


def active_backend():
    return _active


if os.environ.get("FACECODE_PURE_PYTHON", "") not in ("", "0") or _ckernels is None:
    use_backend("python")
else:
    use_backend("cython")
