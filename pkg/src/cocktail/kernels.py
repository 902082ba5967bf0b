"""Kernel backend selection.

The compiled Cython extension is used when it imports; otherwise the numpy
fallback is used. ``set_backend`` switches at runtime (tests and the
benchmark exercise both).
"""
import logging
import os

from cocktail import _fallback

logger = logging.getLogger(__name__)

try:
    from cocktail import _kernels as _compiled
except ImportError:  # pragma: no cover - depends on build
    _compiled = None
    logger.debug("compiled kernels unavailable, using numpy fallback")

_NAMES = ("im2col", "col2im", "silu_forward", "silu_backward", "channel_stats")

BACKEND = None


def available_backends():
    return ["python"] + (["compiled"] if _compiled is not None else [])


def set_backend(name):
    global BACKEND
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; run `python setup.py build_ext --inplace`")
        mod = _compiled
    elif name == "python":
        mod = _fallback
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    for n in _NAMES:
        globals()[n] = getattr(mod, n)
    BACKEND = name


# COCKTAIL_BACKEND=python forces the fallback
set_backend(os.environ.get("COCKTAIL_BACKEND") or ("compiled" if _compiled is not None else "python"))
