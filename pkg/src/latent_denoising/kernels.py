"""Backend selection for the hot loops.

The compiled extension is used when it imports cleanly; set ``LD_PURE_PYTHON=1``
to force the pure-Python fallback. ``BACKEND`` names the active choice.
"""
import os

from latent_denoising import _pykernels

if os.environ.get("LD_PURE_PYTHON") == "1":
    _impl = _pykernels
else:
    try:
        from latent_denoising import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

fnv1a64 = _impl.fnv1a64
weighted_draws = _impl.weighted_draws
glass_shuffle = _impl.glass_shuffle

__all__ = ["BACKEND", "fnv1a64", "weighted_draws", "glass_shuffle"]
