"""Backend selection for the hot kernels.

The compiled extension is preferred. Set ``GRAPHDOC_PURE_PYTHON=1`` to
force the numpy fallback (the benchmark and parity tests do this).
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("GRAPHDOC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

fnv1a_64 = _impl.fnv1a_64
hash_tokens = _impl.hash_tokens
embedding_bag_forward = _impl.embedding_bag_forward
embedding_bag_backward = _impl.embedding_bag_backward
gat_forward = _impl.gat_forward
gat_backward = _impl.gat_backward


def backends():
    """Return every importable backend as ``{name: module}``."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
