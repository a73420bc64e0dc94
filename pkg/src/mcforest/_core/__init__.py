"""Hot kernels: tree growth, routing and k-NN conditional moments.

The compiled extension is used when it is importable; otherwise the numpy
reference implementation. Set ``MCFOREST_PURE_PYTHON=1`` to force the
fallback. Both produce identical results.
"""

import os

from . import _pure

BACKEND = "python"
if not os.environ.get("MCFOREST_PURE_PYTHON"):
    try:
        from . import _fast as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pure
else:
    _impl = _pure

grow_tree = _impl.grow_tree
apply_tree = _impl.apply_tree
knn_moments = _impl.knn_moments

__all__ = ["BACKEND", "grow_tree", "apply_tree", "knn_moments"]
