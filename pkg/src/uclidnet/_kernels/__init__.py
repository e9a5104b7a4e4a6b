"""Backend selection for the hot loops.

The compiled extension is used when it imports; setting ``UCLIDNET_PURE=1``
forces the interpreted fallback.  Both expose ``kd_query``, ``assignment``,
``ray_intervals`` and ``first_hit``.
"""
import os

from . import _pure

pure = _pure

compiled = None
if os.environ.get("UCLIDNET_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

active = compiled if compiled is not None else _pure
BACKEND = "compiled" if compiled is not None else "pure"


def get_backend(name=None):
    """Return the kernel module named ``"compiled"`` / ``"pure"``, or the active one."""
    if name is None:
        return active
    if name == "pure":
        return _pure
    if name == "compiled":
        if compiled is None:
            raise ImportError("compiled kernels are not built")
        return compiled
    raise ValueError(f"unknown backend {name!r}")
