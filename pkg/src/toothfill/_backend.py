"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
implementations take over. Set ``TOOTHFILL_PURE_PYTHON=1`` to force the
fallback (the test suite uses both).
"""

import logging
import os

import numpy as np

from . import _fallback
from ._mc_tables import TRI_TABLE

log = logging.getLogger(__name__)

TRI_TABLE_ARRAY = np.ascontiguousarray(np.array(TRI_TABLE, dtype=np.int64))

_compiled = None
if not os.environ.get("TOOTHFILL_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")

BACKENDS = {"python": _fallback}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

ACTIVE = "compiled" if _compiled is not None else "python"


def kernels(name=None):
    """Return the kernel module for ``name`` (default: the active backend)."""
    return BACKENDS[name or ACTIVE]
