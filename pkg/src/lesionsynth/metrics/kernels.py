"""Backend selection for the metric kernels.

The compiled extension is used when it was built; otherwise, or when
``LESIONSYNTH_PURE_PYTHON=1`` is set, the numpy implementation is used.
"""

from __future__ import annotations

import importlib
import os
from types import ModuleType

from . import _pykernels


def _load_compiled() -> ModuleType | None:
    if os.environ.get("LESIONSYNTH_PURE_PYTHON", "") == "1":
        return None
    try:
        return importlib.import_module("lesionsynth.metrics._ckernels")
    except ImportError:
        return None


_compiled = _load_compiled()
_impl: ModuleType = _compiled or _pykernels
BACKEND = "cython" if _compiled is not None else "python"


def available_backends() -> dict[str, ModuleType]:
    out = {"python": _pykernels}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def edt_sq(features, sy: float = 1.0, sx: float = 1.0):
    return _impl.edt_sq(features, float(sy), float(sx))


def boundary_mask(mask):
    return _impl.boundary_mask(mask)


def confusion_counts(truth, pred, k: int):
    return _impl.confusion_counts(truth, pred, int(k))
