"""Hot numerical kernels.

The compiled extension (``_core``) is used when it was built; otherwise the
numpy fallback is selected. Set ``MOLBUILD_PURE_PYTHON=1`` to force the
fallback, e.g. to compare the two.
"""
import importlib
import os

from molbuild.kernels import _fallback


def _load_compiled():
    if os.environ.get("MOLBUILD_PURE_PYTHON"):
        return None
    try:
        return importlib.import_module("molbuild.kernels._core")
    except ImportError:
        return None


_compiled = _load_compiled()
_impl = _compiled if _compiled is not None else _fallback
BACKEND = "compiled" if _compiled is not None else "python"

segment_sum = _impl.segment_sum
pair_graph = _impl.pair_graph
morse_energy = _impl.morse_energy
morse_energy_grad = _impl.morse_energy_grad
place_atom = _impl.place_atom
measure_internal = _impl.measure_internal


def available_backends() -> dict:
    """Name -> kernel module for every backend importable in this process."""
    out = {"python": _fallback}
    compiled = _compiled
    if compiled is None and not os.environ.get("MOLBUILD_PURE_PYTHON"):
        compiled = _load_compiled()
    if compiled is None:
        try:
            compiled = importlib.import_module("molbuild.kernels._core")
        except ImportError:
            compiled = None
    if compiled is not None:
        out["compiled"] = compiled
    return out
