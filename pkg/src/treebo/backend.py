"""Encoder backend selection: compiled extension if present, numpy otherwise.

The compiled core (treebo._fastcore, Cython) fuses the encoder forward and
backward passes for the training loop's hot path. The pure-Python backend
computes the same math through the autodiff tape. Either can be forced via
``use_backend`` or the TREEBO_BACKEND environment variable; by default the
compiled core is used when the extension imported successfully.
"""

from __future__ import annotations

import os

from treebo.encoder import PythonEncoderBackend

try:
    from treebo import _fastcore

    HAVE_COMPILED = True
except ImportError:
    _fastcore = None
    HAVE_COMPILED = False

_forced: str | None = None


class CompiledEncoderBackend:
    """Fused Cython forward/backward over the same parameter layout."""

    name = "compiled"

    def encode(self, params, batches, total):
        return _fastcore.encode(params, batches, total)

    def encode_with_vjp(self, params, batches, total):
        return _fastcore.encode_with_vjp(params, batches, total)


_PYTHON = PythonEncoderBackend()
_COMPILED = CompiledEncoderBackend() if HAVE_COMPILED else None


def available_backends() -> list:
    return ["compiled", "python"] if HAVE_COMPILED else ["python"]


def use_backend(name: str | None):
    """Force a backend ('compiled' | 'python') or restore auto-selection (None)."""
    global _forced
    if name is not None and name not in available_backends():
        raise ValueError(f"backend {name!r} not available; have {available_backends()}")
    _forced = name


def get_backend():
    choice = _forced or os.environ.get("TREEBO_BACKEND")
    if choice == "python":
        return _PYTHON
    if choice == "compiled":
        if _COMPILED is None:
            raise ValueError("compiled backend requested but treebo._fastcore is not built")
        return _COMPILED
    return _COMPILED if _COMPILED is not None else _PYTHON
