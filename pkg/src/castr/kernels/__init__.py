"""Kernel backend selection.

Two interchangeable implementations of the hot elementwise/reduction
kernels exist: a compiled Cython extension (`_core`) and a pure NumPy
fallback (`pure`). The active one is chosen once at import time.

Environment variable CASTR_BACKEND controls selection:
  auto      use the compiled extension when importable, else pure (default)
  compiled  require the extension; ImportError if missing
  pure      force the NumPy fallback

`get_backend(name)` returns a specific implementation module regardless of
the active choice; the benchmark and parity tests use it to compare both.
"""

import os

from . import pure as _pure

_choice = os.environ.get("CASTR_BACKEND", "auto")
if _choice not in ("auto", "compiled", "pure"):
    raise ValueError(
        f"CASTR_BACKEND must be 'auto', 'compiled' or 'pure', got {_choice!r}"
    )

_impl = None
if _choice in ("auto", "compiled"):
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _choice == "compiled":
            raise
        _impl = None
if _impl is None:
    _impl = _pure

BACKEND = _impl.NAME

ln_fwd = _impl.ln_fwd
ln_bwd = _impl.ln_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
adamw_step = _impl.adamw_step


def which() -> str:
    """Name of the active backend: 'compiled' or 'pure'."""
    return BACKEND


def get_backend(name: str):
    """Fetch a backend module by name, independent of the active one."""
    if name == "pure":
        return _pure
    if name == "compiled":
        from . import _core  # raises ImportError if not built

        return _core
    raise ValueError(f"unknown backend {name!r}")
