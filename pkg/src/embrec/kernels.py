"""Kernel backend selection.

Two interchangeable implementations of the transformer hot-path kernels
exist: a compiled Cython extension (``embrec._ckernels``) and a pure-numpy
fallback (``embrec._kernels_np``). The compiled one is preferred when it
imported cleanly; ``EMBREC_KERNELS=numpy|cython`` forces a choice, and
:func:`set_backend` switches at runtime (used by the parity tests and the
benchmark).

Both backends take and return float64 arrays and agree to ~1e-12; they are
not bit-identical to each other, so a reproducibility run must stick to one
backend, which holds automatically within a process.
"""

from __future__ import annotations

import os

from . import _kernels_np

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

_BACKENDS = {"numpy": _kernels_np}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def _default_backend() -> str:
    forced = os.environ.get("EMBREC_KERNELS", "").strip().lower()
    if forced:
        if forced not in _BACKENDS:
            raise ImportError(
                f"EMBREC_KERNELS={forced!r} requested but only {available_backends()} available"
            )
        return forced
    return "cython" if "cython" in _BACKENDS else "numpy"


_active = _BACKENDS[_default_backend()]


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    _active = _BACKENDS[name]


def backend_name() -> str:
    return _active.BACKEND_NAME


def gelu_fwd(x):
    return _active.gelu_fwd(x)


def gelu_bwd(x, dy):
    return _active.gelu_bwd(x, dy)


def rmsnorm_fwd(x, gain):
    return _active.rmsnorm_fwd(x, gain)


def rmsnorm_bwd(x, gain, inv_rms, dy):
    return _active.rmsnorm_bwd(x, gain, inv_rms, dy)


def causal_attention_fwd(q, k, v):
    return _active.causal_attention_fwd(q, k, v)


def causal_attention_bwd(q, k, v, attn, dctx):
    return _active.causal_attention_bwd(q, k, v, attn, dctx)
