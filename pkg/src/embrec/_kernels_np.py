"""Pure-numpy kernels for the transformer hot path.

Mirror of the compiled extension in ``_ckernels.pyx``; both expose the same
signatures and operate on float64 C-contiguous arrays. The backend in use is
chosen in :mod:`embrec.kernels`.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

BACKEND_NAME = "numpy"

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

RMS_EPS = 1e-6


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    """Exact GELU: x * Phi(x)."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """d/dx GELU = Phi(x) + x * phi(x)."""
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return dy * (cdf + x * phi)


def rmsnorm_fwd(x: np.ndarray, gain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise RMS norm with per-feature gain.

    x: (L, d), gain: (d,). Returns (y, inv_rms) where inv_rms (L,) is cached
    for the backward pass.
    """
    inv_rms = 1.0 / np.sqrt(np.mean(x * x, axis=-1) + RMS_EPS)
    y = x * inv_rms[:, None] * gain
    return y, inv_rms


def rmsnorm_bwd(
    x: np.ndarray, gain: np.ndarray, inv_rms: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    d = x.shape[-1]
    r = inv_rms[:, None]
    dgain = np.sum(dy * x * r, axis=0)
    g_dy = dy * gain
    t = np.sum(g_dy * x, axis=-1, keepdims=True)
    dx = g_dy * r - x * (r**3) * (t / d)
    return dx, dgain


def causal_attention_fwd(
    q: np.ndarray, k: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Causal softmax attention over all heads at once.

    q, k, v: (H, L, dh). Position t attends to keys 0..t. Returns
    (ctx (H, L, dh), attn (H, L, L)); attn rows are the cached softmax
    weights needed for the backward pass.
    """
    h, length, dh = q.shape
    scale = 1.0 / np.sqrt(dh)
    scores = (q @ k.transpose(0, 2, 1)) * scale
    mask = np.triu(np.ones((length, length), dtype=bool), k=1)
    scores[:, mask] = -np.inf
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    ctx = attn @ v
    return ctx, attn


def causal_attention_bwd(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    attn: np.ndarray,
    dctx: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dh = q.shape[-1]
    scale = 1.0 / np.sqrt(dh)
    dv = attn.transpose(0, 2, 1) @ dctx
    dattn = dctx @ v.transpose(0, 2, 1)
    # softmax backward; masked cells have attn == 0 so their dscores vanish
    t = np.sum(dattn * attn, axis=-1, keepdims=True)
    dscores = attn * (dattn - t)
    dq = (dscores @ k) * scale
    dk = (dscores.transpose(0, 2, 1) @ q) * scale
    return dq, dk, dv
