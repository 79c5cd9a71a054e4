"""Two-layer MLPs that map collaborative embeddings into token space.

One ProjectorParams instance serves the user side (f_u), a separate one the
item side (f_i); they share no tensors. The map is

    project(x) = W2 @ gelu(W1 @ x + b1) + b2

with the same exact-erf GELU the backbone uses. The hidden width defaults to
d_model. CF embeddings are frozen inputs; only these weights train.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .util import check_finite

INIT_STD = 0.02


@dataclass
class ProjectorParams:
    W1: np.ndarray  # d_hidden x d_in
    b1: np.ndarray  # d_hidden
    W2: np.ndarray  # d_out x d_hidden
    b2: np.ndarray  # d_out

    @property
    def d_in(self) -> int:
        return self.W1.shape[1]

    @property
    def d_out(self) -> int:
        return self.W2.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def copy(self) -> "ProjectorParams":
        return ProjectorParams(
            W1=self.W1.copy(), b1=self.b1.copy(), W2=self.W2.copy(), b2=self.b2.copy()
        )


def init_projector(
    d_in: int, d_out: int, seed: int, d_hidden: int | None = None
) -> ProjectorParams:
    """Seeded 1/sqrt(fan-in) Gaussian weights, zero biases; d_hidden defaults
    to d_out. The fan-in scale keeps projected embeddings O(1) so they carry
    signal into the frozen backbone from the first training step."""
    if d_hidden is None:
        d_hidden = d_out
    rng = np.random.default_rng(seed)
    return ProjectorParams(
        W1=rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_hidden, d_in)),
        b1=np.zeros(d_hidden),
        W2=rng.normal(0.0, 1.0 / np.sqrt(d_hidden), size=(d_out, d_hidden)),
        b2=np.zeros(d_out),
    )


def project(p: ProjectorParams, x: np.ndarray) -> np.ndarray:
    """W2 @ gelu(W1 @ x + b1) + b2 for a single vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.d_in:
        raise ValueError(f"input dim {x.shape[-1]} != projector d_in {p.d_in}")
    check_finite(x, "projector input")
    pre = x @ p.W1.T + p.b1
    return kernels.gelu_fwd(pre) @ p.W2.T + p.b2


def project_user(p: ProjectorParams, u: np.ndarray) -> np.ndarray:
    return project(p, u)


def project_item(p: ProjectorParams, i: np.ndarray) -> np.ndarray:
    return project(p, i)


def projector_backward(
    p: ProjectorParams, x: np.ndarray, upstream: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Exact chain rule through the MLP.

    x and upstream may be single vectors or matching batches of rows; batch
    rows are summed into the parameter gradients. Returns (parameter
    gradients keyed like tensors(), gradient with respect to x).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dy = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if x.shape[1] != p.d_in or dy.shape[1] != p.d_out or x.shape[0] != dy.shape[0]:
        raise ValueError("projector_backward shape mismatch")
    pre = x @ p.W1.T + p.b1
    hid = kernels.gelu_fwd(pre)
    dW2 = dy.T @ hid
    db2 = dy.sum(axis=0)
    dhid = dy @ p.W2
    dpre = kernels.gelu_bwd(pre, dhid)
    dW1 = dpre.T @ x
    db1 = dpre.sum(axis=0)
    dx = dpre @ p.W1
    grads = {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}
    if np.asarray(upstream).ndim == 1:
        dx = dx[0]
    return grads, dx
