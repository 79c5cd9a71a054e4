"""Weighted alternating least squares on implicit feedback.

Implements the Hu-et-al. formulation: binary preference p_ui = 1 iff the
pair was observed in the training portion, confidence c_ui = 1 + alpha for
observed cells and 1 for every unobserved cell, objective

    sum_{u,i} c_ui (p_ui - u.v_i)^2 + lam * (|U|_F^2 + |V|_F^2)

Each half-sweep solves the exact ridge normal equations for one side while
the other is frozen, using the Gram-matrix identity so unobserved cells are
never enumerated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import DatasetSplit, ItemCatalog
from .util import NumericError, check_finite


@dataclass(frozen=True)
class WalsConfig:
    d_cf: int = 32
    lam: float = 0.1
    alpha: float = 40.0
    n_sweeps: int = 15
    seed: int = 0
    init_scale: float = 0.1

    def __post_init__(self):
        if self.d_cf < 1:
            raise ValueError("d_cf must be >= 1")
        if self.lam <= 0:
            raise ValueError("lam must be > 0")
        if self.n_sweeps < 1:
            raise ValueError("n_sweeps must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass(frozen=True)
class CFModel:
    """Factor matrices; row u of U / row i of V are the CF embeddings."""

    U: np.ndarray  # n_users x d_cf
    V: np.ndarray  # n_items x d_cf
    d_cf: int
    lam: float
    alpha: float

    @property
    def n_users(self) -> int:
        return self.U.shape[0]

    @property
    def n_items(self) -> int:
        return self.V.shape[0]


def observed_items(split: DatasetSplit, catalog: ItemCatalog) -> list[np.ndarray]:
    """Per-user sorted unique train-item indices (repeats collapse to binary)."""
    out = []
    for user in split.users:
        idx = sorted({catalog.index_of(it) for it in user.train_items})
        out.append(np.asarray(idx, dtype=np.intp))
    return out


def _transpose_observed(by_user: list[np.ndarray], n_items: int) -> list[np.ndarray]:
    by_item: list[list[int]] = [[] for _ in range(n_items)]
    for u, items in enumerate(by_user):
        for i in items:
            by_item[int(i)].append(u)
    return [np.asarray(us, dtype=np.intp) for us in by_item]


def solve_side(
    other: np.ndarray, obs: list[np.ndarray], lam: float, alpha: float
) -> np.ndarray:
    """Exact ridge solve for every row of one side against the frozen other.

    Row r minimizes sum_j c_rj (p_rj - x.other_j)^2 + lam |x|^2; with the
    Gram matrix G = other^T other the normal equations are
    (G + alpha * M^T M + lam I) x = (1 + alpha) * M^T 1, M = other[obs_r].
    Rows with no observations are exactly zero.
    """
    d = other.shape[1]
    gram = other.T @ other
    reg = lam * np.eye(d)
    out = np.zeros((len(obs), d))
    for r, cols in enumerate(obs):
        if len(cols) == 0:
            continue  # rhs is zero, so the ridge solution is the zero vector
        m = other[cols]
        a = gram + alpha * (m.T @ m) + reg
        b = (1.0 + alpha) * m.sum(axis=0)
        out[r] = np.linalg.solve(a, b)
    return out


def wals_objective(model: CFModel, obs_by_user: list[np.ndarray]) -> float:
    """Exact weighted objective over all cells via the Gram identity."""
    u_mat, v_mat = model.U, model.V
    gram = v_mat.T @ v_mat
    total_sq = float(np.sum((u_mat @ gram) * u_mat))
    obs_sq = 0.0
    obs_err = 0.0
    for u, cols in enumerate(obs_by_user):
        if len(cols) == 0:
            continue
        s = v_mat[cols] @ u_mat[u]
        obs_sq += float(np.dot(s, s))
        r = 1.0 - s
        obs_err += float(np.dot(r, r))
    reg = model.lam * (float(np.sum(u_mat * u_mat)) + float(np.sum(v_mat * v_mat)))
    return total_sq - obs_sq + (1.0 + model.alpha) * obs_err + reg


def wals_objective_bruteforce(model: CFModel, obs_by_user: list[np.ndarray]) -> float:
    """Reference objective enumerating every (user, item) cell. Test oracle;
    only sensible on tiny instances."""
    scores = model.U @ model.V.T
    p = np.zeros_like(scores)
    c = np.ones_like(scores)
    for u, cols in enumerate(obs_by_user):
        p[u, cols] = 1.0
        c[u, cols] = 1.0 + model.alpha
    fit = float(np.sum(c * (p - scores) ** 2))
    reg = model.lam * (float(np.sum(model.U**2)) + float(np.sum(model.V**2)))
    return fit + reg


def fit_wals(
    split: DatasetSplit,
    catalog: ItemCatalog,
    cfg: WalsConfig,
    trace: list[float] | None = None,
) -> CFModel:
    """Alternate exact user/item ridge solves for cfg.n_sweeps sweeps.

    V starts from a seeded Gaussian(0, init_scale); U is solved first. When
    ``trace`` is given, the objective is appended at init and after every
    half-sweep (2*n_sweeps entries plus the initial one).
    """
    for user in split.users:
        for it in user.train_items:
            if it not in catalog._index:
                raise ValueError(f"item {it!r} missing from catalog")

    rng = np.random.default_rng(cfg.seed)
    n_users, n_items = split.n_users, catalog.n_items
    v_mat = rng.normal(0.0, cfg.init_scale, size=(n_items, cfg.d_cf))
    u_mat = np.zeros((n_users, cfg.d_cf))

    by_user = observed_items(split, catalog)
    by_item = _transpose_observed(by_user, n_items)

    model = CFModel(U=u_mat, V=v_mat, d_cf=cfg.d_cf, lam=cfg.lam, alpha=cfg.alpha)
    if trace is not None:
        trace.append(wals_objective(model, by_user))

    for sweep in range(cfg.n_sweeps):
        u_mat = solve_side(v_mat, by_user, cfg.lam, cfg.alpha)
        if not np.all(np.isfinite(u_mat)):
            raise NumericError(f"non-finite user factors at sweep {sweep}")
        model = CFModel(U=u_mat, V=v_mat, d_cf=cfg.d_cf, lam=cfg.lam, alpha=cfg.alpha)
        if trace is not None:
            trace.append(wals_objective(model, by_user))

        v_mat = solve_side(u_mat, by_item, cfg.lam, cfg.alpha)
        if not np.all(np.isfinite(v_mat)):
            raise NumericError(f"non-finite item factors at sweep {sweep}")
        model = CFModel(U=u_mat, V=v_mat, d_cf=cfg.d_cf, lam=cfg.lam, alpha=cfg.alpha)
        if trace is not None:
            trace.append(wals_objective(model, by_user))

    check_finite(model.U, "user factors")
    check_finite(model.V, "item factors")
    return model


def user_embedding(model: CFModel, user_index: int) -> np.ndarray:
    if not 0 <= user_index < model.n_users:
        raise IndexError(f"user index {user_index} out of range [0, {model.n_users})")
    return model.U[user_index].copy()


def item_embedding(model: CFModel, item_index: int) -> np.ndarray:
    if not 0 <= item_index < model.n_items:
        raise IndexError(f"item index {item_index} out of range [0, {model.n_items})")
    return model.V[item_index].copy()


def preference_score(model: CFModel, user_index: int, item_index: int) -> float:
    return float(np.dot(user_embedding(model, user_index), item_embedding(model, item_index)))
