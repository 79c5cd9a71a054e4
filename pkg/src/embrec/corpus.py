"""Interaction data: ingestion, catalogs, leave-one-out splits, synthetic sets.

The on-disk format is one whitespace-separated line per user
(``user_id item1 item2 ...``), so OpenP5-style ``sequential_data.txt`` dumps
load unmodified. Lines starting with ``#`` are headers and are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

MIN_ITEMS_PER_USER = 3


@dataclass(frozen=True)
class InteractionLog:
    """Per-user chronologically ordered item-id sequences."""

    users: tuple[tuple[str, tuple[str, ...]], ...]
    dataset_name: str

    @property
    def n_users(self) -> int:
        return len(self.users)


@dataclass(frozen=True)
class ItemCatalog:
    """Bijection item_id <-> dense index, in first-appearance order."""

    items: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {it: i for i, it in enumerate(self.items)})

    @property
    def n_items(self) -> int:
        return len(self.items)

    def index_of(self, item_id: str) -> int:
        return self._index[item_id]

    def item_at(self, index: int) -> str:
        return self.items[index]


@dataclass(frozen=True)
class UserSplit:
    user_id: str
    train_items: tuple[str, ...]
    val_target: str
    test_target: str

    @property
    def val_history(self) -> tuple[str, ...]:
        return self.train_items

    @property
    def test_history(self) -> tuple[str, ...]:
        return self.train_items + (self.val_target,)

    @property
    def full_sequence(self) -> tuple[str, ...]:
        return self.train_items + (self.val_target, self.test_target)


@dataclass(frozen=True)
class DatasetSplit:
    users: tuple[UserSplit, ...]
    dataset_name: str

    @property
    def n_users(self) -> int:
        return len(self.users)


@dataclass(frozen=True)
class SyntheticConfig:
    n_users: int
    n_items: int
    n_clusters: int
    items_per_user: int
    noise_rate: float
    seed: int

    def __post_init__(self):
        if self.n_users < 1:
            raise ValueError(f"n_users must be >= 1, got {self.n_users}")
        if self.n_clusters < 1 or self.n_items < self.n_clusters:
            raise ValueError(
                f"need 1 <= n_clusters <= n_items, got {self.n_clusters}/{self.n_items}"
            )
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError(f"noise_rate must be in [0,1], got {self.noise_rate}")
        if self.items_per_user < MIN_ITEMS_PER_USER:
            raise ValueError(f"items_per_user must be >= {MIN_ITEMS_PER_USER}")

    def cluster_bounds(self, cluster: int) -> tuple[int, int]:
        """Half-open item-index range owned by a cluster; blocks differ by at
        most one item when n_clusters does not divide n_items."""
        base, rem = divmod(self.n_items, self.n_clusters)
        lo = cluster * base + min(cluster, rem)
        return lo, lo + base + (1 if cluster < rem else 0)


def load_interactions(path: str | Path) -> InteractionLog:
    """Parse an interaction file; dataset name is the file stem."""
    path = Path(path)
    users: list[tuple[str, tuple[str, ...]]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            user_id, items = fields[0], fields[1:]
            if len(items) < MIN_ITEMS_PER_USER:
                raise ValueError(
                    f"{path.name}:{lineno}: user {user_id} has {len(items)} items; "
                    f"minimum {MIN_ITEMS_PER_USER}"
                )
            if user_id in seen:
                raise ValueError(f"{path.name}:{lineno}: duplicate user {user_id}")
            seen.add(user_id)
            users.append((user_id, tuple(items)))
    return InteractionLog(users=tuple(users), dataset_name=path.stem)


def write_interactions(log: InteractionLog, path: str | Path, header: tuple[str, ...] = ()) -> None:
    """Emit the canonical file form: optional ``#`` header lines, then one
    space-separated line per user, LF endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        for user_id, items in log.users:
            fh.write(user_id + " " + " ".join(items) + "\n")


def build_catalog(log: InteractionLog) -> ItemCatalog:
    """Dense item indices in first-appearance order over the log."""
    seen: dict[str, None] = {}
    for _, items in log.users:
        for it in items:
            seen.setdefault(it, None)
    return ItemCatalog(items=tuple(seen))


def leave_one_out_split(log: InteractionLog) -> DatasetSplit:
    """Last item per user is the test target, second-to-last the val target."""
    users = []
    for user_id, items in log.users:
        if len(items) < MIN_ITEMS_PER_USER:
            raise ValueError(
                f"user {user_id} has {len(items)} items; minimum {MIN_ITEMS_PER_USER}"
            )
        users.append(
            UserSplit(
                user_id=user_id,
                train_items=items[:-2],
                val_target=items[-2],
                test_target=items[-1],
            )
        )
    return DatasetSplit(users=tuple(users), dataset_name=log.dataset_name)


def generate_synthetic(cfg: SyntheticConfig) -> InteractionLog:
    """Planted-cluster interaction log.

    User u belongs to cluster ``u % n_clusters``; each cluster owns a
    contiguous block of roughly ``n_items / n_clusters`` items. Every
    interaction is drawn uniformly from the user's block with probability
    1 - noise_rate, otherwise uniformly from the whole catalog. Fully
    determined by the seed.
    """
    rng = np.random.default_rng(cfg.seed)
    users = []
    for u in range(cfg.n_users):
        lo, hi = cfg.cluster_bounds(u % cfg.n_clusters)
        off_cluster = rng.random(cfg.items_per_user) < cfg.noise_rate
        in_block = rng.integers(lo, hi, size=cfg.items_per_user)
        anywhere = rng.integers(0, cfg.n_items, size=cfg.items_per_user)
        drawn = np.where(off_cluster, anywhere, in_block)
        users.append((f"u{u}", tuple(f"i{j}" for j in drawn)))
    return InteractionLog(users=tuple(users), dataset_name="synthetic")
