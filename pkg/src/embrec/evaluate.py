"""Full-catalog ranking evaluation: HR@k and NDCG@k at k in {5, 10}.

Every item in the catalog is scored by the model's next-token logits at the
first target-item position, conditioning on the rendered dataset-name prefix
of the target pattern. No sampled negatives. Ties break by ascending item
index, so rankings are total orders and reports are deterministic.

Template regimes: Seen cycles training templates 0..9 by user index, Unseen
uses the held-out template 10 for every user.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import log2
from pathlib import Path

import numpy as np

from . import model, train
from .cf import CFModel
from .corpus import DatasetSplit, ItemCatalog, UserSplit
from .model import BackboneParams, LoraParams
from .projectors import ProjectorParams
from .prompts import (
    PromptTemplate,
    REGIME_SEEN,
    REGIMES,
    RenderedPrompt,
    TASKS,
    TASK_SEQUENTIAL,
    UNSEEN_TEMPLATE_ID,
    Vocabulary,
    render,
    truncate_history,
)

K_VALUES = (5, 10)
WHICH_VAL = "val"
WHICH_TEST = "test"
_EVAL_CHUNK = 64  # users per stacked forward pass


@dataclass(frozen=True)
class RankingResult:
    user_index: int
    ordering: np.ndarray  # all item indices, best first
    rank_of_target: int  # 1-based

    def __post_init__(self):
        n = len(self.ordering)
        if self.rank_of_target < 1 or self.rank_of_target > n:
            raise ValueError("rank_of_target out of range")


@dataclass(frozen=True)
class MetricSlice:
    task: str
    regime: str
    n_users: int
    hr5: float
    ndcg5: float
    hr10: float
    ndcg10: float

    def as_records(self) -> list[tuple[str, float]]:
        return [
            ("hr@5", self.hr5),
            ("ndcg@5", self.ndcg5),
            ("hr@10", self.hr10),
            ("ndcg@10", self.ndcg10),
        ]


@dataclass(frozen=True)
class EvalReport:
    slices: tuple[MetricSlice, ...]  # task-major, regime-minor order

    def slice_for(self, task: str, regime: str) -> MetricSlice:
        for s in self.slices:
            if s.task == task and s.regime == regime:
                return s
        raise KeyError((task, regime))

    def lines(self) -> list[str]:
        out = []
        for s in self.slices:
            for metric, value in s.as_records():
                out.append(
                    f"task={s.task} regime={s.regime} metric={metric} value={value:.6f}"
                )
        return out


@dataclass
class ModelBundle:
    """Everything needed to score prompts; text_mode selects the baseline
    (atomic slot tokens, no projectors or CF)."""

    backbone: BackboneParams
    lora: LoraParams | None
    f_u: ProjectorParams | None
    f_i: ProjectorParams | None
    cf: CFModel | None
    vocab: Vocabulary
    text_mode: bool = False

    def resolve(self, prompt: RenderedPrompt, extra: tuple[int, ...]) -> model.HybridSequence:
        if self.text_mode:
            return train.resolve_slots_text(prompt, self.vocab, extra)
        return train.resolve_slots(prompt, self.cf, self.f_u, self.f_i, extra)


def hr_at_k(rank: int, k: int) -> float:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    """Single relevant item, ideal DCG = 1: 1/log2(rank+1) inside the cutoff."""
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1.0 / log2(rank + 1.0) if rank <= k else 0.0


def _eval_prompt(
    bundle: ModelBundle,
    catalog: ItemCatalog,
    templates: dict[str, list[PromptTemplate]],
    split: DatasetSplit,
    task: str,
    regime: str,
    which: str,
    user_index: int,
    user: UserSplit,
    max_history: int,
) -> RenderedPrompt:
    if which == WHICH_VAL:
        history_ids, target_id = user.val_history, user.val_target
    elif which == WHICH_TEST:
        history_ids, target_id = user.test_history, user.test_target
    else:
        raise ValueError(f"which must be val or test, got {which!r}")
    history = [catalog.index_of(it) for it in history_ids]
    target = catalog.index_of(target_id)
    by_id = {t.template_id: t for t in templates[task]}
    template_id = user_index % 10 if regime == REGIME_SEEN else UNSEEN_TEMPLATE_ID
    return render(
        by_id[template_id],
        bundle.vocab,
        split.dataset_name,
        user_index,
        truncate_history(history, max_history) if task == TASK_SEQUENTIAL else (),
        target,
    )


def rank_items(bundle: ModelBundle, prompt: RenderedPrompt) -> RankingResult:
    """Rank the full catalog for one rendered prompt.

    The input is the prompt elements plus the target pattern's prefix up to
    (not including) the item token, so the final-position logits score the
    item slot; scores are read off the atomic item-token rows.
    """
    results = _rank_batch(bundle, [prompt], [prompt.user_slots()[0]])
    return results[0]


def _rank_batch(
    bundle: ModelBundle, prompts: list[RenderedPrompt], user_indices: list[int]
) -> list[RankingResult]:
    vocab = bundle.vocab
    xs = [bundle.resolve(p, tuple(p.target[:-2])) for p in prompts]
    st = model._stack(xs, bundle.backbone.config)
    h, _ = model._forward_stacked(bundle.backbone, bundle.lora, st)
    last_rows = np.asarray(st.offsets[1:]) - 1
    item_embed = bundle.backbone.E[vocab.item_base : vocab.item_base + vocab.n_items]
    scores = h[last_rows] @ item_embed.T
    out = []
    for row, (prompt, user_index) in enumerate(zip(prompts, user_indices)):
        target_index = vocab.item_index_of(prompt.target[-2])
        ordering = np.argsort(-scores[row], kind="stable")
        rank = int(np.nonzero(ordering == target_index)[0][0]) + 1
        out.append(
            RankingResult(user_index=user_index, ordering=ordering, rank_of_target=rank)
        )
    return out


def rank_all(
    bundle: ModelBundle,
    split: DatasetSplit,
    catalog: ItemCatalog,
    templates: dict[str, list[PromptTemplate]],
    task: str,
    regime: str,
    which: str,
    max_history: int = 20,
) -> list[RankingResult]:
    """Per-user full-catalog rankings, in user order."""
    if split.n_users == 0:
        raise ValueError("empty user set")
    results: list[RankingResult] = []
    for start in range(0, split.n_users, _EVAL_CHUNK):
        chunk = range(start, min(start + _EVAL_CHUNK, split.n_users))
        prompts = [
            _eval_prompt(
                bundle, catalog, templates, split, task, regime, which,
                ui, split.users[ui], max_history,
            )
            for ui in chunk
        ]
        results.extend(_rank_batch(bundle, prompts, list(chunk)))
    return results


def aggregate(task: str, regime: str, results: list[RankingResult]) -> MetricSlice:
    n = len(results)
    ranks = [r.rank_of_target for r in results]
    sl = MetricSlice(
        task=task,
        regime=regime,
        n_users=n,
        hr5=sum(hr_at_k(r, 5) for r in ranks) / n,
        ndcg5=sum(ndcg_at_k(r, 5) for r in ranks) / n,
        hr10=sum(hr_at_k(r, 10) for r in ranks) / n,
        ndcg10=sum(ndcg_at_k(r, 10) for r in ranks) / n,
    )
    ok = (
        0.0 <= sl.hr5 <= sl.hr10 <= 1.0
        and 0.0 <= sl.ndcg5 <= sl.ndcg10 <= 1.0
        and sl.ndcg5 <= sl.hr5
        and sl.ndcg10 <= sl.hr10
    )
    if not ok:
        raise RuntimeError("metric invariant violated")
    return sl


def evaluate(
    bundle: ModelBundle,
    split: DatasetSplit,
    catalog: ItemCatalog,
    templates: dict[str, list[PromptTemplate]],
    task: str,
    regime: str,
    which: str,
    max_history: int = 20,
) -> MetricSlice:
    results = rank_all(bundle, split, catalog, templates, task, regime, which, max_history)
    return aggregate(task, regime, results)


def evaluate_all(
    bundle: ModelBundle,
    split: DatasetSplit,
    catalog: ItemCatalog,
    templates: dict[str, list[PromptTemplate]],
    which: str,
    max_history: int = 20,
) -> EvalReport:
    slices = tuple(
        evaluate(bundle, split, catalog, templates, task, regime, which, max_history)
        for task in TASKS
        for regime in REGIMES
    )
    return EvalReport(slices=slices)


def write_report(
    path, report: EvalReport, config_hash_hex: str, seed: int, which: str
) -> None:
    lines = [
        f"# config_hash={config_hash_hex}",
        f"# seed={seed}",
        f"# which={which}",
        f"# n_users={report.slices[0].n_users}",
    ]
    lines.extend(report.lines())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path) -> dict[tuple[str, str, str], float]:
    """Parse a report file back into {(task, regime, metric): value}."""
    out: dict[tuple[str, str, str], float] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        fields = dict(part.split("=", 1) for part in line.split())
        out[(fields["task"], fields["regime"], fields["metric"])] = float(fields["value"])
    return out


def write_rankings(path, results: list[RankingResult]) -> None:
    lines = [
        f"user={r.user_index} rank={r.rank_of_target} "
        f"order={','.join(str(i) for i in r.ordering)}"
        for r in results
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_rankings(path) -> list[RankingResult]:
    results = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        fields = dict(part.split("=", 1) for part in line.split())
        results.append(
            RankingResult(
                user_index=int(fields["user"]),
                ordering=np.asarray([int(x) for x in fields["order"].split(",")]),
                rank_of_target=int(fields["rank"]),
            )
        )
    return results
