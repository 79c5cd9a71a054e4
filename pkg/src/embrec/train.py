"""Two-stage training: projectors first, then projectors plus LoRA.

Stage 1 trains only f_u and f_i against a frozen backbone; gradients reach
them through the backbone's injected-position input gradients. Stage 2 adds
LoRA adapters on W_q/W_v (fresh optimizer, projector moments reset) while
the base weights stay frozen. The text-only baseline trains only LoRA with
slots rendered as atomic per-user / per-item vocabulary tokens.

Steps alternate tasks round-robin: even steps draw Sequential examples, odd
steps Straightforward. Batches are a pure function of (seed, step).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import model, projectors
from .cf import CFModel
from .corpus import DatasetSplit, ItemCatalog
from .model import BackboneParams, HybridSequence, LoraParams
from .projectors import ProjectorParams
from .prompts import (
    PromptTemplate,
    RenderedPrompt,
    TASK_SEQUENTIAL,
    TASK_STRAIGHTFORWARD,
    ItemSlot,
    Text,
    UNSEEN_TEMPLATE_ID,
    UserSlot,
    Vocabulary,
    render,
    truncate_history,
)
from .util import NumericError

STAGE_BASELINE = 0  # log label for the text-only run


@dataclass(frozen=True)
class StageConfig:
    stage: int
    steps: int = 1000
    batch_size: int = 16
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    max_history: int = 20
    lora_rank: int = 0
    lora_alpha: float = 0.0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.stage == 1 and (self.lora_rank or self.lora_alpha):
            raise ValueError("stage 1 takes no LoRA settings")
        if self.stage == 2 and (self.lora_rank < 1 or self.lora_alpha <= 0):
            raise ValueError("stage 2 requires lora_rank >= 1 and lora_alpha > 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("bad steps/batch_size")
        if self.max_history < 1:
            raise ValueError("max_history must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam(tensors: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(a) for k, a in tensors.items()},
        v={k: np.zeros_like(a) for k, a in tensors.items()},
    )


def adam_step(
    tensors: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    learning_rate: float,
    beta1: float,
    beta2: float,
    epsilon: float,
) -> None:
    """Bias-corrected Adam, updating tensors and moments in place."""
    state.t += 1
    t = state.t
    for name in sorted(tensors):
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        tensors[name] -= learning_rate * m_hat / (np.sqrt(v_hat) + epsilon)


@dataclass
class TrainState:
    backbone: BackboneParams
    f_u: ProjectorParams | None
    f_i: ProjectorParams | None
    lora: LoraParams | None = None
    adam: AdamState | None = None
    step: int = 0


@dataclass(frozen=True)
class StepRecord:
    step: int
    stage: int
    task: str
    loss: float

    def line(self) -> str:
        return f"step={self.step} stage={self.stage} task={self.task} loss={self.loss:.6f}"


def seen_templates(templates: dict[str, list[PromptTemplate]], task: str) -> list[PromptTemplate]:
    pool = [t for t in templates[task] if t.template_id != UNSEEN_TEMPLATE_ID]
    return sorted(pool, key=lambda t: t.template_id)


def build_batch(
    split: DatasetSplit,
    catalog: ItemCatalog,
    templates: dict[str, list[PromptTemplate]],
    vocab: Vocabulary,
    cfg: StageConfig,
    step: int,
) -> list[RenderedPrompt]:
    """One training batch; a pure function of (cfg.seed, step).

    Even steps are Sequential, odd steps Straightforward. The target is the
    last item of each user's train sequence; the preceding train items (most
    recent cfg.max_history of them) form the history. Sequential examples
    need a nonempty history, so only users with >= 2 train items qualify.
    """
    task = TASK_SEQUENTIAL if step % 2 == 0 else TASK_STRAIGHTFORWARD
    rng = np.random.default_rng([cfg.seed, step])
    if task == TASK_SEQUENTIAL:
        pool = [i for i, u in enumerate(split.users) if len(u.train_items) >= 2]
        if not pool:
            raise ValueError("no users with >= 2 train items for sequential batches")
    else:
        pool = list(range(split.n_users))
    pool_idx = rng.integers(0, len(pool), size=cfg.batch_size)
    tmpl_pool = seen_templates(templates, task)
    tmpl_idx = rng.integers(0, len(tmpl_pool), size=cfg.batch_size)
    batch = []
    for ui, ti in zip(pool_idx, tmpl_idx):
        user_index = pool[int(ui)]
        user = split.users[user_index]
        target = catalog.index_of(user.train_items[-1])
        history = [catalog.index_of(it) for it in user.train_items[:-1]]
        history = truncate_history(history, cfg.max_history)
        batch.append(
            render(
                tmpl_pool[int(ti)],
                vocab,
                split.dataset_name,
                user_index,
                history if task == TASK_SEQUENTIAL else (),
                target,
            )
        )
    return batch


def resolve_slots(
    prompt: RenderedPrompt,
    cf: CFModel,
    f_u: ProjectorParams,
    f_i: ProjectorParams,
    extra_tokens: tuple[int, ...] = (),
) -> HybridSequence:
    """UserSlot -> projected U row, ItemSlot -> projected V row, Text -> id.

    extra_tokens (plain ids) are appended after the prompt elements, which is
    how the teacher-forced target and eval conditioning prefixes ride along.
    """
    ids = np.empty(len(prompt.elements) + len(extra_tokens), dtype=np.int64)
    inj_pos: list[int] = []
    user_rows: list[int] = []
    item_rows: list[int] = []
    kinds: list[bool] = []  # True at user slots, in injected order
    for pos, el in enumerate(prompt.elements):
        if isinstance(el, Text):
            ids[pos] = el.token_id
        elif isinstance(el, UserSlot):
            ids[pos] = -1
            inj_pos.append(pos)
            user_rows.append(el.user_index)
            kinds.append(True)
        else:
            ids[pos] = -1
            inj_pos.append(pos)
            item_rows.append(el.item_index)
            kinds.append(False)
    ids[len(prompt.elements):] = extra_tokens
    d_model = f_u.d_out
    injected = np.zeros((len(inj_pos), d_model))
    if user_rows:
        injected[np.asarray(kinds)] = projectors.project(f_u, cf.U[user_rows])
    if item_rows:
        injected[~np.asarray(kinds)] = projectors.project(f_i, cf.V[item_rows])
    return HybridSequence(
        token_ids=ids,
        injected_positions=np.asarray(inj_pos, dtype=np.int64),
        injected=injected,
    )


def resolve_slots_text(
    prompt: RenderedPrompt, vocab: Vocabulary, extra_tokens: tuple[int, ...] = ()
) -> HybridSequence:
    """Baseline resolution: slots become atomic per-user / per-item tokens."""
    ids = []
    for el in prompt.elements:
        if isinstance(el, Text):
            ids.append(el.token_id)
        elif isinstance(el, UserSlot):
            ids.append(vocab.user_token(el.user_index))
        else:
            ids.append(vocab.item_token(el.item_index))
    ids.extend(extra_tokens)
    return HybridSequence.from_token_ids(ids)


def teacher_forced_arrays(prompt: RenderedPrompt) -> tuple[np.ndarray, np.ndarray]:
    """(target_ids, loss_mask) over the model input elements + target[:-1].

    target_ids[t] is the next token in the full stream; slot positions in the
    stream get -1, which is fine because they are never masked.
    """
    stream_next: list[int] = []
    for el in prompt.elements[1:]:
        stream_next.append(el.token_id if isinstance(el, Text) else -1)
    stream_next.extend(prompt.target)
    return np.asarray(stream_next, dtype=np.int64), np.asarray(prompt.loss_mask, dtype=bool)


def _trainables(state: TrainState, mode: str, stage: int) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    if mode == "embed":
        for prefix, proj in (("proj_user", state.f_u), ("proj_item", state.f_i)):
            for k, arr in proj.tensors().items():
                out[f"{prefix}.{k}"] = arr
        if stage == 2:
            for k, arr in state.lora.tensors_by_name.items():
                out[f"lora.{k}"] = arr
    else:
        for k, arr in state.lora.tensors_by_name.items():
            out[f"lora.{k}"] = arr
    return out


def _projector_grads(
    state: TrainState,
    cf: CFModel,
    prompts: list[RenderedPrompt],
    injected_grads: tuple[np.ndarray, ...],
) -> dict[str, np.ndarray]:
    """Chain injected-position gradients through f_u / f_i.

    Rows are stacked across the batch so each projector does one backward
    pass; a task with no item slots therefore yields exactly-zero f_i grads.
    """
    user_in, user_up, item_in, item_up = [], [], [], []
    for prompt, grad in zip(prompts, injected_grads):
        row = 0
        for el in prompt.elements:
            if isinstance(el, UserSlot):
                user_in.append(cf.U[el.user_index])
                user_up.append(grad[row])
                row += 1
            elif isinstance(el, ItemSlot):
                item_in.append(cf.V[el.item_index])
                item_up.append(grad[row])
                row += 1
    grads: dict[str, np.ndarray] = {}
    for prefix, proj, xs, ups in (
        ("proj_user", state.f_u, user_in, user_up),
        ("proj_item", state.f_i, item_in, item_up),
    ):
        if xs:
            pgrads, _ = projectors.projector_backward(proj, np.asarray(xs), np.asarray(ups))
        else:
            pgrads = {k: np.zeros_like(a) for k, a in proj.tensors().items()}
        for k, g in pgrads.items():
            grads[f"{prefix}.{k}"] = g
    return grads


def _run(
    state: TrainState,
    split: DatasetSplit,
    catalog: ItemCatalog,
    templates: dict[str, list[PromptTemplate]],
    vocab: Vocabulary,
    cf: CFModel | None,
    cfg: StageConfig,
    mode: str,
    stage_label: int,
    on_step: Callable[[StepRecord], None] | None,
) -> TrainState:
    trainables = _trainables(state, mode, cfg.stage)
    state.adam = init_adam(trainables)
    lora_in_graph = state.lora if (mode == "text" or cfg.stage == 2) else None
    train_lora = lora_in_graph is not None
    for local_step in range(cfg.steps):
        prompts = build_batch(split, catalog, templates, vocab, cfg, local_step)
        xs, targets, masks = [], [], []
        for prompt in prompts:
            extra = tuple(prompt.target[:-1])
            if mode == "embed":
                xs.append(resolve_slots(prompt, cf, state.f_u, state.f_i, extra))
            else:
                xs.append(resolve_slots_text(prompt, vocab, extra))
            t_ids, mask = teacher_forced_arrays(prompt)
            targets.append(t_ids)
            masks.append(mask)
        try:
            bundle = model.batch_loss_and_grads(
                state.backbone, lora_in_graph, xs, targets, masks
            )
        except NumericError as err:
            raise NumericError(f"{err} at step {state.step}") from err
        grads: dict[str, np.ndarray] = {}
        if mode == "embed":
            grads.update(_projector_grads(state, cf, prompts, bundle.injected))
        if train_lora:
            for k, g in bundle.lora.items():
                grads[f"lora.{k}"] = g
        adam_step(
            trainables, grads, state.adam,
            cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon,
        )
        record = StepRecord(
            step=state.step,
            stage=stage_label,
            task=prompts[0].task,
            loss=bundle.loss,
        )
        if on_step is not None:
            on_step(record)
        state.step += 1
    return state


def train_stage1(
    state: TrainState,
    split: DatasetSplit,
    catalog: ItemCatalog,
    templates: dict[str, list[PromptTemplate]],
    vocab: Vocabulary,
    cf: CFModel,
    cfg: StageConfig,
    on_step: Callable[[StepRecord], None] | None = None,
) -> TrainState:
    """Projector-only training against the frozen backbone."""
    if cfg.stage != 1:
        raise ValueError("train_stage1 requires a stage-1 config")
    return _run(state, split, catalog, templates, vocab, cf, cfg, "embed", 1, on_step)


def train_stage2(
    state: TrainState,
    split: DatasetSplit,
    catalog: ItemCatalog,
    templates: dict[str, list[PromptTemplate]],
    vocab: Vocabulary,
    cf: CFModel,
    cfg: StageConfig,
    on_step: Callable[[StepRecord], None] | None = None,
) -> TrainState:
    """Joint projector + LoRA training; base backbone weights stay frozen.

    The LoRA adapters must already be attached to the state (B zero at
    attach, so the step-0 forward matches the stage-1 model bit for bit).
    """
    if cfg.stage != 2:
        raise ValueError("train_stage2 requires a stage-2 config")
    if state.lora is None:
        raise ValueError("stage 2 needs LoRA adapters attached to the state")
    return _run(state, split, catalog, templates, vocab, cf, cfg, "embed", 2, on_step)


def train_baseline(
    state: TrainState,
    split: DatasetSplit,
    catalog: ItemCatalog,
    templates: dict[str, list[PromptTemplate]],
    vocab: Vocabulary,
    cfg: StageConfig,
    on_step: Callable[[StepRecord], None] | None = None,
) -> TrainState:
    """Text-only LoRA training; slots render as atomic vocab tokens."""
    if state.lora is None:
        raise ValueError("baseline training needs LoRA adapters")
    if vocab.n_users < split.n_users:
        raise ValueError("baseline vocabulary lacks per-user tokens")
    return _run(state, split, catalog, templates, vocab, None, cfg, "text", STAGE_BASELINE, on_step)
