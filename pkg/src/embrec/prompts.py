"""Prompt templates, the closed word-level vocabulary, and hybrid rendering.

A rendered prompt is a stream of elements: plain text tokens plus injection
slots. A ``UserSlot``/``ItemSlot`` marks a position whose input embedding is
supplied externally (a projected CF vector) instead of coming from the token
embedding table; the text-only baseline instead maps those slots to atomic
per-user / per-item vocabulary tokens.

Eleven templates per task ship as a data asset (``assets/templates.tsv``,
``task<TAB>id<TAB>input_pattern<TAB>target_pattern``). Ids 0..9 are the
training ("seen") set; id 10 is held out ("unseen").
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import NamedTuple

from .corpus import ItemCatalog

TASK_SEQUENTIAL = "sequential"
TASK_STRAIGHTFORWARD = "straightforward"
TASKS = (TASK_SEQUENTIAL, TASK_STRAIGHTFORWARD)

REGIME_SEEN = "seen"
REGIME_UNSEEN = "unseen"
REGIMES = (REGIME_SEEN, REGIME_UNSEEN)

N_TEMPLATES = 11
UNSEEN_TEMPLATE_ID = 10

BOS, EOS, PAD = "<bos>", "<eos>", "<pad>"

_TOKEN_RE = re.compile(r"\{[a-z_]+\}|\w+|[^\w\s]")

HISTORY_SEPARATOR = ","


class Text(NamedTuple):
    token_id: int


class UserSlot(NamedTuple):
    user_index: int


class ItemSlot(NamedTuple):
    item_index: int


Element = Text | UserSlot | ItemSlot


@dataclass(frozen=True)
class PromptTemplate:
    task: str
    template_id: int
    input_pattern: str
    target_pattern: str

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not 0 <= self.template_id < N_TEMPLATES:
            raise ValueError(f"template_id must be in 0..{N_TEMPLATES - 1}")
        has_history = "{history}" in self.input_pattern
        if self.task == TASK_SEQUENTIAL and not has_history:
            raise ValueError(f"sequential template {self.template_id} lacks {{history}}")
        if self.task == TASK_STRAIGHTFORWARD and has_history:
            raise ValueError(f"straightforward template {self.template_id} has {{history}}")
        if "{user_id}" not in self.input_pattern:
            raise ValueError(f"template {self.template_id} lacks {{user_id}}")


def _pattern_units(pattern: str) -> list[str]:
    """Split a pattern into slot markers and word/punctuation units."""
    return _TOKEN_RE.findall(pattern)


def load_templates(path: str | Path | None = None) -> dict[str, list[PromptTemplate]]:
    """Load templates from a tsv file (the packaged asset by default)."""
    if path is None:
        text = resources.files("embrec").joinpath("assets/templates.tsv").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    by_task: dict[str, list[PromptTemplate]] = {t: [] for t in TASKS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"templates line {lineno}: expected 4 tab-separated fields")
        task, tid, inp, tgt = parts
        by_task[task].append(
            PromptTemplate(task=task, template_id=int(tid), input_pattern=inp, target_pattern=tgt)
        )
    for task, templates in by_task.items():
        templates.sort(key=lambda t: t.template_id)
        if [t.template_id for t in templates] != list(range(N_TEMPLATES)):
            raise ValueError(f"task {task}: need template ids 0..{N_TEMPLATES - 1} exactly once")
    return by_task


def template_regime(template_id: int) -> str:
    if not 0 <= template_id < N_TEMPLATES:
        raise ValueError(f"template_id {template_id} out of range 0..{N_TEMPLATES - 1}")
    return REGIME_UNSEEN if template_id == UNSEEN_TEMPLATE_ID else REGIME_SEEN


def truncate_history(history: list[int] | tuple[int, ...], max_h: int) -> list[int]:
    """Keep the max_h most recent items, order preserved."""
    if max_h < 1:
        raise ValueError("max_h must be >= 1")
    return list(history[-max_h:])


@dataclass(frozen=True)
class Vocabulary:
    """Closed token set: specials, template words, dataset-name words, one
    atomic token per catalog item, and (for the text-only baseline) one
    atomic token per user.

    Ids are dense in [0, size); item tokens are the contiguous block
    [item_base, item_base + n_items), user tokens [user_base, ...).
    """

    word_to_id: dict[str, int]
    item_base: int
    n_items: int
    user_base: int
    n_users: int

    @property
    def size(self) -> int:
        return self.user_base + self.n_users

    @property
    def bos_id(self) -> int:
        return self.word_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self.word_to_id[EOS]

    @property
    def pad_id(self) -> int:
        return self.word_to_id[PAD]

    def word_id(self, word: str) -> int:
        try:
            return self.word_to_id[word]
        except KeyError:
            raise KeyError(f"word {word!r} not in the closed vocabulary") from None

    def item_token(self, item_index: int) -> int:
        if not 0 <= item_index < self.n_items:
            raise IndexError(f"item index {item_index} out of range [0, {self.n_items})")
        return self.item_base + item_index

    def item_index_of(self, token_id: int) -> int:
        if not self.item_base <= token_id < self.item_base + self.n_items:
            raise ValueError(f"token {token_id} is not an item token")
        return token_id - self.item_base

    def user_token(self, user_index: int) -> int:
        if not 0 <= user_index < self.n_users:
            raise IndexError(f"user index {user_index} out of range [0, {self.n_users})")
        return self.user_base + user_index

    def encode_words(self, text: str) -> list[int]:
        return [self.word_id(w) for w in _pattern_units(text)]


def build_vocabulary(
    templates: dict[str, list[PromptTemplate]],
    catalog: ItemCatalog,
    dataset_name: str,
    n_users: int = 0,
) -> Vocabulary:
    """Deterministic vocabulary over (templates, catalog).

    Text tokens are collected in first-appearance order scanning templates by
    (task, id); the history separator and dataset-name words are always
    included. ``n_users > 0`` appends atomic user tokens used only by the
    text-only baseline.
    """
    word_to_id: dict[str, int] = {}
    for w in (BOS, EOS, PAD):
        word_to_id[w] = len(word_to_id)
    for task in TASKS:
        for template in templates[task]:
            for pattern in (template.input_pattern, template.target_pattern):
                for unit in _pattern_units(pattern):
                    if unit.startswith("{") and unit.endswith("}"):
                        continue
                    if unit not in word_to_id:
                        word_to_id[unit] = len(word_to_id)
    if HISTORY_SEPARATOR not in word_to_id:
        word_to_id[HISTORY_SEPARATOR] = len(word_to_id)
    for unit in _pattern_units(dataset_name):
        if unit not in word_to_id:
            word_to_id[unit] = len(word_to_id)
    item_base = len(word_to_id)
    user_base = item_base + catalog.n_items
    return Vocabulary(
        word_to_id=word_to_id,
        item_base=item_base,
        n_items=catalog.n_items,
        user_base=user_base,
        n_users=n_users,
    )


@dataclass(frozen=True)
class RenderedPrompt:
    """A hybrid token stream plus its training target.

    ``elements`` is the input segment (starting with BOS). ``target`` is the
    label token ids: dataset-name words, the target's atomic item token, then
    EOS. ``loss_mask`` is laid out over the teacher-forced model input
    (elements followed by all but the last target token) and is True exactly
    where the model's next-token prediction is scored, so it has
    ``len(target)`` True entries.
    """

    task: str
    template_id: int
    elements: tuple[Element, ...]
    target: tuple[int, ...]
    loss_mask: tuple[bool, ...]

    @property
    def target_item_position(self) -> int:
        """Position, in the full stream, of the atomic target item token."""
        return len(self.elements) + len(self.target) - 2

    def user_slots(self) -> list[int]:
        return [e.user_index for e in self.elements if isinstance(e, UserSlot)]

    def item_slots(self) -> list[int]:
        return [e.item_index for e in self.elements if isinstance(e, ItemSlot)]


def render(
    template: PromptTemplate,
    vocab: Vocabulary,
    dataset_name: str,
    user_index: int,
    history: list[int] | tuple[int, ...],
    target_item: int,
) -> RenderedPrompt:
    """Substitute slots: {user_id} becomes a UserSlot, each history item an
    ItemSlot (comma-separated), {dataset} its word tokens. The target encodes
    the target pattern with the target's atomic item token, then EOS."""
    if template.task == TASK_SEQUENTIAL and len(history) == 0:
        raise ValueError("sequential template requires a nonempty history")

    sep_id = vocab.word_id(HISTORY_SEPARATOR)
    elements: list[Element] = [Text(vocab.bos_id)]
    for unit in _pattern_units(template.input_pattern):
        if unit == "{dataset}":
            elements.extend(Text(t) for t in vocab.encode_words(dataset_name))
        elif unit == "{user_id}":
            elements.append(UserSlot(user_index))
        elif unit == "{history}":
            for pos, item in enumerate(history):
                if pos > 0:
                    elements.append(Text(sep_id))
                elements.append(ItemSlot(int(item)))
        elif unit == "{target}":
            raise ValueError("{target} is not allowed in an input pattern")
        else:
            elements.append(Text(vocab.word_id(unit)))

    target: list[int] = []
    for unit in _pattern_units(template.target_pattern):
        if unit == "{dataset}":
            target.extend(vocab.encode_words(dataset_name))
        elif unit == "{target}":
            target.append(vocab.item_token(int(target_item)))
        else:
            target.append(vocab.word_id(unit))
    target.append(vocab.eos_id)

    n_in = len(elements)
    mask = [False] * (n_in - 1) + [True] * len(target)
    return RenderedPrompt(
        task=template.task,
        template_id=template.template_id,
        elements=tuple(elements),
        target=tuple(target),
        loss_mask=tuple(mask),
    )
