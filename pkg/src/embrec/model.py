"""Decoder-only transformer backbone with hybrid inputs and exact gradients.

Positions carry either a vocabulary token id or an externally injected
vector; both get the learned absolute position embedding added. Blocks are
pre-norm (RMS with a learned gain offset), causal multi-head attention, and
a GELU feed-forward. The output head is tied to the token embedding table:
logits = h @ E^T.

Optional LoRA adapters sit on every layer's W_q and W_v:
W_eff = W + (alpha_lora / rank) * B @ A, with B zero-initialized so that an
attached, untrained adapter is exactly transparent.

Everything is float64 internally; the batched entry points stack all
examples' positions into one matrix so the position-wise ops run as single
BLAS calls, while attention runs per example through the kernel backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .util import NumericError, check_finite

INIT_STD = 0.02

LORA_TARGETS = ("wq", "wv")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 0
    max_seq_len: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be set")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray  # d_ff x d_model
    w2: np.ndarray  # d_model x d_ff
    g1: np.ndarray  # norm gain offset, attention branch; effective gain 1 + g1
    g2: np.ndarray  # norm gain offset, feed-forward branch


@dataclass
class BackboneParams:
    config: ModelConfig
    E: np.ndarray  # vocab_size x d_model, also the tied output head
    P: np.ndarray  # max_seq_len x d_model
    layers: list[LayerParams]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"E": self.E, "P": self.P}
        for i, layer in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wo", "w1", "w2", "g1", "g2"):
                out[f"layer{i}.{name}"] = getattr(layer, name)
        return out

    def copy(self) -> "BackboneParams":
        return BackboneParams(
            config=self.config,
            E=self.E.copy(),
            P=self.P.copy(),
            layers=[
                LayerParams(**{k: getattr(l, k).copy() for k in vars(l)})
                for l in self.layers
            ],
        )


@dataclass
class LoraParams:
    rank: int
    alpha_lora: float
    tensors_by_name: dict[str, np.ndarray]  # "layer{i}.{wq|wv}.{A|B}"

    @property
    def scale(self) -> float:
        return self.alpha_lora / self.rank

    def tensors(self) -> dict[str, np.ndarray]:
        return dict(self.tensors_by_name)

    def pair(self, layer: int, target: str) -> tuple[np.ndarray, np.ndarray]:
        return (
            self.tensors_by_name[f"layer{layer}.{target}.A"],
            self.tensors_by_name[f"layer{layer}.{target}.B"],
        )

    def copy(self) -> "LoraParams":
        return LoraParams(
            rank=self.rank,
            alpha_lora=self.alpha_lora,
            tensors_by_name={k: v.copy() for k, v in self.tensors_by_name.items()},
        )


@dataclass
class HybridSequence:
    """Per-position inputs: a token id, or an injected d_model vector.

    token_ids holds -1 at injected positions; injected vectors are stored in
    position order.
    """

    token_ids: np.ndarray  # (L,) int64, -1 marks an injected position
    injected_positions: np.ndarray  # (n_inj,) int64, strictly increasing
    injected: np.ndarray  # (n_inj, d_model) float64

    @classmethod
    def from_token_ids(cls, ids) -> "HybridSequence":
        return cls(
            token_ids=np.asarray(ids, dtype=np.int64),
            injected_positions=np.zeros(0, dtype=np.int64),
            injected=np.zeros((0, 0)),
        )

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass
class GradientBundle:
    loss: float
    backbone: dict[str, np.ndarray]
    lora: dict[str, np.ndarray] | None
    injected: tuple[np.ndarray, ...]  # one (n_inj, d_model) array per example


def init_backbone(cfg: ModelConfig) -> BackboneParams:
    """Seeded Gaussian(0, 0.02) weights; norm gain offsets start at zero."""
    rng = np.random.default_rng(cfg.seed)
    d, ff = cfg.d_model, cfg.d_ff
    e = rng.normal(0.0, INIT_STD, size=(cfg.vocab_size, d))
    p = rng.normal(0.0, INIT_STD, size=(cfg.max_seq_len, d))
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(
            LayerParams(
                wq=rng.normal(0.0, INIT_STD, size=(d, d)),
                wk=rng.normal(0.0, INIT_STD, size=(d, d)),
                wv=rng.normal(0.0, INIT_STD, size=(d, d)),
                wo=rng.normal(0.0, INIT_STD, size=(d, d)),
                w1=rng.normal(0.0, INIT_STD, size=(ff, d)),
                w2=rng.normal(0.0, INIT_STD, size=(d, ff)),
                g1=np.zeros(d),
                g2=np.zeros(d),
            )
        )
    return BackboneParams(config=cfg, E=e, P=p, layers=layers)


def init_lora(cfg: ModelConfig, rank: int, alpha_lora: float, seed: int) -> LoraParams:
    """A is seeded Gaussian at 1/sqrt(d_model), B starts at zero so the
    adapter is transparent; the A scale keeps the B gradient O(1) at attach."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    d = cfg.d_model
    for i in range(cfg.n_layers):
        for target in LORA_TARGETS:
            tensors[f"layer{i}.{target}.A"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(rank, d))
            tensors[f"layer{i}.{target}.B"] = np.zeros((d, rank))
    return LoraParams(rank=rank, alpha_lora=alpha_lora, tensors_by_name=tensors)


def merge_lora(params: BackboneParams, lora: LoraParams) -> BackboneParams:
    """Fold adapters into copies of the base weights (test/debug helper)."""
    merged = params.copy()
    for i, layer in enumerate(merged.layers):
        for target in LORA_TARGETS:
            a, b = lora.pair(i, target)
            w = getattr(layer, target)
            setattr(layer, target, w + lora.scale * (b @ a))
    return merged


# --- stacked batch machinery -------------------------------------------------


@dataclass
class _Stacked:
    offsets: list[int]  # start row of each example; final entry == n_rows
    tok: np.ndarray  # (R,) int64, -1 at injected rows
    pos: np.ndarray  # (R,) int64 position within each example
    inj_rows: np.ndarray  # (n_inj_total,) int64 stacked row indices
    inj_vectors: np.ndarray  # (n_inj_total, d_model)
    inj_counts: list[int]  # injected count per example

    @property
    def n_rows(self) -> int:
        return self.offsets[-1]

    def example_slice(self, e: int) -> slice:
        return slice(self.offsets[e], self.offsets[e + 1])


def _stack(xs: list[HybridSequence], cfg: ModelConfig) -> _Stacked:
    offsets = [0]
    toks, poss, inj_rows, inj_vecs, inj_counts = [], [], [], [], []
    for x in xs:
        length = x.length
        if length == 0:
            raise ValueError("empty sequence")
        if length > cfg.max_seq_len:
            raise ValueError(f"sequence length {length} exceeds max_seq_len {cfg.max_seq_len}")
        base = offsets[-1]
        tok = np.asarray(x.token_ids, dtype=np.int64)
        if np.any(tok >= cfg.vocab_size):
            raise ValueError("token id out of vocabulary range")
        n_inj = len(x.injected_positions)
        if n_inj:
            if x.injected.shape != (n_inj, cfg.d_model):
                raise ValueError("injected vectors must be (n_inj, d_model)")
            check_finite(x.injected, "injected input vectors")
            inj_rows.append(np.asarray(x.injected_positions, dtype=np.int64) + base)
            inj_vecs.append(np.asarray(x.injected, dtype=np.float64))
        if np.any((tok < 0) & ~np.isin(np.arange(length), x.injected_positions)):
            raise ValueError("negative token id at a non-injected position")
        toks.append(tok)
        poss.append(np.arange(length, dtype=np.int64))
        inj_counts.append(n_inj)
        offsets.append(base + length)
    d = cfg.d_model
    return _Stacked(
        offsets=offsets,
        tok=np.concatenate(toks),
        pos=np.concatenate(poss),
        inj_rows=np.concatenate(inj_rows) if inj_rows else np.zeros(0, dtype=np.int64),
        inj_vectors=np.concatenate(inj_vecs) if inj_vecs else np.zeros((0, d)),
        inj_counts=inj_counts,
    )


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    length, d = x.shape
    return np.ascontiguousarray(x.reshape(length, n_heads, d // n_heads).transpose(1, 0, 2))


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, length, dh = x.shape
    return x.transpose(1, 0, 2).reshape(length, h * dh)


@dataclass
class _LayerCache:
    h_in: np.ndarray
    a: np.ndarray
    inv1: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: list[np.ndarray]
    ctx: np.ndarray
    h_mid: np.ndarray
    b: np.ndarray
    inv2: np.ndarray
    f1: np.ndarray
    ge: np.ndarray
    u: dict[str, np.ndarray] = field(default_factory=dict)  # lora inputs a @ A^T


def _lora_active(lora: LoraParams | None, layer: int, target: str) -> bool:
    if lora is None:
        return False
    _, b = lora.pair(layer, target)
    return bool(np.any(b))


def _forward_stacked(
    params: BackboneParams, lora: LoraParams | None, st: _Stacked
) -> tuple[np.ndarray, list[_LayerCache]]:
    cfg = params.config
    safe_tok = np.where(st.tok >= 0, st.tok, 0)
    h = params.E[safe_tok].astype(np.float64, copy=True)
    if len(st.inj_rows):
        h[st.inj_rows] = st.inj_vectors
    h += params.P[st.pos]

    caches: list[_LayerCache] = []
    n_examples = len(st.offsets) - 1
    for li, layer in enumerate(params.layers):
        h_in = h
        a, inv1 = kernels.rmsnorm_fwd(h_in, 1.0 + layer.g1)
        q = a @ layer.wq.T
        k = a @ layer.wk.T
        v = a @ layer.wv.T
        u: dict[str, np.ndarray] = {}
        if _lora_active(lora, li, "wq"):
            aq, bq = lora.pair(li, "wq")
            u["wq"] = a @ aq.T
            q = q + lora.scale * (u["wq"] @ bq.T)
        if _lora_active(lora, li, "wv"):
            av, bv = lora.pair(li, "wv")
            u["wv"] = a @ av.T
            v = v + lora.scale * (u["wv"] @ bv.T)
        ctx = np.empty_like(q)
        attns: list[np.ndarray] = []
        for e in range(n_examples):
            sl = st.example_slice(e)
            qe = _split_heads(q[sl], cfg.n_heads)
            ke = _split_heads(k[sl], cfg.n_heads)
            ve = _split_heads(v[sl], cfg.n_heads)
            ctx_e, attn_e = kernels.causal_attention_fwd(qe, ke, ve)
            ctx[sl] = _merge_heads(ctx_e)
            attns.append(attn_e)
        h_mid = h_in + ctx @ layer.wo.T
        b, inv2 = kernels.rmsnorm_fwd(h_mid, 1.0 + layer.g2)
        f1 = b @ layer.w1.T
        ge = kernels.gelu_fwd(f1)
        h = h_mid + ge @ layer.w2.T
        caches.append(
            _LayerCache(
                h_in=h_in, a=a, inv1=inv1, q=q, k=k, v=v, attn=attns, ctx=ctx,
                h_mid=h_mid, b=b, inv2=inv2, f1=f1, ge=ge, u=u,
            )
        )
    return h, caches


def _zeros_like_tensors(tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in tensors.items()}


def _backward_stacked(
    params: BackboneParams,
    lora: LoraParams | None,
    st: _Stacked,
    caches: list[_LayerCache],
    dh: np.ndarray,
    dE_extra: np.ndarray,
) -> GradientBundle:
    """dh is the gradient at the final hidden states; dE_extra collects the
    head-tying contribution accumulated by the loss."""
    cfg = params.config
    grads = _zeros_like_tensors(params.tensors())
    grads["E"] += dE_extra
    lgrads = _zeros_like_tensors(lora.tensors()) if lora is not None else None
    n_examples = len(st.offsets) - 1

    for li in range(cfg.n_layers - 1, -1, -1):
        layer = params.layers[li]
        cache = caches[li]
        # feed-forward branch
        df2 = dh
        grads[f"layer{li}.w2"] += df2.T @ cache.ge
        dge = df2 @ layer.w2
        df1 = kernels.gelu_bwd(cache.f1, dge)
        grads[f"layer{li}.w1"] += df1.T @ cache.b
        db = df1 @ layer.w1
        dxb, dg2 = kernels.rmsnorm_bwd(cache.h_mid, 1.0 + layer.g2, cache.inv2, db)
        grads[f"layer{li}.g2"] += dg2
        dh = dh + dxb
        # attention branch
        dattn_out = dh
        grads[f"layer{li}.wo"] += dattn_out.T @ cache.ctx
        dctx = dattn_out @ layer.wo
        dq = np.empty_like(dctx)
        dk = np.empty_like(dctx)
        dv = np.empty_like(dctx)
        for e in range(n_examples):
            sl = st.example_slice(e)
            qe = _split_heads(cache.q[sl], cfg.n_heads)
            ke = _split_heads(cache.k[sl], cfg.n_heads)
            ve = _split_heads(cache.v[sl], cfg.n_heads)
            dce = _split_heads(dctx[sl], cfg.n_heads)
            dqe, dke, dve = kernels.causal_attention_bwd(qe, ke, ve, cache.attn[e], dce)
            dq[sl] = _merge_heads(dqe)
            dk[sl] = _merge_heads(dke)
            dv[sl] = _merge_heads(dve)
        grads[f"layer{li}.wq"] += dq.T @ cache.a
        grads[f"layer{li}.wk"] += dk.T @ cache.a
        grads[f"layer{li}.wv"] += dv.T @ cache.a
        da = dq @ layer.wq + dk @ layer.wk + dv @ layer.wv
        if lora is not None:
            scale = lora.scale
            for target, dt in (("wq", dq), ("wv", dv)):
                at, bt = lora.pair(li, target)
                ut = cache.u.get(target)
                if ut is None:
                    ut = cache.a @ at.T
                lgrads[f"layer{li}.{target}.B"] += scale * (dt.T @ ut)
                if np.any(bt):
                    dut = scale * (dt @ bt)
                    lgrads[f"layer{li}.{target}.A"] += dut.T @ cache.a
                    da = da + dut @ at
        dxa, dg1 = kernels.rmsnorm_bwd(cache.h_in, 1.0 + layer.g1, cache.inv1, da)
        grads[f"layer{li}.g1"] += dg1
        dh = dh + dxa

    # input embeddings
    token_rows = st.tok >= 0
    np.add.at(grads["E"], st.tok[token_rows], dh[token_rows])
    np.add.at(grads["P"], st.pos, dh)
    injected: list[np.ndarray] = []
    if len(st.inj_rows):
        all_inj = dh[st.inj_rows]
        start = 0
        for count in st.inj_counts:
            injected.append(all_inj[start : start + count].copy())
            start += count
    else:
        injected = [np.zeros((0, cfg.d_model)) for _ in range(n_examples)]
    return GradientBundle(loss=0.0, backbone=grads, lora=lgrads, injected=tuple(injected))


def _masked_rows_and_labels(
    st: _Stacked, targets: list[np.ndarray], masks: list[np.ndarray]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked row indices, labels, and per-row loss weights (1 / (B * n_mask_e))."""
    rows, labels, weights = [], [], []
    n_examples = len(targets)
    for e, (target_ids, mask) in enumerate(zip(targets, masks)):
        mask = np.asarray(mask, dtype=bool)
        target_ids = np.asarray(target_ids, dtype=np.int64)
        length = st.offsets[e + 1] - st.offsets[e]
        if len(mask) != length or len(target_ids) != length:
            raise ValueError("target_ids/loss_mask length must match the sequence")
        idx = np.nonzero(mask)[0]
        if len(idx) == 0:
            raise ValueError("loss mask is empty")
        rows.append(idx + st.offsets[e])
        labels.append(target_ids[idx])
        weights.append(np.full(len(idx), 1.0 / (n_examples * len(idx))))
    return np.concatenate(rows), np.concatenate(labels), np.concatenate(weights)


def _cross_entropy(
    params: BackboneParams, h: np.ndarray, rows: np.ndarray, labels: np.ndarray,
    weights: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Returns (weighted loss, d_h at masked rows, dE head contribution)."""
    hm = h[rows]
    logits = hm @ params.E.T
    logits -= logits.max(axis=1, keepdims=True)
    expz = np.exp(logits)
    norm = expz.sum(axis=1, keepdims=True)
    logprob = logits - np.log(norm)
    n = len(rows)
    ce = -logprob[np.arange(n), labels]
    loss = float(np.dot(weights, ce))
    dlogits = expz / norm
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= weights[:, None]
    dhm = dlogits @ params.E
    de = dlogits.T @ hm
    return loss, dhm, de


def batch_loss_and_grads(
    params: BackboneParams,
    lora: LoraParams | None,
    xs: list[HybridSequence],
    targets: list[np.ndarray],
    masks: list[np.ndarray],
) -> GradientBundle:
    """Mean-over-examples loss and its exact gradients.

    Each example contributes the mean cross-entropy over its masked
    positions; the batch loss is the mean of those. Reduction order is fixed,
    so results are reproducible for a given input order.
    """
    st = _stack(xs, params.config)
    h, caches = _forward_stacked(params, lora, st)
    rows, labels, weights = _masked_rows_and_labels(st, targets, masks)
    if np.any(labels < 0) or np.any(labels >= params.config.vocab_size):
        raise ValueError("masked target id out of vocabulary range")
    loss, dhm, de = _cross_entropy(params, h, rows, labels, weights)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    dh = np.zeros_like(h)
    np.add.at(dh, rows, dhm)
    bundle = _backward_stacked(params, lora, st, caches, dh, de)
    bundle.loss = loss
    return bundle


# --- single-sequence API ------------------------------------------------------


def forward(
    params: BackboneParams, lora: LoraParams | None, x: HybridSequence
) -> np.ndarray:
    """Logits (L, vocab_size) for one hybrid sequence."""
    st = _stack([x], params.config)
    h, _ = _forward_stacked(params, lora, st)
    return h @ params.E.T


def loss(
    params: BackboneParams,
    lora: LoraParams | None,
    x: HybridSequence,
    target_ids,
    loss_mask,
) -> float:
    """Mean next-token cross-entropy over masked positions (natural log)."""
    st = _stack([x], params.config)
    h, _ = _forward_stacked(params, lora, st)
    rows, labels, weights = _masked_rows_and_labels(
        st, [np.asarray(target_ids)], [np.asarray(loss_mask)]
    )
    if np.any(labels < 0) or np.any(labels >= params.config.vocab_size):
        raise ValueError("masked target id out of vocabulary range")
    value, _, _ = _cross_entropy(params, h, rows, labels, weights)
    if not np.isfinite(value):
        raise NumericError("non-finite loss")
    return value


def backward(
    params: BackboneParams,
    lora: LoraParams | None,
    x: HybridSequence,
    target_ids,
    loss_mask,
) -> tuple[float, GradientBundle]:
    """Loss plus exact gradients for backbone, LoRA, and injected vectors."""
    bundle = batch_loss_and_grads(
        params, lora, [x], [np.asarray(target_ids)], [np.asarray(loss_mask)]
    )
    return bundle.loss, bundle


def next_token_logits(
    params: BackboneParams, lora: LoraParams | None, x: HybridSequence
) -> np.ndarray:
    """Logits at the final position of x."""
    if x.length == 0:
        raise ValueError("empty sequence")
    st = _stack([x], params.config)
    h, _ = _forward_stacked(params, lora, st)
    return h[-1] @ params.E.T
