"""Compare the compiled kernels against the numpy reference.

Times the three hot kernels (GELU, RMS norm, causal attention) forward and
backward on training-shaped inputs, then a full training step of the stock
model, once per available backend.

Run from the repo root after an editable install:

    python3 benchmarks/bench_backends.py
"""

from __future__ import annotations

import time

import numpy as np

from embrec import kernels, model
from embrec.kernels import available_backends, set_backend

REPEATS = 50
SEQ_LEN = 56
D_MODEL = 64
N_HEADS = 4
D_FF = 256
BATCH = 16
VOCAB = 640


def _time(fn, repeats=REPEATS) -> float:
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_kernels(rng) -> dict[str, float]:
    x = rng.normal(size=(BATCH * SEQ_LEN, D_FF))
    dy = rng.normal(size=x.shape)
    gain = 1.0 + rng.normal(scale=0.1, size=D_MODEL)
    xn = rng.normal(size=(BATCH * SEQ_LEN, D_MODEL))
    q, k, v = (
        rng.normal(size=(N_HEADS, SEQ_LEN, D_MODEL // N_HEADS)) for _ in range(3)
    )
    ctx, attn = kernels.causal_attention_fwd(q, k, v)
    dctx = rng.normal(size=ctx.shape)
    _, inv = kernels.rmsnorm_fwd(xn, gain)
    dyn = rng.normal(size=xn.shape)
    return {
        "gelu_fwd": _time(lambda: kernels.gelu_fwd(x)),
        "gelu_bwd": _time(lambda: kernels.gelu_bwd(x, dy)),
        "rmsnorm_fwd": _time(lambda: kernels.rmsnorm_fwd(xn, gain)),
        "rmsnorm_bwd": _time(lambda: kernels.rmsnorm_bwd(xn, gain, inv, dyn)),
        "attention_fwd": _time(lambda: kernels.causal_attention_fwd(q, k, v)),
        "attention_bwd": _time(lambda: kernels.causal_attention_bwd(q, k, v, attn, dctx)),
    }


def bench_train_step(rng) -> float:
    cfg = model.ModelConfig(
        d_model=D_MODEL, n_layers=2, n_heads=N_HEADS, d_ff=D_FF,
        vocab_size=VOCAB, max_seq_len=128, seed=0,
    )
    params = model.init_backbone(cfg)
    lora = model.init_lora(cfg, rank=4, alpha_lora=8.0, seed=1)
    for name, tensor in lora.tensors_by_name.items():
        if name.endswith(".B"):
            tensor[:] = rng.normal(scale=0.02, size=tensor.shape)
    xs, targets, masks = [], [], []
    for _ in range(BATCH):
        ids = rng.integers(0, VOCAB, size=SEQ_LEN)
        xs.append(model.HybridSequence.from_token_ids(ids))
        targets.append(rng.integers(0, VOCAB, size=SEQ_LEN))
        mask = np.zeros(SEQ_LEN, dtype=bool)
        mask[-3:] = True
        masks.append(mask)
    return _time(
        lambda: model.batch_loss_and_grads(params, lora, xs, targets, masks),
        repeats=10,
    )


def main() -> None:
    backends = available_backends()
    print(f"available backends: {', '.join(backends)}")
    rows: dict[str, dict[str, float]] = {}
    for backend in backends:
        set_backend(backend)
        rng = np.random.default_rng(0)
        rows[backend] = bench_kernels(rng)
        rows[backend]["train_step(batch=16)"] = bench_train_step(rng)
    names = list(next(iter(rows.values())))
    width = max(len(n) for n in names)
    header = f"{'kernel':<{width}} " + " ".join(f"{b:>12}" for b in backends)
    if len(backends) > 1:
        header += f" {'speedup':>9}"
    print(header)
    for name in names:
        line = f"{name:<{width}} " + " ".join(
            f"{rows[b][name] * 1e3:9.3f} ms" for b in backends
        )
        if len(backends) > 1:
            base = rows[backends[0]][name]
            other = rows[backends[1]][name]
            line += f" {base / other:8.2f}x"
        print(line)


if __name__ == "__main__":
    main()
