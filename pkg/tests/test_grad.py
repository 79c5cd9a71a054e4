"""Targeted finite-difference checks on a tiny model.

The full-size gradient fidelity sweep lives in test_acceptance.py; these
tests keep the same oracle honest on a model small enough to run in
milliseconds, and pin the loss-mask semantics.
"""

import numpy as np
import pytest

from embrec import model
from embrec.model import HybridSequence, ModelConfig, init_backbone, init_lora

from fd_oracle import EPS, fd_grad, max_rel_err

TOL = 1e-4


@pytest.fixture(scope="module")
def tiny():
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, d_ff=12, vocab_size=12,
                      max_seq_len=16, seed=0)
    params = init_backbone(cfg)
    lora = init_lora(cfg, rank=2, alpha_lora=4.0, seed=1)
    rng = np.random.default_rng(2)
    for name, arr in lora.tensors_by_name.items():
        if name.endswith(".B"):
            arr[:] = rng.normal(0.0, 0.3, size=arr.shape)
    x = HybridSequence(
        token_ids=np.asarray([3, -1, 7, 2, 5], dtype=np.int64),
        injected_positions=np.asarray([1], dtype=np.int64),
        injected=rng.normal(0.0, 0.5, size=(1, cfg.d_model)),
    )
    targets = np.asarray([1, 7, 2, 5, 9], dtype=np.int64)
    mask = np.asarray([False, False, True, False, True])
    return params, lora, x, targets, mask


def _loss(tiny):
    params, lora, x, targets, mask = tiny
    return lambda: model.loss(params, lora, x, targets, mask)


def test_backward_loss_equals_loss(tiny):
    params, lora, x, targets, mask = tiny
    value, _ = model.backward(params, lora, x, targets, mask)
    assert value == model.loss(params, lora, x, targets, mask)


@pytest.mark.parametrize("name", ["E", "P", "layer0.wq", "layer0.wo", "layer0.w1",
                                  "layer0.g1", "layer0.g2"])
def test_backbone_grads_match_fd(tiny, name):
    params, lora, x, targets, mask = tiny
    _, bundle = model.backward(params, lora, x, targets, mask)
    tensor = params.tensors()[name]
    fd = fd_grad(_loss(tiny), tensor, EPS)
    assert max_rel_err(bundle.backbone[name], fd) < TOL


@pytest.mark.parametrize("name", ["layer0.wq.A", "layer0.wq.B", "layer0.wv.A",
                                  "layer0.wv.B"])
def test_lora_grads_match_fd(tiny, name):
    params, lora, x, targets, mask = tiny
    _, bundle = model.backward(params, lora, x, targets, mask)
    tensor = lora.tensors_by_name[name]
    fd = fd_grad(_loss(tiny), tensor, EPS)
    assert max_rel_err(bundle.lora[name], fd) < TOL


def test_injected_grad_matches_fd(tiny):
    params, lora, x, targets, mask = tiny
    _, bundle = model.backward(params, lora, x, targets, mask)
    fd = fd_grad(_loss(tiny), x.injected, EPS)
    assert max_rel_err(bundle.injected[0], fd) < TOL


def test_unmasked_targets_do_not_affect_loss(tiny):
    params, lora, x, targets, mask = tiny
    base = model.loss(params, lora, x, targets, mask)
    shuffled = targets.copy()
    shuffled[0], shuffled[1], shuffled[3] = 9, 0, 4  # unmasked positions only
    assert model.loss(params, lora, x, shuffled, mask) == base


def test_duplicated_example_keeps_gradients(tiny):
    params, lora, x, targets, mask = tiny
    _, single = model.backward(params, lora, x, targets, mask)
    batch = model.batch_loss_and_grads(params, lora, [x, x], [targets] * 2, [mask] * 2)
    for name, arr in single.backbone.items():
        assert batch.backbone[name] == pytest.approx(arr, abs=1e-12), name
    # injections are per-example inputs: each copy carries half the gradient
    assert batch.injected[0] == pytest.approx(single.injected[0] / 2.0, abs=1e-12)
    assert np.array_equal(batch.injected[0], batch.injected[1])


def test_grads_without_lora_omit_lora_bundle(tiny):
    params, _, x, targets, mask = tiny
    _, bundle = model.backward(params, None, x, targets, mask)
    assert bundle.lora is None
    assert np.any(bundle.backbone["E"] != 0.0)
