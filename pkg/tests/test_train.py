"""Training loop contracts: batching, slot resolution, Adam, stage freezes."""

import numpy as np
import pytest

from embrec import model, projectors, train
from embrec.model import HybridSequence
from embrec.prompts import ItemSlot, Text, UserSlot, build_vocabulary
from embrec.train import StageConfig, TrainState
from embrec.util import tensor_digest

from worlds import build_world


@pytest.fixture(scope="module")
def world():
    return build_world(seed=3, n_users=48, n_items=12, n_clusters=3,
                       items_per_user=6, noise_rate=0.1, d_cf=4, n_sweeps=5,
                       d_model=32, n_layers=1, n_heads=2, d_ff=64)


def _fresh_state(world, seed=10, lora=None):
    backbone = model.init_backbone(world.model_cfg)
    f_u = projectors.init_projector(world.cf.d_cf, world.model_cfg.d_model, seed=seed)
    f_i = projectors.init_projector(world.cf.d_cf, world.model_cfg.d_model, seed=seed + 1)
    return TrainState(backbone, f_u, f_i, lora=lora)


def _stage1_cfg(**kw):
    base = dict(stage=1, steps=3, batch_size=4, learning_rate=1e-2, seed=13,
                max_history=8)
    base.update(kw)
    return StageConfig(**base)


def _stage2_cfg(**kw):
    base = dict(stage=2, steps=3, batch_size=4, learning_rate=1e-2, seed=14,
                max_history=8, lora_rank=4, lora_alpha=8.0)
    base.update(kw)
    return StageConfig(**base)


# --- config ------------------------------------------------------------------------


def test_stage_config_validation():
    with pytest.raises(ValueError, match="stage must be 1 or 2"):
        StageConfig(stage=3)
    with pytest.raises(ValueError, match="no LoRA"):
        StageConfig(stage=1, lora_rank=2, lora_alpha=4.0)
    with pytest.raises(ValueError, match="lora_rank"):
        StageConfig(stage=2)
    with pytest.raises(ValueError, match="steps/batch_size"):
        StageConfig(stage=1, steps=-1)
    with pytest.raises(ValueError, match="steps/batch_size"):
        StageConfig(stage=1, batch_size=0)
    with pytest.raises(ValueError, match="max_history"):
        StageConfig(stage=1, max_history=0)


# --- batches ------------------------------------------------------------------------


def test_batch_task_alternates_by_step(world):
    cfg = _stage1_cfg()
    even = train.build_batch(world.split, world.catalog, world.templates,
                             world.vocab, cfg, 0)
    odd = train.build_batch(world.split, world.catalog, world.templates,
                            world.vocab, cfg, 1)
    assert all(p.task == "sequential" for p in even)
    assert all(p.task == "straightforward" for p in odd)
    assert all(p.item_slots() for p in even)
    assert all(not p.item_slots() for p in odd)


def test_batch_is_pure_function_of_seed_and_step(world):
    cfg = _stage1_cfg()
    a = train.build_batch(world.split, world.catalog, world.templates,
                          world.vocab, cfg, 5)
    b = train.build_batch(world.split, world.catalog, world.templates,
                          world.vocab, cfg, 5)
    assert a == b
    c = train.build_batch(world.split, world.catalog, world.templates,
                          world.vocab, cfg, 6)
    assert a != c


def test_batch_uses_seen_templates_and_train_target(world):
    cfg = _stage1_cfg(batch_size=16)
    for step in (0, 1):
        for p in train.build_batch(world.split, world.catalog, world.templates,
                                   world.vocab, cfg, step):
            assert 0 <= p.template_id <= 9
            user = world.split.users[p.user_slots()[0]]
            want = world.vocab.item_token(world.catalog.index_of(user.train_items[-1]))
            assert p.target[-2] == want


def test_batch_history_is_truncated_train_prefix(world):
    cfg = _stage1_cfg(batch_size=16, max_history=2)
    for p in train.build_batch(world.split, world.catalog, world.templates,
                               world.vocab, cfg, 0):
        user = world.split.users[p.user_slots()[0]]
        prefix = [world.catalog.index_of(it) for it in user.train_items[:-1]]
        assert p.item_slots() == prefix[-2:]


def test_sequential_batch_requires_two_train_items(world):
    # users hold 3 items -> exactly 1 train item after the holdouts
    thin = build_world(seed=4, n_users=8, n_items=6, n_clusters=2,
                       items_per_user=3, fit_cf=False)
    with pytest.raises(ValueError, match=">= 2 train items"):
        train.build_batch(thin.split, thin.catalog, thin.templates, thin.vocab,
                          _stage1_cfg(), 0)
    # straightforward batches still work: no history needed
    batch = train.build_batch(thin.split, thin.catalog, thin.templates,
                              thin.vocab, _stage1_cfg(), 1)
    assert len(batch) == 4


# --- adam ---------------------------------------------------------------------------


def test_adam_first_step_closed_form():
    tensors = {"w": np.asarray([1.0, -2.0, 0.5])}
    grads = {"w": np.asarray([0.3, -0.1, 0.0])}
    state = train.init_adam(tensors)
    train.adam_step(tensors, grads, state, 0.01, 0.9, 0.999, 1e-8)
    g = grads["w"]
    want = np.asarray([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
    assert tensors["w"] == pytest.approx(want, abs=1e-12)
    assert state.t == 1


def test_adam_zero_gradient_is_a_no_op():
    tensors = {"w": np.asarray([1.0, 2.0])}
    state = train.init_adam(tensors)
    train.adam_step(tensors, {"w": np.zeros(2)}, state, 0.1, 0.9, 0.999, 1e-8)
    assert np.array_equal(tensors["w"], [1.0, 2.0])


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    def run():
        tensors = {"w": np.ones((3, 2)), "b": np.zeros(4)}
        state = train.init_adam(tensors)
        r = np.random.default_rng(7)
        for _ in range(5):
            grads = {k: r.normal(size=a.shape) for k, a in tensors.items()}
            train.adam_step(tensors, grads, state, 0.01, 0.9, 0.999, 1e-8)
        return tensors
    a, b = run(), run()
    assert a["w"].tobytes() == b["w"].tobytes() and a["b"].tobytes() == b["b"].tobytes()


# --- slot resolution ---------------------------------------------------------------


def test_resolve_slots_structure(world):
    cfg = _stage1_cfg()
    prompt = train.build_batch(world.split, world.catalog, world.templates,
                               world.vocab, cfg, 0)[0]
    state = _fresh_state(world)
    extra = tuple(prompt.target[:-1])
    x = train.resolve_slots(prompt, world.cf, state.f_u, state.f_i, extra)
    n_slots = len(prompt.user_slots()) + len(prompt.item_slots())
    assert x.length == len(prompt.elements) + len(extra)
    assert len(x.injected_positions) == n_slots
    assert x.injected.shape == (n_slots, world.model_cfg.d_model)
    slot_positions = [i for i, el in enumerate(prompt.elements)
                      if not isinstance(el, Text)]
    assert list(x.injected_positions) == slot_positions
    assert all(x.token_ids[p] == -1 for p in slot_positions)
    assert tuple(x.token_ids[len(prompt.elements):]) == extra


def test_resolve_slots_routes_rows_to_the_right_projector(world):
    prompt = train.build_batch(world.split, world.catalog, world.templates,
                               world.vocab, _stage1_cfg(), 0)[0]
    d_cf, d_model = world.cf.d_cf, world.model_cfg.d_model
    f_u = projectors.init_projector(d_cf, d_model, seed=0)
    f_i = projectors.init_projector(d_cf, d_model, seed=0)
    for proj, fill in ((f_u, 1.0), (f_i, 2.0)):
        for arr in proj.tensors().values():
            arr[:] = 0.0
        proj.b2[:] = fill  # zero weights: output == b2 regardless of the input
    x = train.resolve_slots(prompt, world.cf, f_u, f_i)
    kinds = [isinstance(el, UserSlot) for el in prompt.elements
             if not isinstance(el, Text)]
    for row, is_user in enumerate(kinds):
        assert np.all(x.injected[row] == (1.0 if is_user else 2.0))


def test_resolve_slots_text_uses_atomic_tokens(world):
    prompt = train.build_batch(world.split, world.catalog, world.templates,
                               world.vocab, _stage1_cfg(), 0)[0]
    x = train.resolve_slots_text(prompt, world.vocab, extra_tokens=(3, 4))
    assert len(x.injected_positions) == 0
    assert np.all(x.token_ids >= 0)
    want = []
    for el in prompt.elements:
        if isinstance(el, Text):
            want.append(el.token_id)
        elif isinstance(el, UserSlot):
            want.append(world.vocab.user_token(el.user_index))
        else:
            want.append(world.vocab.item_token(el.item_index))
    assert list(x.token_ids) == want + [3, 4]


def test_teacher_forced_arrays_alignment(world):
    prompt = train.build_batch(world.split, world.catalog, world.templates,
                               world.vocab, _stage1_cfg(), 0)[0]
    t_ids, mask = train.teacher_forced_arrays(prompt)
    assert len(t_ids) == len(mask) == len(prompt.elements) + len(prompt.target) - 1
    assert np.array_equal(t_ids[mask], prompt.target)
    # slot positions are never scored
    for pos, el in enumerate(prompt.elements):
        if not isinstance(el, Text) and pos >= 1:
            assert not mask[pos - 1]
    assert np.all(t_ids[~mask] >= -1)


# --- stage contracts ----------------------------------------------------------------


def test_stage1_moves_projectors_only(world):
    state = _fresh_state(world)
    before_backbone = tensor_digest(state.backbone.tensors())
    before_u = tensor_digest(state.f_u.tensors())
    before_i = tensor_digest(state.f_i.tensors())
    records = []
    train.train_stage1(state, world.split, world.catalog, world.templates,
                       world.vocab, world.cf, _stage1_cfg(steps=4),
                       on_step=records.append)
    assert tensor_digest(state.backbone.tensors()) == before_backbone
    assert tensor_digest(state.f_u.tensors()) != before_u
    assert tensor_digest(state.f_i.tensors()) != before_i
    assert state.lora is None
    assert [r.step for r in records] == [0, 1, 2, 3]
    assert all(r.stage == 1 and np.isfinite(r.loss) for r in records)
    assert [r.task for r in records] == ["sequential", "straightforward"] * 2


def test_straightforward_batch_yields_zero_item_projector_grads(world):
    state = _fresh_state(world)
    cfg = _stage1_cfg()
    prompts = train.build_batch(world.split, world.catalog, world.templates,
                                world.vocab, cfg, 1)
    xs, targets, masks = [], [], []
    for p in prompts:
        xs.append(train.resolve_slots(p, world.cf, state.f_u, state.f_i,
                                      tuple(p.target[:-1])))
        t_ids, mask = train.teacher_forced_arrays(p)
        targets.append(t_ids)
        masks.append(mask)
    bundle = model.batch_loss_and_grads(state.backbone, None, xs, targets, masks)
    grads = train._projector_grads(state, world.cf, prompts, bundle.injected)
    assert all(np.all(grads[k] == 0.0) for k in grads if k.startswith("proj_item."))
    assert any(np.any(grads[k] != 0.0) for k in grads if k.startswith("proj_user."))


def test_stage2_freezes_base_and_moves_lora(world):
    lora = model.init_lora(world.model_cfg, rank=4, alpha_lora=8.0, seed=12)
    state = _fresh_state(world, lora=lora)
    before_backbone = tensor_digest(state.backbone.tensors())
    before_lora = tensor_digest(state.lora.tensors_by_name)
    before_u = tensor_digest(state.f_u.tensors())
    train.train_stage2(state, world.split, world.catalog, world.templates,
                       world.vocab, world.cf, _stage2_cfg(steps=4))
    assert tensor_digest(state.backbone.tensors()) == before_backbone
    assert tensor_digest(state.lora.tensors_by_name) != before_lora
    assert tensor_digest(state.f_u.tensors()) != before_u
    assert any(np.any(arr != 0.0) for name, arr in state.lora.tensors_by_name.items()
               if name.endswith(".B"))


def test_stage_functions_reject_mismatched_configs(world):
    state = _fresh_state(world)
    with pytest.raises(ValueError, match="stage-1 config"):
        train.train_stage1(state, world.split, world.catalog, world.templates,
                           world.vocab, world.cf, _stage2_cfg())
    with pytest.raises(ValueError, match="stage-2 config"):
        train.train_stage2(state, world.split, world.catalog, world.templates,
                           world.vocab, world.cf, _stage1_cfg())
    with pytest.raises(ValueError, match="needs LoRA"):
        train.train_stage2(state, world.split, world.catalog, world.templates,
                           world.vocab, world.cf, _stage2_cfg())


def test_lora_attach_is_transparent_before_any_step(world):
    state = _fresh_state(world)
    train.train_stage1(state, world.split, world.catalog, world.templates,
                       world.vocab, world.cf, _stage1_cfg(steps=2))
    prompt = train.build_batch(world.split, world.catalog, world.templates,
                               world.vocab, _stage1_cfg(), 0)[0]
    x = train.resolve_slots(prompt, world.cf, state.f_u, state.f_i)
    before = model.forward(state.backbone, None, x)
    state.lora = model.init_lora(world.model_cfg, rank=4, alpha_lora=8.0, seed=12)
    after = model.forward(state.backbone, state.lora, x)
    assert np.array_equal(before, after)


def test_baseline_trains_lora_only_and_needs_user_tokens(world):
    state = _fresh_state(world)
    with pytest.raises(ValueError, match="needs LoRA"):
        train.train_baseline(state, world.split, world.catalog, world.templates,
                             world.vocab, _stage2_cfg())
    state.lora = model.init_lora(world.model_cfg, rank=4, alpha_lora=8.0, seed=15)
    small_vocab = build_vocabulary(world.templates, world.catalog,
                                   world.split.dataset_name, n_users=1)
    with pytest.raises(ValueError, match="per-user tokens"):
        train.train_baseline(state, world.split, world.catalog, world.templates,
                             small_vocab, _stage2_cfg())
    before_backbone = tensor_digest(state.backbone.tensors())
    before_u = tensor_digest(state.f_u.tensors())
    records = []
    train.train_baseline(state, world.split, world.catalog, world.templates,
                         world.vocab, _stage2_cfg(steps=3), on_step=records.append)
    assert tensor_digest(state.backbone.tensors()) == before_backbone
    assert tensor_digest(state.f_u.tensors()) == before_u
    assert all(r.stage == 0 for r in records)


def test_training_is_deterministic(world):
    def run():
        state = _fresh_state(world)
        losses = []
        train.train_stage1(state, world.split, world.catalog, world.templates,
                           world.vocab, world.cf, _stage1_cfg(steps=3),
                           on_step=lambda r: losses.append(r.loss))
        return tensor_digest(state.f_u.tensors()), losses
    (du_a, la), (du_b, lb) = run(), run()
    assert du_a == du_b and la == lb


def test_stage2_loss_descends_on_planted_data(world):
    lora = model.init_lora(world.model_cfg, rank=4, alpha_lora=8.0, seed=12)
    state = _fresh_state(world, lora=lora)
    losses = []
    cfg = _stage2_cfg(steps=60, batch_size=8, seed=13)
    train.train_stage2(state, world.split, world.catalog, world.templates,
                       world.vocab, world.cf, cfg,
                       on_step=lambda r: losses.append(r.loss))
    assert np.mean(losses[-15:]) < np.mean(losses[:15]) - 0.5


def test_step_record_line_format():
    rec = train.StepRecord(step=7, stage=2, task="sequential", loss=1.25)
    assert rec.line() == "step=7 stage=2 task=sequential loss=1.250000"
