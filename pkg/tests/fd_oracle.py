"""Central finite-difference gradient oracle.

Builds a tiny but fully wired training instance (real templates, synthetic
data, WALS factors, hybrid batches) and compares every analytic gradient the
package produces against central differences of the loss. The error measure
is per-tensor max-norm relative error: max|g - g_fd| / max(max|g_fd|, 1e-8).
"""

from dataclasses import dataclass

import numpy as np

from embrec import model, projectors, train
from embrec.prompts import RenderedPrompt

from worlds import World, build_world

EPS = 1e-5


def fd_grad(loss_fn, tensor: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences, perturbing the tensor in place element by element."""
    out = np.zeros_like(tensor)
    flat = tensor.reshape(-1)
    out_flat = out.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        hi = loss_fn()
        flat[j] = orig - eps
        lo = loss_fn()
        flat[j] = orig
        out_flat[j] = (hi - lo) / (2.0 * eps)
    return out


def max_rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(fd))), 1e-8)
    return float(np.max(np.abs(analytic - fd))) / scale


@dataclass
class GradInstance:
    world: World
    params: model.BackboneParams
    lora: model.LoraParams
    f_u: projectors.ProjectorParams
    f_i: projectors.ProjectorParams
    prompts: list[RenderedPrompt]
    xs: list[model.HybridSequence]
    targets: list[np.ndarray]
    masks: list[np.ndarray]


def build_instance(seed: int) -> GradInstance:
    """2-layer d_model=16 model over a real rendered batch: two sequential
    prompts (user + item slots) plus one straightforward (user slot only)."""
    world = build_world(
        seed=seed, n_users=6, n_items=8, n_clusters=2, items_per_user=5,
        noise_rate=0.2, d_cf=4, n_sweeps=3, d_model=16, n_layers=2,
        n_heads=2, d_ff=24, max_seq_len=48,
    )
    params = model.init_backbone(world.model_cfg)
    lora = model.init_lora(world.model_cfg, rank=2, alpha_lora=4.0, seed=seed + 5)
    # B must be nonzero for gradients to flow into A, so randomize it
    rng = np.random.default_rng(seed + 9)
    for name, arr in lora.tensors_by_name.items():
        if name.endswith(".B"):
            arr[:] = rng.normal(0.0, 0.3, size=arr.shape)
    f_u = projectors.init_projector(world.cf.d_cf, world.model_cfg.d_model, seed + 7)
    f_i = projectors.init_projector(world.cf.d_cf, world.model_cfg.d_model, seed + 8)

    scfg = train.StageConfig(stage=1, steps=1, batch_size=2, seed=seed + 3)
    batch = train.build_batch(world.split, world.catalog, world.templates, world.vocab, scfg, step=0)
    batch += train.build_batch(world.split, world.catalog, world.templates, world.vocab, scfg, step=1)[:1]

    xs, targets, masks = [], [], []
    for prompt in batch:
        extra = tuple(prompt.target[:-1])
        xs.append(train.resolve_slots(prompt, world.cf, f_u, f_i, extra))
        t_ids, mask = train.teacher_forced_arrays(prompt)
        targets.append(t_ids)
        masks.append(mask)
    return GradInstance(
        world=world, params=params, lora=lora, f_u=f_u, f_i=f_i,
        prompts=batch, xs=xs, targets=targets, masks=masks,
    )


def batch_loss(inst: GradInstance, xs=None) -> float:
    """Mean of per-example losses; equals the batched training loss."""
    xs = inst.xs if xs is None else xs
    total = 0.0
    for x, t_ids, mask in zip(xs, inst.targets, inst.masks):
        total += model.loss(inst.params, inst.lora, x, t_ids, mask)
    return total / len(xs)


def reproject_loss(inst: GradInstance) -> float:
    """Loss as a function of the projector parameters: slots are re-resolved
    from the current f_u / f_i before every evaluation."""
    xs = [
        train.resolve_slots(p, inst.world.cf, inst.f_u, inst.f_i, tuple(p.target[:-1]))
        for p in inst.prompts
    ]
    return batch_loss(inst, xs)


def check_instance(inst: GradInstance, eps: float = EPS) -> dict[str, float]:
    """Max-norm relative FD error for every tensor in every parameter group."""
    worst: dict[str, float] = {}
    bundle = model.batch_loss_and_grads(inst.params, inst.lora, inst.xs, inst.targets, inst.masks)

    for name, arr in inst.params.tensors().items():
        fd = fd_grad(lambda: batch_loss(inst), arr, eps)
        worst[f"backbone.{name}"] = max_rel_err(bundle.backbone[name], fd)
    for name, arr in inst.lora.tensors_by_name.items():
        fd = fd_grad(lambda: batch_loss(inst), arr, eps)
        worst[f"lora.{name}"] = max_rel_err(bundle.lora[name], fd)
    for e, x in enumerate(inst.xs):
        if len(x.injected_positions):
            fd = fd_grad(lambda: batch_loss(inst), x.injected, eps)
            worst[f"injected.ex{e}"] = max_rel_err(bundle.injected[e], fd)

    state = train.TrainState(backbone=inst.params, f_u=inst.f_u, f_i=inst.f_i, lora=inst.lora)
    pgrads = train._projector_grads(state, inst.world.cf, inst.prompts, bundle.injected)
    for prefix, proj in (("proj_user", inst.f_u), ("proj_item", inst.f_i)):
        for name, arr in proj.tensors().items():
            fd = fd_grad(lambda: reproject_loss(inst), arr, eps)
            worst[f"{prefix}.{name}"] = max_rel_err(pgrads[f"{prefix}.{name}"], fd)
    return worst
