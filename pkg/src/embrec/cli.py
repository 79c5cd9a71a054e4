"""Command-line pipeline: prepare -> cf-fit -> train -> eval -> report.

One INI config file drives every command; each artifact embeds the sha256 of
that config plus the seed that produced it, and downstream commands reject
artifacts whose hash does not match. Exit codes: 0 ok, 2 input/validation
error, 3 missing prerequisite artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import cf as cf_mod
from . import corpus, evaluate, model, projectors, prompts, train
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    pack_bundle,
    save_checkpoint,
    unpack_backbone,
    unpack_lora,
    unpack_projector,
)
from .config import (
    SEED_LORA,
    SEED_MODEL,
    SEED_PROJ_ITEM,
    SEED_PROJ_USER,
    ConfigError,
    RunConfig,
    load_config,
)
from .prompts import REGIMES, TASKS
from .util import NumericError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

MODEL_NAMES = ("stage1", "stage2", "baseline")


class MissingPrerequisite(RuntimeError):
    """An artifact an earlier pipeline step should have produced is absent."""


# --- artifact paths ------------------------------------------------------------


def data_file(cfg: RunConfig) -> Path:
    return cfg.out_dir / f"{cfg.dataset_name}.txt"


def catalog_file(cfg: RunConfig) -> Path:
    return cfg.out_dir / "catalog.txt"


def splits_file(cfg: RunConfig) -> Path:
    return cfg.out_dir / "splits.txt"


def cf_ckpt_file(cfg: RunConfig) -> Path:
    return cfg.out_dir / "cf.ckpt"


def model_ckpt_file(cfg: RunConfig, name: str) -> Path:
    return cfg.out_dir / f"model_{name}.ckpt"


def _header_lines(cfg: RunConfig) -> tuple[str, str]:
    return (f"config_hash={cfg.config_hash_hex}", f"seed={cfg.seed}")


def _require(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise MissingPrerequisite(f"{path} not found; run `embrec {hint}` first")
    return path


def _check_hash(cfg: RunConfig, meta, path: Path) -> None:
    if meta.config_hash != cfg.config_hash:
        raise CheckpointError(
            f"{path} was produced by a different config "
            f"(hash {meta.config_hash.hex()[:12]}.. != {cfg.config_hash_hex[:12]}..)"
        )


# --- shared loading ------------------------------------------------------------


def _load_prepared(cfg: RunConfig):
    path = _require(data_file(cfg), "prepare")
    log = corpus.load_interactions(path)
    catalog = corpus.build_catalog(log)
    split = corpus.leave_one_out_split(log)
    return log, catalog, split


def _templates_vocab_model(cfg: RunConfig, catalog, split):
    templates = prompts.load_templates()
    vocab = prompts.build_vocabulary(
        templates, catalog, split.dataset_name, n_users=split.n_users
    )
    model_cfg = model.ModelConfig(
        d_model=cfg.model.d_model,
        n_layers=cfg.model.n_layers,
        n_heads=cfg.model.n_heads,
        d_ff=cfg.model.d_ff,
        vocab_size=vocab.size,
        max_seq_len=cfg.model.max_seq_len,
        seed=cfg.seed + SEED_MODEL,
    )
    return templates, vocab, model_cfg


def _load_cf(cfg: RunConfig, split, catalog) -> cf_mod.CFModel:
    path = _require(cf_ckpt_file(cfg), "cf-fit")
    meta, sections = load_checkpoint(path)
    _check_hash(cfg, meta, path)
    u, v = sections.get("U"), sections.get("V")
    if u is None or v is None:
        raise CheckpointError(f"{path}: missing U/V sections")
    if u.shape != (split.n_users, cfg.wals.d_cf) or v.shape != (catalog.n_items, cfg.wals.d_cf):
        raise CheckpointError(f"{path}: factor shapes do not match the prepared data")
    return cf_mod.CFModel(
        U=u, V=v, d_cf=cfg.wals.d_cf, lam=cfg.wals.lam, alpha=cfg.wals.alpha
    )


# --- commands ------------------------------------------------------------------


def cmd_prepare(cfg: RunConfig) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.synthetic is not None:
        log = corpus.generate_synthetic(cfg.synthetic)
    else:
        if not cfg.data_path.is_file():
            raise ConfigError(f"data.path: file not found: {cfg.data_path}")
        log = corpus.load_interactions(cfg.data_path)
    corpus.write_interactions(log, data_file(cfg), header=_header_lines(cfg))
    catalog = corpus.build_catalog(log)
    split = corpus.leave_one_out_split(log)

    header = "".join(f"# {line}\n" for line in _header_lines(cfg))
    with open(catalog_file(cfg), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header)
        for item in catalog.items:
            fh.write(item + "\n")
    with open(splits_file(cfg), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header)
        for user in split.users:
            fh.write(
                f"{user.user_id}\ttrain={','.join(user.train_items)}"
                f"\tval={user.val_target}\ttest={user.test_target}\n"
            )
    print(
        f"prepared {split.n_users} users, {catalog.n_items} items -> {data_file(cfg)}"
    )
    return EXIT_OK


def cmd_cf_fit(cfg: RunConfig) -> int:
    _, catalog, split = _load_prepared(cfg)
    trace: list[float] = []
    cf_model = cf_mod.fit_wals(split, catalog, cfg.wals, trace=trace)
    save_checkpoint(
        cf_ckpt_file(cfg), {"U": cf_model.U, "V": cf_model.V},
        cfg.config_hash, cfg.wals.seed,
    )
    lines = [f"# {line}" for line in _header_lines(cfg)]
    for i, value in enumerate(trace):
        if i == 0:
            phase = "init"
        else:
            side = "users" if i % 2 == 1 else "items"
            phase = f"sweep{(i + 1) // 2:02d}.{side}"
        lines.append(f"phase={phase} objective={value:.6f}")
    (cfg.out_dir / "cf_fit.log").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wals objective: {trace[0]:.6f} -> {trace[-1]:.6f}")
    print(f"wrote {cf_ckpt_file(cfg)}")
    return EXIT_OK


def _train_log_sink(path: Path):
    fh = open(path, "w", encoding="utf-8", newline="\n")

    def sink(record: train.StepRecord) -> None:
        fh.write(record.line() + "\n")
        if record.step % 200 == 0:
            print(record.line())

    return fh, sink


def cmd_train(cfg: RunConfig, stage: int | None, baseline: bool) -> int:
    _, catalog, split = _load_prepared(cfg)
    templates, vocab, model_cfg = _templates_vocab_model(cfg, catalog, split)

    if baseline:
        name, log_name = "baseline", "train_baseline.log"
        backbone = model.init_backbone(model_cfg)
        lora = model.init_lora(
            model_cfg, cfg.baseline.lora_rank, cfg.baseline.lora_alpha,
            cfg.seed + SEED_LORA,
        )
        state = train.TrainState(backbone=backbone, f_u=None, f_i=None, lora=lora)
        fh, sink = _train_log_sink(cfg.out_dir / log_name)
        with fh:
            train.train_baseline(state, split, catalog, templates, vocab, cfg.baseline, sink)
        sections = pack_bundle(backbone=state.backbone, lora=state.lora)
    elif stage == 1:
        name, log_name = "stage1", "train_stage1.log"
        cf_model = _load_cf(cfg, split, catalog)
        backbone = model.init_backbone(model_cfg)
        f_u = projectors.init_projector(
            cfg.wals.d_cf, model_cfg.d_model, cfg.seed + SEED_PROJ_USER
        )
        f_i = projectors.init_projector(
            cfg.wals.d_cf, model_cfg.d_model, cfg.seed + SEED_PROJ_ITEM
        )
        state = train.TrainState(backbone=backbone, f_u=f_u, f_i=f_i)
        fh, sink = _train_log_sink(cfg.out_dir / log_name)
        with fh:
            train.train_stage1(state, split, catalog, templates, vocab, cf_model, cfg.stage1, sink)
        sections = pack_bundle(backbone=state.backbone, f_u=state.f_u, f_i=state.f_i)
    else:
        name, log_name = "stage2", "train_stage2.log"
        cf_model = _load_cf(cfg, split, catalog)
        prev_path = _require(model_ckpt_file(cfg, "stage1"), "train --stage 1")
        meta, sections = load_checkpoint(prev_path)
        _check_hash(cfg, meta, prev_path)
        backbone = unpack_backbone(model_cfg, sections)
        f_u = unpack_projector("proj_user", sections)
        f_i = unpack_projector("proj_item", sections)
        lora = model.init_lora(
            model_cfg, cfg.stage2.lora_rank, cfg.stage2.lora_alpha,
            cfg.seed + SEED_LORA,
        )
        state = train.TrainState(backbone=backbone, f_u=f_u, f_i=f_i, lora=lora)
        fh, sink = _train_log_sink(cfg.out_dir / log_name)
        with fh:
            train.train_stage2(state, split, catalog, templates, vocab, cf_model, cfg.stage2, sink)
        sections = pack_bundle(
            backbone=state.backbone, lora=state.lora, f_u=state.f_u, f_i=state.f_i
        )

    out = model_ckpt_file(cfg, name)
    save_checkpoint(out, sections, cfg.config_hash, cfg.seed)
    print(f"wrote {out}")
    return EXIT_OK


def _load_bundle(cfg: RunConfig, name: str, split, catalog, vocab, model_cfg):
    hint = "train --baseline" if name == "baseline" else f"train --stage {name[-1]}"
    path = _require(model_ckpt_file(cfg, name), hint)
    meta, sections = load_checkpoint(path)
    _check_hash(cfg, meta, path)
    backbone = unpack_backbone(model_cfg, sections)
    if name == "baseline":
        lora = unpack_lora(
            model_cfg, cfg.baseline.lora_rank, cfg.baseline.lora_alpha, sections
        )
        return evaluate.ModelBundle(
            backbone=backbone, lora=lora, f_u=None, f_i=None,
            cf=None, vocab=vocab, text_mode=True,
        )
    f_u = unpack_projector("proj_user", sections)
    f_i = unpack_projector("proj_item", sections)
    lora = None
    if name == "stage2":
        lora = unpack_lora(model_cfg, cfg.stage2.lora_rank, cfg.stage2.lora_alpha, sections)
    cf_model = _load_cf(cfg, split, catalog)
    return evaluate.ModelBundle(
        backbone=backbone, lora=lora, f_u=f_u, f_i=f_i,
        cf=cf_model, vocab=vocab, text_mode=False,
    )


def cmd_eval(cfg: RunConfig, which: str, name: str) -> int:
    _, catalog, split = _load_prepared(cfg)
    templates, vocab, model_cfg = _templates_vocab_model(cfg, catalog, split)
    bundle = _load_bundle(cfg, name, split, catalog, vocab, model_cfg)

    slices = []
    for task in TASKS:
        for regime in REGIMES:
            results = evaluate.rank_all(
                bundle, split, catalog, templates, task, regime, which,
                cfg.eval_max_history,
            )
            evaluate.write_rankings(
                cfg.out_dir / f"rankings_{name}_{which}_{task}_{regime}.txt", results
            )
            slices.append(evaluate.aggregate(task, regime, results))
    report = evaluate.EvalReport(slices=tuple(slices))
    report_path = cfg.out_dir / f"report_{name}_{which}.txt"
    evaluate.write_report(report_path, report, cfg.config_hash_hex, cfg.seed, which)
    for line in report.lines():
        print(line)
    print(f"wrote {report_path}")
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    paths = sorted(cfg.out_dir.glob("report_*.txt"))
    if not paths:
        raise MissingPrerequisite(f"no report files in {cfg.out_dir}; run `embrec eval`")
    for path in paths:
        records = evaluate.read_report(path)
        print(f"== {path.stem} ==")
        print(f"{'task':<16} {'regime':<8} {'hr@5':>8} {'ndcg@5':>8} {'hr@10':>8} {'ndcg@10':>8}")
        for task in TASKS:
            for regime in REGIMES:
                row = [records[(task, regime, m)] for m in ("hr@5", "ndcg@5", "hr@10", "ndcg@10")]
                print(
                    f"{task:<16} {regime:<8} "
                    + " ".join(f"{v:8.4f}" for v in row)
                )
    return EXIT_OK


# --- entry point ---------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embrec",
        description="CF-grounded prompt recommender: data, WALS, two-stage training, ranking eval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the run config (INI)")
        return p

    add("prepare", "generate or ingest interactions; write catalog and split")
    add("cf-fit", "fit WALS factors on the prepared interactions")
    p_train = add("train", "run stage-1/stage-2 training or the text-only baseline")
    group = p_train.add_mutually_exclusive_group(required=True)
    group.add_argument("--stage", type=int, choices=(1, 2))
    group.add_argument("--baseline", action="store_true")
    p_eval = add("eval", "rank the full catalog and write HR/NDCG reports")
    p_eval.add_argument("--which", choices=("val", "test"), default="test")
    p_eval.add_argument("--model", choices=MODEL_NAMES, default="stage2")
    add("report", "pretty-print all reports in the output directory")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if cfg.threads > 1:
            print("warning: threads > 1 not implemented; running single-threaded", file=sys.stderr)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "cf-fit":
            return cmd_cf_fit(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.stage, args.baseline)
        if args.command == "eval":
            return cmd_eval(cfg, args.which, args.model)
        return cmd_report(cfg)
    except MissingPrerequisite as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
