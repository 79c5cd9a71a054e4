"""Run configuration: one INI-style key=value file drives every command.

The file is parsed with configparser; unknown sections or keys are rejected
so typos fail loudly. A sha256 over the normalized section.key=value dump is
embedded in every artifact header, and downstream commands refuse artifacts
whose hash does not match the config they were given.

Component seeds derive from the single global seed by fixed offsets, so one
number pins the whole pipeline.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .cf import WalsConfig
from .corpus import SyntheticConfig
from .train import StageConfig


class ConfigError(ValueError):
    """Raised for unparseable or invalid run configs."""


# seed offsets from the global seed, one per seeded component
SEED_DATA = 0
SEED_WALS = 1
SEED_MODEL = 2
SEED_STAGE1 = 3
SEED_STAGE2 = 4
SEED_LORA = 5
SEED_BASELINE = 6
SEED_PROJ_USER = 7
SEED_PROJ_ITEM = 8

_KNOWN_KEYS = {
    "run": {"seed", "out_dir", "threads"},
    "data": {"source", "path", "n_users", "n_items", "n_clusters", "items_per_user", "noise_rate"},
    "wals": {"d_cf", "lam", "alpha", "n_sweeps", "init_scale"},
    "model": {"d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"},
    "stage1": {"steps", "batch_size", "learning_rate", "beta1", "beta2", "epsilon", "max_history"},
    "stage2": {"steps", "batch_size", "learning_rate", "beta1", "beta2", "epsilon",
               "max_history", "lora_rank", "lora_alpha"},
    "baseline": {"steps", "batch_size", "learning_rate", "beta1", "beta2", "epsilon",
                 "max_history", "lora_rank", "lora_alpha"},
    "eval": {"max_history"},
}


@dataclass(frozen=True)
class ModelDims:
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 128


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: Path
    threads: int
    data_path: Path | None  # set for file-backed data
    synthetic: SyntheticConfig | None  # set for generated data
    wals: WalsConfig
    model: ModelDims
    stage1: StageConfig
    stage2: StageConfig
    baseline: StageConfig
    eval_max_history: int
    config_hash: bytes  # sha256 digest of the normalized config

    @property
    def config_hash_hex(self) -> str:
        return self.config_hash.hex()

    @property
    def dataset_name(self) -> str:
        return "synthetic" if self.synthetic is not None else self.data_path.stem


def _hash_items(parser: configparser.ConfigParser) -> bytes:
    lines = []
    for section in sorted(parser.sections()):
        for key, value in sorted(parser.items(section)):
            lines.append(f"{section}.{key}={value}")
    return hashlib.sha256("\n".join(lines).encode("utf-8")).digest()


class _Section:
    """Typed accessors with section.key error messages."""

    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.parser = parser
        self.name = name

    def _get(self, key, conv, default):
        if not self.parser.has_option(self.name, key):
            if default is None:
                raise ConfigError(f"{self.name}.{key}: required key missing")
            return default
        raw = self.parser.get(self.name, key)
        try:
            return conv(raw)
        except ValueError as err:
            raise ConfigError(f"{self.name}.{key}: {err}") from err

    def get_int(self, key, default=None):
        return self._get(key, int, default)

    def get_float(self, key, default=None):
        return self._get(key, float, default)

    def get_str(self, key, default=None):
        return self._get(key, str, default)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from err

    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, _ in parser.items(section):
            if key not in _KNOWN_KEYS[section]:
                raise ConfigError(f"unknown key {section}.{key}")

    run = _Section(parser, "run")
    seed = run.get_int("seed", 0)
    out_dir = Path(run.get_str("out_dir", "runs/default"))
    threads = run.get_int("threads", 1)
    if threads < 1:
        raise ConfigError("run.threads: must be >= 1")

    data = _Section(parser, "data")
    source = data.get_str("source", "synthetic")
    data_path = None
    synthetic = None
    try:
        if source == "synthetic":
            synthetic = SyntheticConfig(
                n_users=data.get_int("n_users", 400),
                n_items=data.get_int("n_items", 100),
                n_clusters=data.get_int("n_clusters", 8),
                items_per_user=data.get_int("items_per_user", 12),
                noise_rate=data.get_float("noise_rate", 0.2),
                seed=seed + SEED_DATA,
            )
        elif source == "file":
            data_path = Path(data.get_str("path"))
        else:
            raise ConfigError(f"data.source: must be synthetic or file, got {source!r}")

        wals_sec = _Section(parser, "wals")
        wals = WalsConfig(
            d_cf=wals_sec.get_int("d_cf", 8),
            lam=wals_sec.get_float("lam", 0.1),
            alpha=wals_sec.get_float("alpha", 40.0),
            n_sweeps=wals_sec.get_int("n_sweeps", 15),
            init_scale=wals_sec.get_float("init_scale", 0.1),
            seed=seed + SEED_WALS,
        )

        model_sec = _Section(parser, "model")
        model = ModelDims(
            d_model=model_sec.get_int("d_model", 128),
            n_layers=model_sec.get_int("n_layers", 2),
            n_heads=model_sec.get_int("n_heads", 4),
            d_ff=model_sec.get_int("d_ff", 512),
            max_seq_len=model_sec.get_int("max_seq_len", 128),
        )

        def stage(section_name, stage_no, seed_offset, **overrides):
            sec = _Section(parser, section_name)
            kwargs = dict(
                stage=stage_no,
                steps=sec.get_int("steps", overrides.pop("steps")),
                batch_size=sec.get_int("batch_size", 16),
                learning_rate=sec.get_float("learning_rate", 1e-2),
                beta1=sec.get_float("beta1", 0.9),
                beta2=sec.get_float("beta2", 0.999),
                epsilon=sec.get_float("epsilon", 1e-8),
                max_history=sec.get_int("max_history", 20),
                seed=seed + seed_offset,
            )
            if stage_no == 2:
                kwargs["lora_rank"] = sec.get_int("lora_rank", 8)
                kwargs["lora_alpha"] = sec.get_float("lora_alpha", 16.0)
            return StageConfig(**kwargs)

        stage1 = stage("stage1", 1, SEED_STAGE1, steps=200)
        stage2 = stage("stage2", 2, SEED_STAGE2, steps=1200)
        # the baseline gets the combined embed budget unless overridden
        baseline = stage(
            "baseline", 2, SEED_BASELINE, steps=stage1.steps + stage2.steps
        )

        eval_sec = _Section(parser, "eval")
        eval_max_history = eval_sec.get_int("max_history", 20)
        if eval_max_history < 1:
            raise ConfigError("eval.max_history: must be >= 1")
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from err

    return RunConfig(
        seed=seed,
        out_dir=out_dir,
        threads=threads,
        data_path=data_path,
        synthetic=synthetic,
        wals=wals,
        model=model,
        stage1=stage1,
        stage2=stage2,
        baseline=baseline,
        eval_max_history=eval_max_history,
        config_hash=_hash_items(parser),
    )
