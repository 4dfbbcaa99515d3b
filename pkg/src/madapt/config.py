"""Flat ``key = value`` run configuration.

Every key has a typed default below; unknown keys are rejected and ``seed``
must be given explicitly.  Values are parsed by the type of the default:
booleans accept true/false/yes/no/1/0, lists are comma separated.
"""

from __future__ import annotations

import hashlib
import os
from fractions import Fraction
from pathlib import Path

from madapt.backbone import ModelConfig
from madapt.corpus import TOY_HOUR
from madapt.errors import ConfigError
from madapt.meta import EpisodeConfig

WORKERS_ENV = "MADAPT_WORKERS"

# (type, default); list types are tagged with the element type
DEFAULTS: dict[str, tuple] = {
    "seed": (int, None),
    # model
    "model.input_dim": (int, 16),
    "model.downsample_stride": (int, 2),
    "model.hidden_dim": (int, 32),
    "model.num_layers": (int, 4),
    "model.num_codebook_layers": (int, 1),
    "model.codebook_size": (int, 32),
    "model.supervised_layer": (int, 3),
    "model.num_languages": (int, 4),
    # episode
    "episode.inner_steps": (int, 180),
    "episode.outer_steps": (int, 20),
    "episode.inner_lr": (float, 1e-3),
    "episode.inner_warmup_steps": (int, 60),
    "episode.outer_lr_peak": (float, 5e-5),
    "episode.head_warmup_steps": (int, 20),
    "episode.head_lr": (float, 1e-3),
    "episode.beta0": (float, 0.999),
    "episode.tau": (float, 1000.0),
    "episode.batch_size": (int, 1),
    "episode.mask_prob": (float, 0.065),
    "episode.mask_span": (int, 10),
    "episode.codebook_decay": (float, 0.99),
    "episode.active_forgetting": (bool, True),
    # meta
    "meta.optimizer": (str, "foblo"),
    "meta.beta": (float, 0.01),
    "meta.E": (int, 80),
    "meta.W": (int, 2),
    "meta.batch": (int, 2),
    "meta.labels": (bool, True),
    # pretraining of the meta-initialization
    "pretrain.mode": (str, "ssl"),
    "pretrain.steps": (int, 2000),
    "pretrain.lr": (float, 1e-3),
    "pretrain.warmup_steps": (int, 100),
    "pretrain.period": (int, 10),
    # corpus
    "corpus.pool_size": (int, 24),
    "corpus.phones_per_language": (int, 12),
    "corpus.source_ids": ((list, int), [0, 1, 2, 3]),
    "corpus.dev_ids": ((list, int), []),
    "corpus.target_ids": ((list, int), [4]),
    "corpus.source_hours": (float, 3.0),
    "corpus.labeled_fraction": (float, 0.5),
    "corpus.target_hours": (float, 10.0),
    "corpus.test_hours": (float, 1.5),
    "corpus.chunk_hours": (float, 1.0),
    "corpus.toy_hour": (int, TOY_HOUR),
    "corpus.num_speakers": (int, 4),
    "corpus.noise": (float, 0.6),
    "corpus.rotation": (float, 0.5),
    "corpus.bias_scale": (float, 0.1),
    "corpus.speaker_gain": ((list, float), [0.8, 1.2]),
    "corpus.speaker_offset": (float, 0.3),
    # adaptation and evaluation
    "eval.method": (str, "unnamed"),
    "eval.budgets": ((list, float), [0.0, 1.0]),
    "eval.seeds": ((list, int), [0]),
    "eval.adapt_steps": (int, 200),
    "eval.val_every": (int, 0),
    "eval.layers": ((list, int), [3]),
    "eval.units": (str, "kmeans"),
    "eval.num_units": (int, 32),
    "eval.max_items_per_type": (int, 10),
    "eval.max_triples": (int, 500),
    "eval.mapping_split": (float, 0.5),
    "eval.report_layer": (int, 0),
    # io
    "io.corpus_dir": (Path, ""),
    "io.init": (Path, ""),
    "io.phi": (Path, ""),
    "io.checkpoints": ((list, Path), []),
    "io.metrics": ((list, Path), []),
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _parse_scalar(kind, text: str, key: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            value = float(text)
            if not value.is_integer():
                raise ValueError(text)
            return int(value)
        if kind is float:
            # fractions such as 1/6 are accepted for budgets and hours
            return float(Fraction(text))
        if kind is Path:
            return text
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_value(key: str, text: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown configuration key {key!r}")
    kind = DEFAULTS[key][0]
    if isinstance(kind, tuple):
        parts = [p for p in (s.strip() for s in text.split(",")) if p]
        return [_parse_scalar(kind[1], p, key) for p in parts]
    return _parse_scalar(kind, text, key)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_lines(lines, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(key, value)
    return out


class RunConfig:
    """Resolved configuration: defaults, then file values, then overrides."""

    def __init__(self, values: dict, base_dir: Path | str = "."):
        self.values = {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in DEFAULTS.items()}
        for key, value in values.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {key!r}")
            self.values[key] = value
        if self.values["seed"] is None:
            raise ConfigError("seed is mandatory")
        self._resolve_paths(Path(base_dir))
        self._validate()

    @classmethod
    def load(cls, path, overrides=(), seed: int | None = None, env=None) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values = parse_lines(text.splitlines(), str(path))
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            values[key.strip()] = parse_value(key.strip(), value)
        if seed is not None:
            values["seed"] = seed
        env = os.environ if env is None else env
        if env.get(WORKERS_ENV):
            values["meta.W"] = parse_value("meta.W", env[WORKERS_ENV])
        return cls(values, path.parent)

    def _resolve_paths(self, base: Path):
        for key, (kind, _) in DEFAULTS.items():
            value = self.values[key]
            if kind is Path and value:
                self.values[key] = str((base / value).resolve())
            elif kind == (list, Path):
                self.values[key] = [str((base / v).resolve()) for v in value]

    def _validate(self):
        v = self.values
        ids = [("source", i) for i in v["corpus.source_ids"]] + [("dev", i) for i in v["corpus.dev_ids"]] \
            + [("target", i) for i in v["corpus.target_ids"]]
        seen = {}
        for kind, i in ids:
            if i in seen:
                raise ConfigError(f"language id {i} used as both {seen[i]} and {kind}")
            seen[i] = kind
        if not v["corpus.source_ids"]:
            raise ConfigError("corpus.source_ids must not be empty")
        for i in v["corpus.source_ids"]:
            if not 0 <= i < v["model.num_languages"]:
                raise ConfigError(f"source language id {i} has no supervised head "
                                  f"(model.num_languages = {v['model.num_languages']})")
        if v["meta.optimizer"] not in ("foblo", "reptile"):
            raise ConfigError(f"unknown meta optimizer {v['meta.optimizer']!r}")
        if v["pretrain.mode"] not in ("ssl", "interleaved"):
            raise ConfigError(f"unknown pretraining mode {v['pretrain.mode']!r}")
        if v["eval.units"] not in ("kmeans", "codebook"):
            raise ConfigError(f"unknown unit method {v['eval.units']!r}")
        if v["meta.W"] < 1 or v["meta.batch"] < 1 or v["meta.E"] < 1:
            raise ConfigError("meta.E, meta.W and meta.batch must be positive")
        if not 0.0 < v["corpus.labeled_fraction"] <= 1.0:
            raise ConfigError("corpus.labeled_fraction must lie in (0, 1]")
        if len(v["corpus.speaker_gain"]) != 2:
            raise ConfigError("corpus.speaker_gain takes two values: low, high")
        if any(b < 0 for b in v["eval.budgets"]):
            raise ConfigError("budgets must be non-negative")
        self.model_config()
        self.episode_config()

    def __getitem__(self, key):
        return self.values[key]

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            input_dim=v["model.input_dim"], downsample_stride=v["model.downsample_stride"],
            hidden_dim=v["model.hidden_dim"], num_layers=v["model.num_layers"],
            num_codebook_layers=v["model.num_codebook_layers"], codebook_size=v["model.codebook_size"],
            supervised_layer=v["model.supervised_layer"], num_languages=v["model.num_languages"],
            num_phones=v["corpus.pool_size"])

    def episode_config(self) -> EpisodeConfig:
        fields = ("inner_steps", "outer_steps", "inner_lr", "inner_warmup_steps", "outer_lr_peak",
                  "head_warmup_steps", "head_lr", "beta0", "tau", "batch_size", "mask_prob",
                  "mask_span", "codebook_decay", "active_forgetting")
        return EpisodeConfig(**{f: self.values[f"episode.{f}"] for f in fields},
                             supervised_layer=self.values["model.supervised_layer"])

    def frames(self, hours: float) -> int:
        return int(round(hours * self.values["corpus.toy_hour"]))

    def dump(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in DEFAULTS)

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()
