"""Experiment commands: corpus generation, pretraining, meta-training,
adaptation, evaluation and reporting.

Each command reads a resolved RunConfig, writes its artifacts into a fresh
output directory together with ``config.resolved`` and ``manifest.json``,
and returns the manifest dict.
"""

from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from madapt.backbone import EncoderParams, init_params
from madapt.checkpoint import read_checkpoint, write_checkpoint
from madapt.config import RunConfig
from madapt.corpus import (Corpus, Task, export_alignments, gen_language_pool, gen_language_spec,
                           partition_chunks, read_corpus, synthesize_corpus, take_frames, write_corpus)
from madapt.errors import ConfigError, DataError, EvaluationError
from madapt.evaluation import MetricsReport, evaluate
from madapt.meta import adapt, multi_task_pretrain, run_meta_training
from madapt.report import write_report

log = logging.getLogger("madapt")

MANIFEST = "manifest.json"
RESOLVED = "config.resolved"


class Run:
    """Output directory bookkeeping for one command invocation."""

    def __init__(self, command: str, config: RunConfig, out: Path | str | None):
        self.command = command
        self.config = config
        digest = config.digest()
        self.out = Path(out) if out else Path("runs") / f"{command}-{digest[:12]}"
        if self.out.exists() and any(self.out.iterdir()):
            raise ConfigError(f"output directory {self.out} is not empty")
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []
        self.timings: dict[str, float] = {}
        self.extra: dict = {}
        self._t0 = time.perf_counter()
        (self.out / RESOLVED).write_text(config.dump())

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(name)
        return p

    def time(self, label: str, start: float):
        self.timings[label] = round(time.perf_counter() - start, 6)

    def finish(self) -> dict:
        self.timings["total"] = round(time.perf_counter() - self._t0, 6)
        missing = [a for a in self.artifacts if not (self.out / a).exists()]
        if missing:
            raise DataError(f"artifacts missing at manifest time: {missing}")
        manifest = {
            "run_id": f"{self.command}-{self.config.digest()[:12]}",
            "command": self.command,
            "config_digest": self.config.digest(),
            "config": RESOLVED,
            "artifacts": sorted(self.artifacts),
            "timings": self.timings,
            **self.extra,
        }
        (self.out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


# -- corpus layout ----------------------------------------------------------

def archive_name(kind: str, language_id: int, labeled: bool = False) -> str:
    return f"{kind}_{language_id}{'.labeled' if labeled else ''}.madc"


def _seed_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


def build_language(config: RunConfig, language_id: int):
    c = config
    pool = gen_language_pool(c["corpus.pool_size"], c["model.input_dim"], _seed_rng(c["seed"], 0))
    return gen_language_spec(pool, c["corpus.phones_per_language"], _seed_rng(c["seed"], 1, language_id),
                             language_id=language_id, rotation_strength=c["corpus.rotation"],
                             bias_scale=c["corpus.bias_scale"])


def _synthesize(config: RunConfig, language_id: int, frames: int) -> Corpus:
    c = config
    spec = build_language(config, language_id)
    return synthesize_corpus(spec, frames, c["corpus.num_speakers"], c["corpus.noise"],
                             _seed_rng(c["seed"], 2, language_id), gain_range=tuple(c["corpus.speaker_gain"]),
                             offset_sigma=c["corpus.speaker_offset"])


def labeled_subset(corpus: Corpus, fraction: float) -> Corpus:
    utts = take_frames(corpus, int(math.ceil(fraction * corpus.total_frames)))
    return Corpus(corpus.language_id, corpus.input_dim, list(utts), labeled=True)


def split_target(corpus: Corpus, pool_frames: int) -> tuple[Corpus, Corpus]:
    """Leading utterances covering ``pool_frames`` form the adaptation pool, the rest the test split."""
    pool = take_frames(corpus, pool_frames)
    if len(pool) == len(corpus.utterances):
        raise ConfigError("target corpus leaves no utterances for the test split")
    rest = corpus.utterances[len(pool):]
    return (Corpus(corpus.language_id, corpus.input_dim, list(pool)),
            Corpus(corpus.language_id, corpus.input_dim, list(rest)))


def _corpus_dir(config: RunConfig) -> Path:
    d = config["io.corpus_dir"]
    if not d:
        raise ConfigError("io.corpus_dir is not set")
    return Path(d)


def _read(path: Path) -> Corpus:
    if not path.exists():
        raise DataError(f"missing corpus archive {path}")
    return read_corpus(path)


def load_sources(config: RunConfig, labeled: bool = False) -> dict[int, Corpus]:
    d = _corpus_dir(config)
    return {i: _read(d / archive_name("source", i, labeled)) for i in config["corpus.source_ids"]}


def load_target(config: RunConfig, language_id: int) -> tuple[Corpus, Corpus]:
    kind = "target" if language_id in config["corpus.target_ids"] else "dev"
    corpus = _read(_corpus_dir(config) / archive_name(kind, language_id))
    return split_target(corpus, config.frames(config["corpus.target_hours"]))


def _load_params(config: RunConfig, key: str, required: bool = True) -> EncoderParams | None:
    path = config[key]
    if not path:
        if required:
            raise ConfigError(f"{key} is not set")
        return None
    if not Path(path).exists():
        raise DataError(f"missing checkpoint {path}")
    return read_checkpoint(path, config.model_config())


# -- commands ---------------------------------------------------------------

def cmd_gen_corpus(config: RunConfig, out=None) -> dict:
    run = Run("gen-corpus", config, out)
    t = time.perf_counter()
    c = config
    for i in c["corpus.source_ids"]:
        corpus = _synthesize(c, i, c.frames(c["corpus.source_hours"]))
        write_corpus(run.path(archive_name("source", i)), corpus)
        lab = labeled_subset(corpus, c["corpus.labeled_fraction"])
        write_corpus(run.path(archive_name("source", i, True)), lab)
    for kind in ("dev", "target"):
        for i in c[f"corpus.{kind}_ids"]:
            frames = c.frames(c["corpus.target_hours"]) + c.frames(c["corpus.test_hours"])
            corpus = _synthesize(c, i, frames)
            write_corpus(run.path(archive_name(kind, i)), corpus)
            export_alignments(run.path(f"{kind}_{i}.ali"), corpus)
    run.time("generate", t)
    return run.finish()


def cmd_pretrain(config: RunConfig, out=None) -> dict:
    c = config
    run = Run("pretrain", c, out)
    sources = load_sources(c)
    labeled = None
    if c["pretrain.mode"] == "interleaved":
        try:
            labeled = load_sources(c, labeled=True)
        except DataError as exc:
            raise ConfigError(f"interleaved pretraining needs labeled side-cars: {exc}") from None
    t = time.perf_counter()
    phi0, trace = multi_task_pretrain(c.model_config(), [sources[i] for i in sorted(sources)], labeled,
                                      c["pretrain.mode"], c["pretrain.steps"], c.episode_config(), c["seed"],
                                      lr=c["pretrain.lr"], warmup_steps=c["pretrain.warmup_steps"],
                                      period=c["pretrain.period"])
    run.time("pretrain", t)
    write_checkpoint(run.path("phi0.ckpt"), phi0)
    with open(run.path("pretrain_trace.jsonl"), "w") as fh:
        for record in trace:
            fh.write(json.dumps(record) + "\n")
    run.extra["supervised_steps"] = sum(r["kind"] == "sl" for r in trace)
    return run.finish()


def cmd_meta_train(config: RunConfig, out=None) -> dict:
    c = config
    run = Run("meta-train", c, out)
    phi0 = _load_params(c, "io.init", required=False)
    if phi0 is None:
        log.warning("io.init not set: meta-training from a random initialization")
        phi0 = init_params(c.model_config(), c["seed"])
        run.extra["random_init"] = True
    sources = load_sources(c)
    chunk = c.frames(c["corpus.chunk_hours"])
    tasks = [t for i in sorted(sources) for t in partition_chunks(sources[i], chunk)]
    optimizer = c["meta.optimizer"]
    labeled = None
    if optimizer == "reptile":
        if c["meta.labels"]:
            log.warning("reptile is label-free: labeled source data is ignored")
            run.extra["labels_ignored"] = True
    elif c["meta.labels"]:
        labeled = load_sources(c, labeled=True)
    t = time.perf_counter()
    with open(run.path("meta_trace.jsonl"), "w") as fh:
        state = run_meta_training(phi0, tasks, labeled, c["meta.E"], c["meta.W"], optimizer, c["meta.beta"],
                                  c.episode_config(), c["seed"], meta_batch=c["meta.batch"], trace=fh)
    run.time("meta-train", t)
    write_checkpoint(run.path("phi_star.ckpt"), state.phi)
    run.extra.update(meta_updates=state.num_updates, episodes=state.episode_index,
                     global_step=state.global_step)
    return run.finish()


def checkpoint_name(language_id: int, budget: float, seed: int) -> str:
    return f"adapted/lang{language_id}_b{budget:g}_s{seed}.ckpt"


def cmd_adapt(config: RunConfig, out=None) -> dict:
    c = config
    run = Run("adapt", c, out)
    phi = _load_params(c, "io.phi")
    cfg = c.episode_config()
    index = []
    t = time.perf_counter()
    targets = {lang: load_target(c, lang) for lang in c["corpus.target_ids"]}
    for lang, (pool, _) in targets.items():
        for budget in c["eval.budgets"]:
            if c.frames(budget) > pool.total_frames:
                raise ConfigError(f"budget {budget:g} toy-hours exceeds the target pool of language {lang}")
    for lang, (pool, test) in targets.items():
        for budget in c["eval.budgets"]:
            frames = c.frames(budget)
            utts = take_frames(pool, frames) if frames else []
            steps = c["eval.adapt_steps"] if frames else 0
            for seed in c["eval.seeds"]:
                if steps:
                    val = test.utterances if c["eval.val_every"] else None
                    theta = adapt(phi, Task(lang, 0, utts, list(range(len(utts)))), steps, cfg, seed,
                                  validation=val, val_every=c["eval.val_every"])
                else:
                    theta = adapt(phi, Task(lang, 0, [], []), 0, cfg, seed)
                name = checkpoint_name(lang, budget, seed)
                write_checkpoint(run.path(name), theta)
                index.append({"checkpoint": name, "language": lang, "budget": budget, "seed": seed,
                              "method": c["eval.method"], "num_utterances": len(utts)})
    run.time("adapt", t)
    with open(run.path("adapted/index.json"), "w") as fh:
        json.dump(index, fh, indent=2)
    return run.finish()


def _checkpoint_entries(config: RunConfig) -> list[tuple[Path, dict]]:
    """(path, tags) for every adapted checkpoint listed in ``io.checkpoints``.

    Entries are adapt run directories (tags come from their index) or single
    checkpoint files (tagged as budget 0 of the first target language).
    """
    entries = []
    for item in config["io.checkpoints"]:
        p = Path(item)
        index = p / "adapted" / "index.json"
        if index.exists():
            entries += [(p / e["checkpoint"], e) for e in json.loads(index.read_text())]
        elif p.is_file():
            entries.append((p, {"checkpoint": p.name, "language": config["corpus.target_ids"][0],
                                "budget": 0.0, "seed": config["seed"], "method": config["eval.method"]}))
        else:
            raise DataError(f"no checkpoints found at {p}")
    if not entries:
        raise ConfigError("io.checkpoints is empty")
    return entries


def cmd_eval(config: RunConfig, out=None) -> dict:
    c = config
    run = Run("eval", c, out)
    tests: dict[int, Corpus] = {}
    rows = []
    t = time.perf_counter()
    for path, entry in _checkpoint_entries(c):
        params = read_checkpoint(path, c.model_config())
        lang = int(entry["language"])
        if lang not in tests:
            tests[lang] = load_target(c, lang)[1]
        method = c["eval.method"] or entry.get("method", "")
        for layer in c["eval.layers"]:
            try:
                report = evaluate(params, tests[lang], layer, method=method, budget=entry["budget"],
                                  seed=int(entry["seed"]), units=c["eval.units"], num_units=c["eval.num_units"],
                                  max_items_per_type=c["eval.max_items_per_type"],
                                  max_triples=c["eval.max_triples"], mapping_split=c["eval.mapping_split"],
                                  checkpoint=entry["checkpoint"])
            except (ValueError, DataError) as exc:
                raise EvaluationError(f"{path} layer {layer}: {exc}") from exc
            stem = Path(entry["checkpoint"]).stem
            run.path(f"metrics/{stem}_L{layer}.json").write_text(report.to_json() + "\n")
            rows.append(report)
    run.time("eval", t)
    with open(run.path("metrics.csv"), "w") as fh:
        fh.write("method,language,budget,seed,layer,abx_within,abx_across,pnmi,per\n")
        for r in rows:
            fh.write(f"{r.method},{r.language},{r.budget:g},{r.seed},{r.layer},{r.abx_within!r},"
                     f"{r.abx_across!r},{r.pnmi!r},{r.per!r}\n")
    return run.finish()


def load_reports(paths) -> list[MetricsReport]:
    reports = []
    for item in paths:
        p = Path(item)
        files = sorted(p.glob("metrics/*.json")) + sorted(p.glob("*.json")) if p.is_dir() else [p]
        for f in files:
            if f.name == MANIFEST:
                continue
            try:
                reports.append(MetricsReport.from_json(f.read_text()))
            except (TypeError, ValueError) as exc:
                raise DataError(f"{f}: not a metrics report ({exc})") from None
    return reports


def cmd_report(config: RunConfig, out=None) -> dict:
    c = config
    run = Run("report", c, out)
    reports = load_reports(c["io.metrics"])
    if not reports:
        raise DataError("no metrics reports found")
    layer = c["eval.report_layer"] or None
    summary = write_report(reports, run.out, layer=layer)
    run.artifacts.extend(summary["files"])
    run.extra["missing_cells"] = summary["missing"]
    return run.finish()


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "meta-train": cmd_meta_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "report": cmd_report,
}

