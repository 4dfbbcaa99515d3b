"""Episodic bi-level meta-training: inner self-supervised adaptation with active
forgetting, supervised outer steps, FOBLO and Reptile meta-updates, interleaved
multi-task pretraining and meta-test adaptation.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from madapt.backbone import (GROUPS, EncoderParams, ModelConfig, _teacher_ema_inplace, ema_decay,
                             fresh_heads_and_codebooks, init_params)
from madapt.corpus import Corpus, Task, Utterance, frame_labels, sample_task
from madapt.errors import ArgumentError, ConfigError
from madapt.objectives import (DEFAULT_CODEBOOK_DECAY, DEFAULT_MASK_PROB, DEFAULT_MASK_SPAN, Batch,
                               interleave_lambda, sample_mask, sl_loss_and_grad, ssl_loss_and_grad)
from madapt.optim import Adam

PERSISTENT = ("student", "teacher", "sl_heads")


@dataclass(frozen=True)
class EpisodeConfig:
    inner_steps: int = 180
    outer_steps: int = 20
    inner_lr: float = 1e-3
    inner_warmup_steps: int = 60
    outer_lr_peak: float = 5e-5
    head_warmup_steps: int = 20
    head_lr: float = 1e-3
    beta0: float = 0.999
    tau: float = 1000.0
    batch_size: int = 1
    mask_prob: float = DEFAULT_MASK_PROB
    mask_span: int = DEFAULT_MASK_SPAN
    codebook_decay: float = DEFAULT_CODEBOOK_DECAY
    active_forgetting: bool = True
    supervised_layer: int | None = None

    def __post_init__(self):
        if self.inner_steps < 0 or self.outer_steps < 0 or self.head_warmup_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.beta0 <= 1.0:
            raise ConfigError("beta0 must lie in (0, 1]")

    @property
    def episode_length(self) -> int:
        return self.inner_steps + self.outer_steps


@dataclass
class EpisodeResult:
    task_id: int
    language_id: int
    chunk_id: int
    theta_M: EncoderParams
    theta_MN: EncoderParams
    inner_trace: list[tuple[float, float]] = field(default_factory=list)
    outer_trace: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class MetaState:
    phi: EncoderParams
    meta_lr: float
    seed: int
    episode_index: int = 0
    global_step: int = 0
    num_updates: int = 0


# -- schedules --------------------------------------------------------------

def inner_lr(step: int, cfg: EpisodeConfig) -> float:
    """Linear ramp to ``cfg.inner_lr`` over the warmup, then constant."""
    if step < 1:
        raise ArgumentError("steps are 1-indexed")
    w = cfg.inner_warmup_steps
    if w > 0 and step < w:
        return cfg.inner_lr * step / w
    return cfg.inner_lr


def tri_stage_bounds(total: int) -> tuple[int, int, int]:
    warm = -(-total // 10)
    hold = (4 * total) // 10
    return warm, hold, total - warm - hold


def outer_lr(step: int, cfg: EpisodeConfig, floor: float = 0.05) -> float:
    """Tri-stage schedule over the outer steps: 10% ramp, 40% hold, 50% exponential decay."""
    if step < 1:
        raise ArgumentError("steps are 1-indexed")
    peak = cfg.outer_lr_peak
    warm, hold, decay = tri_stage_bounds(cfg.outer_steps)
    if step <= warm:
        return peak * step / warm
    if step <= warm + hold or decay == 0:
        return peak
    j = min(step - warm - hold, decay)
    return peak * floor ** (j / decay)


# -- batching ---------------------------------------------------------------

def to_batch(utt: Utterance, language_id: int, stride: int, labeled: bool = False) -> Batch:
    labels = frame_labels(utt, stride) if labeled else None
    return Batch(utt.frames, language_id, labels, utt.speaker_id)


def _draw(rng, utterances):
    return utterances[int(rng.integers(len(utterances)))]


def _masks(rng, batches, cfg, stride):
    return [sample_mask(-(-b.frames.shape[0] // stride), cfg.mask_prob, cfg.mask_span, rng) for b in batches]


def _ssl_minibatch(theta, batches, masks, cfg, update_codebooks=True):
    """Average SSL loss/grads over a list of sequences; codebooks chain through the batch."""
    total, acc = 0.0, None
    codebooks = theta.codebooks
    for b, m in zip(batches, masks):
        view = replace(theta, codebooks=codebooks)
        loss, grads, codebooks = ssl_loss_and_grad(view, b, m, cfg.codebook_decay, update_codebooks)
        total += loss
        if acc is None:
            acc = grads
        else:
            for k, g in grads.items():
                acc[k] += g
    n = len(batches)
    for k in acc:
        acc[k] /= n
    return total / n, acc, codebooks


def _sl_minibatch(theta, batches, k_sl):
    total, acc = 0.0, None
    for b in batches:
        loss, grads = sl_loss_and_grad(theta, b, k_sl)
        total += loss
        if acc is None:
            acc = grads
        else:
            for k, g in grads.items():
                acc[k] += g
    for k in acc:
        acc[k] /= len(batches)
    return total / len(batches), acc


# -- episode pieces ---------------------------------------------------------

def active_forget(phi: EncoderParams, rng) -> EncoderParams:
    """Copy the encoder (student and teacher) and supervised heads; resample
    every prediction head and codebook."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    theta = phi.copy()
    theta.heads, theta.codebooks = fresh_heads_and_codebooks(phi.config, rng)
    return theta


def warmup_heads(theta: EncoderParams, first_batch, steps: int = 20, lr: float = 1e-3,
                 cfg: EpisodeConfig | None = None, rng=None) -> EncoderParams:
    """Fit only the prediction heads on a fixed first batch and fixed masks."""
    if steps < 0:
        raise ArgumentError("steps must be >= 0")
    batches = first_batch if isinstance(first_batch, list) else [first_batch]
    if not batches or any(b.frames.shape[0] == 0 for b in batches):
        raise ArgumentError("warmup needs a non-empty first batch")
    theta = theta.copy()
    if steps == 0:
        return theta
    cfg = cfg or EpisodeConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    masks = _masks(rng, batches, cfg, theta.config.downsample_stride)
    opt = Adam()
    for _ in range(steps):
        _, grads, _ = _ssl_minibatch(theta, batches, masks, cfg, update_codebooks=False)
        opt.step(theta, grads, lr, groups=("heads",))
    return theta


def _inner_start(phi, utterances, language_id, cfg, rng):
    """Initial parameters of an inner loop plus the first batch it will train on."""
    stride = phi.config.downsample_stride
    first = [to_batch(_draw(rng, utterances), language_id, stride) for _ in range(cfg.batch_size)]
    if cfg.active_forgetting:
        theta = active_forget(phi, rng)
        theta = warmup_heads(theta, first, cfg.head_warmup_steps, cfg.head_lr, cfg, rng)
    else:
        theta = phi.copy()
    return theta, first


def _ssl_steps(theta, utterances, language_id, steps, cfg, rng, first=None, trace=None, start=0, opt=None):
    """``steps`` SSL updates of student and heads with the inner LR schedule and teacher EMA."""
    stride = theta.config.downsample_stride
    opt = opt or Adam()
    for i in range(start + 1, start + steps + 1):
        if first is not None and i == start + 1:
            batches = first
        else:
            batches = [to_batch(_draw(rng, utterances), language_id, stride) for _ in range(cfg.batch_size)]
        masks = _masks(rng, batches, cfg, stride)
        loss, grads, codebooks = _ssl_minibatch(theta, batches, masks, cfg)
        lr = inner_lr(i, cfg)
        opt.step(theta, grads, lr, groups=("student", "heads"))
        theta.codebooks = codebooks
        _teacher_ema_inplace(theta, ema_decay(i, cfg.beta0, cfg.tau))
        if trace is not None:
            trace.append((loss, lr))
    return theta, opt


def _task_utterances(task):
    utts = task.utterances if isinstance(task, (Task, Corpus)) else list(task)
    if not utts:
        raise ArgumentError("task has no utterances")
    return utts


def run_inner_loop(phi: EncoderParams, task: Task, cfg: EpisodeConfig, rng):
    """Active forgetting, head warmup, then M self-supervised steps.

    Returns ``(theta_M, trace)`` where trace holds one ``(loss, lr)`` per step.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    utts = _task_utterances(task)
    if sum(u.num_frames for u in utts) < phi.config.downsample_stride:
        raise ArgumentError("chunk is shorter than one batch")
    theta, first = _inner_start(phi, utts, task.language_id, cfg, rng)
    trace: list[tuple[float, float]] = []
    theta, _ = _ssl_steps(theta, utts, task.language_id, cfg.inner_steps, cfg, rng, first, trace)
    return theta, trace


def run_outer_steps(theta_M: EncoderParams, labeled: Corpus, cfg: EpisodeConfig, rng):
    """N supervised steps on layer ``k_sl`` with the tri-stage schedule."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    theta = theta_M.copy()
    trace: list[tuple[float, float]] = []
    if cfg.outer_steps == 0:
        return theta, trace
    if labeled is None or not labeled.labeled:
        raise ArgumentError("outer steps need a labeled corpus")
    k_sl = cfg.supervised_layer or theta.config.supervised_layer
    stride = theta.config.downsample_stride
    opt = Adam()
    for i in range(1, cfg.outer_steps + 1):
        batches = [to_batch(_draw(rng, labeled.utterances), labeled.language_id, stride, labeled=True)
                   for _ in range(cfg.batch_size)]
        loss, grads = _sl_minibatch(theta, batches, k_sl)
        lr = outer_lr(i, cfg)
        opt.step(theta, grads, lr, groups=("student", "sl_heads"))
        trace.append((loss, lr))
    return theta, trace


def run_episode(phi, task: Task, labeled: Corpus | None, cfg: EpisodeConfig, meta_optimizer: str,
                seed, task_id: int = 0) -> EpisodeResult:
    """One episode.  FOBLO: M SSL steps then N supervised steps.  Reptile: M+N SSL steps."""
    rng = np.random.default_rng(seed)
    utts = _task_utterances(task)
    theta, first = _inner_start(phi, utts, task.language_id, cfg, rng)
    inner: list[tuple[float, float]] = []
    theta, opt = _ssl_steps(theta, utts, task.language_id, cfg.inner_steps, cfg, rng, first, inner)
    theta_M = theta.copy()
    if meta_optimizer == "foblo":
        theta_MN, outer = run_outer_steps(theta_M, labeled, cfg, rng)
    elif meta_optimizer == "reptile":
        outer = []
        theta_MN, _ = _ssl_steps(theta, utts, task.language_id, cfg.outer_steps, cfg, rng, None, outer,
                                 start=cfg.inner_steps, opt=opt)
    else:
        raise ConfigError(f"unknown meta optimizer {meta_optimizer!r}")
    return EpisodeResult(task_id, task.language_id, getattr(task, "chunk_id", 0), theta_M, theta_MN,
                         inner, outer)


# -- meta-updates -----------------------------------------------------------

def _ordered(results):
    if not results:
        raise ArgumentError("meta-update needs at least one episode result")
    return sorted(results, key=lambda r: r.task_id)


def foblo_update(phi: EncoderParams, results: list[EpisodeResult], beta: float,
                 groups=PERSISTENT) -> EncoderParams:
    """``phi + beta * mean(theta_MN - theta_M)`` on the listed parameter groups."""
    results = _ordered(results)
    out = phi.copy()
    for g in groups:
        for name, w in out.group(g).items():
            delta = np.zeros_like(w)
            for r in results:
                delta += r.theta_MN.group(g)[name] - r.theta_M.group(g)[name]
            w += beta * (delta / len(results))
    return out


def reptile_update(phi: EncoderParams, results: list[EpisodeResult], beta: float,
                   groups=PERSISTENT) -> EncoderParams:
    """Interpolation ``(1 - beta) * phi + beta * mean(theta_MN)``."""
    results = _ordered(results)
    out = phi.copy()
    for g in groups:
        for name in out.group(g).names():
            total = np.zeros_like(phi.group(g)[name])
            for r in results:
                total += r.theta_MN.group(g)[name]
            out.group(g)[name] = (1.0 - beta) * phi.group(g)[name] + beta * (total / len(results))
    return out


META_UPDATES = {"foblo": foblo_update, "reptile": reptile_update}


# -- meta-training driver ---------------------------------------------------

def episode_seed(seed: int, episode: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, episode])


def _episode_job(args):
    phi, tasks, labeled, cfg, meta_optimizer, seed, episode = args
    ss = episode_seed(seed, episode)
    pick_ss, run_ss = ss.spawn(2)
    task = sample_task(np.random.default_rng(pick_ss), tasks)
    lab = labeled.get(task.language_id) if labeled else None
    return run_episode(phi, task, lab, cfg, meta_optimizer, run_ss, task_id=episode)


def run_meta_training(phi0: EncoderParams, source_tasks: list[Task], labeled: dict[int, Corpus] | None,
                      episodes: int, workers: int, meta_optimizer: str, beta: float,
                      cfg: EpisodeConfig, seed: int, meta_batch: int | None = None,
                      trace=None) -> MetaState:
    """Run ``episodes`` episodes in rounds of ``meta_batch``, one meta-update per round.

    Episodes of a round run on up to ``workers`` processes; results are merged in
    ascending episode order so the outcome does not depend on ``workers``.
    ``trace`` receives one JSON-serializable record per step when given.
    """
    if not source_tasks:
        raise ConfigError("no source languages to meta-train on")
    if meta_optimizer not in META_UPDATES:
        raise ConfigError(f"unknown meta optimizer {meta_optimizer!r}")
    if meta_optimizer == "foblo" and cfg.outer_steps > 0 and not labeled:
        raise ConfigError("FOBLO outer steps need labeled source corpora")
    meta_batch = meta_batch or workers
    if episodes % meta_batch:
        raise ConfigError(f"episodes ({episodes}) must be divisible by the meta batch ({meta_batch})")
    groups = PERSISTENT if cfg.active_forgetting else GROUPS
    update = META_UPDATES[meta_optimizer]
    state = MetaState(phi0.copy(), beta, seed)
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for first in range(0, episodes, meta_batch):
            jobs = [(state.phi, source_tasks, labeled, cfg, meta_optimizer, seed, e)
                    for e in range(first, first + meta_batch)]
            results = list(pool.map(_episode_job, jobs)) if pool else [_episode_job(j) for j in jobs]
            if trace is not None:
                for r in results:
                    _emit_trace(trace, r)
            state.phi = update(state.phi, results, beta, groups)
            state.episode_index += meta_batch
            state.global_step += meta_batch * cfg.episode_length
            state.num_updates += 1
    finally:
        if pool:
            pool.shutdown()
    return state


def _emit_trace(trace, r: EpisodeResult):
    rows = [("inner", i + 1, loss, lr) for i, (loss, lr) in enumerate(r.inner_trace)]
    offset = len(r.inner_trace)
    rows += [("outer", offset + i + 1, loss, lr) for i, (loss, lr) in enumerate(r.outer_trace)]
    for phase, step, loss, lr in rows:
        record = {"episode": r.task_id, "step": step, "phase": phase, "loss": loss, "lr": lr}
        if callable(trace):
            trace(record)
        else:
            trace.write(json.dumps(record) + "\n")


# -- meta-test --------------------------------------------------------------

def adapt(phi_star: EncoderParams, target_chunk, steps: int, cfg: EpisodeConfig, seed,
          validation: list[Utterance] | None = None, val_every: int = 0):
    """Fast adaptation on unlabeled target data with the inner-loop machinery.

    ``steps == 0`` returns the zero-shot parameters (active forgetting only).
    With ``validation`` and ``val_every > 0`` the snapshot with the lowest
    held-out SSL loss is returned.
    """
    rng = np.random.default_rng(seed)
    if steps == 0:
        return active_forget(phi_star, rng) if cfg.active_forgetting else phi_star.copy()
    utts = _task_utterances(target_chunk)
    language_id = getattr(target_chunk, "language_id", -1)
    theta, first = _inner_start(phi_star, utts, language_id, cfg, rng)
    if not (validation and val_every > 0):
        theta, _ = _ssl_steps(theta, utts, language_id, steps, cfg, rng, first)
        return theta
    stride = theta.config.downsample_stride
    val_batches = [to_batch(u, language_id, stride) for u in validation]
    val_masks = _masks(np.random.default_rng(int(rng.integers(2**62))), val_batches, cfg, stride)
    best, best_loss, done, opt = theta.copy(), math.inf, 0, None
    while done < steps:
        chunk = min(val_every, steps - done)
        theta, opt = _ssl_steps(theta, utts, language_id, chunk, cfg, rng,
                                first if done == 0 else None, None, start=done, opt=opt)
        done += chunk
        loss = _ssl_minibatch(theta, val_batches, val_masks, cfg, update_codebooks=False)[0]
        if loss < best_loss:
            best, best_loss = theta.copy(), loss
    return best


# -- meta-initialization ----------------------------------------------------

def multi_task_pretrain(config: ModelConfig, corpora: list[Corpus], labeled: dict[int, Corpus] | None,
                        mode: str, total_steps: int, cfg: EpisodeConfig, seed: int, lr: float = 1e-3,
                        warmup_steps: int = 100, period: int = 10, init: EncoderParams | None = None):
    """Multi-task pretraining of a meta-initialization.

    ``ssl`` mode: every step is SSL on a mixed-language batch.  ``interleaved``:
    step s is a supervised single-language step when ``interleave_lambda(s) == 0``.
    Returns ``(phi0, trace)``; trace records carry ``step``, ``kind``, ``loss``.
    """
    if mode not in ("ssl", "interleaved"):
        raise ConfigError(f"unknown pretraining mode {mode!r}")
    if mode == "interleaved" and not labeled:
        raise ConfigError("interleaved pretraining needs labeled corpora")
    if not corpora:
        raise ConfigError("no source corpora")
    rng = np.random.default_rng(seed)
    phi = init.copy() if init is not None else init_params(config, seed)
    stride = config.downsample_stride
    k_sl = cfg.supervised_layer or config.supervised_layer
    lab_langs = sorted(labeled) if labeled else []
    opt = Adam()
    trace = []
    for step in range(1, total_steps + 1):
        rate = lr * min(1.0, step / warmup_steps) if warmup_steps else lr
        if mode == "interleaved" and interleave_lambda(step, period) == 0:
            lab = labeled[lab_langs[int(rng.integers(len(lab_langs)))]]
            batches = [to_batch(_draw(rng, lab.utterances), lab.language_id, stride, labeled=True)
                       for _ in range(cfg.batch_size)]
            loss, grads = _sl_minibatch(phi, batches, k_sl)
            opt.step(phi, grads, rate, groups=("student", "sl_heads"))
            trace.append({"step": step, "kind": "sl", "loss": loss})
            continue
        batches = []
        for _ in range(cfg.batch_size):
            c = corpora[int(rng.integers(len(corpora)))]
            batches.append(to_batch(_draw(rng, c.utterances), c.language_id, stride))
        masks = _masks(rng, batches, cfg, stride)
        loss, grads, codebooks = _ssl_minibatch(phi, batches, masks, cfg)
        opt.step(phi, grads, rate, groups=("student", "heads"))
        phi.codebooks = codebooks
        _teacher_ema_inplace(phi, ema_decay(step, cfg.beta0, cfg.tau))
        trace.append({"step": step, "kind": "ssl", "loss": loss})
    return phi, trace
