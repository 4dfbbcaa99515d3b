"""Self-supervised and supervised losses with analytic gradients.

The self-supervised loss is masked prediction: the teacher encodes the clean
sequence, each target layer's states are standardized over time and
quantized against that layer's codebook, and the student's head for the layer must predict the code index
at masked steps.  The supervised loss is frame-level phone classification
from one intermediate layer through a language-specific head.

Gradients are returned as a ParamStore keyed ``group/name`` (see
``EncoderParams.flat``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from madapt.backbone import EncoderParams, ParamStore, encode, encoder_backward, layer_of
from madapt.errors import ArgumentError, ConfigError

DEFAULT_MASK_PROB = 0.065
DEFAULT_MASK_SPAN = 10
DEFAULT_CODEBOOK_DECAY = 0.99


@dataclass
class Batch:
    frames: np.ndarray
    language_id: int
    phone_labels: np.ndarray | None = None
    speaker_id: int = 0

    @property
    def labeled(self) -> bool:
        return self.phone_labels is not None


@dataclass
class MaskSpec:
    start_prob: float
    span_length: int
    mask: np.ndarray

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())


def sample_mask(t_prime: int, p: float = DEFAULT_MASK_PROB, span: int = DEFAULT_MASK_SPAN,
                rng: np.random.Generator | None = None) -> MaskSpec:
    """Pick span starts independently with probability ``p``; spans may overlap."""
    if t_prime < 1:
        raise ArgumentError("cannot mask an empty sequence")
    if not 0.0 <= p <= 1.0 or span < 1:
        raise ArgumentError("mask probability must be in [0, 1] and span >= 1")
    rng = np.random.default_rng() if rng is None else rng
    starts = np.flatnonzero(rng.random(t_prime) < p)
    mask = np.zeros(t_prime, dtype=bool)
    for s in starts:
        mask[s:s + span] = True
    return MaskSpec(p, span, mask)


def codebook_assign(states: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Nearest codebook row per frame (squared Euclidean, lowest index on ties)."""
    codebook = np.asarray(codebook, dtype=np.float64)
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ArgumentError("codebook must be a non-empty 2-D array")
    states = np.asarray(states, dtype=np.float64)
    if states.shape[-1] != codebook.shape[1]:
        raise ArgumentError("state and codebook dimensions differ")
    diff = states[:, None, :] - codebook[None, :, :]
    return np.argmin((diff * diff).sum(axis=-1), axis=1)


def codebook_ema_update(codebook: np.ndarray, states: np.ndarray, assignments: np.ndarray,
                        decay: float = DEFAULT_CODEBOOK_DECAY) -> np.ndarray:
    if not 0.0 < decay < 1.0:
        raise ArgumentError(f"codebook decay must lie in (0, 1), got {decay}")
    assignments = np.asarray(assignments)
    if len(states) != len(assignments):
        raise ArgumentError("states and assignments differ in length")
    size = codebook.shape[0]
    counts = np.bincount(assignments, minlength=size)
    sums = np.zeros_like(codebook)
    np.add.at(sums, assignments, states)
    out = codebook.copy()
    used = counts > 0
    means = sums[used] / counts[used][:, None]
    out[used] = decay * codebook[used] + (1.0 - decay) * means
    return out


def normalize_targets(states: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-sequence, per-dimension standardization of teacher states."""
    centered = states - states.mean(axis=0, keepdims=True)
    return centered / np.sqrt((centered * centered).mean(axis=0, keepdims=True) + eps)


def _cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Summed cross-entropy and its gradient w.r.t. logits (max-shifted LSE)."""
    shift = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shift)
    norm = exp.sum(axis=1, keepdims=True)
    rows = np.arange(len(targets))
    loss = float((np.log(norm[:, 0]) - shift[rows, targets]).sum())
    grad = exp / norm
    grad[rows, targets] -= 1.0
    return loss, grad


def _qualified_zeros(params: EncoderParams, groups) -> ParamStore:
    out = ParamStore()
    for g in groups:
        for name, arr in params.group(g).items():
            out[f"{g}/{name}"] = np.zeros_like(arr)
    return out


def _mask_array(mask, t_prime):
    if isinstance(mask, MaskSpec):
        mask = mask.mask
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (t_prime,):
        raise ArgumentError(f"mask length {mask.shape} != T'={t_prime}")
    return mask


def ssl_loss_and_grad(params: EncoderParams, batch: Batch, mask, codebook_decay: float = DEFAULT_CODEBOOK_DECAY,
                      update_codebooks: bool = True):
    """Masked codebook-prediction loss.

    Returns ``(loss, grads, new_codebooks)``.  Grads cover the student encoder
    and the prediction heads; codebooks only move through the EMA update.
    """
    cfg = params.config
    t_states, _ = encode(params.teacher, cfg, batch.frames)
    m = _mask_array(mask, t_states[0].shape[0])
    grads = _qualified_zeros(params, ("student", "heads"))
    targets = {}
    new_codebooks = params.codebooks.copy()
    for k in cfg.target_layers:
        cb = params.codebooks[f"layer{k}"]
        t = normalize_targets(t_states[k - 1])
        targets[k] = codebook_assign(t, cb)
        if update_codebooks:
            new_codebooks[f"layer{k}"] = codebook_ema_update(cb, t, targets[k], codebook_decay)
    n = int(m.sum())
    if n == 0:
        return 0.0, grads, new_codebooks

    s_states, cache = encode(params.student, cfg, batch.frames, m)
    scale = 1.0 / (n * len(cfg.target_layers))
    total = 0.0
    state_grads = {}
    for k in cfg.target_layers:
        w, b = params.heads[f"layer{k}.w"], params.heads[f"layer{k}.b"]
        s = s_states[k - 1][m]
        loss_k, dlogits = _cross_entropy(s @ w + b, targets[k][m])
        total += loss_k
        dlogits *= scale
        grads[f"heads/layer{k}.w"][...] = s.T @ dlogits
        grads[f"heads/layer{k}.b"][...] = dlogits.sum(axis=0)
        ds = np.zeros_like(s_states[k - 1])
        ds[m] = dlogits @ w.T
        state_grads[k] = ds
    for name, g in encoder_backward(params.student, cache, state_grads).items():
        grads[f"student/{name}"] = g
    return total * scale, grads, new_codebooks


def sl_loss_and_grad(params: EncoderParams, batch: Batch, k_sl: int | None = None):
    """Mean frame cross-entropy of the batch language's head on layer ``k_sl`` states.

    Gradients stop at ``k_sl``: deeper blocks, the mask embedding and the heads
    of other languages receive exact zeros.
    """
    cfg = params.config
    k_sl = cfg.supervised_layer if k_sl is None else k_sl
    if not 1 <= k_sl <= cfg.num_layers:
        raise ArgumentError(f"supervised layer {k_sl} out of range")
    if batch.phone_labels is None:
        raise ArgumentError("supervised loss needs phone labels")
    key = f"lang{batch.language_id}"
    if f"{key}.w" not in params.sl_heads:
        raise ArgumentError(f"no supervised head for language {batch.language_id}")
    labels = np.asarray(batch.phone_labels, dtype=np.int64)
    states, cache = encode(params.student, cfg, batch.frames, None, upto=k_sl)
    s = states[k_sl - 1]
    if labels.shape != (s.shape[0],):
        raise ArgumentError(f"expected {s.shape[0]} labels, got {labels.shape}")
    w, b = params.sl_heads[f"{key}.w"], params.sl_heads[f"{key}.b"]
    loss, dlogits = _cross_entropy(s @ w + b, labels)
    n = len(labels)
    dlogits /= n
    grads = _qualified_zeros(params, ("student", "sl_heads"))
    grads[f"sl_heads/{key}.w"][...] = s.T @ dlogits
    grads[f"sl_heads/{key}.b"][...] = dlogits.sum(axis=0)
    for name, g in encoder_backward(params.student, cache, {k_sl: dlogits @ w.T}).items():
        grads[f"student/{name}"] = g
    return loss / n, grads


def interleave_lambda(step: int, period: int = 10) -> int:
    """0 on supervised steps (every ``period``-th, 1-indexed), else 1."""
    if period < 1:
        raise ConfigError("interleave period must be >= 1")
    if step < 1:
        raise ArgumentError("steps are 1-indexed")
    return 0 if step % period == 0 else 1


def loss_value(loss_kind: str, params: EncoderParams, batch: Batch, mask=None, k_sl=None) -> float:
    if loss_kind == "ssl":
        return ssl_loss_and_grad(params, batch, mask, update_codebooks=False)[0]
    if loss_kind == "sl":
        return sl_loss_and_grad(params, batch, k_sl)[0]
    raise ArgumentError(f"unknown loss kind {loss_kind!r}")


def numeric_grad(loss_kind, params, batch, name, index, eps=1e-5, mask=None, k_sl=None) -> float:
    """Central difference of the loss along one coordinate of ``group/name``."""
    group, _, arr_name = name.partition("/")
    arr = params.group(group)[arr_name]
    orig = arr.flat[index]
    try:
        arr.flat[index] = orig + eps
        up = loss_value(loss_kind, params, batch, mask, k_sl)
        arr.flat[index] = orig - eps
        down = loss_value(loss_kind, params, batch, mask, k_sl)
    finally:
        arr.flat[index] = orig
    return (up - down) / (2.0 * eps)


def grad_check(loss_kind: str, params: EncoderParams, batch: Batch, eps: float = 1e-5, mask=None,
               num_coords: int = 200, seed: int = 0, k_sl=None, floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks ``num_coords`` random coordinates (all of them when fewer exist).
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if loss_kind == "ssl":
        _, grads, _ = ssl_loss_and_grad(params, batch, mask, update_codebooks=False)
    elif loss_kind == "sl":
        _, grads = sl_loss_and_grad(params, batch, k_sl)
    else:
        raise ArgumentError(f"unknown loss kind {loss_kind!r}")
    coords = [(name, i) for name, g in grads.items() for i in range(g.size)]
    if len(coords) > num_coords:
        rng = np.random.default_rng(seed)
        picks = np.sort(rng.choice(len(coords), size=num_coords, replace=False))
        coords = [coords[i] for i in picks]
    worst = 0.0
    for name, i in coords:
        a = grads[name].flat[i]
        n = numeric_grad(loss_kind, params, batch, name, i, eps, mask, k_sl)
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), floor))
    return worst


def trainable_layer(name: str) -> int:
    """Encoder block index of a ``student/...`` gradient name (0 for the input side)."""
    return layer_of(name.partition("/")[2])
