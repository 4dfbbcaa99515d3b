"""Student/teacher sequence encoder with per-layer prediction heads and codebooks.

The encoder is a strided-average downsampler followed by a learned linear
projection, then ``num_layers`` residual blocks of the form::

    h_l = h_{l-1} + dwconv3(tanh(h_{l-1} @ W_l + b_l))

Everything is float64 and written against plain numpy so that gradients can
be derived by hand and checked against finite differences.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from madapt.errors import ArgumentError, ConfigError, StructuralError

GROUPS = ("student", "teacher", "heads", "codebooks", "sl_heads")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 16
    downsample_stride: int = 2
    hidden_dim: int = 32
    num_layers: int = 4
    num_codebook_layers: int = 1
    codebook_size: int = 32
    supervised_layer: int = 3
    num_languages: int = 4
    num_phones: int = 24

    def __post_init__(self):
        for name in ("input_dim", "downsample_stride", "hidden_dim", "num_layers",
                     "num_languages", "num_phones"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be a positive integer")
        if self.num_codebook_layers < 0 or self.num_layers - self.num_codebook_layers < 1:
            raise ConfigError("model.num_codebook_layers must satisfy 0 <= K <= L-1")
        if self.codebook_size < 2:
            raise ConfigError("model.codebook_size must be >= 2")
        if not 1 <= self.supervised_layer <= self.num_layers:
            raise ConfigError("model.supervised_layer must lie in [1, num_layers]")

    @property
    def target_layers(self) -> tuple[int, ...]:
        """Layers k with L-K <= k <= L that carry a head and a codebook."""
        return tuple(range(self.num_layers - self.num_codebook_layers, self.num_layers + 1))

    def output_length(self, num_frames: int) -> int:
        return -(-num_frames // self.downsample_stride)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class ParamStore:
    """Ordered mapping from parameter name to a float64 array."""

    def __init__(self, arrays=None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, value in (arrays or {}).items():
            self._arrays[name] = np.asarray(value, dtype=np.float64)

    def __getitem__(self, name):
        return self._arrays[name]

    def __setitem__(self, name, value):
        self._arrays[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def __repr__(self):
        inner = ", ".join(f"{k}{list(v.shape)}" for k, v in self._arrays.items())
        return f"ParamStore({inner})"

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._arrays.items()}

    def size(self) -> int:
        return sum(v.size for v in self._arrays.values())

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._arrays.items()})

    def zeros_like(self) -> "ParamStore":
        return ParamStore({k: np.zeros_like(v) for k, v in self._arrays.items()})

    def same_structure(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            self[k].shape == other[k].shape for k in self._arrays
        )

    def bitwise_equal(self, other: "ParamStore") -> bool:
        return self.same_structure(other) and all(
            np.array_equal(self[k], other[k]) for k in self._arrays
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._arrays.values())


def param_combine(a: ParamStore, b: ParamStore, ca: float, cb: float) -> ParamStore:
    """Element-wise ``ca * a + cb * b``, name by name."""
    if not a.same_structure(b):
        raise StructuralError("parameter stores differ in names or shapes")
    return ParamStore({k: ca * a[k] + cb * b[k] for k in a.names()})


@dataclass
class EncoderParams:
    config: ModelConfig
    student: ParamStore
    teacher: ParamStore
    heads: ParamStore
    codebooks: ParamStore
    sl_heads: ParamStore = field(default_factory=ParamStore)

    def group(self, name: str) -> ParamStore:
        if name not in GROUPS:
            raise ArgumentError(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, *(self.group(g).copy() for g in GROUPS))

    def flat(self) -> ParamStore:
        """Single store with ``group/name`` keys; arrays are shared, not copied."""
        out = ParamStore()
        for g in GROUPS:
            for k, v in self.group(g).items():
                out._arrays[f"{g}/{k}"] = v
        return out

    @classmethod
    def from_flat(cls, config: ModelConfig, store: ParamStore) -> "EncoderParams":
        groups = {g: ParamStore() for g in GROUPS}
        for key, value in store.items():
            g, _, name = key.partition("/")
            if g not in groups:
                raise StructuralError(f"parameter {key!r} belongs to no group")
            groups[g][name] = value
        return cls(config, *(groups[g] for g in GROUPS))

    def bitwise_equal(self, other: "EncoderParams") -> bool:
        return self.flat().bitwise_equal(other.flat())


@dataclass
class LayerStates:
    """Hidden states for layers 1..L; ``states[0]`` holds layer 1."""

    states: list[np.ndarray]

    def __len__(self):
        return len(self.states)

    def layer(self, k: int) -> np.ndarray:
        if not 1 <= k <= len(self.states):
            raise ArgumentError(f"layer {k} out of range 1..{len(self.states)}")
        return self.states[k - 1]


def _student_names(config: ModelConfig) -> list[str]:
    names = ["down.w", "down.b", "mask_emb"]
    for layer in range(1, config.num_layers + 1):
        names += [f"block{layer}.w", f"block{layer}.b", f"block{layer}.conv"]
    return names


def layer_of(name: str) -> int:
    """Block index of an encoder parameter name, 0 for the downsampler."""
    if name.startswith("block"):
        return int(name[5:].split(".")[0])
    return 0


def init_head(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Default linear-head initializer: N(0, 1/fan_in) weights, zero bias."""
    w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
    return w, np.zeros(fan_out)


def init_params(config: ModelConfig, seed: int) -> EncoderParams:
    rng = np.random.default_rng(seed)
    d, h = config.input_dim, config.hidden_dim
    student = ParamStore()
    student["down.w"] = rng.standard_normal((d, h)) / np.sqrt(d)
    student["down.b"] = np.zeros(h)
    student["mask_emb"] = 0.1 * rng.standard_normal(h)
    for layer in range(1, config.num_layers + 1):
        student[f"block{layer}.w"] = rng.standard_normal((h, h)) / np.sqrt(h)
        student[f"block{layer}.b"] = np.zeros(h)
        student[f"block{layer}.conv"] = 0.2 * rng.standard_normal((3, h))
    heads, codebooks = fresh_heads_and_codebooks(config, rng)
    sl_heads = ParamStore()
    for lang in range(config.num_languages):
        w, b = init_head(rng, h, config.num_phones)
        sl_heads[f"lang{lang}.w"], sl_heads[f"lang{lang}.b"] = w, b
    return EncoderParams(config, student, student.copy(), heads, codebooks, sl_heads)


def fresh_heads_and_codebooks(config: ModelConfig, rng: np.random.Generator):
    heads, codebooks = ParamStore(), ParamStore()
    for k in config.target_layers:
        w, b = init_head(rng, config.hidden_dim, config.codebook_size)
        heads[f"layer{k}.w"], heads[f"layer{k}.b"] = w, b
    for k in config.target_layers:
        codebooks[f"layer{k}"] = rng.standard_normal((config.codebook_size, config.hidden_dim))
    return heads, codebooks


def downsample(frames: np.ndarray, stride: int) -> np.ndarray:
    """Average non-overlapping windows of ``stride`` frames; last window may be short."""
    n = frames.shape[0]
    starts = np.arange(0, n, stride)
    counts = np.minimum(starts + stride, n) - starts
    return np.add.reduceat(frames, starts, axis=0) / counts[:, None]


def _conv3(a, k):
    c = k[1] * a
    c[1:] += k[0] * a[:-1]
    c[:-1] += k[2] * a[1:]
    return c


def encode(store: ParamStore, config: ModelConfig, frames, mask=None, upto=None):
    """Run the encoder stored in ``store``; returns (states, cache).

    ``mask`` replaces the projected inputs at masked steps with ``mask_emb``.
    ``upto`` stops after that many blocks.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ArgumentError("frames must be a non-empty [T x input_dim] array")
    if frames.shape[1] != config.input_dim:
        raise ArgumentError(f"expected input_dim={config.input_dim}, got {frames.shape[1]}")
    if frames.shape[0] < config.downsample_stride:
        raise ArgumentError("sequence shorter than the downsampling stride")
    pooled = downsample(frames, config.downsample_stride)
    h = pooled @ store["down.w"] + store["down.b"]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (pooled.shape[0],):
            raise ArgumentError(f"mask length {mask.shape} != T'={pooled.shape[0]}")
        if mask.any():
            h = h.copy()
            h[mask] = store["mask_emb"]
    top = config.num_layers if upto is None else upto
    states, acts, inputs = [], [], []
    for layer in range(1, top + 1):
        a = np.tanh(h @ store[f"block{layer}.w"] + store[f"block{layer}.b"])
        inputs.append(h)
        acts.append(a)
        h = h + _conv3(a, store[f"block{layer}.conv"])
        states.append(h)
    cache = {"pooled": pooled, "mask": mask, "inputs": inputs, "acts": acts}
    return states, cache


def encoder_backward(store: ParamStore, cache, state_grads: dict[int, np.ndarray]) -> ParamStore:
    """Backpropagate gradients on layer outputs into encoder parameters.

    Blocks above the highest layer in ``state_grads`` get exact zeros.
    """
    grads = store.zeros_like()
    top = max(state_grads)
    g = np.zeros_like(cache["inputs"][0])
    for layer in range(top, 0, -1):
        if layer in state_grads:
            g = g + state_grads[layer]
        a, h_in = cache["acts"][layer - 1], cache["inputs"][layer - 1]
        k = store[f"block{layer}.conv"]
        dk = grads[f"block{layer}.conv"]
        dk[0] = (a[:-1] * g[1:]).sum(axis=0)
        dk[1] = (a * g).sum(axis=0)
        dk[2] = (a[1:] * g[:-1]).sum(axis=0)
        da = k[1] * g
        da[:-1] += k[0] * g[1:]
        da[1:] += k[2] * g[:-1]
        du = da * (1.0 - a * a)
        grads[f"block{layer}.w"][...] = h_in.T @ du
        grads[f"block{layer}.b"][...] = du.sum(axis=0)
        g = g + du @ store[f"block{layer}.w"].T
    mask = cache["mask"]
    pooled = cache["pooled"]
    if mask is not None and mask.any():
        grads["mask_emb"][...] = g[mask].sum(axis=0)
        keep = ~mask
        grads["down.w"][...] = pooled[keep].T @ g[keep]
        grads["down.b"][...] = g[keep].sum(axis=0)
    else:
        grads["down.w"][...] = pooled.T @ g
        grads["down.b"][...] = g.sum(axis=0)
    return grads


def forward(params: EncoderParams, branch: str, frames, mask=None) -> LayerStates:
    if branch == "student":
        states, _ = encode(params.student, params.config, frames, mask)
    elif branch == "teacher":
        states, _ = encode(params.teacher, params.config, frames, None)
    else:
        raise ArgumentError(f"branch must be 'student' or 'teacher', got {branch!r}")
    return LayerStates(states)


def extract_embeddings(params: EncoderParams, frames, layer: int) -> np.ndarray:
    if not 1 <= layer <= params.config.num_layers:
        raise ArgumentError(f"layer {layer} out of range 1..{params.config.num_layers}")
    states, _ = encode(params.student, params.config, frames, None, upto=layer)
    return states[layer - 1]


def ema_decay(t: float, beta0: float, tau: float) -> float:
    if not 0.0 < beta0 <= 1.0:
        raise ConfigError(f"beta0 must lie in (0, 1], got {beta0}")
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    return 1.0 - (1.0 - beta0) * np.exp(-t / tau)


def teacher_ema_update(params: EncoderParams, t: float, beta0: float, tau: float) -> EncoderParams:
    """Return a copy whose teacher moved toward the student by the decayed EMA."""
    out = params.copy()
    _teacher_ema_inplace(out, ema_decay(t, beta0, tau))
    return out


def _teacher_ema_inplace(params: EncoderParams, decay: float) -> None:
    if decay == 1.0:
        return
    for name, w in params.teacher.items():
        w *= decay
        w += (1.0 - decay) * params.student[name]
