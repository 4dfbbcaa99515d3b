"""Synthetic multilingual corpora with exact frame-level phone alignments.

Each language draws a phone inventory from a shared pool of unit-norm
prototypes, applies its own partial rotation and bias, and emits frames from
a Markov chain over phones with geometric durations.  Speakers add a
diagonal gain and an offset on top of the phone means and Gaussian noise.

Archive layout (little-endian)::

    b"MADCORP1"
    language_id int32 | labeled uint8 | input_dim uint32 | utterance count uint32
    per utterance:
        speaker_id int32 | T uint32 | T*input_dim float64
        alignment count uint32 | count x (start, end, phone) int32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from madapt.errors import ArgumentError, ConfigError, DataError, FormatError, GenerationError

MAGIC = b"MADCORP1"
HEADER = struct.Struct("<iBII")
UTT_HEAD = struct.Struct("<iI")
COUNT = struct.Struct("<I")

TOY_HOUR = 10_000  # frames


@dataclass
class LanguageSpec:
    language_id: int
    inventory: np.ndarray
    means: np.ndarray
    transitions: np.ndarray
    durations: np.ndarray
    rotation: np.ndarray
    bias: np.ndarray

    @property
    def num_phones(self) -> int:
        return len(self.inventory)

    def stationary(self, iters: int = 10_000, tol: float = 1e-15) -> np.ndarray:
        """Stationary distribution of the phone chain by power iteration."""
        pi = np.full(self.num_phones, 1.0 / self.num_phones)
        for _ in range(iters):
            nxt = pi @ self.transitions
            if np.abs(nxt - pi).max() < tol:
                return nxt
            pi = nxt
        return pi


@dataclass
class Utterance:
    frames: np.ndarray
    alignment: np.ndarray  # [n x 3] int: start, end (exclusive), phone
    speaker_id: int

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def frame_phones(self) -> np.ndarray:
        out = np.empty(self.num_frames, dtype=np.int64)
        for start, end, phone in self.alignment:
            out[start:end] = phone
        return out

    def equals(self, other: "Utterance") -> bool:
        return (self.speaker_id == other.speaker_id
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.alignment, other.alignment))


@dataclass
class Corpus:
    language_id: int
    input_dim: int
    utterances: list[Utterance] = field(default_factory=list)
    labeled: bool = False

    @property
    def total_frames(self) -> int:
        return sum(u.num_frames for u in self.utterances)

    @property
    def speakers(self) -> list[int]:
        return sorted({u.speaker_id for u in self.utterances})

    def equals(self, other: "Corpus") -> bool:
        return (self.language_id == other.language_id and self.input_dim == other.input_dim
                and self.labeled == other.labeled and len(self.utterances) == len(other.utterances)
                and all(a.equals(b) for a, b in zip(self.utterances, other.utterances)))


@dataclass
class Task:
    language_id: int
    chunk_id: int
    utterances: list[Utterance]
    indices: list[int]
    labeled: bool = False

    @property
    def total_frames(self) -> int:
        return sum(u.num_frames for u in self.utterances)


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def gen_language_pool(pool_size: int, input_dim: int, seed, max_cosine: float = 0.9,
                      max_tries: int = 10_000) -> np.ndarray:
    """Unit-norm phone prototypes with pairwise cosine similarity below ``max_cosine``."""
    if pool_size < 2:
        raise ArgumentError("the phone pool needs at least two prototypes")
    rng = _rng(seed)
    pool = np.empty((pool_size, input_dim))
    filled = tries = 0
    while filled < pool_size:
        tries += 1
        if tries > max_tries:
            raise GenerationError(f"could not place {pool_size} prototypes in {input_dim} dims "
                                  f"with cosine < {max_cosine}")
        v = rng.standard_normal(input_dim)
        v /= np.linalg.norm(v)
        if filled and (pool[:filled] @ v).max() >= max_cosine:
            continue
        pool[filled] = v
        filled += 1
    return pool


def random_rotation(dim: int, rng, strength: float = 0.5) -> np.ndarray:
    """Orthogonal factor of ``I + strength * G``; strength -> inf gives a Haar rotation."""
    a = np.eye(dim) + strength * rng.standard_normal((dim, dim)) / np.sqrt(dim)
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def gen_language_spec(pool: np.ndarray, num_phones: int, language_seed, language_id: int = 0,
                      rotation_strength: float = 0.5, bias_scale: float = 0.1,
                      duration_range=(3.0, 8.0), max_self_transition: float = 0.2) -> LanguageSpec:
    g, dim = pool.shape
    if num_phones > g:
        raise ArgumentError(f"cannot draw {num_phones} phones from a pool of {g}")
    if num_phones < 2:
        raise ArgumentError("a language needs at least two phones")
    rng = _rng(language_seed)
    inventory = np.sort(rng.choice(g, size=num_phones, replace=False))
    rotation = random_rotation(dim, rng, rotation_strength)
    bias = bias_scale * rng.standard_normal(dim) / np.sqrt(dim)
    means = pool[inventory] @ rotation.T + bias
    transitions = np.empty((num_phones, num_phones))
    for i in range(num_phones):
        stay = rng.uniform(0.0, max_self_transition)
        off = rng.dirichlet(np.ones(num_phones - 1)) * (1.0 - stay)
        transitions[i] = np.insert(off, i, stay)
    transitions /= transitions.sum(axis=1, keepdims=True)
    durations = rng.uniform(*duration_range, size=num_phones)
    return LanguageSpec(language_id, inventory, means, transitions, durations, rotation, bias)


def synthesize_corpus(spec: LanguageSpec, total_frames: int, num_speakers: int, noise_sigma: float,
                      rng, utterance_length=(80, 240), gain_range=(0.8, 1.2),
                      offset_sigma: float = 0.3, labeled: bool = False) -> Corpus:
    """Generate exactly ``total_frames`` frames split into utterances.

    Speakers are assigned round-robin so every speaker gets utterances.
    """
    if num_speakers < 2:
        raise ConfigError("at least two speakers are required (across-speaker ABX)")
    if total_frames < 100:
        raise ArgumentError("total_frames must be >= 100")
    rng = _rng(rng)
    dim = spec.means.shape[1]
    gains = rng.uniform(*gain_range, size=(num_speakers, dim))
    offsets = offset_sigma * rng.standard_normal((num_speakers, dim))
    pi = spec.stationary()
    lo, hi = utterance_length
    corpus = Corpus(spec.language_id, dim, labeled=labeled)
    remaining = total_frames
    while remaining > 0:
        n = min(int(rng.integers(lo, hi + 1)), remaining)
        if remaining - n < lo:
            n = remaining
        remaining -= n
        spk = len(corpus.utterances) % num_speakers
        idx = np.empty(n, dtype=np.int64)
        segments = []
        t = 0
        state = rng.choice(spec.num_phones, p=pi)
        while t < n:
            dur = int(rng.geometric(1.0 / spec.durations[state]))
            end = min(t + dur, n)
            idx[t:end] = state
            segments.append((t, end, int(spec.inventory[state])))
            t = end
            state = rng.choice(spec.num_phones, p=spec.transitions[state])
        clean = spec.means[idx] + noise_sigma * rng.standard_normal((n, dim))
        frames = gains[spk] * clean + offsets[spk]
        corpus.utterances.append(Utterance(frames, np.asarray(segments, dtype=np.int64),
                                           spec.language_id * 1000 + spk))
    return corpus


def frame_labels(utt: Utterance, stride: int) -> np.ndarray:
    """Phone label of the centre frame of every downsampling window."""
    phones = utt.frame_phones()
    centres = np.minimum(np.arange(0, utt.num_frames, stride) + stride // 2, utt.num_frames - 1)
    return phones[centres]


def validate_corpus(corpus: Corpus, inventory=None) -> None:
    """Raise DataError unless every alignment tiles its utterance exactly."""
    allowed = None if inventory is None else set(int(p) for p in inventory)
    for i, u in enumerate(corpus.utterances):
        if u.frames.shape != (u.num_frames, corpus.input_dim):
            raise DataError(f"utterance {i}: frames have shape {u.frames.shape}")
        ali = u.alignment
        if len(ali) == 0 or ali[0, 0] != 0 or ali[-1, 1] != u.num_frames:
            raise DataError(f"utterance {i}: alignment does not span [0, {u.num_frames})")
        if np.any(ali[:, 1] <= ali[:, 0]) or np.any(ali[1:, 0] != ali[:-1, 1]):
            raise DataError(f"utterance {i}: alignment has gaps, overlaps or empty segments")
        if allowed is not None and not set(ali[:, 2].tolist()) <= allowed:
            raise DataError(f"utterance {i}: phone outside the inventory")


def partition_chunks(corpus: Corpus, chunk_frames: int, min_fill: float = 0.5) -> list[Task]:
    """Greedily pack whole utterances, in order, into chunks of at most ``chunk_frames``.

    A trailing chunk filled below ``min_fill`` is dropped.
    """
    if not corpus.utterances:
        raise ArgumentError("cannot partition an empty corpus")
    longest = max(u.num_frames for u in corpus.utterances)
    if chunk_frames < longest:
        raise ArgumentError(f"chunk_frames={chunk_frames} is shorter than the longest utterance ({longest})")
    if chunk_frames > corpus.total_frames:
        raise ArgumentError("chunk_frames exceeds the corpus size")
    groups, current, size = [], [], 0
    for i, u in enumerate(corpus.utterances):
        if size + u.num_frames > chunk_frames and current:
            groups.append(current)
            current, size = [], 0
        current.append(i)
        size += u.num_frames
    if current and (len(groups) == 0 or size >= min_fill * chunk_frames):
        groups.append(current)
    return [Task(corpus.language_id, cid, [corpus.utterances[i] for i in g], g)
            for cid, g in enumerate(groups)]


def sample_task(rng, source_tasks: list[Task]) -> Task:
    """Uniform over languages, then uniform over that language's chunks."""
    if not source_tasks:
        raise ArgumentError("no tasks to sample from")
    by_lang: dict[int, list[Task]] = {}
    for t in source_tasks:
        by_lang.setdefault(t.language_id, []).append(t)
    langs = sorted(by_lang)
    lang = langs[int(rng.integers(len(langs)))]
    chunks = by_lang[lang]
    return chunks[int(rng.integers(len(chunks)))]


def take_frames(corpus: Corpus, budget: int) -> list[Utterance]:
    """Leading utterances totalling at least ``budget`` frames (nested for growing budgets)."""
    out, size = [], 0
    for u in corpus.utterances:
        if size >= budget:
            break
        out.append(u)
        size += u.num_frames
    if size < budget:
        raise ConfigError(f"budget of {budget} frames exceeds the corpus ({size} frames)")
    return out


def corpus_nbytes(corpus: Corpus) -> int:
    size = len(MAGIC) + HEADER.size
    for u in corpus.utterances:
        size += UTT_HEAD.size + 8 * u.frames.size + COUNT.size + 12 * len(u.alignment)
    return size


def write_corpus(path, corpus: Corpus) -> None:
    parts = [MAGIC, HEADER.pack(corpus.language_id, int(corpus.labeled), corpus.input_dim,
                                len(corpus.utterances))]
    for u in corpus.utterances:
        parts.append(UTT_HEAD.pack(u.speaker_id, u.num_frames))
        parts.append(np.ascontiguousarray(u.frames, dtype="<f8").tobytes())
        parts.append(COUNT.pack(len(u.alignment)))
        parts.append(np.ascontiguousarray(u.alignment, dtype="<i4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_corpus(path) -> Corpus:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated corpus archive while reading {what}", pos)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad corpus magic", 0)
    lang, labeled, dim, count = HEADER.unpack(take(HEADER.size, "header"))
    corpus = Corpus(lang, dim, labeled=bool(labeled))
    for _ in range(count):
        spk, n = UTT_HEAD.unpack(take(UTT_HEAD.size, "utterance header"))
        frames = np.frombuffer(take(8 * n * dim, "frames"), dtype="<f8").reshape(n, dim).astype(np.float64)
        (k,) = COUNT.unpack(take(COUNT.size, "alignment count"))
        ali = np.frombuffer(take(12 * k, "alignment"), dtype="<i4").reshape(k, 3).astype(np.int64)
        corpus.utterances.append(Utterance(frames, ali, spk))
    if pos != len(blob):
        raise FormatError("trailing bytes after the last utterance", pos)
    return corpus


def export_alignments(path, corpus: Corpus) -> None:
    """Plain-text ``start end phone speaker`` lines; a blank line separates utterances."""
    with open(path, "w") as fh:
        for i, u in enumerate(corpus.utterances):
            if i:
                fh.write("\n")
            for start, end, phone in u.alignment:
                fh.write(f"{start} {end} {phone} {u.speaker_id}\n")
