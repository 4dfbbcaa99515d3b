"""Phoneme-discovery metrics: triphone ABX with DTW, PNMI and PER.

ABX follows the usual hierarchy: triples are scored inside cells
(context, phone pair, speaker assignment), cells are averaged per ordered
phone pair, the two orders of a pair are averaged, and the error is one
minus the mean over unordered pairs.  Frame distance is the angle between
vectors divided by pi; DTW cost is normalized by the length of the
cheapest path.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from madapt.backbone import EncoderParams, extract_embeddings
from madapt.corpus import Corpus, frame_labels
from madapt.errors import ArgumentError, EvaluationError
from madapt.objectives import codebook_assign, normalize_targets

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is optional
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


@dataclass
class AbxItem:
    embedding: np.ndarray
    center: int
    left: int
    right: int
    speaker: int

    @property
    def context(self) -> tuple[int, int]:
        return self.left, self.right


@dataclass
class UnitSequence:
    units: np.ndarray
    phones: np.ndarray
    speaker_id: int

    def __post_init__(self):
        if len(self.units) != len(self.phones):
            raise ArgumentError("units and phones differ in length")


@dataclass
class MetricsReport:
    method: str
    language: int
    budget: float
    seed: int
    layer: int
    abx_within: float
    abx_across: float
    pnmi: float
    per: float
    checkpoint: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


REPORT_SCHEMA = {
    "type": "object",
    "required": ["method", "language", "budget", "seed", "layer", "abx_within", "abx_across", "pnmi", "per"],
    "additionalProperties": False,
    "properties": {
        "method": {"type": "string"},
        "language": {"type": "integer"},
        "budget": {"type": "number", "minimum": 0},
        "seed": {"type": "integer"},
        "layer": {"type": "integer", "minimum": 1},
        "abx_within": {"type": "number", "minimum": 0, "maximum": 1},
        "abx_across": {"type": "number", "minimum": 0, "maximum": 1},
        "pnmi": {"type": "number", "minimum": 0, "maximum": 1},
        "per": {"type": "number", "minimum": 0},
        "checkpoint": {"type": "string"},
    },
}


# -- frame distances and DTW -----------------------------------------------

def normalize_frames(a) -> np.ndarray:
    """Unit-norm rows; zero rows stay zero."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0:
        raise ArgumentError("sequences must be non-empty [len x dim] arrays")
    norms = np.sqrt((a * a).sum(axis=1))
    out = np.zeros_like(a)
    nz = norms > 0
    out[nz] = a[nz] / norms[nz, None]
    return out


@njit(cache=True)
def _cost_matrix(an, xn):
    la, lx, d = an.shape[0], xn.shape[0], an.shape[1]
    cost = np.empty((la, lx))
    for i in range(la):
        za = True
        for k in range(d):
            if an[i, k] != 0.0:
                za = False
                break
        for j in range(lx):
            zx = True
            for k in range(d):
                if xn[j, k] != 0.0:
                    zx = False
                    break
            if za or zx:
                cost[i, j] = 0.5
                continue
            dif = 0.0
            tot = 0.0
            for k in range(d):
                u = an[i, k] - xn[j, k]
                v = an[i, k] + xn[j, k]
                dif += u * u
                tot += v * v
            cost[i, j] = 2.0 * math.atan2(math.sqrt(dif), math.sqrt(tot)) / math.pi
    return cost


@njit(cache=True)
def _dtw(cost):
    la, lx = cost.shape
    acc = np.empty((la, lx))
    steps = np.empty((la, lx), dtype=np.int64)
    for i in range(la):
        for j in range(lx):
            if i == 0 and j == 0:
                acc[0, 0] = cost[0, 0]
                steps[0, 0] = 1
                continue
            best = np.inf
            best_len = 0
            for move in range(3):
                pi = i - 1 if move != 2 else i
                pj = j - 1 if move != 1 else j
                if pi < 0 or pj < 0:
                    continue
                c, n = acc[pi, pj], steps[pi, pj]
                if c < best or (c == best and n < best_len):
                    best, best_len = c, n
            acc[i, j] = best + cost[i, j]
            steps[i, j] = best_len + 1
    return acc[la - 1, lx - 1] / steps[la - 1, lx - 1]


def frame_cost_matrix(a, x) -> np.ndarray:
    """Angular distance ``angle(a_i, x_j) / pi``; pairs with a zero frame cost 0.5."""
    return _cost_matrix(normalize_frames(a), normalize_frames(x))


def dtw_distance(a, x) -> float:
    """Cheapest-path DTW cost over moves (1,0), (0,1), (1,1), divided by path length.

    Among equally cheap paths the shortest is taken.
    """
    return float(_dtw(frame_cost_matrix(a, x)))


# -- ABX --------------------------------------------------------------------

def collect_triphones(corpus: Corpus, params: EncoderParams | None, layer: int,
                      max_items_per_type: int | None = None, seed: int = 0) -> list[AbxItem]:
    """One item per phone occurrence that has both neighbours.

    With ``params=None`` the raw frames are used as embeddings.
    """
    if not corpus.utterances or any(len(u.alignment) == 0 for u in corpus.utterances):
        raise ArgumentError("corpus has no alignments")
    stride = 1 if params is None else params.config.downsample_stride
    rng = np.random.default_rng(seed)
    kept: dict[tuple, list[AbxItem]] = {}
    seen: Counter = Counter()
    order: list[tuple] = []
    for utt in corpus.utterances:
        emb = utt.frames if params is None else extract_embeddings(params, utt.frames, layer)
        ali = utt.alignment
        for i in range(1, len(ali) - 1):
            start, end, phone = (int(v) for v in ali[i])
            item = AbxItem(emb[start // stride: -(-end // stride)], phone, int(ali[i - 1, 2]),
                           int(ali[i + 1, 2]), utt.speaker_id)
            key = (item.left, item.center, item.right)
            seen[key] += 1
            bucket = kept.setdefault(key, [])
            if not bucket:
                order.append(key)
            if max_items_per_type is None or len(bucket) < max_items_per_type:
                bucket.append(item)
            else:
                j = int(rng.integers(seen[key]))
                if j < max_items_per_type:
                    bucket[j] = item
    return [item for key in order for item in kept[key]]


class _Distances:
    def __init__(self, items):
        self.normed = [normalize_frames(it.embedding) for it in items]
        self.cache: dict[tuple[int, int], float] = {}

    def __call__(self, i: int, j: int) -> float:
        key = (i, j) if i <= j else (j, i)
        d = self.cache.get(key)
        if d is None:
            d = self.cache[key] = float(_dtw(_cost_matrix(self.normed[key[0]], self.normed[key[1]])))
        return d


def abx_cells(items: list[AbxItem], condition: str):
    """Map cell key -> (A candidates, B candidates, X candidates) as index lists.

    Cell keys are ``(context, a, b, speaker_AB, speaker_X)``.
    """
    if condition not in ("within", "across"):
        raise ArgumentError(f"unknown ABX condition {condition!r}")
    groups: dict[tuple, dict[int, list[int]]] = defaultdict(lambda: defaultdict(list))
    for idx, it in enumerate(items):
        groups[(it.context, it.center)][it.speaker].append(idx)
    by_context: dict[tuple, list[int]] = defaultdict(list)
    for ctx, phone in groups:
        by_context[ctx].append(phone)
    cells = {}
    for ctx in sorted(by_context):
        phones = sorted(by_context[ctx])
        for a in phones:
            for b in phones:
                if a == b:
                    continue
                ga, gb = groups[(ctx, a)], groups[(ctx, b)]
                for s in sorted(set(ga) & set(gb)):
                    if condition == "within":
                        if len(ga[s]) >= 2:
                            cells[(ctx, a, b, s, s)] = (ga[s], gb[s], ga[s])
                    else:
                        for sx in sorted(ga):
                            if sx != s:
                                cells[(ctx, a, b, s, sx)] = (ga[s], gb[s], ga[sx])
    return cells


def _cell_triples(cand_a, cand_b, cand_x, same_speaker, rng, max_triples):
    na, nb, nx = len(cand_a), len(cand_b), len(cand_x)
    total = na * nb * nx
    flat = range(total) if max_triples is None or total <= max_triples else \
        np.sort(rng.choice(total, size=max_triples, replace=False))
    out = []
    for f in flat:
        f = int(f)
        ia, rest = divmod(f, nb * nx)
        ib, ix = divmod(rest, nx)
        if same_speaker and cand_a[ia] == cand_x[ix]:
            continue
        out.append((cand_a[ia], cand_b[ib], cand_x[ix]))
    return out


def _aggregate(cell_scores: dict[tuple, float]) -> float:
    per_pair: dict[tuple[int, int], list[float]] = defaultdict(list)
    for (ctx, a, b, _, _), score in cell_scores.items():
        per_pair[(a, b)].append(score)
    pair_score = {k: math.fsum(v) / len(v) for k, v in per_pair.items()}
    unordered: dict[tuple[int, int], list[float]] = defaultdict(list)
    for (a, b), score in pair_score.items():
        unordered[(min(a, b), max(a, b))].append(score)
    means = [math.fsum(v) / len(v) for _, v in sorted(unordered.items())]
    return 1.0 - math.fsum(means) / len(means)


def abx_error(items: list[AbxItem], condition: str = "within", rng=None,
              max_triples: int | None = 500) -> float:
    """ABX error rate in [0, 1]; ``max_triples=None`` scores every triple."""
    cells = abx_cells(items, condition)
    rng = np.random.default_rng(0) if rng is None else rng
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    dist = _Distances(items)
    scores = {}
    for key, (ca, cb, cx) in cells.items():
        triples = _cell_triples(ca, cb, cx, condition == "within", rng, max_triples)
        if not triples:
            continue
        vals = []
        for ia, ib, ix in triples:
            dxa, dxb = dist(ix, ia), dist(ix, ib)
            vals.append(1.0 if dxa < dxb else 0.5 if dxa == dxb else 0.0)
        scores[key] = math.fsum(vals) / len(vals)
    if not scores:
        raise EvaluationError(f"no valid ABX cell for the {condition}-speaker condition")
    return _aggregate(scores)


# -- units, PNMI, PER --------------------------------------------------------

def kmeans_fit(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 50):
    """Lloyd's algorithm from ``k`` distinct random rows.

    Returns ``(centroids, assignments, objectives)`` with one objective per
    assignment step.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) < k:
        raise ArgumentError(f"k-means needs at least {k} frames, got {len(x)}")
    rng = np.random.default_rng(seed)
    centroids = x[np.sort(rng.choice(len(x), size=k, replace=False))].copy()
    assign, objectives = None, []
    for _ in range(max_iter):
        new = _assign_chunked(x, centroids)
        diff = x - centroids[new]
        objectives.append(float((diff * diff).sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        used = counts > 0
        centroids[used] = sums[used] / counts[used, None]
    return centroids, assign, objectives


def _assign_chunked(x, centroids, chunk=2048):
    return np.concatenate([codebook_assign(x[i:i + chunk], centroids) for i in range(0, len(x), chunk)])


def extract_units(params: EncoderParams, corpus: Corpus, layer: int, method: str = "kmeans",
                  num_units: int = 32, seed: int = 0) -> list[UnitSequence]:
    stride = params.config.downsample_stride
    embs = [extract_embeddings(params, u.frames, layer) for u in corpus.utterances]
    if method == "codebook":
        if layer not in params.config.target_layers:
            raise ArgumentError(f"layer {layer} has no codebook")
        cb = params.codebooks[f"layer{layer}"]
        # codebooks live in the standardized space the training targets use
        units = [codebook_assign(normalize_targets(e), cb) for e in embs]
    elif method == "kmeans":
        stacked = np.concatenate(embs)
        centroids, _, _ = kmeans_fit(stacked, num_units, seed)
        units = [_assign_chunked(e, centroids) for e in embs]
    else:
        raise ArgumentError(f"unknown unit method {method!r}")
    return [UnitSequence(z, frame_labels(u, stride), u.speaker_id) for z, u in zip(units, corpus.utterances)]


def joint_counts(sequences: list[UnitSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Count table n(unit, phone) plus the unit and phone labels of its axes."""
    units = np.concatenate([s.units for s in sequences])
    phones = np.concatenate([s.phones for s in sequences])
    zs, zi = np.unique(units, return_inverse=True)
    ys, yi = np.unique(phones, return_inverse=True)
    counts = np.zeros((len(zs), len(ys)), dtype=np.int64)
    np.add.at(counts, (zi, yi), 1)
    return counts, zs, ys


def pnmi_from_counts(counts) -> float:
    """I(Z;Y) / H(Y) from a unit-by-phone count table (natural log)."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    if n <= 0:
        raise ArgumentError("empty count table")
    pz = counts.sum(axis=1) / n
    py = counts.sum(axis=0) / n
    h_y = -math.fsum(p * math.log(p) for p in py if p > 0)
    if h_y == 0.0:
        return 0.0
    mi = math.fsum(
        (c / n) * math.log((c / n) / (pz[i] * py[j]))
        for (i, j), c in np.ndenumerate(counts) if c > 0
    )
    return min(1.0, max(0.0, mi / h_y))


def pnmi(sequences: list[UnitSequence]) -> float:
    counts, _, _ = joint_counts(sequences)
    return pnmi_from_counts(counts)


def collapse(seq) -> list[int]:
    out = []
    for v in seq:
        v = int(v)
        if not out or out[-1] != v:
            out.append(v)
    return out


def edit_distance(ref, hyp) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def unit_to_phone_map(sequences: list[UnitSequence]) -> tuple[dict[int, int], int]:
    """Most frequent phone per unit (lowest id on ties) and the global fallback phone."""
    counts, zs, ys = joint_counts(sequences)
    mapping = {int(z): int(ys[np.argmax(row)]) for z, row in zip(zs, counts)}
    fallback = int(ys[np.argmax(counts.sum(axis=0))])
    return mapping, fallback


def split_sequences(sequences, mapping_split: float):
    if not 0.0 < mapping_split < 1.0:
        raise ArgumentError("mapping_split must lie in (0, 1)")
    n_map = int(round(len(sequences) * mapping_split))
    if n_map == 0 or n_map == len(sequences):
        raise ArgumentError("both the mapping and the held-out split must be non-empty")
    return sequences[:n_map], sequences[n_map:]


def per(sequences: list[UnitSequence], mapping_split: float = 0.5) -> float:
    """Phone error rate after majority unit-to-phone mapping and run-length collapse.

    The leading ``mapping_split`` fraction of sequences fits the mapping; the
    rest is scored.  Units unseen while mapping decode to the most frequent phone.
    """
    fit, held = split_sequences(sequences, mapping_split)
    mapping, fallback = unit_to_phone_map(fit)
    edits = ref_len = 0
    for s in held:
        ref = collapse(s.phones)
        hyp = collapse(mapping.get(int(z), fallback) for z in s.units)
        edits += edit_distance(ref, hyp)
        ref_len += len(ref)
    return edits / ref_len


def evaluate(params: EncoderParams, corpus: Corpus, layer: int, *, method: str = "", budget: float = 0.0,
             seed: int = 0, units: str = "kmeans", num_units: int = 32, max_items_per_type: int | None = 10,
             max_triples: int | None = 500, mapping_split: float = 0.5, checkpoint: str = "") -> MetricsReport:
    items = collect_triphones(corpus, params, layer, max_items_per_type, seed)
    within = abx_error(items, "within", np.random.default_rng([seed, 1]), max_triples)
    across = abx_error(items, "across", np.random.default_rng([seed, 2]), max_triples)
    seqs = extract_units(params, corpus, layer, units, num_units, seed)
    return MetricsReport(method, corpus.language_id, float(budget), int(seed), int(layer), within, across,
                         pnmi(seqs), per(seqs, mapping_split), checkpoint)
