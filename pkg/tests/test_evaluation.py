import json
import math

import jsonschema
import numpy as np
import pytest

from madapt.backbone import init_params
from madapt.corpus import Corpus, Utterance
from madapt.errors import ArgumentError, EvaluationError
from madapt.evaluation import (REPORT_SCHEMA, AbxItem, MetricsReport, UnitSequence, abx_error, collapse,
                               collect_triphones, dtw_distance, edit_distance, evaluate, extract_units,
                               frame_cost_matrix, kmeans_fit, pnmi, pnmi_from_counts, per)
from madapt.objectives import codebook_assign, normalize_targets

from conftest import SMALL, make_corpus
from oracles import (abx_bruteforce, angular_cost, dtw_bruteforce, edit_bruteforce, per_bruteforce,
                     pnmi_bruteforce)

# rows are units, columns phones; I(Z;Y) / H(Y) evaluated at 30 digits
PNMI_3_1_0_4 = 0.574995168878683920


def oracle_cost(a, x):
    return np.array([[angular_cost(u, v) for v in x] for u in a])


def oracle_distance(i, j):
    return dtw_bruteforce(oracle_cost(i.embedding, j.embedding))


def toy_items(seed, n=12, dim=3):
    """Items over two contexts, three centre phones and two speakers."""
    rng = np.random.default_rng(seed)
    items = []
    for k in range(n):
        ctx = (0, 9) if k % 4 < 3 else (1, 9)
        items.append(AbxItem(rng.standard_normal((int(rng.integers(1, 4)), dim)), int(rng.integers(3)) + 2,
                             ctx[0], ctx[1], int(k % 2)))
    return items


# -- DTW -------------------------------------------------------------------

def test_dtw_examples():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert dtw_distance(a, a) == 0.0
    assert dtw_distance([[1.0, 0.0]], [[0.0, 1.0]]) == 0.5
    assert dtw_distance(a, [[1.0, 0.0]]) == 0.25


def test_zero_frames_cost_half():
    assert frame_cost_matrix([[0.0, 0.0]], [[1.0, 2.0]])[0, 0] == 0.5


def test_cost_matrix_matches_arccos():
    rng = np.random.default_rng(0)
    a, x = rng.standard_normal((5, 4)), rng.standard_normal((6, 4))
    assert np.allclose(frame_cost_matrix(a, x), oracle_cost(a, x), rtol=0, atol=1e-12)


def test_dtw_matches_bruteforce():
    rng = np.random.default_rng(1)
    for _ in range(30):
        a = rng.standard_normal((int(rng.integers(1, 6)), 3))
        x = rng.standard_normal((int(rng.integers(1, 6)), 3))
        got = dtw_distance(a, x)
        assert got == pytest.approx(dtw_bruteforce(frame_cost_matrix(a, x)), abs=1e-15)
        assert got == pytest.approx(dtw_distance(x, a), abs=1e-15)


def test_dtw_rejects_empty():
    with pytest.raises(ArgumentError):
        dtw_distance(np.zeros((0, 2)), np.ones((1, 2)))


# -- ABX -------------------------------------------------------------------

def test_abx_clear_cell():
    items = [AbxItem(np.array([[1.0, 0.0]]), 1, 0, 0, 0), AbxItem(np.array([[1.0, 0.1]]), 1, 0, 0, 0),
             AbxItem(np.array([[0.0, 1.0]]), 2, 0, 0, 0)]
    # only the (1, 2) cell exists within speaker and X is always nearer A
    assert abx_error(items, "within", max_triples=None) == 0.0


def test_abx_ties_give_half():
    items = [AbxItem(np.array([[1.0, 0.0]]), p, 0, 0, s) for p in (1, 2) for s in (0, 0, 1)]
    assert abx_error(items, "within", max_triples=None) == 0.5
    assert abx_error(items, "across", max_triples=None) == 0.5


def test_abx_separable():
    items = []
    for phone, vec in ((1, [1.0, 0.0]), (2, [0.0, 1.0])):
        for spk in (0, 1):
            for j in range(2):
                items.append(AbxItem(np.array([vec]) + 0.01 * j, phone, 5, 6, spk))
    assert abx_error(items, "within", max_triples=None) == 0.0
    assert abx_error(items, "across", max_triples=None) == 0.0


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("condition", ["within", "across"])
def test_abx_matches_bruteforce(seed, condition):
    items = toy_items(seed)
    try:
        expected = abx_bruteforce(items, condition, oracle_distance)
    except ValueError:
        with pytest.raises(EvaluationError):
            abx_error(items, condition, max_triples=None)
        return
    assert abx_error(items, condition, max_triples=None) == pytest.approx(expected, abs=1e-12)


def test_abx_scale_invariance():
    items = toy_items(3, n=16)
    scaled = [AbxItem(3.7 * it.embedding, it.center, it.left, it.right, it.speaker) for it in items]
    for cond in ("within", "across"):
        assert abx_error(items, cond, max_triples=None) == abx_error(scaled, cond, max_triples=None)


def test_abx_no_cell():
    items = [AbxItem(np.ones((1, 2)), 1, 0, 0, 0), AbxItem(np.ones((1, 2)), 1, 0, 0, 0)]
    with pytest.raises(EvaluationError, match="within"):
        abx_error(items, "within")
    with pytest.raises(ArgumentError):
        abx_error(items, "sideways")


def test_abx_subsampling_deterministic():
    c = make_corpus(0, 3000)
    items = collect_triphones(c, None, 1, 10, 0)
    a = abx_error(items, "within", np.random.default_rng(4), 20)
    b = abx_error(items, "within", np.random.default_rng(4), 20)
    assert a == b and 0.0 <= a <= 1.0


# -- triphone collection ---------------------------------------------------

def test_three_phone_utterance_gives_one_item():
    u = Utterance(np.arange(12.0).reshape(6, 2), np.array([[0, 2, 4], [2, 4, 5], [4, 6, 6]]), 3)
    items = collect_triphones(Corpus(0, 2, [u]), None, 1)
    assert len(items) == 1
    it = items[0]
    assert (it.left, it.center, it.right, it.speaker) == (4, 5, 6, 3)
    assert np.array_equal(it.embedding, u.frames[2:4])


def test_stride_maps_frames():
    p = init_params(SMALL, 0)
    frames = np.random.default_rng(0).standard_normal((30, SMALL.input_dim))
    u = Utterance(frames, np.array([[0, 10, 1], [10, 20, 2], [20, 30, 3]]), 0)
    item = collect_triphones(Corpus(0, SMALL.input_dim, [u]), p, 2)[0]
    from madapt.backbone import extract_embeddings
    assert np.array_equal(item.embedding, extract_embeddings(p, frames, 2)[5:10])


def test_triphone_cap():
    c = make_corpus(0, 4000)
    items = collect_triphones(c, None, 1, max_items_per_type=2, seed=1)
    types = {(i.left, i.center, i.right) for i in items}
    assert len(items) <= 2 * len(types)
    assert collect_triphones(c, None, 1, 2, 1)[0].embedding is not None


def test_triphones_need_alignments():
    with pytest.raises(ArgumentError):
        collect_triphones(Corpus(0, 2, [Utterance(np.zeros((4, 2)), np.zeros((0, 3), dtype=int), 0)]), None, 1)


# -- units -----------------------------------------------------------------

def test_kmeans_single_unit():
    _, assign, _ = kmeans_fit(np.random.default_rng(0).standard_normal((50, 3)), 1)
    assert np.all(assign == 0)


def test_kmeans_objective_non_increasing():
    x = np.random.default_rng(1).standard_normal((400, 4))
    _, _, obj = kmeans_fit(x, 8, seed=2)
    assert all(b <= a + 1e-9 for a, b in zip(obj, obj[1:]))
    with pytest.raises(ArgumentError):
        kmeans_fit(x[:3], 4)


def test_codebook_units_match_assign():
    p = init_params(SMALL, 0)
    c = make_corpus(0, 600)
    seqs = extract_units(p, c, SMALL.num_layers, "codebook")
    from madapt.backbone import extract_embeddings
    for s, u in zip(seqs, c.utterances):
        e = normalize_targets(extract_embeddings(p, u.frames, SMALL.num_layers))
        assert np.array_equal(s.units, codebook_assign(e, p.codebooks[f"layer{SMALL.num_layers}"]))
        assert len(s.units) == len(s.phones)
    with pytest.raises(ArgumentError):
        extract_units(p, c, 1, "codebook")


# -- PNMI ------------------------------------------------------------------

def test_pnmi_examples():
    assert pnmi_from_counts([[2, 0], [0, 2]]) == 1.0
    assert pnmi_from_counts([[1, 1], [1, 1]]) == 0.0
    assert pnmi_from_counts([[3, 1], [0, 4]]) == pytest.approx(PNMI_3_1_0_4, abs=1e-12)
    assert pnmi_from_counts([[5, 0, 0]]) == 0.0


def test_pnmi_matches_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = rng.integers(0, 5, size=150)
        y = (z + rng.integers(0, 3, size=150)) % 4
        seqs = [UnitSequence(z[:80], y[:80], 0), UnitSequence(z[80:], y[80:], 1)]
        assert pnmi(seqs) == pytest.approx(pnmi_bruteforce(z, y), abs=1e-12)


def test_unit_sequence_length_check():
    with pytest.raises(ArgumentError):
        UnitSequence(np.zeros(3), np.zeros(4), 0)


# -- PER -------------------------------------------------------------------

def test_edit_distance_examples():
    # "a a" collapses to "a" before scoring against "a b a"
    ref, hyp = collapse([1, 2, 1]), collapse([1, 1])
    assert edit_distance(ref, hyp) == 2
    assert edit_distance(ref, hyp) / len(ref) == 2 / 3
    assert edit_distance([1, 2, 1], [1, 1]) == 1
    assert edit_distance([], [1, 2]) == 2
    rng = np.random.default_rng(0)
    for _ in range(50):
        r = rng.integers(0, 3, size=int(rng.integers(0, 7))).tolist()
        h = rng.integers(0, 3, size=int(rng.integers(0, 7))).tolist()
        assert edit_distance(r, h) == edit_bruteforce(r, h)


def test_collapse():
    assert collapse([1, 1, 2, 2, 1]) == [1, 2, 1]


def test_per_identity_is_zero():
    rng = np.random.default_rng(0)
    seqs = [UnitSequence(p, p.copy(), 0) for p in (rng.integers(0, 4, size=30) for _ in range(6))]
    assert per(seqs) == 0.0


def test_per_single_unit():
    rng = np.random.default_rng(1)
    seqs = []
    for _ in range(6):
        phones = (rng.random(12) < 0.3).astype(int)
        seqs.append(UnitSequence(np.zeros(12, dtype=int), phones, 0))
    expected = per_bruteforce([s.units for s in seqs], [s.phones for s in seqs], 0.5)
    assert per(seqs) == expected


def test_per_matches_bruteforce():
    rng = np.random.default_rng(2)
    for _ in range(10):
        seqs = []
        for _ in range(4):
            y = rng.integers(0, 3, size=10)
            z = (y + (rng.random(10) < 0.3)) % 4
            seqs.append(UnitSequence(z, y, 0))
        assert per(seqs) == per_bruteforce([s.units for s in seqs], [s.phones for s in seqs], 0.5)


def test_per_unseen_unit_uses_fallback():
    fit = UnitSequence(np.array([0, 0, 1]), np.array([5, 5, 6]), 0)
    held = UnitSequence(np.array([7, 7]), np.array([5, 5]), 0)
    assert per([fit, held]) == 0.0


def test_per_split_errors():
    seqs = [UnitSequence(np.zeros(2), np.zeros(2), 0)]
    with pytest.raises(ArgumentError):
        per(seqs, 0.5)
    with pytest.raises(ArgumentError):
        per(seqs * 4, 1.0)


# -- reports ---------------------------------------------------------------

def test_evaluate_report_schema():
    p = init_params(SMALL, 0)
    c = make_corpus(5, 3000)
    r = evaluate(p, c, 2, method="toy", budget=1.0, seed=0, num_units=8, max_triples=30)
    doc = json.loads(r.to_json())
    jsonschema.validate(doc, REPORT_SCHEMA)
    assert MetricsReport.from_json(r.to_json()) == r
    assert all(math.isfinite(v) for v in (r.abx_within, r.abx_across, r.pnmi, r.per))


def test_schema_rejects_out_of_range():
    doc = dict(method="m", language=1, budget=0.0, seed=0, layer=1, abx_within=1.5, abx_across=0.1,
               pnmi=0.2, per=0.3)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(doc, REPORT_SCHEMA)
