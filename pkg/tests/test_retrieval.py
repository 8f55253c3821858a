import itertools
import json

import numpy as np
import pytest

from aff import _kernels_py, kernels
from aff.errors import ConfigError, DegenerateInputError, SchemaError
from aff.retrieval import (average_precision, build_index, ensemble_embeddings, evaluate_protocol,
                           mean_average_precision, search)
from aff.synth import GenSpec, generate

from oracles import all_rankings, direct_average_precision, small_mixer

try:
    from aff import _kernels
except ImportError:
    _kernels = None


# index and search


def test_single_item_index():
    idx = build_index([[1.0, 2.0]], ids=[7])
    assert len(idx) == 1 and idx.ids.tolist() == [7]


def test_duplicate_ids_and_zero_rows_rejected():
    with pytest.raises(SchemaError):
        build_index(np.ones((2, 3)), ids=[1, 1])
    with pytest.raises(DegenerateInputError):
        build_index([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(SchemaError):
        build_index(np.zeros((0, 3)))


def test_index_rows_are_unit_norm_and_read_only():
    idx = build_index(np.random.default_rng(0).standard_normal((20, 6)) * 7.0)
    np.testing.assert_allclose(np.linalg.norm(idx.embeddings, axis=1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        idx.embeddings[0, 0] = 1.0


def test_self_match_ranks_first():
    emb = np.random.default_rng(1).standard_normal((10, 5))
    idx = build_index(emb, ids=np.arange(100, 110))
    ids, scores = search(idx, emb[4])
    assert ids[0] == 104 and abs(scores[0] - 1.0) <= 1e-6


def test_orthogonal_query_scores_zero():
    idx = build_index(np.eye(4)[:3])
    _, scores = search(idx, np.eye(4)[3])
    np.testing.assert_allclose(scores, 0.0, atol=1e-12)


def test_search_matches_full_sort_oracle():
    rng = np.random.default_rng(2)
    emb = np.round(rng.standard_normal((50, 4)), 1)  # rounding makes ties likely
    ids = rng.permutation(1000)[:50]
    idx = build_index(emb, ids)
    q = rng.standard_normal(4)
    qn = q / np.linalg.norm(q)
    oracle = sorted(((float(idx.embeddings[i] @ qn), int(ids[i])) for i in range(50)), key=lambda t: (-t[0], t[1]))
    got_ids, got_scores = search(idx, q)
    assert got_ids.tolist() == [i for _, i in oracle]
    top_ids, _ = search(idx, q, k=5)
    assert top_ids.tolist() == [i for _, i in oracle[:5]]


def test_search_errors():
    idx = build_index(np.eye(3))
    with pytest.raises(SchemaError):
        search(idx, np.ones(4))
    with pytest.raises(SchemaError):
        search(idx, np.ones(3), k=4)


@pytest.mark.parametrize("c", [0.01, 3.0, 1e4])
def test_search_invariant_to_query_rescaling(c):
    rng = np.random.default_rng(3)
    idx = build_index(rng.standard_normal((30, 6)))
    q = rng.standard_normal(6)
    assert search(idx, c * q)[0].tolist() == search(idx, q)[0].tolist()


# average precision


def test_ap_examples():
    assert average_precision([1, 2, 3, 4], {1, 2}) == 1.0
    assert average_precision(["p", "n", "q"], {"p", "q"}) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)
    for r in range(1, 8):
        ranking = list(range(8))
        assert average_precision(ranking, {r - 1}) == 1.0 / r
    assert average_precision([1, 2], set()) is None


def test_ap_junk_removed_before_scoring():
    assert average_precision(["j", "p", "n"], {"p"}, junk={"j"}) == 1.0
    assert average_precision(["p"], {"p"}, junk={"p"}) is None


def test_ap_equals_direct_computation_over_all_rankings():
    # all rankings are enumerated, so one positive set per size covers every set of that size
    # up to relabeling; small lists still try every subset, and 8 items try sizes 1, 3 and 8
    for n in range(1, 9):
        sizes = range(1, n + 1) if n < 8 else (1, 3, 8)
        for k in sizes:
            subsets = itertools.combinations(range(n), k) if n <= 5 else [tuple(range(k))]
            for pos in subsets:
                pos = set(pos)
                for ranking in all_rankings(n):
                    assert average_precision(ranking, pos) == float(direct_average_precision(list(ranking), pos))


@pytest.mark.parametrize("backend", ["python", "cython"])
def test_batched_kernel_over_all_rankings_of_six(backend):
    mod = _kernels_py if backend == "python" else _kernels
    if mod is None:
        pytest.skip("compiled kernel not built")
    rankings = list(all_rankings(6))
    labels = np.array([1, 0, 1, 0, 0, 1], dtype=np.int64)
    # scores that realize each ranking exactly
    scores = np.zeros((len(rankings), 6))
    for q, r in enumerate(rankings):
        scores[q, list(r)] = -np.arange(6, dtype=np.float64)
    ap, valid = mod.average_precision_batch(scores, np.arange(6, dtype=np.int64), labels,
                                            np.ones(len(rankings), dtype=np.int64), None, 0)
    expect = [float(direct_average_precision(list(r), {0, 2, 5})) for r in rankings]
    assert np.asarray(valid).all()
    np.testing.assert_allclose(np.asarray(ap), expect, rtol=0, atol=1e-15)


def make_kernel_case(seed, nq=40, ng=300):
    rng = np.random.default_rng(seed)
    scores = np.ascontiguousarray(np.round(rng.standard_normal((nq, ng)), 1))
    return (scores, rng.permutation(ng).astype(np.int64), rng.integers(0, 12, ng).astype(np.int64),
            rng.integers(0, 14, nq).astype(np.int64))


@pytest.mark.skipif(_kernels is None, reason="compiled kernel not built")
@pytest.mark.parametrize("top_k", [0, 1, 10, 1000])
@pytest.mark.parametrize("with_junk", [False, True])
def test_backends_agree_exactly(top_k, with_junk):
    case = make_kernel_case(top_k + 7 * with_junk)
    junk = None
    if with_junk:
        junk = np.random.default_rng(1).random(case[0].shape) < 0.1
    a = _kernels_py.average_precision_batch(*case, junk, top_k)
    b = _kernels.average_precision_batch(*case, junk, top_k)
    assert np.array_equal(a[0], np.asarray(b[0]))
    assert np.array_equal(a[1], np.asarray(b[1]))


def test_kernel_matches_scalar_reference_with_ties():
    scores, gids, glabels, qlabels = make_kernel_case(9, nq=10, ng=60)
    ap, valid = kernels.average_precision_batch(scores, gids, glabels, qlabels, None, 0)
    for q in range(10):
        order = sorted(range(60), key=lambda j: (-scores[q, j], gids[j]))
        ranked = [int(gids[j]) for j in order]
        pos = {int(gids[j]) for j in range(60) if glabels[j] == qlabels[q]}
        ref = average_precision(ranked, pos)
        if ref is None:
            assert valid[q] == 0
        else:
            assert ap[q] == pytest.approx(ref, rel=0, abs=1e-14)


def test_top_k_truncation():
    # positives at ranks 1 and 4 of 5; AP@2 only credits the first and divides by min(P, k)
    scores = np.array([[5.0, 4.0, 3.0, 2.0, 1.0]])
    labels = np.array([1, 0, 0, 1, 0], dtype=np.int64)
    args = (scores, np.arange(5, dtype=np.int64), labels, np.array([1], dtype=np.int64), None)
    assert kernels.average_precision_batch(*args, 0)[0][0] == pytest.approx((1 + 2 / 4) / 2)
    assert kernels.average_precision_batch(*args, 2)[0][0] == pytest.approx(1 / 2)


def test_mean_average_precision_marks_skipped_queries():
    ap = mean_average_precision(np.eye(2), np.eye(2), np.array([0, 5]), np.array([0, 1]))
    assert ap[0] == 1.0 and np.isnan(ap[1])


# ensemble and protocols


def test_ensemble_is_mean_of_family_cosines():
    ds = generate(GenSpec(seed=1))
    q, g = ensemble_embeddings(ds.query), ensemble_embeddings(ds.gallery)
    fams = []
    for fs in (ds.query, ds.gallery):
        parts = [p.astype(np.float64) for p in list(fs.globals) + [m.reshape(len(fs), -1) for m in fs.locals]]
        fams.append([p / np.linalg.norm(p, axis=1, keepdims=True) for p in parts])
    per_family = np.mean([a @ b.T for a, b in zip(*fams)], axis=0)
    np.testing.assert_allclose(q @ g.T, per_family, rtol=0, atol=1e-9)


def test_concatenation_cosine_weighted_identity():
    rng = np.random.default_rng(4)
    for _ in range(10):
        norms = rng.uniform(0.2, 3.0, 3)
        a = [n * v / np.linalg.norm(v) for n, v in zip(norms, rng.standard_normal((3, 5)))]
        b = [n * v / np.linalg.norm(v) for n, v in zip(norms, rng.standard_normal((3, 5)))]
        ca, cb = np.concatenate(a), np.concatenate(b)
        cos = ca @ cb / (np.linalg.norm(ca) * np.linalg.norm(cb))
        cos_i = [x @ y / (np.linalg.norm(x) * np.linalg.norm(y)) for x, y in zip(a, b)]
        assert abs(cos - np.dot(norms ** 2, cos_i) / np.sum(norms ** 2)) <= 1e-9


def test_symmetric_self_retrieval():
    ds = generate(GenSpec(seed=2))
    mixer = small_mixer(0, schema=ds.gallery.schema)
    emb = mixer.embed(ds.gallery)
    idx = build_index(emb, ds.gallery.ids)
    for i in range(0, len(ds.gallery), 10):
        assert search(idx, emb[i], k=1)[0][0] == ds.gallery.ids[i]


def test_protocols_need_their_models():
    ds = generate(GenSpec(seed=2))
    with pytest.raises(ConfigError):
        evaluate_protocol(ds.query, ds.gallery, "symmetric")
    with pytest.raises(ConfigError):
        evaluate_protocol(ds.query, ds.gallery, "asymmetric", small_mixer(0, schema=ds.gallery.schema))
    with pytest.raises(ConfigError):
        evaluate_protocol(ds.query, ds.gallery, "other")


def test_report_is_deterministic_and_bounded(tmp_path):
    ds = generate(GenSpec(seed=3))
    mixer = small_mixer(1, schema=ds.gallery.schema)
    a = evaluate_protocol(ds.query, ds.gallery, "symmetric", mixer)
    b = evaluate_protocol(ds.query, ds.gallery, "symmetric", mixer)
    assert a.to_dict() == b.to_dict()
    assert all(0.0 <= x <= 1.0 for x in a.aps)
    assert a.mAP == pytest.approx(np.mean(a.aps))
    assert a.gallery_model == "mixer:transformer"
    a.write_json(tmp_path / "r.json")
    a.write_csv(tmp_path / "r.csv")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["num_queries"] == len(ds.query) and "timing" not in doc
    assert len((tmp_path / "r.csv").read_text().splitlines()) == len(ds.query) + 1
