import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refactor_kgc.evaluation import (
    EvaluationError,
    RankingReport,
    brute_force_rank_oracle,
    evaluate,
    filtered_rank,
)
from refactor_kgc.graph import FilterIndex
from refactor_kgc.oracles import ranking_mismatches
from refactor_kgc.scoring import FactorizationModel, ModelSpec
from refactor_kgc.synthetic import random_triples


def test_filtered_rank_examples():
    assert filtered_rank([0.9, 0.5, 0.7], 2) == 2.0
    assert filtered_rank([0.7, 0.7, 0.5], 0) == 1.5
    assert filtered_rank([0.1, 3.0, 0.2], 1) == 1.0
    assert filtered_rank([0.9, 0.5, 0.7], 2, filtered={0}) == 1.0
    with pytest.raises(EvaluationError):
        filtered_rank([0.9, 0.5], 0, filtered={0})
    with pytest.raises(ValueError):
        filtered_rank([np.nan, 0.5], 1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=30), st.data())
def test_filtered_rank_properties(scores, data):
    n = len(scores)
    target = data.draw(st.integers(0, n - 1))
    filt = set(data.draw(st.lists(st.integers(0, n - 1), max_size=n))) - {target}
    rank = filtered_rank(scores, target, filt)
    assert 1 <= rank <= n - len(filt)
    for f in filt:
        assert filtered_rank(scores, target, filt - {f}) >= rank


def _report(ranks):
    return RankingReport("full", [((0, 0, i), "object-side", float(r)) for i, r in enumerate(ranks)])


def test_report_aggregates():
    r = _report([1, 2, 4])
    assert r.mrr == pytest.approx((1 + 0.5 + 0.25) / 3, abs=1e-15)
    assert r.hits == {1: pytest.approx(1 / 3), 3: pytest.approx(2 / 3), 10: 1.0}
    perfect = _report([1, 1, 1, 1])
    assert perfect.mrr == 1.0 and all(v == 1.0 for v in perfect.hits.values())
    d = json.loads(r.to_json())
    assert set(d) == {"protocol", "mrr", "hits", "num_queries"} and set(d["hits"]) == {"1", "3", "10"}
    assert d["mrr"] == float(np.mean(1.0 / r.ranks))


def test_ranking_oracle_thousand_queries():
    bad, n = ranking_mismatches(seed=3, queries=1000)
    assert n == 1000 and bad == 0


def test_oracle_single_entity(rng):
    m = FactorizationModel.initialize(ModelSpec("distmult", 4), 1, 2, rng)
    f = FilterIndex(np.array([[0, 0, 0]]))
    assert brute_force_rank_oracle(m, (0, 0, 0), "object-side", f) == 1.0
    assert brute_force_rank_oracle(m, (0, 0, 0), "subject-side", f, 1, reciprocal=True) == 1.0


def test_oracle_size_limit(rng):
    m = FactorizationModel.initialize(ModelSpec("distmult", 2), 201, 1, rng)
    with pytest.raises(ValueError):
        brute_force_rank_oracle(m, (0, 0, 1), "object-side", FilterIndex())


def test_native_subject_side_matches_oracle(rng):
    m = FactorizationModel.initialize(ModelSpec("cp", 4, init_scale=1.0), 30, 3, rng)
    t = random_triples(30, 3, 40, rng)
    f = FilterIndex(t)
    rep = evaluate(m, t, f, 3, reciprocal=False)
    for triple, direction, rank in rep.per_query:
        assert rank == brute_force_rank_oracle(m, triple, direction, f, 3, reciprocal=False)


def test_missing_reciprocals_is_an_error(rng):
    m = FactorizationModel.initialize(ModelSpec("distmult", 4), 5, 2, rng)
    with pytest.raises(EvaluationError):
        evaluate(m, np.array([[0, 1, 2]]), FilterIndex(), 2)


def test_partial_protocol(rng):
    m = FactorizationModel.initialize(ModelSpec("complex", 8, init_scale=1.0), 150, 4, rng)
    t = random_triples(150, 2, 200, rng)
    f = FilterIndex(t)
    full = evaluate(m, t, f, 2)
    a = evaluate(m, t, f, 2, "partial-50", np.random.default_rng(9))
    b = evaluate(m, t, f, 2, "partial-50", np.random.default_rng(9))
    assert a.to_json() == b.to_json()
    assert a.ranks.max() <= 51
    assert np.all(a.ranks <= full.ranks)
    assert a.hits[10] >= full.hits[10]
    with pytest.raises(EvaluationError):
        evaluate(m, t, f, 2, "partial-50")
    with pytest.raises(EvaluationError):
        evaluate(m, t, f, 2, "partial-10", rng)


def test_tsv_output(tmp_path, umls, rng):
    g = umls.train
    m = FactorizationModel.initialize(ModelSpec("distmult", 4), g.num_entities, g.num_relations, rng)
    rep = evaluate(m, umls.test.triples[:3], umls.filter_index(), g.num_base_relations)
    rep.write_tsv(tmp_path / "q.tsv", umls.base_train)
    lines = (tmp_path / "q.tsv").read_text().splitlines()
    assert len(lines) == 6 and lines[0].split("\t")[3] == "object-side"
