import numpy as np
import pytest

from kgpath.metrics import (
    AnswerAnnotation,
    EvalReport,
    annotation_scores,
    hit_rate_curve,
    recall_at_k,
    split_open,
    vqa_score,
    vqa_score_from_map,
    write_curve_csv,
)
from kgpath.schema import SchemaGraph


def test_annotation_score_protocol():
    anns = annotation_scores([(1, 1), (2, 2), (3, 3), (4, 4)])
    assert [a.score for a in anns] == pytest.approx([1 / 3, 2 / 3, 1.0, 1.0])


def test_single_entity_answer_overrides_to_one():
    (ann,) = annotation_scores([(7, 1)])
    assert ann.score == 1.0


def test_vqa_score_lookup():
    anns = annotation_scores([(1, 3), (2, 1)])
    assert vqa_score(1, anns) == 1.0
    assert vqa_score(2, anns) == pytest.approx(1 / 3)
    assert vqa_score(99, anns) == 0.0
    assert vqa_score(None, anns) == 0.0
    assert vqa_score_from_map(2, {a.entity: a.score for a in anns}) == pytest.approx(1 / 3)


def test_recall_positions():
    ranked = list(range(100))
    assert recall_at_k(ranked, {0}, 1)
    assert not recall_at_k(ranked, {10}, 10)  # position 11
    assert recall_at_k(ranked, {10}, 50)
    with pytest.raises(ValueError):
        recall_at_k(ranked, {0}, 0)


def test_suite_mean_equals_brute_force_recount():
    rng = np.random.default_rng(1)
    rankings, gts = [], []
    for _ in range(200):
        ranking = rng.permutation(30).tolist()
        gt = set(int(x) for x in rng.choice(30, size=2, replace=False))
        rankings.append(ranking)
        gts.append(gt)
    k = 5
    mean = float(np.mean([recall_at_k(r, g, k) for r, g in zip(rankings, gts)]))
    recount = sum(1 for r, g in zip(rankings, gts) if set(r[:k]) & g) / len(rankings)
    assert mean == pytest.approx(recount)


def test_recall_invariant_to_relabeling():
    rng = np.random.default_rng(2)
    ranked = rng.permutation(20).tolist()
    gt = {3, 11}
    relabel = {i: i + 1000 for i in range(20)}
    for k in (1, 5, 10, 20):
        assert recall_at_k(ranked, gt, k) == recall_at_k(
            [relabel[i] for i in ranked], {relabel[i] for i in gt}, k
        )


def test_split_open_rules():
    train = {1, 2, 3}
    assert split_open(train, {1}) == "closed"
    assert split_open(train, {1, 9}) == "partial_open"
    assert split_open(train, {9}) == "open"
    assert split_open(train, {8, 9}) == "open"
    assert split_open(train, set()) == "closed"


def _sg(nodes, qid="q"):
    n = len(nodes)
    return SchemaGraph(
        qid=qid,
        nodes=np.asarray(nodes, dtype=np.int64),
        types=np.zeros(n, dtype=np.int8),
        edges_head=np.empty(0, dtype=np.int64),
        edges_rel=np.empty(0, dtype=np.int64),
        edges_tail=np.empty(0, dtype=np.int64),
        edges_weight=np.empty(0, dtype=np.float64),
        q_nodes=frozenset({nodes[0]}) if nodes else frozenset(),
        v_nodes=frozenset(),
    )


def test_hit_rate_curve_monotone_on_nested():
    budgets = [2, 4]
    graphs = [
        [_sg([1, 2]), _sg([5, 6])],
        [_sg([1, 2, 3, 4]), _sg([5, 6, 7, 8])],
    ]
    gts = [{3}, {9}]
    curve = hit_rate_curve(budgets, graphs, gts)
    assert curve == [(2, 0.0), (4, 0.5)]
    assert curve[0][1] <= curve[1][1]


def test_hit_rate_curve_rejects_non_nested():
    budgets = [2, 4]
    graphs = [[_sg([1, 2])], [_sg([3, 4, 5, 6])]]  # smaller graph not a subset
    with pytest.raises(ValueError, match="nested"):
        hit_rate_curve(budgets, graphs, [{1}])
    # without the assertion it computes anyway
    curve = hit_rate_curve(budgets, graphs, [{1}], assert_nested=False)
    assert curve == [(2, 1.0), (4, 0.0)]


def test_hit_rate_curve_validates_shape():
    with pytest.raises(ValueError, match="sorted"):
        hit_rate_curve([4, 2], [[], []], [])
    with pytest.raises(ValueError, match="per budget"):
        hit_rate_curve([2], [[], []], [])


def test_perfect_oracle_equals_mean_max_annotation_score():
    rng = np.random.default_rng(3)
    questions = []
    for _ in range(100):
        n_ans = int(rng.integers(1, 4))
        answers = [(int(rng.integers(50)), int(rng.integers(1, 5))) for _ in range(n_ans)]
        answers = list({e: c for e, c in answers}.items())
        questions.append(annotation_scores(answers))
    # the oracle predicts each question's best-scored annotated entity
    suite = float(
        np.mean([vqa_score(max(anns, key=lambda a: a.score).entity, anns) for anns in questions])
    )
    upper = float(np.mean([max(a.score for a in anns) for anns in questions]))
    assert suite == pytest.approx(upper)


def test_report_serialization(tmp_path):
    report = EvalReport(
        n_queries=3,
        node_recall={1: 0.5, 10: 0.9},
        rank_by_node_recall={1: 0.2},
        rank_by_path_recall={10: 0.7},
        vqa=0.4,
        hit_rate={100: 0.8},
        split_counts={"closed": 2, "open": 1},
    )
    report.save(tmp_path / "r.json", tmp_path / "r.txt")
    import json

    obj = json.loads((tmp_path / "r.json").read_text())
    assert obj["node_recall"]["10"] == 0.9
    assert obj["split_counts"]["open"] == 1
    text = (tmp_path / "r.txt").read_text()
    assert "rank by path" in text and "vqa score" in text


def test_curve_csv(tmp_path):
    write_curve_csv(tmp_path / "c.csv", [(10, 0.5), (20, 1.0)])
    assert (tmp_path / "c.csv").read_text().splitlines() == [
        "budget,rate",
        "10,0.500000",
        "20,1.000000",
    ]
