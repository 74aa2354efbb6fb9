"""Evaluation: VQA-style answer scoring, recall@k, splits, hit-rate curves.

The answer score follows the crowd-annotation protocol: min(#annotators / 3,
1), except that questions with a single annotated answer entity score 1
regardless of count. Recall@k is a per-query hit indicator averaged over the
suite. Test questions are tagged closed / partial_open / open depending on how
many of their ground-truth entities were ever seen as training answers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .schema import SchemaGraph, gt_hit


@dataclass(frozen=True)
class AnswerAnnotation:
    entity: int
    human_count: int
    score: float


def annotation_scores(answers: Sequence[tuple[int, int]]) -> list[AnswerAnnotation]:
    """Score each (entity, human_count) answer of one question.

    Uses min(count / 3, 1), overridden to 1.0 when the question has exactly
    one annotated answer entity.
    """
    if len(answers) == 1:
        entity, count = answers[0]
        return [AnswerAnnotation(int(entity), int(count), 1.0)]
    return [
        AnswerAnnotation(int(entity), int(count), min(count / 3.0, 1.0))
        for entity, count in answers
    ]


def vqa_score(predicted: Optional[int], annotations: Iterable[AnswerAnnotation]) -> float:
    """Annotation score of the predicted entity, 0 if not annotated."""
    if predicted is None:
        return 0.0
    for ann in annotations:
        if ann.entity == int(predicted):
            return ann.score
    return 0.0


def vqa_score_from_map(predicted: Optional[int], score_map: dict[int, float]) -> float:
    """Same protocol over a precomputed entity -> score mapping."""
    if predicted is None:
        return 0.0
    return score_map.get(int(predicted), 0.0)


def recall_at_k(ranked: Sequence[int], gt: Iterable[int], k: int) -> bool:
    """True iff any ground-truth entity appears among the k top-ranked."""
    if k < 1:
        raise ValueError("k must be >= 1")
    gt = set(int(e) for e in gt)
    return any(int(e) in gt for e in ranked[:k])


def split_open(train_answers: Iterable[int], gt: Iterable[int]) -> str:
    """Tag one test query: all gt unseen -> open, some unseen -> partial_open,
    none unseen -> closed."""
    seen = set(int(e) for e in train_answers)
    gt = set(int(e) for e in gt)
    if not gt:
        return "closed"
    unseen = gt - seen
    if not unseen:
        return "closed"
    if unseen == gt:
        return "open"
    return "partial_open"


def hit_rate_curve(
    budgets: Sequence[int],
    graphs_per_budget: Sequence[Sequence[SchemaGraph]],
    gts: Sequence[Iterable[int]],
    assert_nested: bool = True,
) -> list[tuple[int, float]]:
    """Fraction of queries whose ground truth appears at each budget.

    When ``assert_nested`` is set, every query's node set must grow with the
    budget (which the builder guarantees for a fixed one-hop cap); violations
    raise instead of producing a silently non-monotone curve.
    """
    if list(budgets) != sorted(budgets):
        raise ValueError("budgets must be sorted ascending")
    if len(graphs_per_budget) != len(budgets):
        raise ValueError("one graph list per budget required")
    n_queries = len(gts)
    for graphs in graphs_per_budget:
        if len(graphs) != n_queries:
            raise ValueError("graph lists must align with the query list")

    if assert_nested:
        for qi in range(n_queries):
            prev: frozenset[int] = frozenset()
            for bi, graphs in enumerate(graphs_per_budget):
                cur = graphs[qi].node_set()
                if not prev <= cur:
                    raise ValueError(
                        f"graphs for query {qi} are not nested between budgets "
                        f"{budgets[bi - 1]} and {budgets[bi]}"
                    )
                prev = cur

    curve = []
    for budget, graphs in zip(budgets, graphs_per_budget):
        hits = sum(gt_hit(sg, gt) for sg, gt in zip(graphs, gts))
        curve.append((int(budget), hits / n_queries if n_queries else 0.0))
    return curve


@dataclass
class EvalReport:
    """Suite-level metrics plus split bookkeeping."""

    n_queries: int
    node_recall: dict[int, float] = field(default_factory=dict)
    rank_by_node_recall: dict[int, float] = field(default_factory=dict)
    rank_by_path_recall: dict[int, float] = field(default_factory=dict)
    vqa: float = 0.0
    hit_rate: dict[int, float] = field(default_factory=dict)
    split_counts: dict[str, int] = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "node_recall": {str(k): v for k, v in sorted(self.node_recall.items())},
            "rank_by_node_recall": {
                str(k): v for k, v in sorted(self.rank_by_node_recall.items())
            },
            "rank_by_path_recall": {
                str(k): v for k, v in sorted(self.rank_by_path_recall.items())
            },
            "vqa_score": self.vqa,
            "gt_hit_rate_by_budget": {str(b): r for b, r in sorted(self.hit_rate.items())},
            "split_counts": dict(sorted(self.split_counts.items())),
        }

    def to_table(self) -> str:
        lines = [f"queries evaluated: {self.n_queries}"]

        def row(title: str, rates: dict[int, float]) -> None:
            if rates:
                cells = "  ".join(f"R@{k}={v:6.2%}" for k, v in sorted(rates.items()))
                lines.append(f"{title:<18} {cells}")

        row("node (cosine)", self.node_recall)
        row("rank by node", self.rank_by_node_recall)
        row("rank by path", self.rank_by_path_recall)
        lines.append(f"vqa score          {self.vqa:6.2%}")
        if self.hit_rate:
            cells = "  ".join(f"{b}:{r:5.1%}" for b, r in sorted(self.hit_rate.items()))
            lines.append(f"gt hit rate        {cells}")
        if self.split_counts:
            cells = "  ".join(f"{k}={v}" for k, v in sorted(self.split_counts.items()))
            lines.append(f"split counts       {cells}")
        return "\n".join(lines)

    def save(self, json_path, text_path=None) -> None:
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_obj(), f, indent=2, sort_keys=True)
            f.write("\n")
        if text_path is not None:
            with open(text_path, "w", encoding="utf-8") as f:
                f.write(self.to_table() + "\n")


def write_curve_csv(path, curve: Sequence[tuple[int, float]]) -> None:
    """``budget,rate`` rows for external plotting."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("budget,rate\n")
        for budget, rate in curve:
            f.write(f"{budget},{rate:.6f}\n")
