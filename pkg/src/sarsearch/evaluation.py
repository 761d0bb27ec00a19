"""Retrieval scoring with geographic-overlap ground truth.

A retrieved patch counts as correct when its footprint intersects the
query's footprint with strictly positive area (optionally at least a given
fraction of the query's area). Per query, the whole database is ranked and
scored with average precision; the report aggregates mAP and mP@n.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ListTooShort, NoRelevantItems
from .index import EmbeddingIndex, GeoFootprint


def overlap_area(a: GeoFootprint, b: GeoFootprint) -> float:
    w = min(a.max_x, b.max_x) - max(a.min_x, b.min_x)
    h = min(a.max_y, b.max_y) - max(a.min_y, b.min_y)
    return max(w, 0.0) * max(h, 0.0)


def is_relevant(a: GeoFootprint, b: GeoFootprint,
                min_overlap_fraction: float = 0.0) -> bool:
    """True when the rectangles share strictly positive area.

    With min_overlap_fraction > 0, the intersection must additionally cover
    at least that fraction of a's own area (a is the query footprint).
    """
    inter = overlap_area(a, b)
    if inter <= 0.0:
        return False
    if min_overlap_fraction > 0.0:
        area_a = (a.max_x - a.min_x) * (a.max_y - a.min_y)
        return inter >= min_overlap_fraction * area_a
    return True


def precision_at(relevance, n: int) -> float:
    """Fraction of relevant items among the top n of a ranked boolean list."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if len(relevance) < n:
        raise ListTooShort(f"ranking has {len(relevance)} items, need {n}")
    return sum(bool(r) for r in relevance[:n]) / n


def average_precision(relevance, total_relevant: int) -> float:
    """AP over a full-database ranking.

    AP = (1 / total_relevant) * sum over relevant ranks r of Precision@r.
    """
    if total_relevant < 1:
        raise NoRelevantItems("average precision undefined without relevant items")
    hits = 0
    acc = 0.0
    for rank, rel in enumerate(relevance, start=1):
        if rel:
            hits += 1
            acc += hits / rank
    return acc / total_relevant


@dataclass
class EvalReport:
    """Aggregated retrieval metrics over a query set."""

    map: float
    mp_at: dict                      # n -> mean precision at n
    per_query_ap: list               # (query id, AP), included queries only
    excluded: list = field(default_factory=list)  # query ids without relevant records

    def to_json(self) -> str:
        return json.dumps({
            "map": self.map,
            "mp_at": {str(n): v for n, v in sorted(self.mp_at.items())},
            "per_query_ap": [{"id": qid, "ap": ap} for qid, ap in self.per_query_ap],
            "excluded": list(self.excluded),
        }, indent=2)

    def format_table(self) -> str:
        ns = sorted(self.mp_at)
        header = f"{'queries':>8} {'mAP':>8}" + "".join(f"{'mP@' + str(n):>8}" for n in ns)
        row = f"{len(self.per_query_ap):>8d} {self.map:>8.4f}" + "".join(
            f"{self.mp_at[n]:>8.4f}" for n in ns)
        lines = [header, row]
        if self.excluded:
            lines.append(f"excluded (no relevant records): {len(self.excluded)}")
        return "\n".join(lines)


def evaluate(index: EmbeddingIndex, queries, ns=(1, 10, 50),
             min_overlap_fraction: float = 0.0) -> EvalReport:
    """Rank the full database for each query and score AP and P@n.

    queries is an iterable of (id, GeoFootprint, unit vector). A record whose
    id equals the query id is dropped from that query's ranking so database
    queries do not trivially match themselves. Queries with no relevant
    record are excluded from the means and listed in the report.
    """
    per_query = []
    mp_acc = {n: [] for n in ns}
    excluded = []

    for qid, qfp, qvec in queries:
        ranked = index.query(qvec, k=len(index))
        ranked = [(rid, s) for rid, s in ranked if rid != qid]
        relevance = [is_relevant(qfp, index.get(rid).footprint, min_overlap_fraction)
                     for rid, _ in ranked]
        total_relevant = sum(relevance)
        if total_relevant == 0:
            excluded.append(qid)
            continue
        per_query.append((qid, average_precision(relevance, total_relevant)))
        for n in ns:
            mp_acc[n].append(precision_at(relevance, n))

    if not per_query:
        raise NoRelevantItems("no query had a relevant record in the index")

    mean_ap = float(np.mean([ap for _, ap in per_query]))
    mp_at = {n: float(np.mean(vals)) for n, vals in mp_acc.items()}
    return EvalReport(mean_ap, mp_at, per_query, excluded)
