"""Recall@k evaluation with complexity and query-type breakdowns."""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .core import Chunk, Query, label_chunk_relevance
from .errors import NoGroundTruth


def _require_ground_truth(query: Query):
    if not query.has_ground_truth:
        raise NoGroundTruth(f"query {query.query_id} has no relevant segments or chunk ids")


def recall_at_k(results: Sequence[Chunk], query: Query, k: int = 5,
                overlap_threshold: float = 0.5) -> float:
    """Hit rate: 1.0 when any of the top ``k`` chunks is relevant, else 0.0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _require_ground_truth(query)
    return float(any(label_chunk_relevance(c, query, overlap_threshold) for c in results[:k]))


def segment_coverage_at_k(results: Sequence[Chunk], query: Query, k: int = 5,
                          overlap_threshold: float = 0.5) -> float:
    """Fraction of ground-truth segments (or explicit chunk ids) hit by the top ``k``.

    A segment is hit when a top-k chunk of its episode overlaps it by at least
    ``overlap_threshold`` of the chunk's duration.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    _require_ground_truth(query)
    top = results[:k]
    targets = []
    for seg in query.relevant_segments:
        targets.append(any(
            c.episode_id == seg.episode_id
            and max(0.0, min(seg.end, c.end_time) - max(seg.start, c.start_time)) / c.duration
            >= overlap_threshold
            for c in top
        ))
    for cid in query.relevant_chunk_ids or ():
        targets.append(any(c.chunk_id == cid for c in top))
    return sum(targets) / len(targets)


@dataclass
class GroupStats:
    recall: float
    coverage: float
    count: int

    def to_json(self):
        return {"recall_at_k": self.recall, "coverage_at_k": self.coverage, "count": self.count}


@dataclass
class EvalReport:
    k: int
    baseline: str
    methods: "OrderedDict[str, dict]" = field(default_factory=OrderedDict)
    per_query: "OrderedDict[str, list]" = field(default_factory=OrderedDict)

    def overall(self, method: str) -> GroupStats:
        return self.methods[method]["overall"]

    def relative_improvement(self, method: str):
        base = self.overall(self.baseline).recall
        if base <= 0:
            return None
        return (self.overall(method).recall - base) / base

    def to_json(self) -> dict:
        out = {"k": self.k, "baseline": self.baseline, "methods": OrderedDict()}
        for name, m in self.methods.items():
            out["methods"][name] = {
                "overall": m["overall"].to_json(),
                "relative_improvement": self.relative_improvement(name),
                "by_complexity": {str(c): s.to_json() for c, s in m["by_complexity"].items()},
                "by_query_type": {t: s.to_json() for t, s in m["by_query_type"].items()},
            }
        return out

    def to_text(self) -> str:
        """Two aligned tables: overall recall and recall per complexity level."""
        k = self.k
        rows = [("Method", f"Recall@{k}", "Rel. Imp.")]
        for name in self.methods:
            rel = self.relative_improvement(name)
            rel_s = "-" if name == self.baseline or rel is None else f"{rel * 100:+.1f}%"
            rows.append((name, f"{self.overall(name).recall:.4f}", rel_s))
        levels = sorted({c for m in self.methods.values() for c in m["by_complexity"]})
        rows2 = [("Method",) + tuple(f"Compl. {c}" for c in levels)]
        for name, m in self.methods.items():
            rows2.append((name,) + tuple(
                f"{m['by_complexity'][c].recall:.4f}" if c in m["by_complexity"] else "-"
                for c in levels
            ))
        types = sorted({t for m in self.methods.values() for t in m["by_query_type"]})
        rows3 = [("Method",) + tuple(types)]
        for name, m in self.methods.items():
            rows3.append((name,) + tuple(
                f"{m['by_query_type'][t].recall:.4f}" if t in m["by_query_type"] else "-"
                for t in types
            ))
        return "\n\n".join(_table(r) for r in (rows, rows2, rows3)) + "\n"

    def save(self, json_path, text_path=None) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")
        if text_path is not None:
            with open(text_path, "w", encoding="utf-8") as fh:
                fh.write(self.to_text())


def _table(rows) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for j, r in enumerate(rows):
        lines.append(" | ".join(
            cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths))
        ))
        if j == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def _group(values: list) -> GroupStats:
    return GroupStats(
        recall=sum(v[0] for v in values) / len(values),
        coverage=sum(v[1] for v in values) / len(values),
        count=len(values),
    )


def evaluate(methods: Mapping[str, Callable[[Query], Sequence[Chunk]]], queries: Sequence[Query],
             k: int = 5, overlap_threshold: float = 0.5) -> EvalReport:
    """Mean hit-rate and coverage per method, overall and grouped.

    ``methods`` maps a name to a function returning ranked chunks for a query;
    relative improvements are measured against the first entry.
    """
    if not methods:
        raise ValueError("no methods given")
    names = list(methods)
    report = EvalReport(k=k, baseline=names[0])
    for name in names:
        per_query = []
        for q in queries:
            ranked = list(methods[name](q))
            per_query.append((
                recall_at_k(ranked, q, k, overlap_threshold),
                segment_coverage_at_k(ranked, q, k, overlap_threshold),
                q,
            ))
        by_c, by_t = {}, {}
        for v in per_query:
            by_c.setdefault(v[2].complexity, []).append(v)
            by_t.setdefault(v[2].query_type, []).append(v)
        report.methods[name] = {
            "overall": _group(per_query) if per_query else GroupStats(0.0, 0.0, 0),
            "by_complexity": OrderedDict((c, _group(by_c[c])) for c in sorted(by_c)),
            "by_query_type": OrderedDict((t, _group(by_t[t])) for t in sorted(by_t)),
        }
        report.per_query[name] = [(v[2].query_id, v[0], v[1]) for v in per_query]
    return report
