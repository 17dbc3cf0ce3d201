"""Exact-match span scoring.

A predicted span is a true positive iff the same (start, end) pair of
the same type appears in the gold list of the same document; each gold
span matches at most one prediction.  Combined metrics micro-pool the
counts of both types.
"""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import Dataset, Span


class ScoringError(ValueError):
    pass


@dataclass
class TypeMetrics:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class Metrics:
    acronym: TypeMetrics
    long_form: TypeMetrics

    @property
    def combined(self) -> TypeMetrics:
        return TypeMetrics(tp=self.acronym.tp + self.long_form.tp,
                           fp=self.acronym.fp + self.long_form.fp,
                           fn=self.acronym.fn + self.long_form.fn)


def _match(preds: list[Span], golds: list[Span], agg: TypeMetrics) -> None:
    remaining = dict.fromkeys(golds, 0)
    for g in golds:
        remaining[g] += 1
    for p in preds:
        if remaining.get(p, 0) > 0:
            remaining[p] -= 1
            agg.tp += 1
        else:
            agg.fp += 1
    agg.fn += sum(remaining.values())


def score(preds: dict[str, tuple[list[Span], list[Span]]], golds: Dataset) -> Metrics:
    """Score predictions (doc id -> (acronym spans, long-form spans)).

    Every prediction id must name a gold document; gold documents without
    an entry count as empty predictions.
    """
    gold_by_id = golds.by_id()
    unknown = set(preds) - set(gold_by_id)
    if unknown:
        raise ScoringError(f"unknown document ids in predictions: "
                           f"{sorted(unknown)}")
    acr = TypeMetrics()
    lf = TypeMetrics()
    for doc in golds.documents:
        p_acr, p_lf = preds.get(doc.id, ([], []))
        _match(p_acr, doc.acronyms, acr)
        _match(p_lf, doc.long_forms, lf)
    return Metrics(acronym=acr, long_form=lf)


def prediction_map(pred_ds: Dataset) -> dict[str, tuple[list[Span], list[Span]]]:
    """View a prediction dataset file as a scoring input."""
    return {d.id: (d.acronyms, d.long_forms) for d in pred_ds.documents}


def report(metrics: Metrics, fine_grained: bool = True) -> str:
    """Fixed-width P/R/F1 table, one row per span type plus the pooled row
    (pooled row only when ``fine_grained`` is false)."""
    rows = []
    if fine_grained:
        rows.append(("Acronyms", metrics.acronym))
        rows.append(("Long-Forms", metrics.long_form))
    rows.append(("Combined", metrics.combined))
    width = max(len(name) for name, _ in rows)
    header = f"{'':<{width}} {'P':>6} {'R':>6} {'F1':>6}"
    lines = [header]
    for name, m in rows:
        lines.append(f"{name:<{width}} {m.precision:6.4f} {m.recall:6.4f} {m.f1:6.4f}")
    return "\n".join(lines)
