"""Dataset loading, validation, persistence and corpus statistics.

Data files are UTF-8 JSON: one top-level array of records, each record

    {"id": "...", "text": "...", "acronyms": [[start, end], ...],
     "long-forms": [[start, end], ...]}

Span indices count Unicode code points into ``text``; ``start`` is
inclusive, ``end`` exclusive.  Corpora annotated with inclusive end
indices can be loaded with ``inclusive_ends=True``, which shifts every
end by +1.  Alternative record field names are supported through a
``field_map``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

DEFAULT_FIELDS = {
    "id": "id",
    "text": "text",
    "acronyms": "acronyms",
    "long_forms": "long-forms",
}


class CorpusError(ValueError):
    """Malformed dataset file or record."""


@dataclass(frozen=True, order=True)
class Span:
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end <= self.start:
            raise CorpusError(f"invalid span ({self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    def overlaps(self, other: "Span") -> bool:
        return self.start < other.end and other.start < self.end

    def slice(self, text: str) -> str:
        return text[self.start:self.end]


@dataclass
class Document:
    id: str
    text: str
    acronyms: list[Span] = field(default_factory=list)
    long_forms: list[Span] = field(default_factory=list)


@dataclass
class Dataset:
    documents: list[Document] = field(default_factory=list)
    name: str = ""
    # dropped spans / skipped records accumulated during a lenient load
    n_warnings: int = 0

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def by_id(self) -> dict[str, Document]:
        return {d.id: d for d in self.documents}

    def texts(self) -> list[str]:
        return [d.text for d in self.documents]


@dataclass
class StatsReport:
    n_docs: int
    avg_word_length: float
    avg_acronyms: float
    avg_long_forms: float
    n_both: int
    n_only_acr: int
    n_only_lf: int
    n_neither: int


def _check_spans(raw_spans, text: str, which: str, doc_id: str, strict: bool,
                 inclusive_ends: bool) -> tuple[list[Span], int]:
    """Validate one span list.  Returns (spans sorted by start, n dropped)."""
    if not isinstance(raw_spans, list):
        raise CorpusError(f"doc {doc_id!r}: {which} is not a list")
    dropped = 0
    spans: list[Span] = []
    for raw in raw_spans:
        if (not isinstance(raw, (list, tuple)) or len(raw) != 2
                or not all(isinstance(v, int) for v in raw)):
            raise CorpusError(f"doc {doc_id!r}: malformed {which} entry {raw!r}")
        start, end = raw
        if inclusive_ends:
            end += 1
        ok = 0 <= start < end <= len(text)
        if not ok:
            if strict:
                raise CorpusError(
                    f"doc {doc_id!r}: {which} span ({start}, {end}) out of bounds "
                    f"for text of length {len(text)}")
            log.warning("doc %r: dropping out-of-bounds %s span (%d, %d)",
                        doc_id, which, start, end)
            dropped += 1
            continue
        spans.append(Span(start, end))
    spans.sort()
    deduped: list[Span] = []
    for sp in spans:
        if deduped and sp.start < deduped[-1].end:
            if strict:
                raise CorpusError(
                    f"doc {doc_id!r}: overlapping {which} spans "
                    f"{(deduped[-1].start, deduped[-1].end)} and {(sp.start, sp.end)}")
            log.warning("doc %r: dropping overlapping %s span (%d, %d)",
                        doc_id, which, sp.start, sp.end)
            dropped += 1
            continue
        deduped.append(sp)
    return deduped, dropped


def load_dataset(path, strict: bool = True, field_map: dict[str, str] | None = None,
                 inclusive_ends: bool = False, name: str | None = None) -> Dataset:
    """Load and validate a dataset file.

    In strict mode every invariant violation (out-of-bounds or overlapping
    spans, duplicate ids) raises :class:`CorpusError`.  In lenient mode bad
    spans and duplicate-id records are dropped; the number of drops is
    reported in ``Dataset.n_warnings``.
    """
    fields = dict(DEFAULT_FIELDS)
    if field_map:
        fields.update(field_map)
    with open(path, encoding="utf-8") as fh:
        try:
            records = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(records, list):
        raise CorpusError(f"{path}: expected a top-level array of records")

    docs: list[Document] = []
    seen: set[str] = set()
    warnings = 0
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise CorpusError(f"{path}: record {i} is not an object")
        try:
            doc_id = str(rec[fields["id"]])
            text = rec[fields["text"]]
            raw_acr = rec[fields["acronyms"]]
            raw_lf = rec[fields["long_forms"]]
        except KeyError as exc:
            raise CorpusError(f"{path}: record {i} missing field {exc}") from exc
        if not isinstance(text, str):
            raise CorpusError(f"{path}: record {doc_id!r} text is not a string")
        if doc_id in seen:
            if strict:
                raise CorpusError(f"{path}: duplicate document id {doc_id!r}")
            log.warning("%s: dropping record with duplicate id %r", path, doc_id)
            warnings += 1
            continue
        seen.add(doc_id)
        acronyms, d1 = _check_spans(raw_acr, text, "acronym", doc_id, strict,
                                    inclusive_ends)
        long_forms, d2 = _check_spans(raw_lf, text, "long-form", doc_id, strict,
                                      inclusive_ends)
        warnings += d1 + d2
        docs.append(Document(id=doc_id, text=text, acronyms=acronyms,
                             long_forms=long_forms))
    ds_name = name if name is not None else str(path)
    return Dataset(documents=docs, name=ds_name, n_warnings=warnings)


def write_predictions(ds: Dataset, preds: dict[str, tuple[list[Span], list[Span]]],
                      path) -> None:
    """Write ``ds`` with its gold spans replaced by ``preds`` (keyed by doc id).

    Output uses the canonical record format and is reloadable with
    :func:`load_dataset`.  Every document of ``ds`` must have an entry in
    ``preds``; extra prediction ids are ignored.
    """
    records = []
    for doc in ds.documents:
        if doc.id not in preds:
            raise CorpusError(f"no prediction for document id {doc.id!r}")
        acr, lf = preds[doc.id]
        records.append({
            "id": doc.id,
            "text": doc.text,
            "acronyms": [[s.start, s.end] for s in sorted(acr)],
            "long-forms": [[s.start, s.end] for s in sorted(lf)],
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, ensure_ascii=False, indent=1)
        fh.write("\n")


def save_dataset(ds: Dataset, path) -> None:
    """Persist a dataset as-is (gold spans kept)."""
    write_predictions(ds, {d.id: (d.acronyms, d.long_forms) for d in ds}, path)


def dataset_stats(ds: Dataset) -> StatsReport:
    """Per-corpus averages and acronym/long-form co-occurrence counts.

    Word length is the whitespace-token count of a document.  A document
    counts as "both" with >=1 acronym and >=1 long-form, "only acronym"
    with >=1 acronym and no long-forms, and "neither" with none of each.
    """
    n = len(ds.documents)
    if n == 0:
        return StatsReport(0, 0.0, 0.0, 0.0, 0, 0, 0, 0)
    words = acr = lf = both = only_acr = only_lf = neither = 0
    for doc in ds.documents:
        words += len(doc.text.split())
        acr += len(doc.acronyms)
        lf += len(doc.long_forms)
        has_a, has_l = bool(doc.acronyms), bool(doc.long_forms)
        if has_a and has_l:
            both += 1
        elif has_a:
            only_acr += 1
        elif has_l:
            only_lf += 1
        else:
            neither += 1
    return StatsReport(
        n_docs=n,
        avg_word_length=words / n,
        avg_acronyms=acr / n,
        avg_long_forms=lf / n,
        n_both=both,
        n_only_acr=only_acr,
        n_only_lf=only_lf,
        n_neither=neither,
    )
