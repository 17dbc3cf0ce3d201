"""Conversion between character spans and BIO label sequences.

Five labels: 0 O, 1 B-Acr, 2 I-Acr, 3 B-LF, 4 I-LF.  Encoding
tokenizes each annotated text and marks every matching contiguous
piece subsequence of the document; decoding turns maximal B/I runs
back into character spans via the token offsets.
"""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import Document, Span
from .tokenizer import SubwordVocab, TokenSequence, tokenize_with_offsets

O, B_ACR, I_ACR, B_LF, I_LF = range(5)
LABEL_NAMES = ("O", "B-Acr", "I-Acr", "B-LF", "I-LF")
N_LABELS = 5


class TaggingError(ValueError):
    pass


@dataclass
class LabelSequence:
    labels: list[int]

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)


def _fill(labels: list[int], start: int, end: int, b_label: int, i_label: int) -> None:
    labels[start] = b_label
    for k in range(start + 1, end):
        labels[k] = i_label


def _mark_occurrences(labels: list[int], tokens: list[str], needle: list[str],
                      b_label: int, i_label: int, first_only: bool) -> None:
    k = len(needle)
    for i in range(len(tokens) - k + 1):
        if tokens[i:i + k] != needle:
            continue
        # never overwrite: skip a window touching an already labelled token
        if any(labels[j] != O for j in range(i, i + k)):
            continue
        _fill(labels, i, i + k, b_label, i_label)
        if first_only:
            return


def spans_to_bio(doc: Document, ts: TokenSequence, vocab: SubwordVocab,
                 first_occurrence_only: bool = False) -> LabelSequence:
    """Label ``ts`` from the document's gold spans.

    Each annotated text (sliced from ``doc.text``) is tokenized and every
    matching contiguous token subsequence is marked, acronyms first, then
    long-forms; labelled positions are never overwritten.  With
    ``first_occurrence_only`` each annotation marks only its first match.
    """
    labels = [O] * len(ts)
    jobs = [(doc.acronyms, B_ACR, I_ACR), (doc.long_forms, B_LF, I_LF)]
    for spans, b_label, i_label in jobs:
        for span in spans:
            annotated = span.slice(doc.text)
            needle = tokenize_with_offsets(annotated, vocab).tokens
            if not needle:
                raise TaggingError(
                    f"doc {doc.id!r}: span ({span.start}, {span.end}) "
                    f"tokenizes to nothing")
            _mark_occurrences(labels, ts.tokens, needle, b_label, i_label,
                              first_occurrence_only)
    return LabelSequence(labels)


def bio_to_spans(ls: LabelSequence, ts: TokenSequence) -> tuple[list[Span], list[Span]]:
    """Decode label runs into character spans.

    A run starts at a B label and continues through same-type I labels.
    Orphan I labels (ill-formed predictions) are repaired by treating the
    first of the run as a B.
    """
    if len(ls) != len(ts):
        raise TaggingError(f"{len(ls)} labels for {len(ts)} tokens")
    acronyms: list[Span] = []
    long_forms: list[Span] = []
    run_type = None  # B_ACR or B_LF while inside a run
    run_start = 0
    for i, lab in enumerate(ls.labels):
        if lab == O:
            _close_run(acronyms, long_forms, run_type, run_start, i, ts)
            run_type = None
        elif lab in (B_ACR, B_LF):
            _close_run(acronyms, long_forms, run_type, run_start, i, ts)
            run_type, run_start = lab, i
        else:  # I label: continues a same-type run, otherwise orphan -> new run
            b_of = B_ACR if lab == I_ACR else B_LF
            if run_type != b_of:
                _close_run(acronyms, long_forms, run_type, run_start, i, ts)
                run_type, run_start = b_of, i
    _close_run(acronyms, long_forms, run_type, run_start, len(ls), ts)
    return acronyms, long_forms


def _close_run(acronyms, long_forms, run_type, start: int, end: int,
               ts: TokenSequence) -> None:
    if run_type is None or end <= start:
        return
    span = Span(ts.offsets[start].start, ts.offsets[end - 1].end)
    (acronyms if run_type == B_ACR else long_forms).append(span)


def is_well_formed(ls: LabelSequence) -> bool:
    """True when no I label follows O, start, or a different-type label."""
    prev = O
    for lab in ls.labels:
        if lab == I_ACR and prev not in (B_ACR, I_ACR):
            return False
        if lab == I_LF and prev not in (B_LF, I_LF):
            return False
        prev = lab
    return True


def format_tsv(ts: TokenSequence, ls: LabelSequence) -> str:
    """token<TAB>label-id<TAB>start<TAB>end lines for one document."""
    lines = []
    for tok, lab, off in zip(ts.tokens, ls.labels, ts.offsets):
        lines.append(f"{tok}\t{lab}\t{off.start}\t{off.end}")
    return "\n".join(lines)
