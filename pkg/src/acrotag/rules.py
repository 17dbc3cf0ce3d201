"""Capitalization-based extraction rules.

A word counts as an acronym candidate when more than a threshold
fraction of its alphabetic characters is uppercase (default 60%).  The
long-form rule checks whether the initial letters of the words right
before an acronym spell it out.  A looser 50% variant of the word test
selects probable-acronym sentences for pretraining data.
"""

from __future__ import annotations

from .corpus import Span

ACRONYM_THRESHOLD = 0.6
SENTENCE_THRESHOLD = 0.5


def _strip_core(word: str, start: int) -> tuple[str, int, int]:
    """Strip surrounding non-alphanumeric characters.

    Returns (core, core_start, core_end) with offsets into the owning text;
    core is empty for pure-punctuation words.
    """
    lo, hi = 0, len(word)
    while lo < hi and not word[lo].isalnum():
        lo += 1
    while hi > lo and not word[hi - 1].isalnum():
        hi -= 1
    return word[lo:hi], start + lo, start + hi


def _caps_ratio_ok(core: str, threshold: float) -> bool:
    alpha = [c for c in core if c.isalpha()]
    if len(alpha) < 2:
        return False
    upper = sum(1 for c in alpha if c.isupper())
    return upper / len(alpha) > threshold


def is_acronym_candidate(word: str, threshold: float = ACRONYM_THRESHOLD) -> bool:
    """True when the uppercase share of the word's alphabetic characters
    exceeds ``threshold``.  Surrounding punctuation is ignored; words with
    fewer than two letters never qualify."""
    core, _, _ = _strip_core(word, 0)
    return _caps_ratio_ok(core, threshold)


def _words_with_offsets(text: str) -> list[tuple[str, int]]:
    words = []
    pos = 0
    for w in text.split():
        start = text.index(w, pos)
        words.append((w, start))
        pos = start + len(w)
    return words


def extract_rule_based(text: str,
                       threshold: float = ACRONYM_THRESHOLD
                       ) -> tuple[list[Span], list[Span]]:
    """Extract acronym and long-form spans by the capitalization rule.

    Every candidate word yields an acronym span over its stripped core.
    For an acronym of n letters the n preceding words (pure-punctuation
    words such as a lone opening parenthesis are skipped) are checked:
    if their initial characters spell the acronym case-insensitively,
    they are emitted as one long-form span.
    """
    words = _words_with_offsets(text)
    cores = [_strip_core(w, s) for w, s in words]
    acronyms: list[Span] = []
    long_forms: list[Span] = []
    for idx, (core, c_start, c_end) in enumerate(cores):
        if not _caps_ratio_ok(core, threshold):
            continue
        acronyms.append(Span(c_start, c_end))
        letters = [c for c in core if c.isalpha()]
        last = idx - 1
        while last >= 0 and not cores[last][0]:  # skip e.g. a lone "(" in between
            last -= 1
        first = last - len(letters) + 1
        if first < 0:
            continue
        window = cores[first:last + 1]
        if all(w[0] and w[0][0].lower() == ch.lower()
               for w, ch in zip(window, letters)):
            span = Span(window[0][1], window[-1][2])
            if not any(span.overlaps(prev) for prev in long_forms):
                long_forms.append(span)
    return acronyms, long_forms


def probable_acronym_sentence(sentence: str,
                              threshold: float = SENTENCE_THRESHOLD) -> bool:
    """True when any word of the sentence passes the capitalization test."""
    return any(is_acronym_candidate(w, threshold) for w in sentence.split())
