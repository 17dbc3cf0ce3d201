"""Deterministic subword tokenization with character offsets.

Words are pre-split on whitespace and punctuation, then segmented by
greedy longest-match against a piece inventory.  Non-initial pieces
carry the ``##`` continuation prefix.  A word that cannot be fully
segmented becomes a single ``[UNK]`` piece whose offsets still cover
the whole word, and its character-id row is built from the raw text,
so unknown subwords keep their character signal.

The piece inventory is built from a corpus: the N most frequent word
substrings plus every single character, each registered in initial and
continuation form.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .corpus import Span

PAD, UNK, MASK = "[PAD]", "[UNK]", "[MASK]"
SPECIALS = (PAD, UNK, MASK)
CONTINUATION = "##"
DEFAULT_CHAR_LEN = 16
DEFAULT_N_PIECES = 8000
# substrings longer than this are never candidate pieces
MAX_PIECE_LEN = 24

CHAR_PAD_ID = 0
CHAR_UNK_ID = 1


class VocabError(ValueError):
    """Malformed vocabulary file."""


def _is_punct(ch: str) -> bool:
    return not ch.isalnum() and not ch.isspace()


def pre_split(text: str) -> list[tuple[str, int]]:
    """Split into (word, start offset) units on whitespace; each
    punctuation character becomes its own unit."""
    units: list[tuple[str, int]] = []
    start = None
    for i, ch in enumerate(text):
        if ch.isspace():
            if start is not None:
                units.append((text[start:i], start))
                start = None
        elif _is_punct(ch):
            if start is not None:
                units.append((text[start:i], start))
                start = None
            units.append((ch, i))
        else:
            if start is None:
                start = i
    if start is not None:
        units.append((text[start:], start))
    return units


@dataclass
class SubwordVocab:
    pieces: dict[str, int]
    id_to_piece: list[str]
    continuation_prefix: str = CONTINUATION
    max_piece_len: int = field(init=False, default=1)

    def __post_init__(self):
        self.max_piece_len = max(
            (len(p) for p in self.pieces if p not in SPECIALS), default=1)

    @property
    def pad_id(self) -> int:
        return self.pieces[PAD]

    @property
    def unk_id(self) -> int:
        return self.pieces[UNK]

    @property
    def mask_id(self) -> int:
        return self.pieces[MASK]

    def __len__(self) -> int:
        return len(self.id_to_piece)


@dataclass
class CharVocab:
    char_to_id: dict[str, int]
    id_to_char: list[str]  # index 0 and 1 are the pad/unk placeholders

    def __len__(self) -> int:
        return len(self.id_to_char)

    def get(self, ch: str) -> int:
        return self.char_to_id.get(ch, CHAR_UNK_ID)


@dataclass
class TokenSequence:
    tokens: list[str]
    ids: list[int]
    offsets: list[Span]
    char_rows: list[list[int]]

    def __len__(self) -> int:
        return len(self.tokens)


def _vocab_from_pieces(id_to_piece: list[str]) -> SubwordVocab:
    pieces: dict[str, int] = {}
    for i, p in enumerate(id_to_piece):
        if p in pieces:
            raise VocabError(f"duplicate piece {p!r}")
        pieces[p] = i
    missing = [s for s in SPECIALS if s not in pieces]
    if missing:
        raise VocabError("vocab is missing special pieces: " + ", ".join(missing))
    return SubwordVocab(pieces=pieces, id_to_piece=id_to_piece)


def load_vocab(path) -> SubwordVocab:
    """Read a vocab file: one piece per line, line number = id."""
    id_to_piece = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            piece = line.rstrip("\n")
            if not piece or any(c.isspace() for c in piece):
                raise VocabError(f"{path}:{lineno + 1}: empty or whitespace piece")
            id_to_piece.append(piece)
    return _vocab_from_pieces(id_to_piece)


def save_vocab(vocab: SubwordVocab, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for piece in vocab.id_to_piece:
            fh.write(piece + "\n")


def build_vocab(texts, n_pieces: int = DEFAULT_N_PIECES) -> SubwordVocab:
    """Build a subword vocabulary from a corpus.

    Pieces are the ``n_pieces`` most frequent word substrings (length >= 2)
    plus every single character, each in both initial and continuation
    form, so any word over seen characters segments without UNK.
    """
    substr_counts: Counter[str] = Counter()
    chars: set[str] = set()
    for text in texts:
        for word, _ in pre_split(text):
            chars.update(word)
            n = len(word)
            for i in range(n):
                for j in range(i + 2, min(n, i + MAX_PIECE_LEN) + 1):
                    substr_counts[word[i:j]] += 1
    top = sorted(substr_counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n_pieces]
    inventory = {p for p, _ in top} | chars
    all_pieces = sorted(inventory | {CONTINUATION + p for p in inventory})
    return _vocab_from_pieces(list(SPECIALS) + all_pieces)


def build_char_vocab(texts) -> CharVocab:
    """Character vocabulary over all non-whitespace characters of a corpus.

    Id 0 is the pad, id 1 the unknown character; real characters get
    dense ids from 2 in sorted order.
    """
    chars: set[str] = set()
    for text in texts:
        chars.update(ch for ch in text if not ch.isspace())
    id_to_char = ["<pad>", "<unk>"] + sorted(chars)
    char_to_id = {ch: i + 2 for i, ch in enumerate(sorted(chars))}
    return CharVocab(char_to_id=char_to_id, id_to_char=id_to_char)


def load_char_vocab(path) -> CharVocab:
    """Read a char vocab file: one ``char<TAB>id`` per line, ids dense from 2."""
    entries: list[tuple[str, int]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                ch, raw_id = line.split("\t")
                cid = int(raw_id)
            except ValueError as exc:
                raise VocabError(f"{path}:{lineno + 1}: expected 'char<TAB>id'") from exc
            if len(ch) != 1 or cid < 2:
                raise VocabError(f"{path}:{lineno + 1}: bad entry {line!r}")
            entries.append((ch, cid))
    entries.sort(key=lambda e: e[1])
    if [cid for _, cid in entries] != list(range(2, 2 + len(entries))):
        raise VocabError(f"{path}: character ids must be dense starting at 2")
    if len({ch for ch, _ in entries}) != len(entries):
        raise VocabError(f"{path}: duplicate character")
    return CharVocab(char_to_id={ch: cid for ch, cid in entries},
                     id_to_char=["<pad>", "<unk>"] + [ch for ch, _ in entries])


def save_char_vocab(cv: CharVocab, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ch, cid in sorted(cv.char_to_id.items(), key=lambda e: e[1]):
            fh.write(f"{ch}\t{cid}\n")


def encode_chars(token: str, cv: CharVocab, max_len: int = DEFAULT_CHAR_LEN) -> list[int]:
    """Fixed-length character-id row for one token.

    The continuation prefix is stripped first; the first ``max_len``
    characters are mapped (unknown characters to the unk id) and the
    remainder pad-filled.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if token.startswith(CONTINUATION):
        token = token[len(CONTINUATION):]
    row = [cv.get(ch) for ch in token[:max_len]]
    row.extend([CHAR_PAD_ID] * (max_len - len(row)))
    return row


def _segment_word(word: str, vocab: SubwordVocab) -> list[tuple[str, int, int]] | None:
    """Greedy longest-match segmentation of one word.

    Returns (piece, start, end) triples with offsets relative to the word,
    or None when segmentation fails at any position.
    """
    pieces: list[tuple[str, int, int]] = []
    i, n = 0, len(word)
    while i < n:
        longest = None
        upper = min(n, i + vocab.max_piece_len)
        for j in range(upper, i, -1):
            cand = word[i:j]
            if i > 0:
                cand = vocab.continuation_prefix + cand
            if cand in vocab.pieces:
                longest = (cand, i, j)
                break
        if longest is None:
            return None
        pieces.append(longest)
        i = longest[2]
    return pieces


def tokenize_with_offsets(text: str, vocab: SubwordVocab,
                          char_vocab: CharVocab | None = None,
                          char_len: int = DEFAULT_CHAR_LEN) -> TokenSequence:
    """Tokenize ``text`` into subword pieces with exact source spans.

    Character-id rows are built from the raw text slice of each token
    (all-pad rows when ``char_vocab`` is None).
    """
    tokens: list[str] = []
    ids: list[int] = []
    offsets: list[Span] = []
    char_rows: list[list[int]] = []

    def emit(piece: str, pid: int, start: int, end: int):
        tokens.append(piece)
        ids.append(pid)
        offsets.append(Span(start, end))
        if char_vocab is None:
            char_rows.append([CHAR_PAD_ID] * char_len)
        else:
            char_rows.append(encode_chars(text[start:end], char_vocab, char_len))

    for word, w0 in pre_split(text):
        segmented = _segment_word(word, vocab)
        if segmented is None:
            emit(UNK, vocab.unk_id, w0, w0 + len(word))
        else:
            for piece, i, j in segmented:
                emit(piece, vocab.pieces[piece], w0 + i, w0 + j)
    return TokenSequence(tokens=tokens, ids=ids, offsets=offsets, char_rows=char_rows)


@dataclass
class Tokenizer:
    """Bundle of the two vocabularies plus the padded character length."""
    vocab: SubwordVocab
    char_vocab: CharVocab
    char_len: int = DEFAULT_CHAR_LEN

    def encode(self, text: str) -> TokenSequence:
        return tokenize_with_offsets(text, self.vocab, self.char_vocab, self.char_len)

    @classmethod
    def from_texts(cls, texts, n_pieces: int = DEFAULT_N_PIECES,
                   char_len: int = DEFAULT_CHAR_LEN) -> "Tokenizer":
        texts = list(texts)
        return cls(vocab=build_vocab(texts, n_pieces),
                   char_vocab=build_char_vocab(texts), char_len=char_len)
