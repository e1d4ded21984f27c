"""Parallel corpus ingestion, tokenization and the on-disk TM store format.

A store file is UTF-8 text with LF line endings::

    #tmprompt-store<TAB>1
    #langs<TAB><source-lang><TAB><target-lang>
    #entries<TAB><N>
    <source tokens joined by U+0020><TAB><target tokens joined by U+0020>   (N lines)
    #end

Entry ids are implicit: the i-th record line is entry i.
"""

from __future__ import annotations

import logging
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CorpusError, FormatError

logger = logging.getLogger(__name__)

STORE_MAGIC = "#tmprompt-store"
STORE_VERSION = 1

# Split inside a word only at these; "." "'" "-" "/" "@" stay attached (e.g. "e.g", "don't", "voll@@").
_CLAUSE_PUNCT = frozenset(',;:!?()[]{}"«»“”„')
_DIGIT_SEPARATORS = frozenset(",.:")
_BPE_JOINER = "@@"
_NUMBER_RE = re.compile(r"^\d+(?:[.,]\d+)*$")

Tokens = tuple[str, ...]


def is_punct_char(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def is_punct_token(token: str) -> bool:
    """True if every character of ``token`` is Unicode punctuation (category P*)."""
    return bool(token) and all(is_punct_char(c) for c in token)


def is_number_token(token: str) -> bool:
    return _NUMBER_RE.match(token) is not None


def _punct_runs(s: str) -> list[str]:
    # "?!" -> ["?", "!"], "..." -> ["..."]
    runs: list[str] = []
    for ch in s:
        if runs and runs[-1][-1] == ch:
            runs[-1] += ch
        else:
            runs.append(ch)
    return runs


def _split_core(core: str) -> list[str]:
    pieces: list[str] = []
    word = ""
    punct = ""
    for i, ch in enumerate(core):
        between_digits = (
            ch in _DIGIT_SEPARATORS
            and 0 < i < len(core) - 1
            and core[i - 1].isdecimal()
            and core[i + 1].isdecimal()
        )
        if ch in _CLAUSE_PUNCT and not between_digits:
            if word:
                pieces.append(word)
                word = ""
            punct += ch
        else:
            if punct:
                pieces.extend(_punct_runs(punct))
                punct = ""
            word += ch
    if punct:
        pieces.extend(_punct_runs(punct))
    if word:
        pieces.append(word)
    return pieces


def _split_chunk(chunk: str) -> list[str]:
    if is_punct_token(chunk):
        return _punct_runs(chunk)
    start = 0
    while is_punct_char(chunk[start]):
        start += 1
    end = len(chunk)
    rest = chunk[start:]
    keeps_joiner = (
        rest.endswith(_BPE_JOINER)
        and len(rest) > len(_BPE_JOINER)
        and not is_punct_char(rest[-len(_BPE_JOINER) - 1])
    )
    if not keeps_joiner:
        while is_punct_char(chunk[end - 1]):
            end -= 1
    core = chunk[start:end]
    pieces = _split_core(core)
    tokens = _punct_runs(chunk[:start])
    if len(pieces) == 1:
        tokens.append(core)
    else:
        # a split piece may now carry edge punctuation of its own
        for piece in pieces:
            tokens.extend(_split_chunk(piece))
    tokens.extend(_punct_runs(chunk[end:]))
    return tokens


def tokenize(text: str, lang: str = "en") -> list[str]:
    """Rule tokenizer: whitespace split, then punctuation split at word edges.

    Leading and trailing punctuation is split off (runs of one repeated
    character such as ``...`` stay together); clause punctuation like ``,``
    or ``(`` is also split inside a word unless it separates digits.  A BPE
    continuation marker ``@@`` stays attached to its word.  ``lang`` is
    accepted for interface stability; the rules are language-independent.
    """
    tokens: list[str] = []
    for chunk in text.split():
        tokens.extend(_split_chunk(chunk))
    return tokens


def _keep_for_retrieval(token: str) -> bool:
    if token.isalpha():
        return True
    return not is_punct_token(token) and not is_number_token(token)


def normalize_for_retrieval(tokens: Iterable[str]) -> list[str]:
    """Drop punctuation-only and numeric tokens, lowercase the rest."""
    return [t.lower() for t in tokens if _keep_for_retrieval(t)]


def _check_tokens(tokens: Sequence[str], what: str) -> None:
    for tok in tokens:
        if tok.split() != [tok]:
            raise ValueError(f"{what}: invalid token {tok!r}")


@dataclass(frozen=True)
class TmEntry:
    id: int
    source_tokens: Tokens
    target_tokens: Tokens
    source_retrieval_tokens: Tokens = field(default=(), compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValueError("entry id must be >= 0")
        if not self.source_tokens or not self.target_tokens:
            raise ValueError(f"entry {self.id}: source and target must be non-empty")
        object.__setattr__(self, "source_tokens", tuple(self.source_tokens))
        object.__setattr__(self, "target_tokens", tuple(self.target_tokens))
        object.__setattr__(
            self,
            "source_retrieval_tokens",
            tuple(normalize_for_retrieval(self.source_tokens)),
        )


@dataclass(frozen=True)
class TmStore:
    entries: tuple[TmEntry, ...]
    source_lang: str = "en"
    target_lang: str = "de"

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        for pos, entry in enumerate(self.entries):
            if entry.id != pos:
                raise ValueError(f"entry id {entry.id} at position {pos}")

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, entry_id: int) -> TmEntry:
        return self.entries[entry_id]

    def __iter__(self):
        return iter(self.entries)

    @classmethod
    def from_pairs(
        cls,
        pairs: Iterable[tuple[Sequence[str], Sequence[str]]],
        source_lang: str = "en",
        target_lang: str = "de",
    ) -> "TmStore":
        entries = tuple(
            TmEntry(i, tuple(src), tuple(tgt)) for i, (src, tgt) in enumerate(pairs)
        )
        return cls(entries, source_lang, target_lang)


@dataclass(frozen=True)
class Query:
    tokens: Tokens
    retrieval_tokens: Tokens = field(default=(), compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(
            self, "retrieval_tokens", tuple(normalize_for_retrieval(self.tokens))
        )

    @classmethod
    def from_text(cls, text: str, lang: str = "en") -> "Query":
        return cls(tuple(tokenize(text, lang)))


def _read_lines(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8", newline=None) as fh:
        return [line.rstrip("\n") for line in fh]


def _build_store(
    pairs: Iterable[tuple[str, str]], source_lang: str, target_lang: str
) -> tuple[TmStore, int]:
    entries = []
    skipped = 0
    for src_line, tgt_line in pairs:
        src = tokenize(src_line, source_lang)
        tgt = tokenize(tgt_line, target_lang)
        if not src or not tgt:
            skipped += 1
            continue
        entries.append(TmEntry(len(entries), tuple(src), tuple(tgt)))
    if skipped:
        logger.warning("skipped %d blank line pair(s)", skipped)
    return TmStore(tuple(entries), source_lang, target_lang), skipped


def ingest_corpus(
    source_path: str | Path,
    target_path: str | Path,
    source_lang: str = "en",
    target_lang: str = "de",
) -> tuple[TmStore, int]:
    """Read a line-aligned file pair into a store.

    Returns the store and the number of line pairs skipped because one side
    was blank.
    """
    src_lines = _read_lines(source_path)
    tgt_lines = _read_lines(target_path)
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(
            f"line count mismatch: {source_path} has {len(src_lines)} lines, "
            f"{target_path} has {len(tgt_lines)} lines"
        )
    return _build_store(zip(src_lines, tgt_lines), source_lang, target_lang)


def ingest_tsv(
    path: str | Path, source_lang: str = "en", target_lang: str = "de"
) -> tuple[TmStore, int]:
    """Read ``source<TAB>target`` lines into a store."""
    pairs = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            pairs.append(("", ""))
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise CorpusError(f"{path}:{lineno}: expected 2 tab-separated columns, got {len(cols)}")
        pairs.append((cols[0], cols[1]))
    return _build_store(pairs, source_lang, target_lang)


def save_store(store: TmStore, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{STORE_MAGIC}\t{STORE_VERSION}\n")
        fh.write(f"#langs\t{store.source_lang}\t{store.target_lang}\n")
        fh.write(f"#entries\t{len(store)}\n")
        for entry in store.entries:
            _check_tokens(entry.source_tokens, f"entry {entry.id} source")
            _check_tokens(entry.target_tokens, f"entry {entry.id} target")
            fh.write(" ".join(entry.source_tokens))
            fh.write("\t")
            fh.write(" ".join(entry.target_tokens))
            fh.write("\n")
        fh.write("#end\n")


def _header_field(line: str, key: str, path) -> list[str]:
    cols = line.rstrip("\n").split("\t")
    if cols[0] != key:
        raise FormatError(f"{path}: expected {key!r} header, got {line[:40]!r}")
    return cols[1:]


def load_store(path: str | Path) -> TmStore:
    with open(path, encoding="utf-8", newline="\n") as fh:
        magic = fh.readline()
        if not magic:
            raise FormatError(f"{path}: empty file")
        version = _header_field(magic, STORE_MAGIC, path)
        if version != [str(STORE_VERSION)]:
            raise FormatError(
                f"{path}: unsupported store format version {'/'.join(version)!r} "
                f"(expected {STORE_VERSION})"
            )
        langs = _header_field(fh.readline(), "#langs", path)
        count_field = _header_field(fh.readline(), "#entries", path)
        if len(langs) != 2 or len(count_field) != 1 or not count_field[0].isdigit():
            raise FormatError(f"{path}: malformed header")
        count = int(count_field[0])
        entries = []
        for i in range(count):
            line = fh.readline()
            if not line.endswith("\n"):
                raise FormatError(f"{path}: truncated after {i} of {count} entries")
            src, sep, tgt = line[:-1].partition("\t")
            if not sep or not src or not tgt:
                raise FormatError(f"{path}: malformed record for entry {i}")
            entries.append(TmEntry(i, tuple(src.split(" ")), tuple(tgt.split(" "))))
        if fh.readline() != "#end\n":
            raise FormatError(f"{path}: missing end marker (truncated or corrupt)")
        if fh.read(1):
            raise FormatError(f"{path}: trailing data after end marker")
    return TmStore(tuple(entries), langs[0], langs[1])
