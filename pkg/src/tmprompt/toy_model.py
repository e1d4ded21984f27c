"""A small translation model: bigram target LM mixed with an IBM Model 1 lexicon.

The base distribution is

    P(w) = lam * P_lm(w | previous token or BOS) + (1 - lam) * P_lex(w | source)
    P_lex(w | source) = (t(w|NULL) + sum_i t(w|e_i)) / (|source| + 1)

with EOS drawing mass from the LM term only.  On its own that model has
no way to use a prompt: the lexical term is a bag of words and the LM
sees a single token of history.  Four optional behaviours make prompted
decoding meaningful; ``ToyModel.plain()`` switches them all off and gives
the bare formula back:

* coverage: each known source word starts with weight 1 (unknown ones
  with 0) and loses the share of every emitted target token it explains
  (its Model 1 posterior), so words already translated, including those
  translated by a forced prefix, stop attracting mass.  ``focus`` then
  tilts the weights toward the leftmost uncovered words;
* copy boost: tokens that followed earlier occurrences of the current
  LM context in the target history get their probability multiplied by
  ``1 + copy_boost * share`` (a cache LM, i.e. copying from the prompt);
* EOS gating: EOS is impossible while the target history holds fewer
  sentence terminators than the source, no terminator may go beyond the
  source's count, and (with coverage on) the last one is impossible
  while more than ``close_threshold`` source words' worth of content is
  still uncovered;
* context restart: after a terminator with source sentences still
  pending, or after a token never seen as an LM context, the LM predicts
  as if at the start of a sentence.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .decoder import BOS, EOS
from .errors import CorpusError, FormatError
from .fragment import Model1Table, model1_from_dict, model1_to_dict, train_model1
from .templates import DEFAULT_CONJUNCTIONS
from .tm_store import TmStore

MODEL_FORMAT = "tmprompt-toy-model"
MODEL_VERSION = 1
TERMINATORS = frozenset({".", "!", "?", "。", "！", "？"})
TEMPLATE_TOKENS = tuple(
    sorted({"(", ")", ",", ";", "."} | {w for pair in DEFAULT_CONJUNCTIONS.values() for w in pair})
)
_MEMO_LIMIT = 50_000


class BigramLm:
    """Add-k smoothed bigram LM; predicts over ``vocab`` (which ends with EOS)."""

    def __init__(self, vocab: Sequence[str], counts: dict[str, dict[int, int]], add_k: float):
        if add_k <= 0:
            raise ValueError("add_k must be positive")
        self.vocab = tuple(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.counts = counts
        self.add_k = add_k
        self._totals = {c: sum(row.values()) for c, row in counts.items()}
        self._rows: dict[str, np.ndarray] = {}

    def has_context(self, context: str) -> bool:
        return context in self._totals

    def distribution(self, context: str) -> np.ndarray:
        row = self._rows.get(context)
        if row is None:
            n = len(self.vocab)
            total = self._totals.get(context, 0)
            row = np.full(n, self.add_k / (total + self.add_k * n))
            for idx, c in self.counts.get(context, {}).items():
                row[idx] += c / (total + self.add_k * n)
            row.setflags(write=False)
            self._rows[context] = row
        return row

    def prob(self, word: str, context: str) -> float:
        return float(self.distribution(context)[self.index[word]])


def train_bigram(sentences: Iterable[Sequence[str]], vocab: Sequence[str], add_k: float = 0.1) -> BigramLm:
    """Maximum-likelihood bigram counts over ``BOS sentence EOS``."""
    index = {w: i for i, w in enumerate(vocab)}
    counts: dict[str, Counter] = {}
    for sent in sentences:
        prev = BOS
        for w in [*sent, EOS]:
            counts.setdefault(prev, Counter())[index[w]] += 1
            prev = w
    return BigramLm(vocab, {c: dict(row) for c, row in counts.items()}, add_k)


@dataclass(frozen=True)
class _Source:
    rows: np.ndarray  # dense t(.|e) per source position (NULL row for OOV words)
    known: np.ndarray  # position holds a word the lexicon has seen
    closing: np.ndarray  # position holds a sentence terminator
    terminators: int


@dataclass(frozen=True)
class _State:
    remaining: np.ndarray  # coverage weight left per source position
    weights: np.ndarray  # lexical weight per source position
    terminators: int
    contexts: tuple[str, ...]  # effective LM context before each emitted token, plus the next one


@dataclass
class ToyModel:
    lm: BigramLm
    lex: Model1Table
    lam: float = 0.5
    coverage: bool = True
    focus: float = 0.2
    copy_boost: float = 2.0
    eos_gating: bool = True
    context_restart: bool = True
    close_threshold: float = 1.0
    _lex_map: np.ndarray = field(init=False, repr=False)
    _terminator_ids: np.ndarray = field(init=False, repr=False)
    _null: np.ndarray = field(init=False, repr=False)
    _dense: dict = field(init=False, repr=False)
    _sources: dict = field(init=False, repr=False)
    _states: dict = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not 0.0 < self.focus <= 1.0:
            raise ValueError("focus must lie in (0, 1]")
        if self.copy_boost < 0:
            raise ValueError("copy_boost must be >= 0")
        missing = [w for w in self.lex.target_vocab if w not in self.lm.index]
        if missing:
            raise ValueError(f"lexicon targets missing from the LM vocabulary: {missing[:5]}")
        self._lex_map = np.array([self.lm.index[w] for w in self.lex.target_vocab], dtype=np.int64)
        self._terminator_ids = np.array(
            sorted(self.lm.index[t] for t in TERMINATORS if t in self.lm.index), dtype=np.int64
        )
        self._dense = {}
        self._sources = {}
        self._states = {}
        self._null = self._dense_row(None)

    def __getstate__(self) -> dict:
        # memo tables are rebuilt on demand; keep pickles (for worker processes) small
        return {f: getattr(self, f) for f in self.__dataclass_fields__ if not f.startswith("_")}

    def __setstate__(self, state: dict) -> None:
        self.__dict__.update(state)
        self.__post_init__()

    @property
    def eos_index(self) -> int:
        return self.lm.index[EOS]

    def plain(self) -> "ToyModel":
        """The same parameters with every optional behaviour switched off."""
        return ToyModel(self.lm, self.lex, self.lam, coverage=False, focus=1.0, copy_boost=0.0,
                        eos_gating=False, context_restart=False)

    def vocabulary(self) -> tuple[str, ...]:
        return self.lm.vocab

    # -- source side --------------------------------------------------------

    def _dense_row(self, source_word: str | None) -> np.ndarray:
        # OOV source words fall back to the NULL row
        key = source_word if self.lex.source_id(source_word) is not None else None
        row = self._dense.get(key)
        if row is None:
            row = np.zeros(len(self.lm.vocab))
            ids, probs = self.lex.row(key)
            row[self._lex_map[ids]] = probs
            row.setflags(write=False)
            self._dense[key] = row
        return row

    def _source(self, source: tuple[str, ...]) -> _Source:
        info = self._sources.get(source)
        if info is None:
            rows = np.array([self._dense_row(e) for e in source]).reshape(len(source), len(self.lm.vocab))
            known = np.array([self.lex.source_id(e) is not None for e in source], dtype=bool)
            closing = np.array([e in TERMINATORS for e in source], dtype=bool)
            if len(self._sources) > 1024:
                self._sources.clear()
            info = self._sources[source] = _Source(rows, known, closing, int(closing.sum()))
        return info

    # -- per-prefix state ---------------------------------------------------

    def _weights(self, remaining: np.ndarray) -> np.ndarray:
        """Coverage weights, tilted toward the leftmost uncovered positions.

        Position i is scaled by ``focus ** (uncovered mass left of i)`` and
        the result rescaled to the same total, so focus only moves weight.
        """
        if self.focus >= 1.0 or not len(remaining):
            return remaining
        before = np.cumsum(remaining) - remaining
        tilted = remaining * self.focus ** before
        total = tilted.sum()
        return tilted * (remaining.sum() / total) if total > 0 else tilted

    def _context_after(self, token: str, terminators: int, source_terms: int) -> str:
        if self.context_restart:
            if token in TERMINATORS and terminators < source_terms:
                return BOS
            if not self.lm.has_context(token):
                return BOS
        return token

    def _state(self, source: tuple[str, ...], prefix: tuple[str, ...]) -> _State:
        key = (source, prefix)
        state = self._states.get(key)
        if state is not None:
            return state
        info = self._source(source)
        if not prefix:
            if self.coverage:
                remaining = info.known.astype(np.float64)
                state = _State(remaining, self._weights(remaining), 0, (BOS,))
            else:
                ones = np.ones(len(source))
                state = _State(ones, ones, 0, (BOS,))
        else:
            parent = self._state(source, prefix[:-1])
            tok = prefix[-1]
            remaining, weights = parent.remaining, parent.weights
            if self.coverage and len(source):
                idx = self.lm.index.get(tok)
                if idx is not None:
                    # each emitted token explains one unit of source weight,
                    # shared by its Model 1 posterior over source positions
                    share = parent.weights * info.rows[:, idx]
                    z = share.sum()
                    if z > 0:
                        remaining = np.maximum(parent.remaining - share / z, 0.0)
                        weights = self._weights(remaining)
            terms = parent.terminators + (tok in TERMINATORS)
            ctx = self._context_after(tok, terms, info.terminators)
            state = _State(remaining, weights, terms, parent.contexts + (ctx,))
        if len(self._states) > _MEMO_LIMIT:
            self._states.clear()
        self._states[key] = state
        return state

    # -- the model contract -------------------------------------------------

    def next_distribution(self, source: Sequence[str], prefix: Sequence[str]) -> np.ndarray:
        source = tuple(source)
        prefix = tuple(prefix)
        info = self._source(source)
        state = self._state(source, prefix)

        lex = (state.weights @ info.rows + self._null) / (state.weights.sum() + 1.0)
        context = state.contexts[-1]
        dist = self.lam * self.lm.distribution(context) + (1.0 - self.lam) * lex

        changed = False
        if self.copy_boost > 0 and prefix:
            followers = Counter(prefix[t] for t in range(len(prefix)) if state.contexts[t] == context)
            if followers:
                total = sum(followers.values())
                boost = np.ones(len(dist))
                for tok, c in followers.items():
                    idx = self.lm.index.get(tok)
                    if idx is not None:
                        boost[idx] += self.copy_boost * c / total
                dist = dist * boost
                changed = True
        if self.eos_gating and info.terminators:
            pending = info.terminators - state.terminators
            dist = dist.copy()
            if pending > 0:
                dist[self.eos_index] = 0.0
            if pending <= 0 or (
                pending == 1
                and self.coverage
                and float(state.remaining[~info.closing].sum()) > self.close_threshold
            ):
                dist[self._terminator_ids] = 0.0
            changed = True
        if changed:
            dist = dist / dist.sum()
        return dist

    def lexical_distribution(self, source: Sequence[str]) -> np.ndarray:
        """P_lex(. | source) with every position weighted 1 (OOV words via NULL)."""
        rows = self._source(tuple(source)).rows
        return (rows.sum(axis=0) + self._null) / (len(source) + 1.0)


def model_vocabulary(store: TmStore, extra: Iterable[str] = TEMPLATE_TOKENS) -> tuple[str, ...]:
    words = {w for entry in store for w in entry.target_tokens}
    words.update(extra)
    words.discard(EOS)
    words.discard(BOS)
    return tuple(sorted(words)) + (EOS,)


def train_toy(
    store: TmStore,
    em_iters: int = 10,
    add_k: float = 0.1,
    lam: float = 0.5,
    extra_tokens: Iterable[str] = TEMPLATE_TOKENS,
    **options,
) -> ToyModel:
    """Fit the bigram LM on target sides and t(target|source) with Model 1 EM."""
    if len(store) == 0:
        raise CorpusError("cannot train a model on an empty store")
    vocab = model_vocabulary(store, extra_tokens)
    lm = train_bigram((e.target_tokens for e in store), vocab, add_k)
    lex = train_model1(store, em_iters)
    return ToyModel(lm, lex, lam, **options)


def model_to_dict(model: ToyModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "lam": model.lam,
        "coverage": model.coverage,
        "focus": model.focus,
        "copy_boost": model.copy_boost,
        "eos_gating": model.eos_gating,
        "context_restart": model.context_restart,
        "close_threshold": model.close_threshold,
        "lm": {
            "vocab": list(model.lm.vocab),
            "add_k": model.lm.add_k,
            "counts": {c: sorted(row.items()) for c, row in sorted(model.lm.counts.items())},
        },
        "lex": model1_to_dict(model.lex),
    }


def save_model(model: ToyModel, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, ensure_ascii=False, separators=(",", ":"))
        fh.write("\n")


def load_model(path: str | Path) -> ToyModel:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a valid model file ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != MODEL_FORMAT:
        raise FormatError(f"{path}: not a tmprompt model file")
    if payload.get("version") != MODEL_VERSION:
        raise FormatError(
            f"{path}: unsupported model version {payload.get('version')!r} (expected {MODEL_VERSION})"
        )
    lm_data = payload["lm"]
    counts = {c: {int(i): int(n) for i, n in row} for c, row in lm_data["counts"].items()}
    lm = BigramLm(lm_data["vocab"], counts, float(lm_data["add_k"]))
    lex = model1_from_dict(payload["lex"], str(path))
    return ToyModel(
        lm,
        lex,
        lam=float(payload["lam"]),
        coverage=bool(payload["coverage"]),
        focus=float(payload["focus"]),
        copy_boost=float(payload["copy_boost"]),
        eos_gating=bool(payload["eos_gating"]),
        context_restart=bool(payload["context_restart"]),
        close_threshold=float(payload["close_threshold"]),
    )
