"""Fragment-level TMs: shared spans between the input and the source TM,
projected to the target TM through word alignment.

Word alignment uses IBM Model 1 (with a NULL source word) trained by EM
on the TM store, decoded per target word with Viterbi.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import FormatError, TmPromptError
from .tm_store import TmStore, Tokens, is_punct_token

MODEL1_FORMAT = "tmprompt-model1"
MODEL1_VERSION = 1

STOP_WORDS: dict[str, frozenset[str]] = {
    "en": frozenset(
        """a an the and or but nor so yet of in on at to for from by with about
        as into onto over under between through during without within upon
        i you he she it we they me him her us them my your his its our their
        this that these those is are was were be been am do does did not""".split()
    ),
    "de": frozenset(
        """der die das den dem des ein eine einen einem einer eines und oder
        aber doch sondern von zu in im an am auf aus bei mit nach seit über
        unter vor für durch gegen ohne um ich du er sie es wir ihr mich dich
        sich uns euch ihm ihn ihnen ist sind war waren sein nicht""".split()
    ),
    "fr": frozenset(
        """le la les un une des du de et ou mais donc ni à au aux en dans sur
        par pour avec sans sous je tu il elle nous vous ils elles ce cette""".split()
    ),
}


def load_stop_words(path: str | Path) -> frozenset[str]:
    """One word per line; blank lines and ``#`` comments are ignored."""
    words = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                words.add(line.lower())
    return frozenset(words)


def stop_words_for(lang: str) -> frozenset[str]:
    return STOP_WORDS.get(lang, frozenset())


# ---------------------------------------------------------------------------
# longest common subsequence


@dataclass(frozen=True)
class CommonSubsequence:
    words: Tokens
    positions_in_x: tuple[int, ...]
    positions_in_xtm: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.words)


def lcs(x: Sequence[str], x_tm: Sequence[str]) -> CommonSubsequence:
    """Longest common subsequence of ``x`` and ``x_tm`` with both position lists.

    The table holds suffix lengths so the walk runs front to back: take a
    match when the tokens agree, otherwise skip the ``x`` token if that
    keeps the optimum and the ``x_tm`` token only when it must.  Among
    equally long answers this favours early positions in ``x_tm``.
    """
    n, m = len(x), len(x_tm)
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, below = table[i], table[i + 1]
        xi = x[i]
        for j in range(m - 1, -1, -1):
            if xi == x_tm[j]:
                row[j] = below[j + 1] + 1
            else:
                row[j] = below[j] if below[j] >= row[j + 1] else row[j + 1]
    words, pos_x, pos_tm = [], [], []
    i = j = 0
    while i < n and j < m:
        if x[i] == x_tm[j]:
            words.append(x[i])
            pos_x.append(i)
            pos_tm.append(j)
            i += 1
            j += 1
        elif table[i + 1][j] >= table[i][j + 1]:
            i += 1
        else:
            j += 1
    return CommonSubsequence(tuple(words), tuple(pos_x), tuple(pos_tm))


# ---------------------------------------------------------------------------
# IBM Model 1


@dataclass(frozen=True)
class Model1Table:
    """Sparse lexical table t(f|e) stored row-wise by source word.

    Source index 0 is the NULL word (``None`` in ``source_vocab``).
    """

    source_vocab: tuple
    target_vocab: Tokens
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    log_likelihoods: tuple[float, ...] = ()
    _src_index: dict = field(default=None, compare=False, repr=False)
    _tgt_index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_src_index", {w: i for i, w in enumerate(self.source_vocab)})
        object.__setattr__(self, "_tgt_index", {w: i for i, w in enumerate(self.target_vocab)})

    def source_id(self, word: str | None) -> int | None:
        return self._src_index.get(word)

    def target_id(self, word: str) -> int | None:
        return self._tgt_index.get(word)

    def row(self, source_word: str | None) -> tuple[np.ndarray, np.ndarray]:
        """(target ids, probabilities) of t(.|source_word); empty for OOV."""
        e = self._src_index.get(source_word)
        if e is None:
            return self.indices[:0], self.data[:0]
        lo, hi = self.indptr[e], self.indptr[e + 1]
        return self.indices[lo:hi], self.data[lo:hi]

    def prob(self, target_word: str, source_word: str | None) -> float:
        f = self._tgt_index.get(target_word)
        if f is None:
            return 0.0
        ids, probs = self.row(source_word)
        k = np.searchsorted(ids, f)
        if k < len(ids) and ids[k] == f:
            return float(probs[k])
        return 0.0

    def row_sums(self) -> np.ndarray:
        return np.add.reduceat(self.data, self.indptr[:-1]) if len(self.data) else np.zeros(0)


def _corpus_pairs(corpus) -> list[tuple[Sequence[str], Sequence[str]]]:
    if isinstance(corpus, TmStore):
        return [(e.source_tokens, e.target_tokens) for e in corpus]
    return [(tuple(s), tuple(t)) for s, t in corpus]


def em_model1(corpus, iterations: int) -> Iterator[Model1Table]:
    """Run Model 1 EM from a uniform start, yielding the table after each iteration.

    Each yielded table carries the log-likelihood history: entry ``i`` is
    the training log-likelihood under the parameters of iteration ``i``
    (entry 0 is the uniform start).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    pairs = _corpus_pairs(corpus)
    if not pairs:
        raise TmPromptError("cannot train an aligner on an empty corpus")

    source_vocab: list = [None]
    src_index: dict = {None: 0}
    target_vocab: list[str] = []
    tgt_index: dict[str, int] = {}
    for src, tgt in pairs:
        for w in src:
            if w not in src_index:
                src_index[w] = len(source_vocab)
                source_vocab.append(w)
        for w in tgt:
            if w not in tgt_index:
                tgt_index[w] = len(target_vocab)
                target_vocab.append(w)
    n_tgt = len(target_vocab)

    # one cell per (target occurrence, source position incl. NULL)
    cell_src: list[np.ndarray] = []
    cell_tgt: list[np.ndarray] = []
    cell_occ: list[np.ndarray] = []
    occ_norm: list[float] = []
    occ = 0
    for src, tgt in pairs:
        e_ids = np.array([0] + [src_index[w] for w in src], dtype=np.int64)
        f_ids = np.array([tgt_index[w] for w in tgt], dtype=np.int64)
        cell_src.append(np.tile(e_ids, len(f_ids)))
        cell_tgt.append(np.repeat(f_ids, len(e_ids)))
        cell_occ.append(np.repeat(np.arange(occ, occ + len(f_ids)), len(e_ids)))
        occ_norm.extend([math.log(len(e_ids))] * len(f_ids))
        occ += len(f_ids)
    cells_e = np.concatenate(cell_src)
    cells_f = np.concatenate(cell_tgt)
    cells_occ = np.concatenate(cell_occ)
    log_norm = np.asarray(occ_norm)

    keys = cells_e * n_tgt + cells_f
    uniq, cell_pair = np.unique(keys, return_inverse=True)
    pair_src = uniq // n_tgt
    pair_tgt = uniq % n_tgt
    indptr = np.searchsorted(pair_src, np.arange(len(source_vocab) + 1))

    t = np.full(len(uniq), 1.0 / n_tgt)
    history: list[float] = []
    for _ in range(iterations):
        cell_t = t[cell_pair]
        denom = np.bincount(cells_occ, weights=cell_t, minlength=occ)
        history.append(float(np.sum(np.log(denom) - log_norm)))
        posterior = cell_t / denom[cells_occ]
        counts = np.bincount(cell_pair, weights=posterior, minlength=len(uniq))
        totals = np.bincount(pair_src, weights=counts, minlength=len(source_vocab))
        t = counts / totals[pair_src]
        cell_t = t[cell_pair]
        denom = np.bincount(cells_occ, weights=cell_t, minlength=occ)
        ll_now = float(np.sum(np.log(denom) - log_norm))
        yield Model1Table(
            tuple(source_vocab),
            tuple(target_vocab),
            indptr.copy(),
            pair_tgt.copy(),
            t.copy(),
            tuple(history) + (ll_now,),
        )


def train_model1(corpus, iterations: int = 5) -> Model1Table:
    table = None
    for table in em_model1(corpus, iterations):
        pass
    return table


def save_model1(table: Model1Table, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model1_to_dict(table), fh, ensure_ascii=False, separators=(",", ":"))
        fh.write("\n")


def model1_to_dict(table: Model1Table) -> dict:
    return {
        "format": MODEL1_FORMAT,
        "version": MODEL1_VERSION,
        "source_vocab": list(table.source_vocab),
        "target_vocab": list(table.target_vocab),
        "indptr": table.indptr.tolist(),
        "indices": table.indices.tolist(),
        "data": table.data.tolist(),
        "log_likelihoods": list(table.log_likelihoods),
    }


def model1_from_dict(payload: dict, origin: str = "<memory>") -> Model1Table:
    if payload.get("format") != MODEL1_FORMAT:
        raise FormatError(f"{origin}: not a tmprompt alignment table")
    if payload.get("version") != MODEL1_VERSION:
        raise FormatError(
            f"{origin}: unsupported alignment table version {payload.get('version')!r} "
            f"(expected {MODEL1_VERSION})"
        )
    return Model1Table(
        tuple(payload["source_vocab"]),
        tuple(payload["target_vocab"]),
        np.asarray(payload["indptr"], dtype=np.int64),
        np.asarray(payload["indices"], dtype=np.int64),
        np.asarray(payload["data"], dtype=np.float64),
        tuple(payload.get("log_likelihoods", ())),
    )


def load_model1(path: str | Path) -> Model1Table:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a valid alignment table ({exc})") from exc
    return model1_from_dict(payload, str(path))


# ---------------------------------------------------------------------------
# alignment and fragment construction


@dataclass(frozen=True)
class Alignment:
    links: frozenset[tuple[int, int]]  # (source TM index, target TM index)

    def target_to_source(self) -> dict[int, int]:
        return {j: i for i, j in self.links}


def align_viterbi(table: Model1Table, x_tm: Sequence[str], y_tm: Sequence[str]) -> Alignment:
    """Link each target word to its most probable source word.

    NULL competes as position -1 and so wins ties; a NULL choice produces
    no link.  Among real positions ties go to the smallest index.
    """
    links = set()
    for j, f in enumerate(y_tm):
        best_i, best_p = -1, table.prob(f, None)
        for i, e in enumerate(x_tm):
            p = table.prob(f, e)
            if p > best_p:
                best_i, best_p = i, p
        if best_i >= 0:
            links.add((best_i, j))
    return Alignment(frozenset(links))


@dataclass(frozen=True)
class FragmentSet:
    source_fragments: tuple[Tokens, ...]
    target_fragments: tuple[Tokens, ...]

    def __bool__(self) -> bool:
        return bool(self.source_fragments) and bool(self.target_fragments)


def _runs(positions: Iterable[int]) -> list[list[int]]:
    runs: list[list[int]] = []
    for p in positions:
        if runs and p == runs[-1][-1] + 1:
            runs[-1].append(p)
        else:
            runs.append([p])
    return runs


def _clean(fragment: Sequence[str], stop_words: frozenset[str]) -> Tokens | None:
    lo, hi = 0, len(fragment)
    while lo < hi and is_punct_token(fragment[lo]):
        lo += 1
    while hi > lo and is_punct_token(fragment[hi - 1]):
        hi -= 1
    trimmed = tuple(fragment[lo:hi])
    if not trimmed:
        return None
    if len(trimmed) == 1 and trimmed[0].lower() in stop_words:
        return None
    return trimmed


def build_fragment_tm(
    x: Sequence[str],
    x_tm: Sequence[str],
    y_tm: Sequence[str],
    aligner: Model1Table | Alignment,
    stop_words: Iterable[str] = frozenset(),
    target_stop_words: Iterable[str] | None = None,
) -> FragmentSet:
    """Extract parallel fragments shared by ``x`` and the TM pair.

    ``aligner`` is either a trained table (Viterbi links are computed here)
    or a precomputed alignment of ``x_tm`` to ``y_tm``.  Source fragments
    are runs of the common subsequence that are contiguous in ``x_tm``;
    target fragments are the contiguous runs of ``y_tm`` linked to each
    source fragment, listed source-fragment first, then by position.
    """
    alignment = aligner if isinstance(aligner, Alignment) else align_viterbi(aligner, x_tm, y_tm)
    src_stops = frozenset(w.lower() for w in stop_words)
    tgt_stops = src_stops if target_stop_words is None else frozenset(w.lower() for w in target_stop_words)

    common = lcs(x, x_tm)
    source_runs = _runs(common.positions_in_xtm)
    tgt_of = alignment.target_to_source()
    run_of_source = {i: r for r, run in enumerate(source_runs) for i in run}

    linked: list[list[int]] = [[] for _ in source_runs]
    for j in sorted(tgt_of):
        r = run_of_source.get(tgt_of[j])
        if r is not None:
            linked[r].append(j)

    source_fragments = []
    for run in source_runs:
        frag = _clean([x_tm[i] for i in run], src_stops)
        if frag:
            source_fragments.append(frag)
    target_fragments = []
    for positions in linked:
        for run in _runs(positions):
            frag = _clean([y_tm[j] for j in run], tgt_stops)
            if frag:
                target_fragments.append(frag)
    return FragmentSet(tuple(source_fragments), tuple(target_fragments))
