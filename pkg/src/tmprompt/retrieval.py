"""Fuzzy-match retrieval over a TM store.

Candidates come from an idf-weighted token-overlap inverted index; the
top ``k`` are reranked by fuzzy match score (FMS), a length-normalized
word-level Levenshtein similarity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, IndexBuildError
from .tm_store import Query, TmStore

INDEX_FORMAT = "tmprompt-index"
INDEX_VERSION = 1
DEFAULT_K = 500


@dataclass(frozen=True)
class TmIndex:
    postings: dict[str, np.ndarray]
    doc_lengths: np.ndarray  # distinct normalized tokens per entry
    entry_count: int

    def idf(self, token: str) -> float:
        ids = self.postings.get(token)
        if ids is None:
            return 0.0
        return math.log(1.0 + self.entry_count / len(ids))


@dataclass(frozen=True)
class RetrievalResult:
    entry_id: int
    fms: float
    candidate_rank: int  # 1-based position in the candidate list
    overlap_score: float = 0.0


def build_index(store: TmStore) -> TmIndex:
    if len(store) == 0:
        raise IndexBuildError("cannot index an empty store")
    lists: dict[str, list[int]] = {}
    doc_lengths = np.zeros(len(store), dtype=np.int64)
    for entry in store:
        distinct = set(entry.source_retrieval_tokens)
        doc_lengths[entry.id] = len(distinct)
        for tok in distinct:
            lists.setdefault(tok, []).append(entry.id)
    # entries are visited in id order, so each list is already strictly increasing
    postings = {tok: np.asarray(ids, dtype=np.int64) for tok, ids in lists.items()}
    return TmIndex(postings, doc_lengths, len(store))


def _query_tokens(query: Query | Sequence[str]) -> list[str]:
    tokens = query.retrieval_tokens if isinstance(query, Query) else query
    return sorted(set(tokens))


def overlap_scores(index: TmIndex, query: Query | Sequence[str]) -> np.ndarray:
    """idf-weighted overlap of every entry with the query's distinct tokens."""
    scores = np.zeros(index.entry_count, dtype=np.float64)
    for tok in _query_tokens(query):
        ids = index.postings.get(tok)
        if ids is not None:
            scores[ids] += math.log(1.0 + index.entry_count / len(ids))
    return scores


def candidate_search(
    index: TmIndex, query: Query | Sequence[str], k: int = DEFAULT_K
) -> list[int]:
    """Entry ids with nonzero overlap, best first (ties: smaller id), at most ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = overlap_scores(index, query)
    hits = np.flatnonzero(scores)
    if hits.size == 0:
        return []
    if hits.size > k:
        # keep everything scoring at least the k-th best so ties survive the cut
        kth = -np.partition(-scores[hits], k - 1)[k - 1]
        hits = hits[scores[hits] >= kth]
    order = np.lexsort((hits, -scores[hits]))
    return hits[order][:k].tolist()


def levenshtein(a: Sequence[str], b: Sequence[str]) -> int:
    """Token-level edit distance (unit-cost insert, delete, substitute).

    Bit-parallel formulation (Myers 1999, Hyyrö 2001): one machine-word
    style update per token of ``b``, with Python ints as the bit vectors.
    """
    if len(a) < len(b):
        a, b = b, a
    m = len(b)
    if m == 0:
        return len(a)
    peq: dict[str, int] = {}
    for i, tok in enumerate(b):
        peq[tok] = peq.get(tok, 0) | (1 << i)
    full = (1 << m) - 1
    top = 1 << (m - 1)
    pv, mv, score = full, 0, m
    for tok in a:
        eq = peq.get(tok, 0)
        xv = eq | mv
        xh = (((eq & pv) + pv) ^ pv) | eq
        ph = mv | (~(xh | pv) & full)
        mh = pv & xh
        if ph & top:
            score += 1
        elif mh & top:
            score -= 1
        ph = ((ph << 1) | 1) & full
        mh = (mh << 1) & full
        pv = mh | (~(xv | ph) & full)
        mv = ph & xv
    return score


def fms(x: Sequence[str], x_tm: Sequence[str]) -> float:
    """Fuzzy match score ``1 - LD(x, x_tm) / max(|x|, |x_tm|)``."""
    longest = max(len(x), len(x_tm))
    if longest == 0:
        raise ValueError("fms is undefined for two empty sequences")
    return 1.0 - levenshtein(x, x_tm) / longest


def _as_query(query: Query | Sequence[str]) -> Query:
    return query if isinstance(query, Query) else Query(tuple(query))


def _check_pair(index: TmIndex, store: TmStore) -> None:
    if index.entry_count != len(store):
        raise ValueError(
            f"index covers {index.entry_count} entries but store has {len(store)}"
        )


def retrieve_best(
    index: TmIndex, store: TmStore, query: Query | Sequence[str], k: int = DEFAULT_K
) -> RetrievalResult | None:
    """Most similar TM entry among the top-``k`` candidates.

    Ranked by FMS on retrieval-normalized tokens; ties go to the higher
    overlap score, then the smaller id.
    """
    _check_pair(index, store)
    q = _as_query(query)
    candidates = candidate_search(index, q, k)
    if not candidates:
        return None
    scores = overlap_scores(index, q)
    best = None
    best_key = None
    for rank, entry_id in enumerate(candidates, start=1):
        sim = fms(q.retrieval_tokens, store[entry_id].source_retrieval_tokens)
        key = (sim, scores[entry_id], -entry_id)
        if best_key is None or key > best_key:
            best_key = key
            best = RetrievalResult(entry_id, sim, rank, float(scores[entry_id]))
    return best


def retrieve_exhaustive(
    index: TmIndex, store: TmStore, query: Query | Sequence[str]
) -> RetrievalResult | None:
    """Scan every entry sharing a token with the query; no candidate cutoff."""
    _check_pair(index, store)
    q = _as_query(query)
    scores = overlap_scores(index, q)
    best = None
    best_key = None
    for entry in store:
        if scores[entry.id] == 0.0:
            continue
        sim = fms(q.retrieval_tokens, entry.source_retrieval_tokens)
        key = (sim, scores[entry.id], -entry.id)
        if best_key is None or key > best_key:
            best_key = key
            best = RetrievalResult(entry.id, sim, 0, float(scores[entry.id]))
    return best


def retrieve_batch(
    index: TmIndex,
    store: TmStore,
    queries: Iterable[Query | Sequence[str]],
    k: int = DEFAULT_K,
) -> list[RetrievalResult | None]:
    return [retrieve_best(index, store, q, k) for q in queries]


def save_index(index: TmIndex, path: str | Path) -> None:
    payload = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "entry_count": index.entry_count,
        "doc_lengths": index.doc_lengths.tolist(),
        "postings": {tok: ids.tolist() for tok, ids in sorted(index.postings.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, separators=(",", ":"))
        fh.write("\n")


def load_index(path: str | Path) -> TmIndex:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a valid index file ({exc})") from exc
    if payload.get("format") != INDEX_FORMAT:
        raise FormatError(f"{path}: not a tmprompt index")
    if payload.get("version") != INDEX_VERSION:
        raise FormatError(
            f"{path}: unsupported index version {payload.get('version')!r} "
            f"(expected {INDEX_VERSION})"
        )
    return TmIndex(
        {tok: np.asarray(ids, dtype=np.int64) for tok, ids in payload["postings"].items()},
        np.asarray(payload["doc_lengths"], dtype=np.int64),
        int(payload["entry_count"]),
    )
