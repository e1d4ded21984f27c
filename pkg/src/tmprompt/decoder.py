"""Beam search over any next-token model, with an optional forced prefix.

A model only has to answer one question: given the encoder tokens and
the target tokens emitted so far, what is the distribution over the
next target token?  During the forced phase the decoder feeds the
prefix token by token (so the model sees exactly the conditioning it
would see had it produced the prefix itself) but assigns each forced
token log-probability 0.  Free generation then continues from that
state, and only the free suffix is scored and length-normalised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import ModelError
from .templates import PromptedPair
from .tm_store import Tokens

BOS = "<s>"
EOS = "</s>"
DEFAULT_ALPHA = 0.6
NORMALIZATION_TOLERANCE = 1e-6


class ModelContract(Protocol):
    def vocabulary(self) -> Sequence[str]:
        """Output tokens in distribution order; must contain EOS."""

    def next_distribution(self, source: Sequence[str], prefix: Sequence[str]) -> np.ndarray:
        """Probabilities aligned with ``vocabulary()`` for the next target token."""


@dataclass(frozen=True)
class Hypothesis:
    tokens: Tokens  # free tokens only
    log_prob: float
    finished: bool


@dataclass(frozen=True)
class DecodeResult:
    full_output: Tokens
    translation: Tokens
    forced_len: int
    free_log_prob: float
    score: float  # length-normalised free log-prob used for ranking


def length_penalty(length: int, alpha: float = DEFAULT_ALPHA) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def normalized_score(log_prob: float, length: int, alpha: float = DEFAULT_ALPHA) -> float:
    """Free log-prob divided by the length penalty; ``length`` counts EOS."""
    return log_prob / length_penalty(length, alpha)


class _Vocab:
    def __init__(self, model: ModelContract):
        self.tokens = tuple(model.vocabulary())
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if EOS not in self.index:
            raise ModelError(f"model vocabulary lacks the end-of-sentence token {EOS!r}")
        self.eos = self.index[EOS]


def _checked_log_probs(model: ModelContract, vocab: _Vocab, source, prefix) -> np.ndarray:
    dist = np.asarray(model.next_distribution(source, prefix), dtype=np.float64)
    if dist.shape != (len(vocab.tokens),):
        raise ModelError(
            f"model returned a distribution of shape {dist.shape}, expected ({len(vocab.tokens)},)"
        )
    if not np.all(np.isfinite(dist)) or np.any(dist < 0):
        raise ModelError("model returned negative or non-finite probabilities")
    total = float(dist.sum())
    if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
        raise ModelError(f"model distribution sums to {total!r}, not 1")
    with np.errstate(divide="ignore"):
        return np.log(dist)


def _search(
    model: ModelContract,
    vocab: _Vocab,
    source: Sequence[str],
    context: Tokens,
    width: int,
    steps: int,
    alpha: float,
    cache: dict,
) -> Hypothesis:
    beam = [Hypothesis((), 0.0, False)]
    for _ in range(steps):
        if all(h.finished for h in beam):
            break
        # (sort key, hypothesis); key = (-normalised score, parent rank, token index)
        candidates: list[tuple[tuple[float, int, int], Hypothesis]] = []
        for rank, hyp in enumerate(beam):
            if hyp.finished:
                key = (-normalized_score(hyp.log_prob, len(hyp.tokens), alpha), rank, -1)
                candidates.append((key, hyp))
                continue
            logp = cache.get(hyp.tokens)
            if logp is None:
                logp = cache[hyp.tokens] = _checked_log_probs(model, vocab, source, context + hyp.tokens)
            # only a parent's `width` best children can survive pruning
            order = np.argsort(-logp, kind="stable")[:width]
            length = len(hyp.tokens) + 1
            for tok in order:
                lp = float(logp[tok])
                if lp == -math.inf:
                    break
                total = hyp.log_prob + lp
                child = Hypothesis(hyp.tokens + (vocab.tokens[tok],), total, int(tok) == vocab.eos)
                candidates.append(((-normalized_score(total, length, alpha), rank, int(tok)), child))
        if not candidates:
            raise ModelError("model assigned zero probability to every continuation")
        candidates.sort(key=lambda c: c[0])
        beam = [hyp for _, hyp in candidates[:width]]

    # max() keeps the first of equal keys, i.e. the better-ranked one
    return max(beam, key=lambda h: _rank_key(h, alpha))


def _rank_key(h: Hypothesis, alpha: float) -> tuple[bool, float]:
    """Finished hypotheses beat unfinished ones; then higher normalised score."""
    return (h.finished, normalized_score(h.log_prob, len(h.tokens), alpha))


def _best(model, vocab, source, context, width, steps, alpha, monotone) -> Hypothesis:
    """Beam search at ``width``; with ``monotone`` the best over widths 1..width.

    Plain beam search can return a worse hypothesis at a larger width.
    Taking the best over all smaller widths rules that out; the shared
    cache means the narrower passes mostly reuse model answers.
    """
    cache: dict = {}
    if not monotone:
        return _search(model, vocab, source, context, width, steps, alpha, cache)
    best = None
    for w in range(1, width + 1):
        hyp = _search(model, vocab, source, context, w, steps, alpha, cache)
        if best is None or _rank_key(hyp, alpha) > _rank_key(best, alpha):
            best = hyp
    return best


def _result(prefix: Tokens, best: Hypothesis, alpha: float) -> DecodeResult:
    full = prefix + best.tokens
    translation = tuple(t for t in best.tokens if t != EOS)
    return DecodeResult(
        full_output=full,
        translation=translation,
        forced_len=len(prefix),
        free_log_prob=best.log_prob,
        score=normalized_score(best.log_prob, len(best.tokens), alpha),
    )


def _check_args(width: int, max_len: int) -> None:
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")


def beam_search(
    model: ModelContract,
    source: Sequence[str],
    width: int = 5,
    max_len: int = 100,
    alpha: float = DEFAULT_ALPHA,
    monotone: bool = True,
) -> DecodeResult:
    """Beam search without a prefix; ``max_len`` bounds the emitted tokens incl. EOS."""
    _check_args(width, max_len)
    vocab = _Vocab(model)
    best = _best(model, vocab, tuple(source), (), width, max_len, alpha, monotone)
    return _result((), best, alpha)


def forced_beam_search(
    model: ModelContract,
    prompted: PromptedPair,
    width: int = 5,
    max_len: int = 100,
    alpha: float = DEFAULT_ALPHA,
    monotone: bool = True,
) -> DecodeResult:
    """Force-decode ``prompted.forced_prefix`` and beam-search the rest.

    ``max_len`` counts every decoder step, forced and free, so the free
    budget is ``max_len - len(forced_prefix)``.
    """
    _check_args(width, max_len)
    prefix = tuple(prompted.forced_prefix)
    if not prefix:
        raise ValueError("forced prefix must be non-empty; use beam_search for unprompted decoding")
    if max_len <= len(prefix):
        raise ValueError(f"max_len {max_len} leaves no room after a {len(prefix)}-token prefix")
    vocab = _Vocab(model)
    for tok in prefix:
        if tok not in vocab.index or tok == EOS:
            raise ModelError(f"forced token {tok!r} is not in the model vocabulary")
    source = tuple(prompted.encoder_tokens)
    # the beam holds exactly one hypothesis while forcing; each step still
    # queries the model on the true prefix and validates its answer
    for step in range(len(prefix)):
        _checked_log_probs(model, vocab, source, prefix[:step])
    best = _best(model, vocab, source, prefix, width, max_len - len(prefix), alpha, monotone)
    return _result(prefix, best, alpha)


def strip_prompt(result: DecodeResult) -> Tokens:
    """Tokens generated after the forced prefix, without EOS."""
    return tuple(t for t in result.full_output[result.forced_len:] if t != EOS)


def score_suffix(model: ModelContract, source: Sequence[str], prefix: Sequence[str], suffix: Sequence[str]) -> float:
    """Sum of log-probs of ``suffix`` given ``prefix`` (the prefix itself is free)."""
    vocab = _Vocab(model)
    total = 0.0
    context = tuple(prefix)
    for tok in suffix:
        logp = _checked_log_probs(model, vocab, tuple(source), context)
        total += float(logp[vocab.index[tok]])
        context += (tok,)
    return total
