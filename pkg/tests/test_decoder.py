import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import golden
from models import RandomModel, ScriptedModel, ShiftedModel
from tmprompt.decoder import (
    EOS,
    beam_search,
    forced_beam_search,
    length_penalty,
    normalized_score,
    score_suffix,
    strip_prompt,
)
from tmprompt.errors import ModelError
from tmprompt.templates import PromptedPair, TemplateKind, apply_sentence_template


def greedy_chain(model, source, prefix, steps):
    vocab = list(model.vocabulary())
    out = []
    for _ in range(steps):
        tok = vocab[int(np.argmax(model.next_distribution(source, tuple(prefix) + tuple(out))))]
        out.append(tok)
        if tok == EOS:
            break
    return tuple(out)


def exhaustive_best(model, source, max_len, alpha=0.6):
    """Best finished sequence of at most max_len tokens by normalised score."""
    vocab = list(model.vocabulary())
    words = [v for v in vocab if v != EOS]
    best = None
    for n in range(0, max_len):
        for body in itertools.product(words, repeat=n):
            seq = body + (EOS,)
            lp = 0.0
            for i, tok in enumerate(seq):
                p = model.next_distribution(source, seq[:i])[vocab.index(tok)]
                lp += math.log(p)
            score = lp / ((5 + len(seq)) / 6) ** alpha
            if best is None or score > best[0]:
                best = (score, seq)
    return best


def test_length_penalty():
    assert length_penalty(1) == 1.0
    assert normalized_score(-2.0, 1) == -2.0
    assert length_penalty(7, 0.5) == pytest.approx(math.sqrt(2))
    assert length_penalty(7, 0.0) == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_width_one_is_greedy(seed):
    model = RandomModel(seed, n_words=4)
    res = beam_search(model, ["s"], width=1, max_len=8)
    assert res.full_output == greedy_chain(model, ["s"], (), 8)


def test_deterministic_model_any_width():
    script = ["a", "b", "c", EOS]
    model = ScriptedModel(["a", "b", "c", EOS], lambda src, pre: script[len(pre)], mass=1.0)
    for width in range(1, 6):
        res = beam_search(model, ["x"], width, 10)
        assert res.full_output == ("a", "b", "c", EOS)
        assert res.translation == ("a", "b", "c")
        assert res.free_log_prob == 0.0


@pytest.mark.parametrize("seed", range(15))
def test_full_width_matches_exhaustive_enumeration(seed):
    model = RandomModel(seed, n_words=2, concentration=0.7)
    res = beam_search(model, ["s"], width=3 ** 4, max_len=4)
    score, seq = exhaustive_best(model, ["s"], 4)
    assert res.full_output == seq
    assert res.score == pytest.approx(score, abs=1e-12)


def test_forced_prefix_and_translation():
    model = RandomModel(3)
    pair = PromptedPair(("s", "t"), ("w1", "w0", "w1"), TemplateKind.DIRECTLY)
    res = forced_beam_search(model, pair, width=4, max_len=12)
    assert res.full_output[:3] == ("w1", "w0", "w1")
    assert res.forced_len == 3
    assert res.translation == strip_prompt(res)
    assert res.translation == tuple(t for t in res.full_output[3:] if t != EOS)


def test_immediate_eos_after_prefix():
    vocab = ["(", ")", "a", EOS]
    model = ScriptedModel(vocab, lambda src, pre: vocab[len(pre)] if len(pre) < 3 else EOS, mass=1.0)
    res = forced_beam_search(model, PromptedPair(("q",), ("(", ")", "a"), TemplateKind.PARENTHESIS), 3, 10)
    assert res.translation == ()
    assert res.full_output == ("(", ")", "a", EOS)


def test_copy_model_with_identical_tm():
    tm = ["Sie", "gab", "."]
    vocab = ["Sie", "gab", ".", "(", ")", EOS]

    def copy_next(src, prefix):
        # after "( y )" replay y token by token, then stop
        forced = ["(", *tm, ")"]
        if len(prefix) < len(forced):
            return forced[len(prefix)]
        n = len(prefix) - len(forced)
        return tm[n] if n < len(tm) else EOS

    model = ScriptedModel(vocab, copy_next, mass=0.6)
    pair = apply_sentence_template(TemplateKind.PARENTHESIS, ["She", "gave", "."], tm, ["She", "gave", "."])
    res = forced_beam_search(model, pair, width=4, max_len=20)
    assert res.translation == tuple(tm)
    # exhaustive check over all free continuations of up to 4 tokens
    shifted = ShiftedModel(model, pair.forced_prefix)
    score, seq = exhaustive_best(shifted, pair.encoder_tokens, 4)
    assert seq == ("Sie", "gab", ".", EOS)
    assert res.score == pytest.approx(score, abs=1e-12)


def test_strip_prompt_examples():
    from tmprompt.decoder import DecodeResult

    plain = DecodeResult(("a", "b", EOS), ("a", "b"), 0, -1.0, -1.0)
    assert strip_prompt(plain) == ("a", "b")
    forced = DecodeResult(("x", "y", "Hallo", EOS), ("Hallo",), 2, -1.0, -1.0)
    assert strip_prompt(forced) == ("Hallo",)


def test_parenthesis_prompt_is_stripped():
    encoder, prefix = golden.SENTENCE_ROWS["parenthesis"]
    hypothesis = "Sie gab uns einen voll@@ ständigen Bericht über den Verkehrs@@ unfall .".split()
    prefix = prefix.split()
    vocab = sorted(set(prefix) | set(hypothesis)) + [EOS]
    full = prefix + hypothesis + [EOS]
    model = ScriptedModel(vocab, lambda src, pre: full[len(pre)], mass=0.95)
    res = forced_beam_search(model, PromptedPair(tuple(encoder.split()), tuple(prefix), TemplateKind.PARENTHESIS), 3, 60)
    assert res.translation == tuple(hypothesis)
    assert strip_prompt(res) == tuple(hypothesis)
    assert res.full_output[: len(prefix)][-1] == ")"


def test_forced_token_missing_from_vocabulary():
    model = RandomModel(0)
    with pytest.raises(ModelError, match="Vorfall"):
        forced_beam_search(model, PromptedPair(("s",), ("w0", "Vorfall"), TemplateKind.DIRECTLY), 2, 10)
    with pytest.raises(ModelError):
        forced_beam_search(model, PromptedPair(("s",), (EOS,), TemplateKind.DIRECTLY), 2, 10)


class BadModel:
    def __init__(self, dist):
        self.dist = np.asarray(dist, dtype=float)

    def vocabulary(self):
        return ("a", EOS)

    def next_distribution(self, source, prefix):
        return self.dist


@pytest.mark.parametrize("dist", [[0.5, 0.6], [1.2, -0.2], [np.nan, 1.0], [1.0]])
def test_invalid_distributions_raise(dist):
    with pytest.raises(ModelError):
        beam_search(BadModel(dist), ["s"], 2, 5)


def test_missing_eos_raises():
    model = ScriptedModel(["a", "b"], lambda s, p: "a")
    with pytest.raises(ModelError, match="end-of-sentence"):
        beam_search(model, ["s"], 2, 5)


def test_argument_checks():
    model = RandomModel(0)
    with pytest.raises(ValueError):
        beam_search(model, ["s"], 0, 5)
    with pytest.raises(ValueError):
        beam_search(model, ["s"], 1, 0)
    with pytest.raises(ValueError):
        forced_beam_search(model, PromptedPair(("s",), ("w0", "w1"), TemplateKind.DIRECTLY), 1, 2)
    with pytest.raises(ValueError):
        forced_beam_search(model, PromptedPair(("s",), (), TemplateKind.DIRECTLY), 1, 5)


def test_forced_phase_still_queries_model_on_true_prefix():
    seen = []

    class Spy(RandomModel):
        def next_distribution(self, source, prefix):
            seen.append(tuple(prefix))
            return super().next_distribution(source, prefix)

    forced_beam_search(Spy(1), PromptedPair(("s",), ("w2", "w3"), TemplateKind.DIRECTLY), 1, 4)
    assert seen[:3] == [(), ("w2",), ("w2", "w3")]


def test_unfinished_fallback():
    model = ScriptedModel(["a", EOS], lambda s, p: "a", mass=1.0)
    res = beam_search(model, ["s"], 3, 4)
    assert res.full_output == ("a", "a", "a", "a")
    assert res.translation == ("a", "a", "a", "a")


def rank_key(res):
    return (bool(res.full_output) and res.full_output[-1] == EOS, res.score)


@given(
    seed=st.integers(0, 10**6),
    n_words=st.integers(2, 5),
    concentration=st.sampled_from([0.3, 1.0, 3.0]),
    prefix_len=st.integers(1, 4),
    free=st.integers(1, 6),
    width=st.integers(1, 5),
)
@settings(max_examples=60, deadline=None)
def test_forced_decode_invariants(seed, n_words, concentration, prefix_len, free, width):
    model = RandomModel(seed, n_words, concentration)
    rng = np.random.default_rng(seed)
    prefix = tuple(f"w{i}" for i in rng.integers(0, n_words, prefix_len))
    pair = PromptedPair(("src", str(seed)), prefix, TemplateKind.DIRECTLY)
    res = forced_beam_search(model, pair, width, prefix_len + free)
    assert res.full_output[:prefix_len] == prefix
    restart = beam_search(ShiftedModel(model, prefix), pair.encoder_tokens, width, free)
    assert res.full_output[prefix_len:] == restart.full_output
    assert res.free_log_prob == pytest.approx(restart.free_log_prob, abs=1e-9)
    rescored = score_suffix(model, pair.encoder_tokens, prefix, res.full_output[prefix_len:])
    assert res.free_log_prob == pytest.approx(rescored, abs=1e-9)
    wider = forced_beam_search(model, pair, width + 1, prefix_len + free)
    assert rank_key(wider) >= rank_key(res)


def test_plain_beam_search_is_not_always_monotone():
    # a known counterexample: plain width 3 ends worse than plain width 2
    model = RandomModel(671, 3, 3.0)
    keys = [rank_key(beam_search(model, ["a"], w, 9, monotone=False)) for w in (2, 3)]
    assert keys[1] < keys[0]
    monotone = [rank_key(beam_search(model, ["a"], w, 9)) for w in (1, 2, 3, 4)]
    assert monotone == sorted(monotone)


def test_monotone_search_reuses_model_answers():
    a, b = RandomModel(5, 4), RandomModel(5, 4)
    beam_search(a, ["s"], 5, 10, monotone=False)
    beam_search(b, ["s"], 5, 10)
    assert b.calls < 3 * a.calls
