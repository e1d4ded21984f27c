import pytest

from models import RandomModel
from tmprompt.decoder import beam_search, forced_beam_search
from tmprompt.fragment import train_model1
from tmprompt.pipeline import (
    DecodeSettings,
    DecodeTask,
    Failure,
    TmMatch,
    build_prompt,
    translate_batch,
    translate_tokens,
)
from tmprompt.templates import TemplateKind, apply_sentence_template
from tmprompt.tm_store import TmEntry, TmStore
from tmprompt.toy_model import train_toy

PAIRS = [
    ("the cat sleeps .".split(), "die Katze schläft .".split()),
    ("the dog sleeps .".split(), "der Hund schläft .".split()),
    ("the dog eats .".split(), "der Hund frisst .".split()),
    ("a cat eats .".split(), "eine Katze frisst .".split()),
]


@pytest.fixture(scope="module")
def model():
    return train_toy(TmStore.from_pairs(PAIRS))


def entry(i):
    return TmEntry(i, tuple(PAIRS[i][0]), tuple(PAIRS[i][1]))


def test_free_budget():
    assert DecodeSettings().free_budget(4) == 18
    assert DecodeSettings(max_len=7).free_budget(4) == 7


def test_no_tm_is_plain_beam_search(model):
    src = "the cat eats .".split()
    out = translate_tokens(model, src, None, DecodeSettings(template=None))
    assert out.result == beam_search(model, src, 5, 18)
    assert out.prompt is None and out.note == ""
    missing = translate_tokens(model, src, None, DecodeSettings())
    assert missing.result == out.result and missing.note == "no tm"


def test_template_decode_matches_forced_search(model):
    src = "the cat eats .".split()
    match = TmMatch(entry(0), 0.75)
    settings = DecodeSettings(template=TemplateKind.PARENTHESIS, width=3, max_len=6)
    out = translate_tokens(model, src, match, settings)
    prompt = apply_sentence_template(TemplateKind.PARENTHESIS, PAIRS[0][0], PAIRS[0][1], src)
    assert out.prompt == prompt
    expected = forced_beam_search(model, prompt, 3, len(prompt.forced_prefix) + 6)
    assert out.result == expected
    assert out.tokens == expected.translation
    # the free budget bounds only the generated part
    assert len(out.result.full_output) - out.result.forced_len <= 6


def test_threshold_gate(model):
    src = "the cat eats .".split()
    low = TmMatch(entry(0), 0.5)
    gated = translate_tokens(model, src, low, DecodeSettings(fms_threshold=0.8))
    assert gated.note == "below fms threshold" and gated.prompt is None
    assert gated.result == beam_search(model, src, 5, 18)
    kept = translate_tokens(model, src, TmMatch(entry(0), 0.8), DecodeSettings(fms_threshold=0.8))
    assert kept.prompt is not None and kept.note == ""


def test_fragment_template(model):
    aligner = train_model1(TmStore.from_pairs(PAIRS), 5)
    settings = DecodeSettings(template=TemplateKind.FRAGMENT)
    src = "the cat sleeps .".split()
    with pytest.raises(ValueError, match="alignment"):
        build_prompt(settings, src, entry(0))
    out = translate_tokens(model, src, TmMatch(entry(1), 0.75), settings, aligner)
    assert out.prompt.template is TemplateKind.FRAGMENT
    assert out.prompt.forced_prefix[0] == "("
    # nothing shared beyond stop words and punctuation: fall back to no TM
    unrelated = TmEntry(9, ("a", "bird", "."), ("ein", "Vogel", "."))
    fallback = translate_tokens(model, "the dog sleeps .".split(), TmMatch(unrelated, 0.25), settings, aligner)
    assert fallback.note == "no fragments" and fallback.prompt is None


def test_batch_keeps_order_and_captures_failures(model):
    src = "the cat eats .".split()
    bad = TmMatch(TmEntry(0, ("zz",), ("not-a-word",)), 0.9)
    tasks = [
        DecodeTask(tuple(src), TmMatch(entry(i % 4), 0.5), DecodeSettings(template=TemplateKind.COMMA))
        for i in range(6)
    ]
    tasks.insert(3, DecodeTask(tuple(src), bad, DecodeSettings()))
    serial = translate_batch(model, tasks)
    assert isinstance(serial[3], Failure) and "not-a-word" in serial[3].error
    assert all(not isinstance(o, Failure) for i, o in enumerate(serial) if i != 3)
    assert translate_batch(model, tasks, jobs=3) == serial
    with pytest.raises(ValueError):
        translate_batch(model, tasks, jobs=0)


def test_batch_with_any_model():
    # the batch helper only relies on the model contract
    m = RandomModel(3, n_words=3)
    tasks = [DecodeTask(("a", "b"), None, DecodeSettings(template=None, max_len=4)) for _ in range(3)]
    out = translate_batch(m, tasks, jobs=2)
    assert len({o.tokens for o in out}) == 1
