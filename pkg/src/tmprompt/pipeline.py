"""Translate one sentence: pick a TM, build the prompt, decode, strip."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

from .decoder import DEFAULT_ALPHA, DecodeResult, ModelContract, beam_search, forced_beam_search
from .fragment import Alignment, Model1Table, build_fragment_tm, stop_words_for
from .templates import PromptedPair, TemplateKind, apply_fragment_template, apply_sentence_template
from .tm_store import TmEntry, Tokens


@dataclass(frozen=True)
class DecodeSettings:
    template: TemplateKind | None = TemplateKind.PARENTHESIS  # None decodes without a TM
    width: int = 5
    max_len: int | None = None  # free-token budget; None means 2 * |input| + 10
    alpha: float = DEFAULT_ALPHA
    fms_threshold: float | None = None  # below it the TM is ignored
    langs: tuple[str, str] = ("en", "de")
    conj_table: Mapping[str, tuple[str, str]] | None = None
    stop_words: tuple[frozenset[str], frozenset[str]] | None = None  # (source, target); None uses built-ins

    def free_budget(self, input_len: int) -> int:
        return self.max_len if self.max_len is not None else 2 * input_len + 10


@dataclass(frozen=True)
class TmMatch:
    entry: TmEntry
    fms: float


@dataclass(frozen=True)
class Translation:
    tokens: Tokens
    prompt: PromptedPair | None  # None when decoded without a TM
    match: TmMatch | None
    result: DecodeResult
    note: str = ""  # why a TM was not used, if one was available


def build_prompt(
    settings: DecodeSettings,
    input_tokens: Sequence[str],
    entry: TmEntry,
    aligner: Model1Table | None = None,
) -> PromptedPair | None:
    """The prompted pair for ``settings.template``; None when a fragment TM comes out empty."""
    kind = settings.template
    if kind is TemplateKind.FRAGMENT:
        if aligner is None:
            raise ValueError("the fragment template needs a word-alignment table")
        if settings.stop_words is not None:
            src_stop, tgt_stop = settings.stop_words
        else:
            src_stop, tgt_stop = (stop_words_for(lang) for lang in settings.langs)
        frags = build_fragment_tm(
            input_tokens, entry.source_tokens, entry.target_tokens, aligner, src_stop, tgt_stop
        )
        if not frags:
            return None
        return apply_fragment_template(frags.source_fragments, frags.target_fragments, input_tokens)
    return apply_sentence_template(
        kind, entry.source_tokens, entry.target_tokens, input_tokens, settings.langs, settings.conj_table
    )


def translate_tokens(
    model: ModelContract,
    input_tokens: Sequence[str],
    match: TmMatch | None,
    settings: DecodeSettings,
    aligner: Model1Table | Alignment | None = None,
) -> Translation:
    input_tokens = tuple(input_tokens)
    budget = settings.free_budget(len(input_tokens))
    note = ""
    prompt = None
    if settings.template is not None and match is not None:
        if settings.fms_threshold is not None and match.fms < settings.fms_threshold:
            note = "below fms threshold"
        else:
            prompt = build_prompt(settings, input_tokens, match.entry, aligner)
            if prompt is None:
                note = "no fragments"
    elif settings.template is not None:
        note = "no tm"
    if prompt is None:
        result = beam_search(model, input_tokens, settings.width, budget, settings.alpha)
    else:
        result = forced_beam_search(
            model, prompt, settings.width, len(prompt.forced_prefix) + budget, settings.alpha
        )
    return Translation(result.translation, prompt, match, result, note)


@dataclass(frozen=True)
class DecodeTask:
    input_tokens: Tokens
    match: TmMatch | None
    settings: DecodeSettings


@dataclass(frozen=True)
class Failure:
    """A sentence whose decode raised; the batch carries on without it."""

    error: str


Outcome = Union[Translation, Failure]

# per-process state for pool workers, set once by the initializer
_worker: dict = {}


def _attempt(model, aligner, task: DecodeTask) -> Outcome:
    try:
        return translate_tokens(model, task.input_tokens, task.match, task.settings, aligner)
    except Exception as exc:  # attributed to the sentence, never fatal to the batch
        return Failure(f"{type(exc).__name__}: {exc}")


def _init_worker(model, aligner) -> None:
    _worker["model"] = model
    _worker["aligner"] = aligner


def _run_task(task: DecodeTask) -> Outcome:
    return _attempt(_worker["model"], _worker["aligner"], task)


def translate_batch(
    model: ModelContract,
    tasks: Sequence[DecodeTask],
    aligner: Model1Table | None = None,
    jobs: int = 1,
) -> list[Outcome]:
    """Decode every task; results come back in task order whatever ``jobs`` is."""
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    tasks = list(tasks)
    if jobs == 1 or len(tasks) < 2:
        return [_attempt(model, aligner, t) for t in tasks]
    chunk = max(1, len(tasks) // (jobs * 4))
    with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(model, aligner)) as pool:
        return list(pool.map(_run_task, tasks, chunksize=chunk))
