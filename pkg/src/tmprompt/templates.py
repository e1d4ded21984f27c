"""Concatenation templates joining a TM pair with the input sentence.

The TM always comes first.  On the encoder side the rendered source TM
is followed by the untouched input; on the decoder side the rendered
target TM is the prefix that gets force-decoded.  The begin-of-sentence
tag belongs to the decoder and is never part of the prefix.
"""

from __future__ import annotations

import configparser
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .errors import TemplateError
from .tm_store import Tokens, is_punct_token


class TemplateKind(enum.Enum):
    DIRECTLY = "directly"
    COMMA = "comma"
    SEMICOLON = "semicolon"
    CONJUNCTION = "conjunction"
    PARENTHESIS = "parenthesis"
    FRAGMENT = "fragment"

    @classmethod
    def parse(cls, name: str) -> "TemplateKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise TemplateError(f"unknown template {name!r} (choose from {choices})") from None


SENTENCE_KINDS = (
    TemplateKind.DIRECTLY,
    TemplateKind.COMMA,
    TemplateKind.SEMICOLON,
    TemplateKind.CONJUNCTION,
    TemplateKind.PARENTHESIS,
)

DEFAULT_CONJUNCTIONS: dict[str, tuple[str, str]] = {
    "en": ("And", ","),
    "de": ("Und", ","),
    "fr": ("Et", ","),
    "es": ("Y", ","),
    "it": ("E", ","),
    "nl": ("En", ","),
}


@dataclass(frozen=True)
class PromptedPair:
    encoder_tokens: Tokens
    forced_prefix: Tokens
    template: TemplateKind


def ends_with_punct(tokens: Sequence[str]) -> bool:
    return bool(tokens) and is_punct_token(tokens[-1])


def load_conjunction_table(path: str | Path) -> dict[str, tuple[str, str]]:
    """Read a ``[conjunctions]`` section of ``lang = word [comma]`` lines.

    Entries extend (and override) the built-in table.
    """
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    if not parser.has_section("conjunctions"):
        raise TemplateError(f"{path}: missing [conjunctions] section")
    table = dict(DEFAULT_CONJUNCTIONS)
    for lang, value in parser.items("conjunctions"):
        parts = value.split()
        if len(parts) not in (1, 2):
            raise TemplateError(f"{path}: bad conjunction entry {lang} = {value!r}")
        table[lang] = (parts[0], parts[1] if len(parts) == 2 else ",")
    return table


def _replace_final(tm: Sequence[str], mark: str) -> list[str]:
    if ends_with_punct(tm):
        return [*tm[:-1], mark]
    return [*tm, mark]


def render_tm(
    tm: Sequence[str],
    kind: TemplateKind,
    lang: str,
    conj_table: Mapping[str, tuple[str, str]] | None = None,
) -> list[str]:
    """Render one side of a TM under a sentence-level template."""
    if kind is TemplateKind.DIRECTLY:
        return list(tm) if ends_with_punct(tm) else [*tm, "."]
    if kind is TemplateKind.COMMA:
        return _replace_final(tm, ",")
    if kind is TemplateKind.SEMICOLON:
        return _replace_final(tm, ";")
    if kind is TemplateKind.CONJUNCTION:
        table = DEFAULT_CONJUNCTIONS if conj_table is None else conj_table
        if lang not in table:
            raise TemplateError(f"no conjunction configured for language {lang!r}")
        word, comma = table[lang]
        closed = list(tm) if ends_with_punct(tm) else [*tm, "."]
        return [*closed, word, comma]
    if kind is TemplateKind.PARENTHESIS:
        return ["(", *tm, ")"]
    raise TemplateError(f"{kind.value} is not a sentence-level template")


def apply_sentence_template(
    kind: TemplateKind,
    src_tm: Sequence[str],
    tgt_tm: Sequence[str],
    input_tokens: Sequence[str],
    langs: tuple[str, str] = ("en", "de"),
    conj_table: Mapping[str, tuple[str, str]] | None = None,
) -> PromptedPair:
    if kind is TemplateKind.FRAGMENT:
        raise TemplateError("fragment prompts are built with apply_fragment_template")
    if not src_tm or not tgt_tm or not input_tokens:
        raise TemplateError("source TM, target TM and input must be non-empty")
    source_lang, target_lang = langs
    encoder = render_tm(src_tm, kind, source_lang, conj_table) + list(input_tokens)
    prefix = render_tm(tgt_tm, kind, target_lang, conj_table)
    return PromptedPair(tuple(encoder), tuple(prefix), kind)


def _parenthesize(fragments: Sequence[Sequence[str]], side: str) -> list[str]:
    if not fragments:
        raise TemplateError(f"no {side} fragments to render")
    out: list[str] = []
    for frag in fragments:
        if not frag:
            raise TemplateError(f"empty {side} fragment")
        out += ["(", *frag, ")"]
    return out


def apply_fragment_template(
    src_fragments: Sequence[Sequence[str]],
    tgt_fragments: Sequence[Sequence[str]],
    input_tokens: Sequence[str],
) -> PromptedPair:
    encoder = _parenthesize(src_fragments, "source") + list(input_tokens)
    prefix = _parenthesize(tgt_fragments, "target")
    return PromptedPair(tuple(encoder), tuple(prefix), TemplateKind.FRAGMENT)
