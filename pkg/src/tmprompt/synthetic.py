"""Seeded generator for small parallel corpora with translation-memory structure.

Sentences come from a handful of frames (subject, verb, object, optional
prepositional phrase) filled from a pseudo-word lexicon in which every
role has its own word class, so word order is recoverable from adjacent
words.  The target side has case-marked articles that also depend on
the gender of the noun that follows them.  Some source nouns have two
translations; which one is used is fixed per *family*, a group of
near-duplicate sentences that differ from a base sentence in one slot.
A model that sees a sentence of the same family in its prompt can
therefore pick the right sense and the right article, and one that does
not has to guess.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

SOURCE_SYLLABLES = "ka lo mi ne ru ta pe so vi da ko li mu ra te no si pa".split()
TARGET_SYLLABLES = "ber schu tan kel mor wen dra fal gut hen lis rop sta zei bro kun".split()

# case -> gender -> definite article; every (case, gender) form is distinct
ARTICLES = {
    "nom": {"m": "der", "f": "die", "n": "das"},
    "acc": {"m": "den", "f": "dia", "n": "dos"},
    "dat": {"m": "dem", "f": "dera", "n": "dom"},
}
PRONOUNS = (("i", "ich"), ("you", "du"), ("we", "wir"), ("they", "sie"))

# slot kinds per frame: S subject noun, O object noun, X prepositional noun,
# V verb, A adjective, P pronoun
FRAMES = {
    "plain": ("S", "V", "A", "O"),
    "with": ("S", "V", "A", "O", "X"),
    "yesterday": ("S", "V", "A", "O"),
    "pronoun": ("P", "V", "A", "O", "X"),
}


@dataclass(frozen=True)
class Noun:
    source: str
    senses: tuple[tuple[str, str], ...]  # (target word, gender)


@dataclass(frozen=True)
class Lexicon:
    subjects: tuple[Noun, ...]
    objects: tuple[Noun, ...]
    obliques: tuple[Noun, ...]
    verbs: tuple[tuple[str, str], ...]
    adjectives: tuple[tuple[str, str], ...]

    def pool(self, kind: str) -> tuple:
        return {
            "S": self.subjects,
            "O": self.objects,
            "X": self.obliques,
            "V": self.verbs,
            "A": self.adjectives,
            "P": PRONOUNS,
        }[kind]


@dataclass
class Derivation:
    frame: str
    fillers: list[int]
    senses: dict[tuple[str, int], int] = field(default_factory=dict)  # (kind, noun index) -> sense


@dataclass(frozen=True)
class SyntheticCorpus:
    train: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]
    test: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]
    lexicon: Lexicon


def _words(rng: random.Random, syllables: list[str], count: int, taken: set[str], capital: bool = False) -> list[str]:
    out = []
    while len(out) < count:
        word = "".join(rng.choice(syllables) for _ in range(rng.randint(2, 3)))
        if capital:
            word = word.capitalize()
        if word not in taken:
            taken.add(word)
            out.append(word)
    return out


def make_lexicon(
    rng: random.Random,
    nouns_per_role: int = 20,
    verbs: int = 20,
    adjectives: int = 12,
    ambiguous: float = 0.4,
    genders: str = "mfn",
) -> Lexicon:
    """Pseudo-word lexicon; a fraction ``ambiguous`` of nouns get two senses."""
    src_taken: set[str] = set()
    tgt_taken: set[str] = set()

    def nouns() -> tuple[Noun, ...]:
        out = []
        for word in _words(rng, SOURCE_SYLLABLES, nouns_per_role, src_taken):
            n_senses = 2 if rng.random() < ambiguous else 1
            targets = _words(rng, TARGET_SYLLABLES, n_senses, tgt_taken, capital=True)
            out.append(Noun(word, tuple((t, rng.choice(genders)) for t in targets)))
        return tuple(out)

    def pairs(count: int) -> tuple[tuple[str, str], ...]:
        src = _words(rng, SOURCE_SYLLABLES, count, src_taken)
        return tuple(zip(src, _words(rng, TARGET_SYLLABLES, count, tgt_taken)))

    return Lexicon(nouns(), nouns(), nouns(), pairs(verbs), pairs(adjectives))


def render(lexicon: Lexicon, d: Derivation) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Source and target tokens of a derivation."""
    if d.frame not in FRAMES:
        raise ValueError(f"unknown frame {d.frame!r}")
    kinds = FRAMES[d.frame]
    slot = {kind: d.fillers[i] for i, kind in enumerate(kinds)}

    def noun(kind: str, case: str) -> tuple[str, list[str]]:
        entry = lexicon.pool(kind)[slot[kind]]
        word, gender = entry.senses[d.senses.get((kind, slot[kind]), 0) % len(entry.senses)]
        return entry.source, [ARTICLES[case][gender], word]

    v_s, v_t = lexicon.verbs[slot["V"]]
    a_s, a_t = lexicon.adjectives[slot["A"]]
    o_s, (o_art, o_t) = noun("O", "acc")
    obj_src = ["the", a_s, o_s]
    obj_tgt = [o_art, a_t, o_t]
    if d.frame == "pronoun":
        p_s, p_t = PRONOUNS[slot["P"]]
        x_s, x_t = noun("X", "dat")
        src = [p_s, v_s, *obj_src, "for", "the", x_s, "."]
        tgt = [p_t, v_t, *obj_tgt, "für", *x_t, "."]
        return tuple(src), tuple(tgt)
    s_s, s_t = noun("S", "nom")
    if d.frame == "plain":
        src = ["the", s_s, v_s, *obj_src, "."]
        tgt = [*s_t, v_t, *obj_tgt, "."]
    elif d.frame == "with":
        x_s, x_t = noun("X", "dat")
        src = ["the", s_s, v_s, *obj_src, "with", "the", x_s, "."]
        tgt = [*s_t, v_t, *obj_tgt, "mit", *x_t, "."]
    else:
        src = ["yesterday", "the", s_s, v_s, *obj_src, "."]
        tgt = ["gestern", *s_t, v_t, *obj_tgt, "."]
    return tuple(src), tuple(tgt)


def _random_derivation(rng: random.Random, lexicon: Lexicon) -> Derivation:
    frame = rng.choice(sorted(FRAMES))
    fillers = [rng.randrange(len(lexicon.pool(kind))) for kind in FRAMES[frame]]
    senses = {
        (kind, i): rng.randrange(len(n.senses))
        for kind in "SOX"
        for i, n in enumerate(lexicon.pool(kind))
        if len(n.senses) > 1
    }
    return Derivation(frame, fillers, senses)


def _variant(rng: random.Random, lexicon: Lexicon, base: Derivation) -> Derivation:
    kinds = FRAMES[base.frame]
    slot = rng.randrange(len(kinds))
    fillers = list(base.fillers)
    size = len(lexicon.pool(kinds[slot]))
    fillers[slot] = (fillers[slot] + rng.randrange(1, size)) % size
    return Derivation(base.frame, fillers, base.senses)


def generate_corpus(
    families: int = 250,
    variants: int = 8,
    test_size: int = 200,
    seed: int = 0,
    ambiguous: float = 0.4,
    genders: str = "mfn",
    lexicon: Lexicon | None = None,
) -> SyntheticCorpus:
    """Training pairs in families of ``variants`` near-duplicates, plus held-out test pairs.

    Every test pair is a fresh one-slot variant of some family's base
    sentence, so the base (which is in the training set) is a close TM.
    """
    rng = random.Random(seed)
    if lexicon is None:
        lexicon = make_lexicon(rng, ambiguous=ambiguous, genders=genders)
    bases = [_random_derivation(rng, lexicon) for _ in range(families)]
    train = []
    seen = set()
    for base in bases:
        members = [base] + [_variant(rng, lexicon, base) for _ in range(variants - 1)]
        for d in members:
            pair = render(lexicon, d)
            train.append(pair)
            seen.add(pair[0])
    test = []
    attempts = 0
    while len(test) < test_size:
        attempts += 1
        if attempts > 100 * max(test_size, 1):
            raise ValueError("could not draw enough unseen test sentences; enlarge the lexicon")
        pair = render(lexicon, _variant(rng, lexicon, rng.choice(bases)))
        if pair[0] not in seen:
            seen.add(pair[0])
            test.append(pair)
    return SyntheticCorpus(tuple(train), tuple(test), lexicon)
