"""BLEU scoring, bucketed comparisons and the per-template experiment harness."""

from __future__ import annotations

import bisect
import json
import math
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .decoder import DEFAULT_ALPHA, ModelContract
from .fragment import Model1Table
from .pipeline import DecodeSettings, DecodeTask, Failure, TmMatch, translate_batch
from .retrieval import DEFAULT_K, TmIndex, fms, retrieve_best
from .templates import SENTENCE_KINDS, TemplateKind
from .tm_store import Query, TmEntry, TmStore, normalize_for_retrieval

MAX_ORDER = 4
BASELINE = "no-tm"
TM_MODES = ("retrieve", "self", "controlled")
DEFAULT_LENGTH_WIDTH = 10


# ---------------------------------------------------------------------------
# BLEU


@dataclass(frozen=True)
class BleuReport:
    bleu: float  # in [0, 100]
    precisions: tuple[float, ...]
    matches: tuple[int, ...]
    totals: tuple[int, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def _ngram_stats(hyp: Sequence[str], ref: Sequence[str]) -> tuple[list[int], list[int]]:
    matches, totals = [], []
    for n in range(1, MAX_ORDER + 1):
        h = Counter(tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1))
        r = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
        matches.append(sum(min(c, r[g]) for g, c in h.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    return matches, totals


def _brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    return 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)


def corpus_bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> BleuReport:
    """Unsmoothed 4-gram corpus BLEU with one reference per hypothesis."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        m, t = _ngram_stats(hyp, ref)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        hyp_len += len(hyp)
        ref_len += len(ref)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    bp = _brevity_penalty(hyp_len, ref_len)
    if min(matches) == 0:
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(bleu, precisions, tuple(matches), tuple(totals), bp, hyp_len, ref_len)


def sentence_bleu(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    """Per-sentence diagnostic BLEU; orders 2..4 use add-one smoothing."""
    matches, totals = _ngram_stats(hypothesis, reference)
    if matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    log_p += sum(math.log((m + 1) / (t + 1)) for m, t in zip(matches[1:], totals[1:]))
    return 100.0 * _brevity_penalty(len(hypothesis), len(reference)) * math.exp(log_p / MAX_ORDER)


# ---------------------------------------------------------------------------
# buckets


def _fmt(x: float) -> str:
    return f"{x:g}"


@dataclass(frozen=True)
class BucketSpec:
    """Half-open buckets [a, b) over FMS or input length; the last one is closed.

    A length spec without boundaries uses width-10 buckets sized to the data.
    """

    kind: str
    boundaries: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("fms", "length"):
            raise ValueError(f"bucket kind must be 'fms' or 'length', got {self.kind!r}")
        if self.boundaries is None:
            if self.kind == "fms":
                raise ValueError("fms buckets need explicit boundaries")
            return
        b = tuple(float(x) for x in self.boundaries)
        if len(b) < 2:
            raise ValueError("a bucket spec needs at least two boundaries")
        if any(lo >= hi for lo, hi in zip(b, b[1:])):
            raise ValueError(f"bucket boundaries must be strictly ascending: {list(b)}")
        object.__setattr__(self, "boundaries", b)

    @classmethod
    def parse(cls, text: str) -> "BucketSpec":
        """``fms:0,0.2,0.4,0.6,0.8,1.0``, ``length:0,10,20,40`` or bare ``length``."""
        kind, sep, rest = text.strip().partition(":")
        if not sep:
            return cls(kind)
        try:
            values = tuple(float(x) for x in rest.split(","))
        except ValueError:
            raise ValueError(f"bad bucket boundaries in {text!r}") from None
        return cls(kind, values)

    def resolve(self, values: Sequence[float]) -> "BucketSpec":
        if self.boundaries is not None:
            return self
        top = (int(max(values, default=0)) // DEFAULT_LENGTH_WIDTH + 1) * DEFAULT_LENGTH_WIDTH
        return BucketSpec(self.kind, tuple(range(0, top + 1, DEFAULT_LENGTH_WIDTH)))

    def labels(self) -> list[str]:
        b = self.boundaries
        out = [f"[{_fmt(lo)}, {_fmt(hi)})" for lo, hi in zip(b, b[1:])]
        out[-1] = out[-1][:-1] + "]"
        return out

    def index(self, value: float) -> int:
        b = self.boundaries
        if value == b[-1]:
            return len(b) - 2
        i = bisect.bisect_right(b, value) - 1
        if i < 0 or i >= len(b) - 1:
            raise ValueError(f"{self.kind} value {value} outside [{_fmt(b[0])}, {_fmt(b[-1])}]")
        return i

    def __str__(self) -> str:
        if self.boundaries is None:
            return self.kind
        return f"{self.kind}:" + ",".join(_fmt(x) for x in self.boundaries)


@dataclass(frozen=True)
class BucketRow:
    label: str
    count: int
    bleu: dict[str, float]  # config name -> corpus BLEU of the bucket


@dataclass(frozen=True)
class BucketTable:
    spec: BucketSpec
    configs: tuple[str, ...]
    rows: tuple[BucketRow, ...]  # empty buckets are absent

    def format(self) -> str:
        head = [self.spec.kind, "n", *self.configs]
        body = [[r.label, str(r.count), *(f"{r.bleu[c]:.2f}" for c in self.configs)] for r in self.rows]
        return _align([head, *body])

    def to_dict(self) -> dict:
        return {
            "spec": str(self.spec),
            "configs": list(self.configs),
            "rows": [{"bucket": r.label, "count": r.count, "bleu": r.bleu} for r in self.rows],
        }


def bucket_eval(
    outputs: Mapping[str, Sequence[Sequence[str]]],
    references: Sequence[Sequence[str]],
    values: Sequence[float],
    spec: BucketSpec,
) -> BucketTable:
    """Per-bucket corpus BLEU for each configuration's outputs."""
    if len(values) != len(references):
        raise ValueError(f"{len(values)} bucket values for {len(references)} references")
    for name, hyps in outputs.items():
        if len(hyps) != len(references):
            raise ValueError(f"config {name!r} has {len(hyps)} outputs for {len(references)} references")
    spec = spec.resolve(values)
    members: dict[int, list[int]] = {}
    for i, v in enumerate(values):
        members.setdefault(spec.index(v), []).append(i)
    labels = spec.labels()
    rows = []
    for b in sorted(members):
        idx = members[b]
        refs = [references[i] for i in idx]
        bleu = {name: corpus_bleu([hyps[i] for i in idx], refs).bleu for name, hyps in outputs.items()}
        rows.append(BucketRow(labels[b], len(idx), bleu))
    return BucketTable(spec, tuple(outputs), tuple(rows))


def _align(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# choosing the TM for each test sentence


def controlled_matches(
    store: TmStore, sources: Sequence[Sequence[str]], spec: BucketSpec, seed: int = 0
) -> list[TmMatch | None]:
    """Give sentence i a random TM whose FMS falls in bucket ``i mod #buckets``.

    This decouples TM similarity from the test sentence, so every bucket
    gets the same number of sentences.  A sentence gets no TM when the
    store has nothing in its bucket.
    """
    if spec.kind != "fms" or spec.boundaries is None:
        raise ValueError("controlled TM selection needs an fms bucket spec")
    n_buckets = len(spec.boundaries) - 1
    out: list[TmMatch | None] = []
    for i, src in enumerate(sources):
        q = normalize_for_retrieval(src)
        want = i % n_buckets
        pool = []
        for entry in store:
            if not q and not entry.source_retrieval_tokens:
                continue
            sim = fms(q, entry.source_retrieval_tokens)
            if spec.index(sim) == want:
                pool.append((entry, sim))
        rng = random.Random(seed * 1_000_003 + i)
        out.append(TmMatch(*rng.choice(pool)) if pool else None)
    return out


def find_matches(
    mode: str,
    sources: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    store: TmStore | None = None,
    index: TmIndex | None = None,
    k: int = DEFAULT_K,
    seed: int = 0,
    spec: BucketSpec | None = None,
) -> list[TmMatch | None]:
    if mode == "retrieve":
        if store is None or index is None:
            raise ValueError("retrieve mode needs a store and an index")
        out = []
        for src in sources:
            hit = retrieve_best(index, store, Query(tuple(src)), k)
            out.append(TmMatch(store[hit.entry_id], hit.fms) if hit else None)
        return out
    if mode == "self":
        # the test pair itself is the TM (an upper bound on TM quality)
        return [TmMatch(TmEntry(i, tuple(s), tuple(r)), 1.0) for i, (s, r) in enumerate(zip(sources, references))]
    if mode == "controlled":
        if store is None or spec is None:
            raise ValueError("controlled mode needs a store and an fms bucket spec")
        return controlled_matches(store, sources, spec, seed)
    raise ValueError(f"unknown tm mode {mode!r} (choose from {', '.join(TM_MODES)})")


# ---------------------------------------------------------------------------
# experiment harness


@dataclass(frozen=True)
class ExperimentConfig:
    templates: tuple[TemplateKind, ...] = SENTENCE_KINDS
    width: int = 5
    max_len: int | None = None  # free-token budget per sentence
    alpha: float = DEFAULT_ALPHA
    k: int = DEFAULT_K
    fms_threshold: float | None = None
    buckets: tuple[BucketSpec, ...] = (BucketSpec("fms", (0, 0.2, 0.4, 0.6, 0.8, 1.0)),)
    tm_mode: str = "retrieve"
    seed: int = 0
    jobs: int = 1
    langs: tuple[str, str] = ("en", "de")
    conj_table: Mapping[str, tuple[str, str]] | None = None
    stop_words: tuple[frozenset[str], frozenset[str]] | None = None

    def __post_init__(self) -> None:
        if self.tm_mode not in TM_MODES:
            raise ValueError(f"unknown tm mode {self.tm_mode!r} (choose from {', '.join(TM_MODES)})")
        if self.width < 1 or self.jobs < 1 or self.k < 1:
            raise ValueError("beam width, jobs and k must all be >= 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if len(set(self.templates)) != len(self.templates):
            raise ValueError("templates listed twice")

    def settings(self, template: TemplateKind | None) -> DecodeSettings:
        return DecodeSettings(
            template=template,
            width=self.width,
            max_len=self.max_len,
            alpha=self.alpha,
            fms_threshold=self.fms_threshold,
            langs=self.langs,
            conj_table=self.conj_table,
            stop_words=self.stop_words,
        )


@dataclass(frozen=True)
class SentenceRecord:
    id: int
    config: str
    tm_id: int | None
    fms: float | None
    length: int
    encoder: str | None
    forced_prefix: str | None
    output: str
    bleu: float
    note: str = ""
    error: str | None = None


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    configs: tuple[str, ...]
    size: int
    overall: dict[str, BleuReport]
    failures: dict[str, list[int]]
    buckets: list[BucketTable]
    records: list[SentenceRecord] = field(repr=False)

    def format(self) -> str:
        base = self.overall[BASELINE].bleu
        rows = [["config", "BLEU", "delta", "failures"]]
        for name in self.configs:
            bleu = self.overall[name].bleu
            rows.append([name, f"{bleu:.2f}", f"{bleu - base:+.2f}", str(len(self.failures[name]))])
        parts = [
            f"sentences: {self.size}  tm mode: {self.config.tm_mode}  beam: {self.config.width}",
            "",
            _align(rows),
        ]
        for table in self.buckets:
            parts += ["", f"buckets {table.spec}", table.format()]
        failed = [(name, ids) for name, ids in self.failures.items() if ids]
        if failed:
            parts += ["", "failures:"]
            parts += [f"  {name}: sentences {', '.join(map(str, ids))}" for name, ids in failed]
        return "\n".join(parts) + "\n"

    def summary(self) -> dict:
        return {
            "size": self.size,
            "tm_mode": self.config.tm_mode,
            "configs": list(self.configs),
            "bleu": {name: asdict(rep) for name, rep in self.overall.items()},
            "failures": self.failures,
            "buckets": [t.to_dict() for t in self.buckets],
        }

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.format(), encoding="utf-8")
        (out / "summary.json").write_text(
            json.dumps(self.summary(), indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
        )
        with open(out / "records.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.records:
                fh.write(json.dumps(asdict(rec), sort_keys=True, ensure_ascii=False) + "\n")


def run_experiment(
    model: ModelContract,
    test_pairs: Sequence[tuple[Sequence[str], Sequence[str]]],
    config: ExperimentConfig,
    store: TmStore | None = None,
    index: TmIndex | None = None,
    aligner: Model1Table | None = None,
    matches: Sequence[TmMatch | None] | None = None,
) -> ExperimentReport:
    """Decode the test set without a TM and with each template, then score.

    ``matches`` overrides TM selection (e.g. replayed retrieval results).
    """
    if TemplateKind.FRAGMENT in config.templates and aligner is None:
        raise ValueError("the fragment template needs a word-alignment table")
    sources = [tuple(s) for s, _ in test_pairs]
    refs = [tuple(r) for _, r in test_pairs]
    if matches is None:
        fms_spec = next((b for b in config.buckets if b.kind == "fms"), None)
        matches = find_matches(config.tm_mode, sources, refs, store, index, config.k, config.seed, fms_spec)
    elif len(matches) != len(sources):
        raise ValueError(f"{len(matches)} TM matches for {len(sources)} test sentences")

    configs: list[tuple[str, TemplateKind | None]] = [(BASELINE, None)]
    configs += [(kind.value, kind) for kind in config.templates]
    tasks = [
        DecodeTask(src, match if kind is not None else None, config.settings(kind))
        for _, kind in configs
        for src, match in zip(sources, matches)
    ]
    outcomes = translate_batch(model, tasks, aligner, config.jobs)

    n = len(sources)
    outputs: dict[str, list[tuple[str, ...]]] = {}
    failures: dict[str, list[int]] = {}
    records = []
    for c, (name, kind) in enumerate(configs):
        hyps = []
        failures[name] = []
        for i in range(n):
            outcome = outcomes[c * n + i]
            match = matches[i] if kind is not None else None
            if isinstance(outcome, Failure):
                hyp: tuple[str, ...] = ()
                failures[name].append(i)
                encoder = prefix = None
                note, error = "", outcome.error
            else:
                hyp = tuple(outcome.tokens)
                encoder = " ".join(outcome.prompt.encoder_tokens) if outcome.prompt else None
                prefix = " ".join(outcome.prompt.forced_prefix) if outcome.prompt else None
                note, error = outcome.note, None
            hyps.append(hyp)
            records.append(
                SentenceRecord(
                    id=i,
                    config=name,
                    tm_id=match.entry.id if match else None,
                    fms=match.fms if match else None,
                    length=len(sources[i]),
                    encoder=encoder,
                    forced_prefix=prefix,
                    output=" ".join(hyp),
                    bleu=sentence_bleu(hyp, refs[i]),
                    note=note,
                    error=error,
                )
            )
        outputs[name] = hyps

    overall = {name: corpus_bleu(hyps, refs) for name, hyps in outputs.items()}
    tables = []
    for spec in config.buckets:
        if spec.kind == "fms":
            # a sentence without any TM counts as similarity 0
            values = [m.fms if m else 0.0 for m in matches]
        else:
            values = [len(s) for s in sources]
        tables.append(bucket_eval(outputs, refs, values, spec))
    return ExperimentReport(config, tuple(outputs), n, overall, failures, tables, records)
