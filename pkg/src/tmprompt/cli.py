"""Command-line interface: ingest, index, train, retrieve, translate, eval."""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .decoder import DEFAULT_ALPHA
from .errors import ConfigError, TmPromptError
from .evaluation import TM_MODES, BucketSpec, ExperimentConfig, find_matches, run_experiment
from .fragment import load_model1, load_stop_words, save_model1, train_model1
from .pipeline import DecodeSettings, DecodeTask, Failure, TmMatch, translate_batch
from .retrieval import DEFAULT_K, build_index, load_index, retrieve_best, save_index
from .synthetic import generate_corpus
from .templates import SENTENCE_KINDS, TemplateKind, load_conjunction_table
from .tm_store import Query, TmStore, ingest_corpus, ingest_tsv, load_store, save_store, tokenize
from .toy_model import load_model, save_model, train_toy

logger = logging.getLogger("tmprompt")

DATA_DIR = Path(__file__).parent / "data"
CONFIG_SECTION = "tmprompt"


def bundled_corpus() -> dict[str, Path]:
    """Paths of the bundled synthetic corpus (``synth --seed 0`` output)."""
    return {name: DATA_DIR / name for name in ("train.en", "train.de", "test.en", "test.de")}


# ---------------------------------------------------------------------------
# argument types


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _template(text: str) -> TemplateKind:
    try:
        return TemplateKind.parse(text)
    except TmPromptError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _template_list(text: str) -> tuple[TemplateKind, ...]:
    if text.strip() == "all":
        return (*SENTENCE_KINDS, TemplateKind.FRAGMENT)
    return tuple(_template(part) for part in text.split(",") if part.strip())


def _buckets(text: str) -> tuple[BucketSpec, ...]:
    try:
        return tuple(BucketSpec.parse(part) for part in text.split())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _flag(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# ---------------------------------------------------------------------------
# parser


def _add_io(p: argparse.ArgumentParser, *names: str) -> None:
    helps = {
        "store": "TM store file (from `ingest`)",
        "index": "index file (from `index`); built in memory when omitted",
        "model": "toy model file (from `train`)",
        "aligner": "word-alignment table (from `train-aligner`); needed by the fragment template",
    }
    for name in names:
        p.add_argument(f"--{name}", metavar="FILE", required=name in ("store", "model"), help=helps[name])


def _add_decoding(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beam", type=_positive_int, default=5, help="beam width (default: 5)")
    p.add_argument(
        "--max-len", type=_positive_int, default=None,
        help="free tokens to generate after the prompt (default: 2 * input length + 10)",
    )
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="length-penalty exponent (default: 0.6)")
    p.add_argument("-k", "--candidates", type=_positive_int, default=DEFAULT_K,
                   help="retrieval candidates re-ranked by FMS (default: 500)")
    p.add_argument("--fms-threshold", type=float, default=None,
                   help="decode without a TM when its FMS is below this value (default: off)")
    p.add_argument("--conjunctions", metavar="FILE", help="INI file overriding the conjunction table")
    p.add_argument("--stop-words", metavar="FILE",
                   help="stop words for fragment cleanup, one per line (applies to both sides)")
    p.add_argument("--jobs", type=_positive_int, default=1, help="decoding processes (default: 1)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help=f"INI file; keys in [{CONFIG_SECTION}] or [<command>] set flag defaults")
    common.add_argument("--seed", type=int, default=0, help="seed for every randomised step (default: 0)")
    common.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"],
                        help="stderr log level (default: info)")

    parser = argparse.ArgumentParser(
        prog="tmprompt",
        description="Translation-memory prompting for a toy translation model.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[common], help="read a parallel corpus into a TM store")
    p.add_argument("--src", metavar="FILE", help="source side, one sentence per line")
    p.add_argument("--tgt", metavar="FILE", help="target side, line-aligned with --src")
    p.add_argument("--tsv", metavar="FILE", help="source<TAB>target lines instead of --src/--tgt")
    p.add_argument("--src-lang", default="en", help="source language code (default: en)")
    p.add_argument("--tgt-lang", default="de", help="target language code (default: de)")
    p.add_argument("-o", "--output", metavar="FILE", required=True, help="store file to write")

    p = sub.add_parser("index", parents=[common], help="build the retrieval index of a store")
    _add_io(p, "store")
    p.add_argument("-o", "--output", metavar="FILE", required=True, help="index file to write")

    p = sub.add_parser("train", parents=[common], help="train the toy translation model")
    _add_io(p, "store")
    p.add_argument("--em-iters", type=_positive_int, default=10, help="Model 1 EM iterations (default: 10)")
    p.add_argument("--add-k", type=float, default=0.1, help="bigram add-k smoothing (default: 0.1)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5, help="LM weight in the mixture (default: 0.5)")
    p.add_argument("--focus", type=float, default=0.2, help="left-to-right coverage focus in (0, 1] (default: 0.2)")
    p.add_argument("--copy-boost", type=float, default=2.0, help="prompt copy boost (default: 2.0)")
    p.add_argument("--plain", action="store_true",
                   help="bare mixture: no coverage, copy boost, EOS gating or context restart")
    p.add_argument("-o", "--output", metavar="FILE", required=True, help="model file to write")

    p = sub.add_parser("train-aligner", parents=[common], help="train the IBM Model 1 word-alignment table")
    _add_io(p, "store")
    p.add_argument("--iters", type=_positive_int, default=5, help="EM iterations (default: 5)")
    p.add_argument("-o", "--output", metavar="FILE", required=True, help="alignment table to write")

    p = sub.add_parser("retrieve", parents=[common], help="print the best TM for each input line")
    _add_io(p, "store", "index")
    p.add_argument("-i", "--input", metavar="FILE", help="queries, one per line (default: stdin)")
    p.add_argument("-k", "--candidates", type=_positive_int, default=DEFAULT_K,
                   help="retrieval candidates re-ranked by FMS (default: 500)")
    p.add_argument("--cache", metavar="FILE", help="also write the results as JSON lines for `translate --retrievals`")

    p = sub.add_parser("translate", parents=[common], help="translate input lines with TM prompting")
    _add_io(p, "store", "index", "model", "aligner")
    p.add_argument("-i", "--input", metavar="FILE", help="source sentences, one per line (default: stdin)")
    p.add_argument("-o", "--output", metavar="FILE", help="translations, one per line (default: stdout)")
    p.add_argument("--template", type=_template, default=TemplateKind.PARENTHESIS,
                   help="directly|comma|semicolon|conjunction|parenthesis|fragment (default: parenthesis)")
    p.add_argument("--no-tm", action="store_true", help="decode without any TM")
    p.add_argument("--retrievals", metavar="FILE", help="replay retrieval results cached by `retrieve --cache`")
    p.add_argument("--verbose", action="store_true",
                   help="tab-separated columns: translation, TM id, FMS, encoder input, forced prefix")
    _add_decoding(p)

    p = sub.add_parser("eval", parents=[common], help="compare templates against the no-TM baseline")
    _add_io(p, "store", "index", "model", "aligner")
    p.add_argument("--test-src", metavar="FILE", help="test source sentences")
    p.add_argument("--test-ref", metavar="FILE", help="test references, line-aligned with --test-src")
    p.add_argument("--templates", type=_template_list, default=SENTENCE_KINDS,
                   help="comma-separated templates, or 'all' (default: the five sentence templates)")
    p.add_argument("--buckets", type=_buckets, default=_buckets("fms:0,0.2,0.4,0.6,0.8,1.0"),
                   help="space-separated bucket specs such as 'fms:0,0.2,0.4,0.6,0.8,1.0 length' "
                        "(default: the fms spec)")
    p.add_argument("--tm-mode", choices=TM_MODES, default="retrieve",
                   help="retrieve from the store, use the test pair itself, or pick TMs per fms bucket "
                        "(default: retrieve)")
    p.add_argument("--out-dir", metavar="DIR", help="write report.txt, summary.json and records.jsonl here")
    _add_decoding(p)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic parallel corpus")
    p.add_argument("--families", type=_positive_int, default=250, help="sentence families (default: 250)")
    p.add_argument("--variants", type=_positive_int, default=8, help="sentences per family (default: 8)")
    p.add_argument("--test-size", type=int, default=200, help="held-out test pairs (default: 200)")
    p.add_argument("--out-dir", metavar="DIR", required=True, help="writes train.en/.de and test.en/.de")
    return parser, sub.choices


# ---------------------------------------------------------------------------
# config file


def _config_defaults(path: str, command: str, subparser: argparse.ArgumentParser) -> dict:
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    values: dict[str, str] = {}
    for section in (CONFIG_SECTION, command):
        if cp.has_section(section):
            values.update(cp.items(section))
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        dest = "lam" if dest == "lambda" else dest
        action = actions.get(dest)
        if action is None or dest in ("config", "help"):
            raise ConfigError(f"{path}: unknown key {key!r} for `{command}`")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = _flag(raw)
            continue
        try:
            defaults[dest] = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise ConfigError(f"{path}: bad value for {key!r}: {exc}") from None
        if action.choices is not None and defaults[dest] not in action.choices:
            raise ConfigError(f"{path}: {key!r} must be one of {', '.join(action.choices)}")
    return defaults


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` act as defaults that flags override."""
    parser, subparsers = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in subparsers), None)
    if known.config and command is not None:
        sub = subparsers[command]
        defaults = _config_defaults(known.config, command, sub)
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# commands


def _read_lines(path: str | None) -> list[str]:
    if path is None:
        return [line.rstrip("\n") for line in sys.stdin]
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def _load_index(args, store: TmStore):
    if args.index:
        return load_index(args.index)
    logger.info("no --index given; indexing %d entries in memory", len(store))
    return build_index(store)


def cmd_ingest(args) -> int:
    if args.tsv:
        if args.src or args.tgt:
            raise ConfigError("use either --tsv or --src/--tgt, not both")
        store, skipped = ingest_tsv(args.tsv, args.src_lang, args.tgt_lang)
    elif args.src and args.tgt:
        store, skipped = ingest_corpus(args.src, args.tgt, args.src_lang, args.tgt_lang)
    else:
        raise ConfigError("ingest needs --src and --tgt, or --tsv")
    save_store(store, args.output)
    logger.info("stored %d pairs in %s (%d blank pairs skipped)", len(store), args.output, skipped)
    return 0


def cmd_index(args) -> int:
    store = load_store(args.store)
    index = build_index(store)
    save_index(index, args.output)
    logger.info("indexed %d entries, %d distinct tokens", index.entry_count, len(index.postings))
    return 0


def cmd_train(args) -> int:
    store = load_store(args.store)
    options = {"focus": args.focus, "copy_boost": args.copy_boost}
    model = train_toy(store, em_iters=args.em_iters, add_k=args.add_k, lam=args.lam, **options)
    if args.plain:
        model = model.plain()
    save_model(model, args.output)
    logger.info("trained on %d pairs, vocabulary %d", len(store), len(model.vocabulary()))
    return 0


def cmd_train_aligner(args) -> int:
    store = load_store(args.store)
    table = train_model1(store, args.iters)
    save_model1(table, args.output)
    logger.info("alignment table: %d source words, %d target words", len(table.source_vocab), len(table.target_vocab))
    return 0


def cmd_retrieve(args) -> int:
    store = load_store(args.store)
    index = _load_index(args, store)
    lines = _read_lines(args.input)
    cache = []
    for line in lines:
        hit = retrieve_best(index, store, Query.from_text(line, store.source_lang), args.candidates)
        if hit is None:
            print("none")
        else:
            e = store[hit.entry_id]
            print(f"{hit.entry_id}\t{hit.fms:.6f}\t{' '.join(e.source_tokens)}\t{' '.join(e.target_tokens)}")
        cache.append({"query": line, "entry_id": hit.entry_id if hit else None, "fms": hit.fms if hit else None})
    if args.cache:
        with open(args.cache, "w", encoding="utf-8", newline="\n") as fh:
            for rec in cache:
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    return 0


def _replayed(path: str, lines: list[str], store: TmStore) -> list[TmMatch | None]:
    with open(path, encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if len(records) != len(lines):
        raise ConfigError(f"{path} holds {len(records)} retrievals for {len(lines)} input lines")
    out = []
    for n, (rec, line) in enumerate(zip(records, lines), start=1):
        if rec.get("query") != line:
            raise ConfigError(f"{path}: record {n} was retrieved for a different input line")
        entry_id = rec.get("entry_id")
        if entry_id is None:
            out.append(None)
        elif not 0 <= entry_id < len(store):
            raise ConfigError(f"{path}: record {n} names entry {entry_id}, outside the store")
        else:
            out.append(TmMatch(store[entry_id], float(rec["fms"])))
    return out


def _shared_options(args, store: TmStore) -> dict:
    conj = load_conjunction_table(args.conjunctions) if args.conjunctions else None
    stop = None
    if args.stop_words:
        words = load_stop_words(args.stop_words)
        stop = (words, words)
    return {
        "width": args.beam,
        "max_len": args.max_len,
        "alpha": args.alpha,
        "fms_threshold": args.fms_threshold,
        "langs": (store.source_lang, store.target_lang),
        "conj_table": conj,
        "stop_words": stop,
    }


def _aligner_for(args, templates) -> object:
    if TemplateKind.FRAGMENT in templates and not args.aligner:
        raise ConfigError("the fragment template needs --aligner FILE (train one with `tmprompt train-aligner`)")
    return load_model1(args.aligner) if args.aligner else None


def cmd_translate(args) -> int:
    store = load_store(args.store)
    model = load_model(args.model)
    template = None if args.no_tm else args.template
    aligner = _aligner_for(args, [template])
    lines = _read_lines(args.input)
    inputs = [tuple(tokenize(line, store.source_lang)) for line in lines]
    if template is None:
        matches: list[TmMatch | None] = [None] * len(lines)
    elif args.retrievals:
        matches = _replayed(args.retrievals, lines, store)
    else:
        index = _load_index(args, store)
        matches = find_matches("retrieve", inputs, [()] * len(inputs), store, index, args.candidates)
    settings = DecodeSettings(template=template, **_shared_options(args, store))
    tasks = [DecodeTask(src, m, settings) for src, m in zip(inputs, matches)]
    outcomes = translate_batch(model, tasks, aligner, args.jobs)
    failed = 0
    out = open(args.output, "w", encoding="utf-8", newline="\n") if args.output else sys.stdout
    try:
        for n, (src, outcome) in enumerate(zip(inputs, outcomes), start=1):
            if isinstance(outcome, Failure):
                failed += 1
                logger.error("line %d: %s", n, outcome.error)
                text = ""
            else:
                text = " ".join(outcome.tokens)
                if outcome.note:
                    logger.debug("line %d: decoded without TM (%s)", n, outcome.note)
            if args.verbose:
                m = None if isinstance(outcome, Failure) else outcome.match
                prompt = None if isinstance(outcome, Failure) else outcome.prompt
                cols = [
                    text,
                    str(m.entry.id) if m else "-",
                    f"{m.fms:.6f}" if m else "-",
                    " ".join(prompt.encoder_tokens) if prompt else " ".join(src),
                    " ".join(prompt.forced_prefix) if prompt else "",
                ]
                out.write("\t".join(cols) + "\n")
            else:
                out.write(text + "\n")
    finally:
        if args.output:
            out.close()
    if failed:
        logger.error("%d of %d lines failed", failed, len(lines))
        return 1
    return 0


def cmd_eval(args) -> int:
    store = load_store(args.store)
    model = load_model(args.model)
    aligner = _aligner_for(args, args.templates)
    if not args.test_src or not args.test_ref:
        raise ConfigError("eval needs --test-src and --test-ref")
    src_lines = _read_lines(args.test_src)
    ref_lines = _read_lines(args.test_ref)
    if len(src_lines) != len(ref_lines):
        raise ConfigError(f"{len(src_lines)} test sources but {len(ref_lines)} references")
    pairs = [
        (tuple(tokenize(s, store.source_lang)), tuple(tokenize(r, store.target_lang)))
        for s, r in zip(src_lines, ref_lines)
    ]
    if args.tm_mode == "controlled" and not any(b.kind == "fms" for b in args.buckets):
        raise ConfigError("--tm-mode controlled needs an fms bucket spec in --buckets")
    config = ExperimentConfig(
        templates=args.templates,
        k=args.candidates,
        buckets=args.buckets,
        tm_mode=args.tm_mode,
        seed=args.seed,
        jobs=args.jobs,
        **_shared_options(args, store),
    )
    index = _load_index(args, store) if args.tm_mode == "retrieve" else None
    report = run_experiment(model, pairs, config, store, index, aligner)
    sys.stdout.write(report.format())
    if args.out_dir:
        report.write(args.out_dir)
        logger.info("wrote report files to %s", args.out_dir)
    return 0


def cmd_synth(args) -> int:
    corpus = generate_corpus(args.families, args.variants, args.test_size, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, pairs in (("train", corpus.train), ("test", corpus.test)):
        for side, lang in ((0, "en"), (1, "de")):
            with open(out / f"{split}.{lang}", "w", encoding="utf-8", newline="\n") as fh:
                for pair in pairs:
                    fh.write(" ".join(pair[side]) + "\n")
    logger.info("wrote %d train and %d test pairs to %s", len(corpus.train), len(corpus.test), out)
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "index": cmd_index,
    "train": cmd_train,
    "train-aligner": cmd_train_aligner,
    "retrieve": cmd_retrieve,
    "translate": cmd_translate,
    "eval": cmd_eval,
    "synth": cmd_synth,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    except (ConfigError, OSError) as exc:
        print(f"tmprompt: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=args.log_level.upper(),
        stream=sys.stderr,
        format="level=%(levelname)s logger=%(name)s msg=%(message)s",
        force=True,
    )
    try:
        return COMMANDS[args.command](args)
    except (TmPromptError, OSError, ValueError) as exc:
        print(f"tmprompt: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
