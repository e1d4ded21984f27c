"""Acceptance suite: one test per criterion, each reporting a pass/fail line."""

import contextlib
import io
import math
import random
import time

import numpy as np
import pytest

import golden
from acceptance_log import criterion
from models import RandomModel, ShiftedModel
from oracles import all_common_subsequences_max, bfs_edit_distance, dp_edit_distance, is_subsequence_at
from tmprompt.cli import bundled_corpus, main
from tmprompt.decoder import EOS, beam_search, forced_beam_search
from tmprompt.evaluation import BASELINE, ExperimentConfig, corpus_bleu, run_experiment
from tmprompt.fragment import Alignment, build_fragment_tm, em_model1, lcs, stop_words_for
from tmprompt.retrieval import build_index, fms, retrieve_best
from tmprompt.synthetic import generate_corpus
from tmprompt.templates import (
    SENTENCE_KINDS,
    PromptedPair,
    TemplateKind,
    apply_fragment_template,
    apply_sentence_template,
)
from tmprompt.tm_store import Query, TmStore
from tmprompt.toy_model import train_toy

X = golden.INPUT.split()
X_TM = golden.SOURCE_TM.split()
Y_TM = golden.TARGET_TM.split()


def test_criterion_1_template_golden_rows():
    with criterion(1, "all six worked-example template rows are bit-exact"):
        start = time.perf_counter()
        for name, (encoder, prefix) in golden.SENTENCE_ROWS.items():
            pair = apply_sentence_template(TemplateKind(name), X_TM, Y_TM, X, ("en", "de"))
            assert " ".join(pair.encoder_tokens) == encoder, name
            assert " ".join(pair.forced_prefix) == prefix, name
        frags = build_fragment_tm(
            X, X_TM, Y_TM, Alignment(frozenset(golden.ALIGNMENT_LINKS)), stop_words_for("en"), stop_words_for("de")
        )
        pair = apply_fragment_template(frags.source_fragments, frags.target_fragments, X)
        assert (" ".join(pair.encoder_tokens), " ".join(pair.forced_prefix)) == golden.FRAGMENT_ROW
        assert time.perf_counter() - start < 1.0


def test_criterion_2_fms_and_retrieval_oracles():
    with criterion(2, "fms equals the brute-force edit oracle; full-k retrieval is the fms argmax"):
        rng = random.Random(2024)
        checked = 0
        while checked < 1000:
            a = rng.choices("abc", k=rng.randint(0, 8))
            b = rng.choices("abc", k=rng.randint(0, 8))
            if not a and not b:
                continue  # 0/0, rejected below
            want = 1 - bfs_edit_distance(a, b) / max(len(a), len(b))
            assert abs(fms(a, b) - want) <= 1e-12, (a, b)
            checked += 1
        with pytest.raises(ValueError):
            fms([], [])

        corpus = generate_corpus(families=625, variants=8, test_size=30, seed=7)
        store = TmStore.from_pairs(corpus.train)
        assert len(store) == 5000
        index = build_index(store)
        for src, _ in corpus.test:
            q = Query(tuple(src))
            got = retrieve_best(index, store, q, k=len(store))
            sims = [
                1 - dp_edit_distance(q.retrieval_tokens, e.source_retrieval_tokens)
                / max(len(q.retrieval_tokens), len(e.source_retrieval_tokens))
                for e in store
            ]
            best = max(sims)
            assert abs(got.fms - best) <= 1e-12
            assert sims[got.entry_id] == best


def test_criterion_3_lcs_oracle():
    with criterion(3, "lcs matches subsequence enumeration and yields the two shared fragments"):
        rng = random.Random(3)
        for _ in range(500):
            a = rng.choices("abc", k=rng.randint(0, 8))
            b = rng.choices("abc", k=rng.randint(0, 8))
            common = lcs(a, b)
            assert len(common) == all_common_subsequences_max(a, b)
            assert is_subsequence_at(a, common.positions_in_x, common.words)
            assert is_subsequence_at(b, common.positions_in_xtm, common.words)
        frags = build_fragment_tm(
            X, X_TM, Y_TM, Alignment(frozenset(golden.ALIGNMENT_LINKS)), stop_words_for("en"), stop_words_for("de")
        )
        assert frags.source_fragments == (("She", "gave"), ("a", "full", "account", "of", "the"))


def _greedy(model, source, prefix, steps):
    vocab = list(model.vocabulary())
    out = []
    for _ in range(steps):
        tok = vocab[int(np.argmax(model.next_distribution(source, tuple(prefix) + tuple(out))))]
        out.append(tok)
        if tok == EOS:
            break
    return tuple(out)


def _rank_key(res):
    return (bool(res.full_output) and res.full_output[-1] == EOS, res.score)


def test_criterion_4_forced_decoding_invariants():
    with criterion(4, "forced decoding keeps the prefix, restarts exactly, is greedy at width 1, monotone in width"):
        rng = random.Random(4)
        for seed in range(200):
            model = RandomModel(seed, rng.randint(2, 5), rng.choice([0.3, 1.0, 3.0]))
            words = [w for w in model.vocabulary() if w != EOS]
            prefix = tuple(rng.choices(words, k=rng.randint(1, 4)))
            free = rng.randint(1, 6)
            pair = PromptedPair(("src", str(seed)), prefix, TemplateKind.DIRECTLY)
            total = len(prefix) + free
            results = [forced_beam_search(model, pair, w, total) for w in range(1, 6)]
            for res in results:
                assert res.full_output[: len(prefix)] == prefix
            width = rng.randint(1, 5)
            res = results[width - 1]
            restart = beam_search(ShiftedModel(model, prefix), pair.encoder_tokens, width, free)
            assert res.full_output[len(prefix):] == restart.full_output
            assert abs(res.free_log_prob - restart.free_log_prob) <= 1e-9
            assert results[0].full_output[len(prefix):] == _greedy(model, pair.encoder_tokens, prefix, free)
            keys = [_rank_key(r) for r in results]
            assert keys == sorted(keys)


def test_criterion_5_em_properties():
    with criterion(5, "Model 1 log-likelihood never drops and rows sum to one"):
        pairs = generate_corpus(families=100, variants=5, test_size=0, seed=5).train
        assert len(pairs) == 500
        tables = list(em_model1(pairs, 10))
        assert len(tables) == 10
        for table in tables:
            np.testing.assert_allclose(table.row_sums(), 1.0, rtol=0, atol=1e-9)
        history = tables[-1].log_likelihoods
        assert len(history) == 11
        assert all(b >= a for a, b in zip(history, history[1:]))


def test_criterion_6_templates_beat_no_tm():
    with criterion(6, "every sentence template >= no TM and one gains >= 2 BLEU"):
        start = time.perf_counter()
        corpus = generate_corpus(seed=0)
        assert len(corpus.train) >= 2000 and len(corpus.test) == 200
        store = TmStore.from_pairs(corpus.train)
        index = build_index(store)
        model = train_toy(store)
        report = run_experiment(model, corpus.test, ExperimentConfig(templates=SENTENCE_KINDS), store, index)
        fms_values = {r.id: r.fms for r in report.records if r.config == "directly"}
        assert min(fms_values.values()) >= 0.8
        base = report.overall[BASELINE].bleu
        deltas = {k.value: report.overall[k.value].bleu - base for k in SENTENCE_KINDS}
        print(f"no TM {base:.2f}; " + ", ".join(f"{k} {d:+.2f}" for k, d in deltas.items()))
        assert all(d >= 0 for d in deltas.values()), deltas
        assert max(deltas.values()) >= 2.0, deltas
        assert time.perf_counter() - start < 300


def test_criterion_7_similarity_bucket_shape():
    with criterion(7, "TM gain in the top fms bucket exceeds the gain in the bottom one"):
        corpus = generate_corpus(test_size=500, seed=0)
        store = TmStore.from_pairs(corpus.train)
        model = train_toy(store)
        config = ExperimentConfig(templates=SENTENCE_KINDS, tm_mode="controlled", seed=0)
        report = run_experiment(model, corpus.test, config, store)
        rows = {r.label: r for r in report.buckets[0].rows}
        low, high = rows["[0, 0.2)"], rows["[0.8, 1]"]
        assert low.count == high.count == 100
        for kind in SENTENCE_KINDS:
            d_low = low.bleu[kind.value] - low.bleu[BASELINE]
            d_high = high.bleu[kind.value] - high.bleu[BASELINE]
            print(f"{kind.value}: low {d_low:+.2f} high {d_high:+.2f}")
            assert d_high > d_low, kind


def test_criterion_8_bleu_correctness():
    with criterion(8, "BLEU of identity, a hand example and a zero 4-gram case"):
        h = ["a b c d e".split(), "the quick brown fox jumps over".split()]
        assert f"{corpus_bleu(h, h).bleu:.3f}" == "100.000"
        hyps = ["the cat sat on the mat".split(), "a dog ran".split()]
        refs = ["the cat sat on a mat".split(), "the dog ran away fast".split()]
        # p = 7/9, 4/7, 2/5, 1/3 with c = 9, r = 11
        expected = 100 * math.exp(1 - 11 / 9) * (7 / 9 * 4 / 7 * 2 / 5 * 1 / 3) ** 0.25
        assert abs(corpus_bleu(hyps, refs).bleu - expected) <= 1e-6
        zero = corpus_bleu(["a b c x".split(), "d e".split()], ["a b c d".split(), "d e".split()])
        assert zero.matches[3] == 0 and zero.bleu == 0.0


def _cli(argv):
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = main([str(a) for a in argv])
    return code, out.getvalue()


def test_criterion_9_eval_is_deterministic(tmp_path):
    with criterion(9, "eval reports are byte-identical across runs at --jobs 1 and --jobs 8"):
        data = bundled_corpus()
        store, model, aligner = tmp_path / "s.tm", tmp_path / "m.json", tmp_path / "a.json"
        src, ref = tmp_path / "t.en", tmp_path / "t.de"
        src.write_text("".join(data["test.en"].read_text().splitlines(True)[:60]))
        ref.write_text("".join(data["test.de"].read_text().splitlines(True)[:60]))
        assert _cli(["ingest", "--src", data["train.en"], "--tgt", data["train.de"], "-o", store])[0] == 0
        assert _cli(["train", "--store", store, "-o", model])[0] == 0
        assert _cli(["train-aligner", "--store", store, "-o", aligner])[0] == 0
        runs = []
        for n, jobs in enumerate([1, 1, 8, 8]):
            out_dir = tmp_path / f"run{n}"
            code, stdout = _cli([
                "eval", "--store", store, "--model", model, "--aligner", aligner,
                "--test-src", src, "--test-ref", ref, "--templates", "all", "--seed", 0,
                "--buckets", "fms:0,0.2,0.4,0.6,0.8,1 length", "--jobs", jobs, "--out-dir", out_dir,
            ])
            assert code == 0
            files = {p.name: p.read_bytes() for p in sorted(out_dir.iterdir())}
            assert set(files) == {"report.txt", "summary.json", "records.jsonl"}
            runs.append((stdout, files))
        assert all(r == runs[0] for r in runs[1:])

