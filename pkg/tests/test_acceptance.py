"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with -s to see them live).

The heavy criterion (the 100-trial protocol on the synthetic corpus) drives
the real CLI end to end and takes about a minute; everything else is fast.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from wingbeat import synth
from wingbeat.audio import AudioBuffer, load_wav, write_wav
from wingbeat.cli import run as cli_run
from wingbeat.dataset import (
    attach_features,
    label_corpus,
    read_corpus_manifest,
    read_tags,
)
from wingbeat.dsp import DspConfig, extract_features
from wingbeat.pipeline import (
    classify_sample,
    deserialize_two_stage,
    serialize_two_stage,
    train_two_stage,
)
from wingbeat.stream import StreamConfig, StreamSession, batch_equivalent
from wingbeat.svm import (
    KernelSpec,
    SvmTrainConfig,
    class_pairs,
    decision_function,
    kkt_violation,
    predict_ovo_batch,
    train_binary,
    train_ovo,
)

import reference as ref

RATE = 8000


def report(criterion, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"[acceptance] criterion {criterion}: {status} {detail}".rstrip())
    assert ok, f"criterion {criterion} failed: {detail}"


@pytest.fixture(scope="module")
def fixture_model():
    """Small but real model shared by the streaming / crowdsource / budget checks."""
    recordings, tags = synth.synth_corpus(seed=77, clips_per_class=14)
    samples = label_corpus(recordings, tags)
    attach_features(samples, recordings, DspConfig())
    return train_two_stage(
        np.array([s.feature for s in samples]),
        [s.class_label for s in samples],
        SvmTrainConfig(seed=7),
        dsp_config=DspConfig(),
    )


class TestCriterion1SyntheticProtocol:
    def test_protocol_replication(self, tmp_path):
        started = time.perf_counter()
        corpus = tmp_path / "corpus"
        assert cli_run(["synth-corpus", "--out", str(corpus), "--seed", "0"]) == 0

        # corpus shape: 7 species + background, >= 124 clips per class
        samples = label_corpus(
            read_corpus_manifest(corpus / "manifest.jsonl"),
            read_tags(corpus / "tags.jsonl"),
        )
        from collections import Counter

        counts = Counter(s.class_label for s in samples)
        assert len(counts) == 8
        assert all(n >= 124 for n in counts.values())

        out_dir = tmp_path / "report"
        code = cli_run([
            "trials",
            "--corpus", str(corpus / "manifest.jsonl"),
            "--tags", str(corpus / "tags.jsonl"),
            "--n-trials", "100", "--per-class", "62", "--train-fraction", "0.5",
            "--seed", "0", "--out-dir", str(out_dir),
        ])
        assert code == 0
        elapsed = time.perf_counter() - started

        stats = json.loads((out_dir / "report.json").read_text())
        trials = [json.loads(l) for l in (out_dir / "trials.jsonl").read_text().splitlines()]
        assert len(trials) == 100
        worst_mean = min(v["mean"] for v in stats["per_class"].values())
        worst_auc = min(t["macro_auc"] for t in trials)
        worst_p = max(t["p_value"] for t in trials)
        table_rows = [line.split()[0] for line in
                      (out_dir / "report.txt").read_text().strip().splitlines()[1:]]
        ok = (
            worst_mean >= 0.95
            and worst_auc >= 0.99
            and worst_p <= 0.01
            and table_rows == ["Mean", "SD", "Min.", "Max."]
            and elapsed < 600.0
        )
        report(1, ok, f"(min mean acc {worst_mean:.4f}, min macro AUC {worst_auc:.4f}, "
                      f"max p {worst_p:.2e}, {elapsed:.0f}s)")


class TestCriterion2MfccOracle:
    def test_brute_force_equivalence(self):
        started = time.perf_counter()
        config = DspConfig()
        rng = np.random.default_rng(2026)
        worst = 0.0
        for _ in range(100):
            clip = AudioBuffer(rng.uniform(-1, 1, 800), RATE)
            ours = extract_features(clip, config)
            oracle = ref.ref_clip_features(
                clip.samples, RATE, config.frame_length_samples,
                config.hop_length_samples, config.fft_size, config.n_mel_filters,
                config.n_mfcc, config.pre_emphasis, config.window,
            )
            worst = max(worst, float(np.max(np.abs(ours - oracle) / (np.abs(oracle) + 1.0))))
            assert np.allclose(ours, oracle, rtol=1e-6, atol=1e-6)
        elapsed = time.perf_counter() - started
        report(2, elapsed < 30.0, f"(100 clips, worst rel err {worst:.2e}, {elapsed:.1f}s)")


class TestCriterion3SvmCorrectness:
    def test_kkt_on_fifty_problems(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for trial in range(50):
            n = int(rng.integers(6, 30))
            d = int(rng.integers(1, 5))
            offset = rng.normal(0, 2, d)
            n_pos = int(rng.integers(2, n - 1))
            x = np.vstack([rng.normal(0, 1, (n_pos, d)) + offset,
                           rng.normal(0, 1, (n - n_pos, d)) - offset])
            y = np.array([1.0] * n_pos + [-1.0] * (n - n_pos))
            config = SvmTrainConfig(
                c=float(rng.uniform(0.5, 20)),
                class_weight_pos=float(rng.uniform(0.5, 2)),
                class_weight_neg=float(rng.uniform(0.5, 2)),
                kernel=KernelSpec("linear") if trial % 2 else
                       KernelSpec("rbf", gamma=float(rng.uniform(0.1, 2))),
                seed=trial,
            )
            model = train_binary(x, y, config)
            worst = max(worst, kkt_violation(model, x, y, config))
        report("3a", worst <= 1e-3, f"(worst KKT violation {worst:.2e})")

    def test_grid_search_differential(self):
        worst = 0.0
        fixtures = []
        for n_points, seed in [(2, 0), (3, 1), (4, 2), (5, 3), (6, 4)]:
            rng = np.random.default_rng(seed)
            x = rng.normal(0, 1, (n_points, 2))
            y = np.ones(n_points)
            y[: n_points // 2] = -1.0
            x[y > 0] += 1.5
            fixtures.append((x, y))
        # the classic non-separable 2-D case as a sixth fixture
        fixtures.append((
            np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]]),
            np.array([-1.0, -1.0, 1.0, 1.0]),
        ))
        for x, y in fixtures:
            c = 5.0
            config = SvmTrainConfig(c=c, kernel=KernelSpec("rbf", gamma=1.0), seed=0)
            model = train_binary(x, y, config)
            k = ref.ref_kernel_matrix("rbf", 1.0, x, x)
            box = np.full(len(y), c)
            alpha, _ = ref.ref_grid_search_dual(k, y, box)
            bias = ref.ref_bias_from_alpha(k, y, alpha, box)
            expected = ref.ref_decision_values("rbf", 1.0, x, y, alpha, bias, x)
            worst = max(worst, float(np.max(np.abs(decision_function(model, x) - expected))))
        report("3b", worst <= 5e-3, f"(worst decision gap vs grid search {worst:.2e})")

    def test_analytic_two_point(self):
        model = train_binary(np.array([[-1.0], [1.0]]), np.array([-1.0, 1.0]),
                             SvmTrainConfig(c=10.0, kernel=KernelSpec("linear")))
        # w = 1, b = 0: decision values are exactly the inputs
        gap = max(
            abs(decision_function(model, np.array([[0.0]]))[0]),
            abs(decision_function(model, np.array([[1.0]]))[0] - 1.0),
            abs(decision_function(model, np.array([[-1.0]]))[0] + 1.0),
        )
        report("3c", gap <= 1e-6, f"(max deviation {gap:.2e})")

    def test_equal_weights_match_unweighted(self):
        rng = np.random.default_rng(33)
        x = np.vstack([rng.normal(0, 1, (12, 3)) + 1.5, rng.normal(0, 1, (12, 3)) - 1.5])
        y = np.array([1.0] * 12 + [-1.0] * 12)
        kernel = KernelSpec("rbf", gamma=0.5)
        base = train_binary(x, y, SvmTrainConfig(c=4.0, kernel=kernel, seed=9))
        weighted = train_binary(x, y, SvmTrainConfig(
            c=4.0, class_weight_pos=1.0, class_weight_neg=1.0, kernel=kernel, seed=9))
        probes = rng.normal(0, 1.5, (20, 3))
        gap = float(np.max(np.abs(
            decision_function(base, probes) - decision_function(weighted, probes))))
        report("3d", gap <= 1e-6, f"(max decision gap {gap:.2e})")


class TestCriterion4OvoStructure:
    def blobs(self, rng, classes):
        x, labels = [], []
        for i, name in enumerate(classes):
            angle = 2 * np.pi * i / len(classes)
            x.append(rng.normal(0, 0.3, (6, 2)) + 3.5 * np.array(
                [np.cos(angle), np.sin(angle)]))
            labels += [name] * 6
        return np.vstack(x), labels

    def test_structure_and_permutation_invariance(self):
        rng = np.random.default_rng(4)
        config = SvmTrainConfig(kernel=KernelSpec("rbf", gamma=1.0), seed=1)

        seven = train_ovo(*self.blobs(rng, list("ABCDEFG")), config)
        eight = train_ovo(*self.blobs(rng, list("ABCDEFGH")), config)
        counts_ok = len(seven.pairwise_models) == 21 and len(eight.pairwise_models) == 28

        probes = rng.normal(0, 3, (40, 2))
        _, votes7 = predict_ovo_batch(seven, probes)
        _, votes8 = predict_ovo_batch(eight, probes)
        totals_ok = (votes7.sum(axis=1) == 21).all() and (votes8.sum(axis=1) == 28).all()

        classes = list("ABCD")
        x, labels = self.blobs(rng, classes)
        base = train_ovo(x, labels, config)
        winners, votes = predict_ovo_batch(base, probes)
        order = [2, 0, 3, 1]
        relabeled = [classes[order.index(classes.index(l))] for l in labels]
        permuted = train_ovo(x, relabeled, config)
        permuted_winners, _ = predict_ovo_batch(permuted, probes)
        invariant = True
        for i in range(len(probes)):
            top = votes[i].max()
            if np.sum(votes[i] == top) > 1:
                continue
            expected = classes[order.index(classes.index(winners[i]))]
            invariant = invariant and permuted_winners[i] == expected

        ok = counts_ok and totals_ok and invariant
        report(4, ok, f"(21/28 models, vote totals exact, permutation invariant={invariant})")


class TestCriterion5StreamingEquivalence:
    CHUNKINGS = [[800], [37], [400], [123, 1, 456], [8000]]

    def fixture_files(self, tmp_path):
        rng = np.random.default_rng(5)
        files = []
        silence = AudioBuffer(np.zeros(8000), RATE)
        files.append(("silence", silence))
        for i, f0 in enumerate(synth.FUNDAMENTALS_HZ[:3]):
            rec = synth.synth_recording(rng, f"pos{i}", f0, n_clips=10)
            files.append((f"positive_{int(f0)}", rec.audio))
        for i in range(2):
            rec = synth.synth_recording(rng, f"noise{i}", None, n_clips=10)
            files.append((f"noise_{i}", rec.audio))
        t = np.arange(8000) / RATE
        files.append(("chirp", AudioBuffer(
            0.8 * np.sin(2 * np.pi * (200 + 1500 * t) * t), RATE)))
        files.append(("tone1k", AudioBuffer(0.7 * np.sin(2 * np.pi * 1000 * t), RATE)))
        mixed = np.concatenate([
            synth.synth_recording(rng, "m1", synth.FUNDAMENTALS_HZ[4], n_clips=5).audio.samples,
            synth.synth_recording(rng, "m2", None, n_clips=5).audio.samples,
        ])
        files.append(("mixed", AudioBuffer(mixed, RATE)))
        files.append(("short", AudioBuffer(rng.uniform(-0.5, 0.5, 900), RATE)))
        paths = []
        for name, audio in files:
            path = tmp_path / f"{name}.wav"
            write_wav(path, audio)
            paths.append(path)
        return paths

    def test_streaming_equals_batch_everywhere(self, fixture_model, tmp_path):
        paths = self.fixture_files(tmp_path)
        assert len(paths) == 10
        config = StreamConfig()
        mismatches = 0
        comparisons = 0
        for path in paths:
            audio = load_wav(path)
            expected = batch_equivalent(fixture_model, audio, config)
            for sizes in self.CHUNKINGS:
                session = StreamSession(fixture_model, config, RATE)
                i = 0
                k = 0
                while i < len(audio.samples):
                    size = sizes[k % len(sizes)]
                    session.push_audio(audio.samples[i : i + size])
                    i += size
                    k += 1
                got = session.poll_detections()
                comparisons += 1
                if got != expected:
                    mismatches += 1
        report(5, mismatches == 0,
               f"(10 files x 5 chunkings: {comparisons} comparisons, {mismatches} mismatches)")


class TestCriterion6Determinism:
    def test_trials_byte_identical(self, tmp_path):
        corpus = tmp_path / "corpus"
        assert cli_run(["synth-corpus", "--out", str(corpus),
                        "--clips-per-class", "20", "--seed", "1"]) == 0
        args = [
            "trials",
            "--corpus", str(corpus / "manifest.jsonl"),
            "--tags", str(corpus / "tags.jsonl"),
            "--n-trials", "5", "--per-class", "16", "--n-permutations", "200",
            "--seed", "42",
        ]
        assert cli_run(args + ["--out-dir", str(tmp_path / "a")]) == 0
        assert cli_run(args + ["--out-dir", str(tmp_path / "b")]) == 0
        identical = all(
            (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
            for n in ("report.txt", "report.csv", "report.json", "trials.jsonl")
        )
        report("6a", identical, "(two seed-42 runs byte-identical)")

    def test_serialization_round_trip(self, fixture_model):
        rng = np.random.default_rng(6)
        restored = deserialize_two_stage(serialize_two_stage(fixture_model))
        probes = rng.normal(0, 1, (50, 26))
        gap = 0.0
        for probe in probes:
            a = classify_sample(fixture_model, probe)
            b = classify_sample(restored, probe)
            gap = max(gap, abs(a.stage1_score - b.stage1_score))
            assert a.species == b.species
        report("6b", gap <= 1e-12, f"(max decision drift {gap:.2e})")


class TestCriterion7Crowdsource:
    def test_export_filter_exactness_on_50_recordings(self, fixture_model, tmp_path):
        from wingbeat.crowdsource import clip_identifier, export_positive_clips
        from wingbeat.dataset import clip_audio, segment_recording
        from wingbeat.pipeline import classify_batch

        rng = np.random.default_rng(7)
        recordings = []
        for i in range(50):
            if i % 2:
                rec = synth.synth_recording(rng, f"r{i:02d}",
                                            synth.FUNDAMENTALS_HZ[i % 7], n_clips=5)
            else:
                rec = synth.synth_recording(rng, f"r{i:02d}", None, n_clips=5)
            recordings.append(rec)
        packets = export_positive_clips(recordings, fixture_model, tmp_path / "export")
        exported = {p.clip_id for p in packets}
        expected = set()
        for rec in recordings:
            starts = segment_recording(rec)
            feats = np.array([extract_features(clip_audio(rec, s), fixture_model.dsp_config)
                              for s in starts])
            for start, det in zip(starts, classify_batch(fixture_model, feats)):
                if det.stage1_score > fixture_model.stage1_threshold:
                    expected.add(clip_identifier(rec.id, start))
        ok = exported == expected and len(exported) > 0
        report("7a", ok, f"(50 recordings, {len(exported)} positive clips, set equality)")

    def test_aggregation_fixtures(self):
        from datetime import datetime, timezone

        from wingbeat.crowdsource import VolunteerVote, aggregate_votes

        when = datetime(2026, 1, 1, tzinfo=timezone.utc)

        def votes(clip, pattern):
            return [VolunteerVote(clip, f"v{i}", says, when)
                    for i, says in enumerate(pattern)]

        (four_of_five,) = aggregate_votes(votes("a", [True] * 4 + [False]))
        (quorum_short,) = aggregate_votes(votes("b", [True, True]), min_votes=3)
        (exact_tie,) = aggregate_votes(votes("c", [True, True, False, False]))
        ok = (
            four_of_five.label == "mosquito"
            and abs(four_of_five.confidence - 0.8) < 1e-12
            and quorum_short.label == "undecided"
            and exact_tie.label == "undecided"
        )
        report("7b", ok, "(4/5 yes -> mosquito@0.8; 2 votes -> undecided; tie -> undecided)")


class TestCriterion8RealTimeBudget:
    def test_single_window_p99(self, fixture_model):
        rng = np.random.default_rng(8)
        windows = []
        for i in range(1000):
            if i % 3:
                windows.append(rng.uniform(-0.6, 0.6, 800))
            else:
                rec = synth.synth_recording(rng, "w", synth.FUNDAMENTALS_HZ[i % 7], n_clips=1)
                windows.append(rec.audio.samples)
        timings = []
        config = fixture_model.dsp_config
        for window in windows:
            t0 = time.perf_counter()
            feature = extract_features(AudioBuffer(window, RATE), config)
            classify_sample(fixture_model, feature)
            timings.append(time.perf_counter() - t0)
        p99 = float(np.percentile(timings, 99)) * 1000
        median = float(np.median(timings)) * 1000
        report(8, p99 < 50.0, f"(p99 {p99:.2f} ms, median {median:.2f} ms over 1000 windows)")
