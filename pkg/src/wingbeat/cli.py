"""Operator command line: one binary, one subcommand per workflow.

Every flag can also come from a key=value config file (--config) or from the
environment as WINGBEAT_<FLAG>; explicit command-line values win, then the
environment, then the config file, then built-in defaults. Data goes to
stdout, diagnostics to stderr; exit codes are 0 (ok), 1 (runtime failure),
2 (usage error).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

ENV_PREFIX = "WINGBEAT_"

log = logging.getLogger("wingbeat")


class _Options:
    """Tracks per-flag defaults/types so config and env can fill gaps."""

    def __init__(self):
        self.registry: dict[tuple, tuple] = {}

    def add(self, parser, sub_name, flag, *, type=str, default=None, required=False,
            help=None, choices=None, action=None):
        dest = flag.lstrip("-").replace("-", "_")
        kwargs = {"help": help, "dest": dest}
        if action == "store_true":
            kwargs["action"] = "store_true"
            kwargs["default"] = None
        else:
            kwargs["type"] = type
            kwargs["choices"] = choices
            kwargs["default"] = None
        parser.add_argument(flag, **kwargs)
        self.registry[(sub_name, dest)] = (type, default, required, action == "store_true")

    def resolve(self, args, config_values):
        for (sub_name, dest), (type_, default, required, is_flag) in self.registry.items():
            if sub_name != args.subcommand:
                continue
            value = getattr(args, dest, None)
            if value is None:
                raw = os.environ.get(ENV_PREFIX + dest.upper())
                if raw is None:
                    raw = config_values.get(dest) or config_values.get(dest.replace("_", "-"))
                if raw is not None:
                    value = _coerce(raw, type_, is_flag)
            if value is None:
                value = default
            if value is None and required:
                raise SystemExit2(f"missing required option --{dest.replace('_', '-')}")
            setattr(args, dest, value)


class SystemExit2(Exception):
    """Usage error discovered after argparse (exit code 2)."""


def _coerce(raw, type_, is_flag):
    if is_flag:
        return str(raw).strip().lower() in ("1", "true", "yes", "on")
    return type_(raw)


def read_config_file(path) -> dict:
    values = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SystemExit2(f"{path}:{line_no}: expected key=value")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def build_parser(options: _Options) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wingbeat",
        description="Acoustic mosquito detection: training, evaluation, live detection.",
    )
    parser.add_argument("--config", help="key=value config file mirroring the flags")
    sub = parser.add_subparsers(dest="subcommand", metavar="subcommand")

    p = sub.add_parser("synth-corpus", help="generate the synthetic acceptance corpus")
    options.add(p, "synth-corpus", "--out", required=True, help="output corpus directory")
    options.add(p, "synth-corpus", "--clips-per-class", type=int, default=124,
                help="minimum 0.1 s clips per class")
    options.add(p, "synth-corpus", "--seed", type=int, default=0, help="generator seed")

    p = sub.add_parser("extract", help="extract MFCC features into a cache file")
    options.add(p, "extract", "--corpus", required=True, help="corpus manifest (JSON lines)")
    options.add(p, "extract", "--tags", required=True, help="tag file (JSON lines)")
    options.add(p, "extract", "--out", required=True, help="output .npz feature cache")

    p = sub.add_parser("train", help="train a two-stage model from a corpus")
    _add_train_flags(options, p, "train")
    options.add(p, "train", "--out", required=True, help="output model JSON path")

    p = sub.add_parser("trials", help="run the seeded multi-trial protocol and report")
    _add_train_flags(options, p, "trials")
    options.add(p, "trials", "--n-trials", type=int, default=100, help="number of trials")
    options.add(p, "trials", "--per-class", type=int, default=62,
                help="balanced samples per class")
    options.add(p, "trials", "--train-fraction", type=float, default=0.5,
                help="fraction of each class used for training")
    options.add(p, "trials", "--n-permutations", type=int, default=1000,
                help="label permutations for the p-value")
    options.add(p, "trials", "--jobs", type=int, default=1, help="parallel trial workers")
    options.add(p, "trials", "--out-dir", required=True, help="report output directory")

    p = sub.add_parser("detect", help="classify a WAV file offline, JSON lines to stdout")
    options.add(p, "detect", "--model", required=True, help="model JSON path")
    options.add(p, "detect", "--wav", required=True, help="input WAV file")
    _add_stream_flags(options, p, "detect")

    p = sub.add_parser("stream", help="live detection over PCM16 from a file or stdin")
    options.add(p, "stream", "--model", required=True, help="model JSON path")
    options.add(p, "stream", "--input", default="-",
                help="raw PCM16 file, WAV file, or - for stdin")
    options.add(p, "stream", "--rate", type=int, default=8000,
                help="sample rate of raw PCM input")
    options.add(p, "stream", "--chunk-ms", type=int, default=50,
                help="read granularity in milliseconds")
    _add_stream_flags(options, p, "stream")

    p = sub.add_parser("export-crowd", help="export stage-1-positive clips for tagging")
    options.add(p, "export-crowd", "--model", required=True, help="model JSON path")
    options.add(p, "export-crowd", "--corpus", required=True, help="corpus manifest")
    options.add(p, "export-crowd", "--out", required=True, help="export directory")
    options.add(p, "export-crowd", "--threshold", type=float, default=None,
                help="stage-1 threshold override")

    p = sub.add_parser("ingest-votes", help="aggregate volunteer votes into crowd tags")
    options.add(p, "ingest-votes", "--votes", required=True, help="votes file (JSON lines)")
    options.add(p, "ingest-votes", "--manifest", required=True,
                help="export manifest the votes refer to")
    options.add(p, "ingest-votes", "--out", required=True, help="output tag file")
    options.add(p, "ingest-votes", "--min-votes", type=int, default=3,
                help="quorum per clip")
    options.add(p, "ingest-votes", "--yes-threshold", type=float, default=0.5,
                help="majority threshold for a mosquito label")

    p = sub.add_parser("serve", help="start the field-monitor service")
    options.add(p, "serve", "--model", required=True, help="model JSON path")
    options.add(p, "serve", "--data-dir", required=True, help="storage directory")
    options.add(p, "serve", "--host", default="127.0.0.1", help="bind address")
    options.add(p, "serve", "--port", type=int, default=8000, help="bind port")

    return parser


def _add_train_flags(options, parser, sub_name):
    options.add(parser, sub_name, "--corpus", required=True, help="corpus manifest")
    options.add(parser, sub_name, "--tags", required=True, help="tag file")
    options.add(parser, sub_name, "--features", default=None,
                help="feature cache from `extract` (skips recomputation)")
    options.add(parser, sub_name, "--c", type=float, default=10.0, help="SVM box constraint")
    options.add(parser, sub_name, "--kernel", choices=("rbf", "linear"), default="rbf",
                help="SVM kernel")
    options.add(parser, sub_name, "--gamma", type=float, default=None,
                help="rbf gamma (default: 1 / (dims * variance))")
    options.add(parser, sub_name, "--stage1-weight-pos", type=float, default=1.0,
                help="stage-1 cost weight for the mosquito class")
    options.add(parser, sub_name, "--stage1-weight-neg", type=float, default=1.0,
                help="stage-1 cost weight for the background class")
    options.add(parser, sub_name, "--stage1-threshold", type=float, default=0.0,
                help="stage-1 decision threshold")
    options.add(parser, sub_name, "--seed", type=int, default=0, help="master seed")


def _add_stream_flags(options, parser, sub_name):
    options.add(parser, sub_name, "--hop-s", type=float, default=0.05,
                help="window hop in seconds")
    options.add(parser, sub_name, "--smoothing-k", type=int, default=3,
                help="majority smoothing over k windows")
    options.add(parser, sub_name, "--bands", action="store_true",
                help="include 16 log band energies per event")


# --- subcommand bodies -------------------------------------------------------

def _load_corpus_samples(args):
    from .dataset import attach_features, label_corpus, read_corpus_manifest, read_tags
    from .dsp import DspConfig

    recordings = read_corpus_manifest(args.corpus)
    tags = read_tags(args.tags)
    samples = label_corpus(recordings, tags)
    cache = getattr(args, "features", None)
    if cache:
        _apply_feature_cache(samples, cache)
    else:
        log.info("extracting features for %d samples", len(samples))
        attach_features(samples, recordings, DspConfig())
    return samples


def _apply_feature_cache(samples, cache_path):
    data = np.load(cache_path, allow_pickle=False)
    index = {
        (str(rid), round(float(start), 6)): row
        for row, (rid, start) in enumerate(zip(data["recording_ids"], data["clip_starts"]))
    }
    features = data["features"]
    for sample in samples:
        key = (sample.recording_id, round(sample.clip_start_s, 6))
        if key not in index:
            raise SystemExit2(f"feature cache is missing clip {key}; re-run extract")
        sample.feature = features[index[key]]


def _svm_config(args):
    from .svm import KernelSpec, SvmTrainConfig

    kernel = KernelSpec(kind=args.kernel, gamma=args.gamma)
    return SvmTrainConfig(
        c=args.c,
        class_weight_pos=args.stage1_weight_pos,
        class_weight_neg=args.stage1_weight_neg,
        kernel=kernel,
        seed=args.seed,
    )


def cmd_synth_corpus(args) -> int:
    from .synth import write_synth_corpus

    manifest, tags = write_synth_corpus(args.out, seed=args.seed,
                                        clips_per_class=args.clips_per_class)
    print(json.dumps({"manifest": str(manifest), "tags": str(tags)}))
    return 0


def cmd_extract(args) -> int:
    samples = _load_corpus_samples(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        out,
        features=np.array([s.feature for s in samples]),
        labels=np.array([s.class_label for s in samples], dtype=str),
        recording_ids=np.array([s.recording_id for s in samples], dtype=str),
        clip_starts=np.array([s.clip_start_s for s in samples]),
    )
    log.info("wrote %d feature vectors to %s", len(samples), out)
    return 0


def cmd_train(args) -> int:
    from .dsp import DspConfig
    from .pipeline import save_model, train_two_stage

    samples = _load_corpus_samples(args)
    features = np.array([s.feature for s in samples])
    labels = [s.class_label for s in samples]
    model = train_two_stage(features, labels, _svm_config(args),
                            dsp_config=DspConfig(),
                            stage1_threshold=args.stage1_threshold)
    save_model(model, args.out)
    log.info("model written to %s (version %s)", args.out, model.version_tag())
    return 0


def cmd_trials(args) -> int:
    from .dataset import TrialProtocol, run_trials
    from .evaluation import (
        render_csv, render_text_table, stats_to_json, summarize_trials, trial_to_json_line,
    )

    samples = _load_corpus_samples(args)
    protocol = TrialProtocol(
        per_class=args.per_class,
        train_fraction=args.train_fraction,
        stage1_config=_svm_config(args),
        stage1_threshold=args.stage1_threshold,
        n_permutations=args.n_permutations,
    )
    results = run_trials(samples, n_trials=args.n_trials, base_seed=args.seed,
                         protocol=protocol, n_jobs=args.jobs)
    stats = summarize_trials(results)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = render_text_table(stats)
    (out_dir / "report.txt").write_text(table)
    (out_dir / "report.csv").write_text(render_csv(stats))
    (out_dir / "report.json").write_text(stats_to_json(stats))
    (out_dir / "trials.jsonl").write_text(
        "\n".join(trial_to_json_line(r) for r in results) + "\n"
    )
    sys.stdout.write(table)
    return 0


def _stream_config(args, mode=None):
    from .stream import RecordMode, StreamConfig

    return StreamConfig(
        hop_s=args.hop_s,
        smoothing_k=args.smoothing_k,
        emit_bands=bool(args.bands),
        mode=mode or RecordMode.RECORD_AND_DETECT,
    )


def cmd_detect(args) -> int:
    from .audio import CANONICAL_RATE_HZ, load_wav
    from .pipeline import load_model
    from .stream import batch_equivalent, event_to_dict

    model = load_model(args.model)
    audio = load_wav(args.wav, target_rate_hz=CANONICAL_RATE_HZ)
    for event in batch_equivalent(model, audio, _stream_config(args)):
        sys.stdout.write(json.dumps(event_to_dict(event)) + "\n")
    return 0


def cmd_stream(args) -> int:
    from .audio import CANONICAL_RATE_HZ, load_wav, pcm16_to_float
    from .pipeline import load_model
    from .stream import StreamSession, event_to_dict

    model = load_model(args.model)
    session = StreamSession(model, _stream_config(args), CANONICAL_RATE_HZ)

    def emit():
        for event in session.poll_detections():
            sys.stdout.write(json.dumps(event_to_dict(event)) + "\n")
        sys.stdout.flush()

    if args.input != "-" and args.input.endswith(".wav"):
        audio = load_wav(args.input, target_rate_hz=CANONICAL_RATE_HZ)
        chunk = max(1, int(args.chunk_ms / 1000 * CANONICAL_RATE_HZ))
        for i in range(0, len(audio.samples), chunk):
            session.push_audio(audio.samples[i : i + chunk])
            emit()
        return 0
    raw = sys.stdin.buffer if args.input == "-" else open(args.input, "rb")
    try:
        chunk_bytes = max(2, 2 * int(args.chunk_ms / 1000 * args.rate))
        while True:
            data = raw.read(chunk_bytes)
            if not data:
                break
            if len(data) % 2:
                data += raw.read(1) or b"\x00"
            samples = pcm16_to_float(data)
            if args.rate != CANONICAL_RATE_HZ:
                from .audio import AudioBuffer, resample_linear

                samples = resample_linear(
                    AudioBuffer(samples, args.rate), CANONICAL_RATE_HZ
                ).samples
            session.push_audio(samples)
            emit()
    finally:
        if raw is not sys.stdin.buffer:
            raw.close()
    return 0


def cmd_export_crowd(args) -> int:
    from .crowdsource import export_positive_clips
    from .dataset import read_corpus_manifest
    from .pipeline import load_model

    model = load_model(args.model)
    recordings = read_corpus_manifest(args.corpus)
    packets = export_positive_clips(recordings, model, args.out, threshold=args.threshold)
    print(json.dumps({"exported": len(packets), "manifest":
                      str(Path(args.out) / "manifest.jsonl")}))
    return 0


def cmd_ingest_votes(args) -> int:
    from .crowdsource import (
        aggregate_votes, ingest_votes, labels_to_tags, read_export_manifest,
    )
    from .dataset import write_tags

    index = read_export_manifest(args.manifest)
    votes = ingest_votes(args.votes, known_clip_ids=set(index))
    labels = aggregate_votes(votes, min_votes=args.min_votes,
                             yes_threshold=args.yes_threshold)
    tags = labels_to_tags([l for l in labels if l.clip_id in index], index)
    write_tags(args.out, tags)
    summary = {
        "votes": len(votes),
        "clips": len(labels),
        "mosquito": sum(1 for l in labels if l.label == "mosquito"),
        "background": sum(1 for l in labels if l.label == "background"),
        "undecided": sum(1 for l in labels if l.label == "undecided"),
        "tags_written": len(tags),
    }
    print(json.dumps(summary))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .pipeline import load_model
    from .service import create_app

    app = create_app(load_model(args.model), args.data_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


_COMMANDS = {
    "synth-corpus": cmd_synth_corpus,
    "extract": cmd_extract,
    "train": cmd_train,
    "trials": cmd_trials,
    "detect": cmd_detect,
    "stream": cmd_stream,
    "export-crowd": cmd_export_crowd,
    "ingest-votes": cmd_ingest_votes,
    "serve": cmd_serve,
}


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    options = _Options()
    parser = build_parser(options)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits itself on usage errors / --help
        return int(exc.code or 0)
    if args.subcommand is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        config_values = read_config_file(args.config) if args.config else {}
        options.resolve(args, config_values)
        return _COMMANDS[args.subcommand](args)
    except SystemExit2 as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single boundary for exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
