"""Corpus handling: recordings, tag segments, 0.1 s labeled samples, balanced
datasets, stratified splits, and the seeded multi-trial protocol.

Recordings are cut into consecutive non-overlapping 0.1 s clips. A clip takes
a tag's label when the tagged overlap covers at least half the clip; ties
between labels discard the clip. Balanced datasets downsample each class to a
common size, and each trial re-draws the balanced set, the 50/50 stratified
split, and the SVM seeds from a single per-trial seed.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import evaluation, pipeline, svm
from .audio import AudioBuffer, CANONICAL_RATE_HZ, load_wav
from .dsp import CLIP_DURATION_S, DspConfig, extract_features
from .errors import TrainingError

log = logging.getLogger(__name__)

OVERLAP_THRESHOLD = 0.5


@dataclass(frozen=True)
class Recording:
    id: str
    audio: AudioBuffer
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TagSegment:
    recording_id: str
    start_s: float
    end_s: float
    label: str
    source: str = "expert"  # expert | crowd

    def __post_init__(self):
        if not 0.0 <= self.start_s < self.end_s:
            raise ValueError(f"bad tag bounds [{self.start_s}, {self.end_s}]")
        if self.source not in ("expert", "crowd"):
            raise ValueError(f"unknown tag source {self.source!r}")


@dataclass
class LabeledSample:
    recording_id: str
    clip_start_s: float
    class_label: str
    feature: np.ndarray | None = None


@dataclass(frozen=True)
class BalancedDataset:
    classes: tuple
    samples_per_class: int
    samples: dict  # class -> list[LabeledSample], each of length samples_per_class


@dataclass(frozen=True)
class TrialSplit:
    trial_seed: int
    train: list
    test: list


def segment_recording(recording: Recording, clip_duration_s: float = CLIP_DURATION_S) -> np.ndarray:
    """Start times of consecutive non-overlapping clips; remainder dropped."""
    clip_len = int(round(clip_duration_s * recording.audio.sample_rate_hz))
    n = len(recording.audio) // clip_len if clip_len > 0 else 0
    return np.arange(n) * clip_len / recording.audio.sample_rate_hz


def clip_audio(recording: Recording, start_s: float,
               clip_duration_s: float = CLIP_DURATION_S) -> AudioBuffer:
    return recording.audio.slice_s(start_s, clip_duration_s)


def label_clips(clips, tags, durations, clip_duration_s: float = CLIP_DURATION_S,
                overlap_threshold: float = OVERLAP_THRESHOLD,
                background_label: str = pipeline.BACKGROUND_LABEL) -> list[LabeledSample]:
    """Assign labels to (recording_id, clip_start_s) pairs from tag overlap.

    durations maps recording_id to its length in seconds, used to validate
    tag bounds. Clips where two labels tie exactly are discarded (logged).
    """
    by_recording: dict[str, list[TagSegment]] = {}
    for tag in tags:
        duration = durations.get(tag.recording_id)
        if duration is None:
            raise ValueError(f"tag references unknown recording {tag.recording_id!r}")
        if tag.end_s > duration + 1e-9:
            raise ValueError(
                f"tag [{tag.start_s}, {tag.end_s}] exceeds {tag.recording_id!r} "
                f"duration {duration:.3f}"
            )
        by_recording.setdefault(tag.recording_id, []).append(tag)

    samples = []
    for recording_id, clip_start in clips:
        clip_end = clip_start + clip_duration_s
        overlap_by_label: dict[str, float] = {}
        for tag in by_recording.get(recording_id, ()):
            overlap = min(clip_end, tag.end_s) - max(clip_start, tag.start_s)
            if overlap > 0:
                overlap_by_label[tag.label] = overlap_by_label.get(tag.label, 0.0) + overlap
        label = background_label
        if overlap_by_label:
            best = max(overlap_by_label.values())
            if best / clip_duration_s >= overlap_threshold - 1e-12:
                winners = [l for l, v in overlap_by_label.items() if v >= best - 1e-12]
                if len(winners) > 1:
                    log.info(
                        "discarding clip %s@%.2fs: labels %s tie at %.0f%% overlap",
                        recording_id, clip_start, sorted(winners),
                        100 * best / clip_duration_s,
                    )
                    continue
                label = winners[0]
        samples.append(LabeledSample(recording_id, float(clip_start), label))
    return samples


def label_corpus(recordings, tags, **kwargs) -> list[LabeledSample]:
    """Segment every recording and label all clips in one pass."""
    clips = []
    durations = {}
    for rec in recordings:
        durations[rec.id] = rec.audio.duration_s
        clips += [(rec.id, s) for s in segment_recording(rec)]
    return label_clips(clips, tags, durations, **kwargs)


def attach_features(samples, recordings, dsp_config: DspConfig) -> None:
    """Compute and cache the feature vector on each sample in place."""
    by_id = {rec.id: rec for rec in recordings}
    for sample in samples:
        if sample.feature is None:
            rec = by_id[sample.recording_id]
            sample.feature = extract_features(clip_audio(rec, sample.clip_start_s), dsp_config)


def build_balanced(samples, per_class: int, seed: int, classes=None) -> BalancedDataset:
    """Downsample every class to per_class samples, uniformly without
    replacement; deterministic for a fixed seed."""
    if per_class < 1:
        raise ValueError("per_class must be positive")
    groups: dict[str, list[LabeledSample]] = {}
    for sample in samples:
        groups.setdefault(sample.class_label, []).append(sample)
    if classes is None:
        classes = list(groups)  # first-appearance order
    rng = np.random.default_rng(seed)
    chosen = {}
    for cls in classes:
        pool = groups.get(cls, [])
        if len(pool) < per_class:
            raise TrainingError(
                f"class {cls!r} has {len(pool)} samples, need {per_class}"
            )
        picks = rng.choice(len(pool), size=per_class, replace=False)
        chosen[cls] = [pool[i] for i in picks]
    return BalancedDataset(classes=tuple(classes), samples_per_class=per_class, samples=chosen)


def split_random(dataset: BalancedDataset, train_fraction: float = 0.5,
                 seed: int = 0) -> TrialSplit:
    """Per-class stratified split without replacement; seeded."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n_train = int(round(dataset.samples_per_class * train_fraction))
    if n_train == 0 or n_train == dataset.samples_per_class:
        raise ValueError(
            f"train_fraction {train_fraction} leaves an empty side for "
            f"{dataset.samples_per_class} samples per class"
        )
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in dataset.classes:
        order = rng.permutation(dataset.samples_per_class)
        pool = dataset.samples[cls]
        train += [pool[i] for i in order[:n_train]]
        test += [pool[i] for i in order[n_train:]]
    return TrialSplit(trial_seed=seed, train=train, test=test)


@dataclass(frozen=True)
class TrialProtocol:
    """Everything one trial needs besides its seed."""

    per_class: int = 62
    train_fraction: float = 0.5
    stage1_config: svm.SvmTrainConfig = field(default_factory=svm.SvmTrainConfig)
    stage2_config: svm.SvmTrainConfig | None = None
    dsp_config: DspConfig = field(default_factory=DspConfig)
    background_label: str = pipeline.BACKGROUND_LABEL
    stage1_threshold: float = 0.0
    n_permutations: int = 1000
    classes: tuple | None = None


def run_single_trial(samples, trial_seed: int, protocol: TrialProtocol) -> "evaluation.TrialResult":
    """One trial: balanced build, stratified split, train, evaluate."""
    balanced = build_balanced(samples, protocol.per_class, trial_seed, classes=protocol.classes)
    split = split_random(balanced, protocol.train_fraction, trial_seed)
    features = np.array([s.feature for s in split.train])
    labels = [s.class_label for s in split.train]
    if any(s.feature is None for s in split.train + split.test):
        raise TrainingError("samples lack cached features; call attach_features first")
    stage1 = replace(protocol.stage1_config, seed=trial_seed)
    stage2 = replace(protocol.stage2_config, seed=trial_seed) if protocol.stage2_config else None
    model = pipeline.train_two_stage(
        features, labels, stage1, stage2,
        dsp_config=protocol.dsp_config,
        background_label=protocol.background_label,
        stage1_threshold=protocol.stage1_threshold,
    )
    return evaluation.evaluate_trial(
        model, split.test,
        n_permutations=protocol.n_permutations,
        seed=trial_seed,
    )


def _trial_worker(args):
    samples, seed, protocol = args
    return run_single_trial(samples, seed, protocol)


def run_trials(samples, n_trials: int = 100, base_seed: int = 0,
               protocol: TrialProtocol | None = None, n_jobs: int = 1) -> list:
    """Run the seeded trial protocol; trial t uses seed base_seed + t.

    Results are ordered by trial index and are a deterministic function of
    (samples, base_seed, protocol) regardless of n_jobs.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be positive")
    protocol = protocol or TrialProtocol()
    seeds = [base_seed + t for t in range(n_trials)]
    if n_jobs == 1 or n_trials == 1:
        results = []
        for t, seed in enumerate(seeds):
            try:
                results.append(run_single_trial(samples, seed, protocol))
            except Exception as exc:
                raise type(exc)(f"trial {t} (seed {seed}): {exc}") from exc
        return results
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_trial_worker, [(samples, s, protocol) for s in seeds],
                             chunksize=max(1, n_trials // (4 * n_jobs))))


# --- corpus manifest I/O ----------------------------------------------------

def write_corpus_manifest(path, entries) -> None:
    """entries: iterable of dicts with at least {id, path, sample_rate}."""
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")


def read_corpus_manifest(path, audio_root=None, target_rate_hz: int = CANONICAL_RATE_HZ):
    """Load recordings listed in a JSON-lines manifest."""
    from pathlib import Path

    root = Path(audio_root) if audio_root is not None else Path(path).parent
    recordings = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: bad manifest line: {exc}") from exc
            wav_path = Path(entry["path"])
            if not wav_path.is_absolute():
                wav_path = root / wav_path
            audio = load_wav(wav_path, target_rate_hz=target_rate_hz)
            meta = {k: v for k, v in entry.items() if k not in ("id", "path")}
            recordings.append(Recording(id=entry["id"], audio=audio, metadata=meta))
    seen = set()
    for rec in recordings:
        if rec.id in seen:
            raise ValueError(f"duplicate recording id {rec.id!r} in manifest")
        seen.add(rec.id)
    return recordings


def write_tags(path, tags) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tag in tags:
            fh.write(json.dumps({
                "recording_id": tag.recording_id,
                "start_s": tag.start_s,
                "end_s": tag.end_s,
                "label": tag.label,
                "source": tag.source,
            }) + "\n")


def read_tags(path) -> list[TagSegment]:
    tags = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
                tags.append(TagSegment(
                    recording_id=entry["recording_id"],
                    start_s=float(entry["start_s"]),
                    end_s=float(entry["end_s"]),
                    label=entry["label"],
                    source=entry.get("source", "expert"),
                ))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad tag line: {exc}") from exc
    return tags
