"""Crowdsource loop: export stage-1-positive clips for volunteer tagging and
fold returned votes back into training tags.

Only clips the detector flags as containing mosquito sound are exported, each
as WAV + spectrogram PNG + one manifest line. Votes are binary (mosquito or
not); a clip's label needs a quorum of min_votes and a strict majority, exact
ties stay undecided. Mosquito-labeled clips become crowd-source TagSegments
covering their clip window.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

from .audio import write_wav
from .dataset import Recording, TagSegment, clip_audio, segment_recording
from .dsp import CLIP_DURATION_S, extract_features, spectrogram_image, save_spectrogram_png
from .pipeline import TwoStageModel, classify_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExportPacket:
    clip_id: str
    audio_path: str
    spectrogram_path: str
    manifest_entry: dict


@dataclass(frozen=True)
class VolunteerVote:
    clip_id: str
    volunteer_id: str
    says_mosquito: bool
    cast_at: datetime


@dataclass(frozen=True)
class AggregatedLabel:
    clip_id: str
    label: str  # mosquito | background | undecided
    confidence: float
    n_votes: int


def clip_identifier(recording_id: str, clip_start_s: float) -> str:
    return f"{recording_id}_{int(round(clip_start_s * 1000)):07d}"


def export_positive_clips(recordings, model: TwoStageModel, out_dir,
                          threshold: float | None = None) -> list[ExportPacket]:
    """Segment, classify, and export exactly the stage-1-positive clips.

    A corrupt recording is logged and skipped; the export continues. The
    manifest (manifest.jsonl) is written last so it only lists completed
    packets.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if threshold is None:
        threshold = model.stage1_threshold
    version = model.version_tag()
    packets = []
    for recording in recordings:
        try:
            packets.extend(
                _export_one(recording, model, out_dir, threshold, version)
            )
        except Exception:
            log.exception("skipping recording %s", recording.id)
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for packet in packets:
            fh.write(json.dumps(packet.manifest_entry) + "\n")
    return packets


def _export_one(recording: Recording, model, out_dir: Path, threshold, version):
    import numpy as np

    starts = segment_recording(recording)
    if len(starts) == 0:
        return []
    clips = [clip_audio(recording, s) for s in starts]
    features = np.array([extract_features(c, model.dsp_config) for c in clips])
    detections = classify_batch(model, features)
    packets = []
    for start, clip, detection in zip(starts, clips, detections):
        if detection.stage1_score <= threshold:
            continue
        clip_id = clip_identifier(recording.id, start)
        wav_path = out_dir / f"{clip_id}.wav"
        png_path = out_dir / f"{clip_id}.png"
        write_wav(wav_path, clip)
        save_spectrogram_png(spectrogram_image(clip, model.dsp_config), png_path)
        packets.append(ExportPacket(
            clip_id=clip_id,
            audio_path=str(wav_path),
            spectrogram_path=str(png_path),
            manifest_entry={
                "clip_id": clip_id,
                "recording_id": recording.id,
                "clip_start_s": float(start),
                "stage1_score": detection.stage1_score,
                "model_version": version,
            },
        ))
    return packets


def _parse_rfc3339(text: str) -> datetime:
    return datetime.fromisoformat(text.replace("Z", "+00:00"))


def ingest_votes(path, known_clip_ids=None) -> list[VolunteerVote]:
    """Parse a JSON-lines vote file; later duplicates replace earlier ones.

    Votes for unknown clip ids (when known_clip_ids is given) are kept with a
    warning so a stale manifest cannot silently drop volunteer work.
    """
    latest: dict[tuple, VolunteerVote] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
                vote = VolunteerVote(
                    clip_id=entry["clip_id"],
                    volunteer_id=entry["volunteer_id"],
                    says_mosquito=bool(entry["says_mosquito"]),
                    cast_at=_parse_rfc3339(entry["cast_at"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: bad vote line: {exc}") from exc
            if known_clip_ids is not None and vote.clip_id not in known_clip_ids:
                log.warning("vote for unknown clip %s (line %d)", vote.clip_id, line_no)
            key = (vote.clip_id, vote.volunteer_id)
            if key not in latest or vote.cast_at >= latest[key].cast_at:
                latest[key] = vote
    return list(latest.values())


def aggregate_votes(votes, min_votes: int = 3,
                    yes_threshold: float = 0.5) -> list[AggregatedLabel]:
    """Per-clip quorum + majority aggregation; exact ties stay undecided."""
    if min_votes < 1:
        raise ValueError("min_votes must be >= 1")
    if not 0.0 < yes_threshold < 1.0:
        raise ValueError("yes_threshold must be in (0, 1)")
    tally: dict[str, list[int]] = {}
    for vote in votes:
        yes, total = tally.get(vote.clip_id, (0, 0))
        tally[vote.clip_id] = [yes + int(vote.says_mosquito), total + 1]
    labels = []
    for clip_id in sorted(tally):
        yes, total = tally[clip_id]
        confidence = yes / total
        if total < min_votes or confidence == yes_threshold:
            label = "undecided"
        elif confidence > yes_threshold:
            label = "mosquito"
        else:
            label = "background"
        labels.append(AggregatedLabel(clip_id, label, confidence, total))
    return labels


def read_export_manifest(path) -> dict:
    """clip_id -> manifest entry, from an export manifest.jsonl."""
    index = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entry = json.loads(line)
                index[entry["clip_id"]] = entry
    return index


def labels_to_tags(aggregated, clip_index: dict,
                   clip_duration_s: float = CLIP_DURATION_S) -> list[TagSegment]:
    """Mosquito-labeled clips become crowd TagSegments over their window."""
    missing = [a.clip_id for a in aggregated
               if a.label == "mosquito" and a.clip_id not in clip_index]
    if missing:
        raise ValueError(f"clips not resolvable to recordings: {sorted(missing)}")
    tags = []
    for agg in aggregated:
        if agg.label != "mosquito":
            continue
        entry = clip_index[agg.clip_id]
        start = float(entry["clip_start_s"])
        tags.append(TagSegment(
            recording_id=entry["recording_id"],
            start_s=start,
            end_s=start + clip_duration_s,
            label="mosquito",
            source="crowd",
        ))
    return tags
