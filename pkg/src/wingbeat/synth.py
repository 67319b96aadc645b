"""Synthetic corpus generator: harmonic "species" over white noise.

Real cage recordings are not redistributable, so the acceptance protocol runs
on a synthetic stand-in: each species is a harmonic tone complex with a
distinct fundamental in 200-700 Hz, mild slowly-varying frequency jitter, and
white noise mixed at a fixed SNR; the background class is noise only. The
generator is fully seeded and writes a normal corpus (WAV files + JSON-lines
manifest + tags) so the rest of the pipeline treats it like field data.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import AudioBuffer, CANONICAL_RATE_HZ, write_wav
from .dataset import Recording, TagSegment, write_corpus_manifest, write_tags

N_SPECIES = 7
FUNDAMENTALS_HZ = np.linspace(200.0, 680.0, N_SPECIES)
N_HARMONICS = 4
SNR_DB = 10.0
JITTER_FRACTION = 0.01
CLIPS_PER_RECORDING = 13
PEAK = 0.9


def species_names() -> list[str]:
    return [f"species_{int(round(f))}hz" for f in FUNDAMENTALS_HZ]


def _jitter_track(rng, n_samples: int, rate: int) -> np.ndarray:
    """Piecewise-linear relative frequency offset, new keypoint every 50 ms."""
    key_hop = max(1, int(0.05 * rate))
    n_keys = n_samples // key_hop + 2
    keys = rng.uniform(-1.0, 1.0, n_keys)
    return np.interp(np.arange(n_samples), np.arange(n_keys) * key_hop, keys) * JITTER_FRACTION


def _harmonic_signal(rng, fundamental_hz: float, n_samples: int, rate: int) -> np.ndarray:
    instantaneous = fundamental_hz * (1.0 + _jitter_track(rng, n_samples, rate))
    phase = 2.0 * np.pi * np.cumsum(instantaneous) / rate
    signal = sum(np.sin(h * phase) / h for h in range(1, N_HARMONICS + 1))
    return signal / np.sqrt(np.mean(signal**2))


def synth_recording(rng, recording_id: str, fundamental_hz: float | None,
                    n_clips: int = CLIPS_PER_RECORDING,
                    rate: int = CANONICAL_RATE_HZ) -> Recording:
    """One recording of n_clips * 0.1 s; fundamental None = background noise."""
    n_samples = int(round(n_clips * 0.1 * rate))
    noise = rng.normal(0.0, 1.0, n_samples)
    noise /= np.sqrt(np.mean(noise**2))
    if fundamental_hz is None:
        mix = noise
    else:
        signal = _harmonic_signal(rng, fundamental_hz, n_samples, rate)
        mix = signal + noise * 10.0 ** (-SNR_DB / 20.0)
    mix = mix / np.max(np.abs(mix)) * PEAK
    return Recording(id=recording_id, audio=AudioBuffer(mix, rate),
                     metadata={"synthetic": True})


def synth_corpus(seed: int = 0, clips_per_class: int = 124,
                 n_clips_per_recording: int = CLIPS_PER_RECORDING,
                 rate: int = CANONICAL_RATE_HZ):
    """In-memory corpus: (recordings, tags) covering every species and the
    noise-only background, each with at least clips_per_class clips."""
    rng = np.random.default_rng(seed)
    n_recordings = -(-clips_per_class // n_clips_per_recording)  # ceil
    recordings, tags = [], []
    for name, fundamental in zip(species_names(), FUNDAMENTALS_HZ):
        for i in range(n_recordings):
            rec = synth_recording(rng, f"{name}_r{i:02d}", fundamental,
                                  n_clips_per_recording, rate)
            recordings.append(rec)
            tags.append(TagSegment(rec.id, 0.0, rec.audio.duration_s, name, "expert"))
    for i in range(n_recordings):
        recordings.append(synth_recording(rng, f"background_r{i:02d}", None,
                                          n_clips_per_recording, rate))
    return recordings, tags


def write_synth_corpus(out_dir, seed: int = 0, clips_per_class: int = 124,
                       rate: int = CANONICAL_RATE_HZ):
    """Write WAVs + manifest.jsonl + tags.jsonl under out_dir; returns their paths."""
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    recordings, tags = synth_corpus(seed=seed, clips_per_class=clips_per_class, rate=rate)
    entries = []
    for rec in recordings:
        wav_path = audio_dir / f"{rec.id}.wav"
        write_wav(wav_path, rec.audio)
        entries.append({
            "id": rec.id,
            "path": str(wav_path.relative_to(out_dir)),
            "sample_rate": rec.audio.sample_rate_hz,
            "synthetic": True,
        })
    manifest_path = out_dir / "manifest.jsonl"
    tags_path = out_dir / "tags.jsonl"
    write_corpus_manifest(manifest_path, entries)
    write_tags(tags_path, tags)
    return manifest_path, tags_path
