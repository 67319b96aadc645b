"""WAV/PCM ingest, the mono audio buffer type, and rate conversion.

All audio inside the package is mono float64 in [-1, 1]. Files are read and
written as 16-bit signed little-endian PCM WAV; stereo input is downmixed by
averaging. The int16 <-> float conversion uses a fixed 1/32768 scale so that
decode -> encode is the identity on every int16 value.
"""

from __future__ import annotations

import os
import wave
from dataclasses import dataclass

import numpy as np

PCM16_SCALE = 32768.0

# Canonical internal rate: wingbeat harmonics sit well below 4 kHz, and a low
# rate keeps the per-window compute budget small on weak hardware.
CANONICAL_RATE_HZ = 8000


@dataclass(frozen=True)
class AudioBuffer:
    """Mono PCM samples normalized to [-1, 1] at a known sample rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1:
            raise ValueError("audio must be mono (1-D samples)")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if samples.size:
            if not np.all(np.isfinite(samples)):
                raise ValueError("samples must all be finite")
            peak = float(np.max(np.abs(samples)))
            if peak > 1.0 + 1e-12:
                raise ValueError(f"samples must lie in [-1, 1], got peak {peak:.6g}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def slice_s(self, start_s: float, duration_s: float) -> "AudioBuffer":
        """Return the sub-buffer starting at start_s, clamped to bounds."""
        a = max(0, int(round(start_s * self.sample_rate_hz)))
        b = min(len(self.samples), a + int(round(duration_s * self.sample_rate_hz)))
        return AudioBuffer(self.samples[a:b], self.sample_rate_hz)


def pcm16_to_float(raw: bytes) -> np.ndarray:
    """Decode 16-bit signed little-endian PCM bytes to float64 in [-1, 1)."""
    if len(raw) % 2:
        raise ValueError("PCM16 byte length must be a multiple of 2")
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM16_SCALE


def float_to_pcm16(samples: np.ndarray) -> bytes:
    """Encode float samples to 16-bit PCM bytes (values clipped to int16 range)."""
    scaled = np.round(np.asarray(samples, dtype=np.float64) * PCM16_SCALE)
    return np.clip(scaled, -32768, 32767).astype("<i2").tobytes()


def load_wav(path, target_rate_hz: int | None = None) -> AudioBuffer:
    """Read a 16-bit PCM WAV file; stereo is downmixed by channel averaging.

    When target_rate_hz is given the result is resampled to it (linear
    interpolation).
    """
    with wave.open(os.fspath(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM WAV is supported")
        n_channels = wf.getnchannels()
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    samples = pcm16_to_float(raw)
    if n_channels > 1:
        samples = samples.reshape(-1, n_channels).mean(axis=1)
    buf = AudioBuffer(samples, rate)
    if target_rate_hz is not None and target_rate_hz != rate:
        buf = resample_linear(buf, target_rate_hz)
    return buf


def write_wav(path, buffer: AudioBuffer) -> None:
    """Write a mono 16-bit PCM WAV atomically (write to temp, then rename)."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with wave.open(tmp, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(buffer.sample_rate_hz)
        wf.writeframes(float_to_pcm16(buffer.samples))
    os.replace(tmp, path)


def resample_linear(buffer: AudioBuffer, target_rate_hz: int) -> AudioBuffer:
    """Resample by linear interpolation onto the target rate's sample grid."""
    if target_rate_hz <= 0:
        raise ValueError("target_rate_hz must be positive")
    if target_rate_hz == buffer.sample_rate_hz or len(buffer) == 0:
        return AudioBuffer(buffer.samples, target_rate_hz) if len(buffer) == 0 else buffer
    n_out = int(round(len(buffer) * target_rate_hz / buffer.sample_rate_hz))
    t_out = np.arange(n_out) / target_rate_hz
    t_in = np.arange(len(buffer)) / buffer.sample_rate_hz
    return AudioBuffer(np.interp(t_out, t_in, buffer.samples), target_rate_hz)
