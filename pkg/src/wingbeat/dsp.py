"""Deterministic MFCC front-end: framing, power spectra, mel filterbank,
per-clip feature vectors, and spectrogram images.

The chain is: pre-emphasis -> overlapping frames -> window -> zero-padded DFT
power spectrum -> triangular mel filterbank -> log -> orthonormal DCT-II ->
first n_mfcc coefficients. A 0.1 s clip is summarized by the per-coefficient
mean and standard deviation across its frames, giving a fixed 2*n_mfcc
feature vector. Everything here is a pure function of (input, config).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .audio import AudioBuffer
from .errors import ConfigError

CLIP_DURATION_S = 0.1

# Floor added to mel energies before the log so silence stays finite.
LOG_FLOOR = 1e-10

_WINDOWS = ("hamming", "hann", "rectangular")


@dataclass(frozen=True)
class DspConfig:
    """Frame geometry and feature dimensions for the MFCC chain."""

    frame_length_samples: int = 256
    hop_length_samples: int = 128
    fft_size: int = 512
    n_mel_filters: int = 26
    n_mfcc: int = 13
    pre_emphasis: float = 0.97
    window: str = "hamming"

    def __post_init__(self):
        if self.frame_length_samples < 1 or self.hop_length_samples < 1:
            raise ConfigError("frame and hop lengths must be positive")
        if self.hop_length_samples > self.frame_length_samples:
            raise ConfigError("hop_length_samples must not exceed frame_length_samples")
        if self.fft_size < self.frame_length_samples:
            raise ConfigError("fft_size must be >= frame_length_samples")
        if self.fft_size & (self.fft_size - 1):
            raise ConfigError("fft_size must be a power of two")
        if not (1 <= self.n_mfcc <= self.n_mel_filters <= self.fft_size // 2 + 1):
            raise ConfigError("need n_mfcc <= n_mel_filters <= fft_size/2 + 1")
        if not 0.0 <= self.pre_emphasis < 1.0:
            raise ConfigError("pre_emphasis must be in [0, 1)")
        if self.window not in _WINDOWS:
            raise ConfigError(f"window must be one of {_WINDOWS}")

    @property
    def n_spectrum_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def feature_dimension(self) -> int:
        # mean + standard deviation of every MFCC coefficient
        return 2 * self.n_mfcc


@dataclass(frozen=True)
class MelFilterbank:
    """Triangular mel filters as a (n_filters, fft_size/2 + 1) weight matrix."""

    filters: np.ndarray
    center_frequencies_hz: np.ndarray


def hz_to_mel(frequency_hz):
    """Map frequency in Hz to the mel scale; strictly increasing on [0, inf)."""
    f = np.asarray(frequency_hz, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    out = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(out) if np.isscalar(frequency_hz) else out


def mel_to_hz(mel):
    """Inverse of hz_to_mel."""
    m = np.asarray(mel, dtype=np.float64)
    out = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(out) if np.isscalar(mel) else out


def window_vector(config: DspConfig) -> np.ndarray:
    n = config.frame_length_samples
    if config.window == "hamming":
        return np.hamming(n)
    if config.window == "hann":
        return np.hanning(n)
    return np.ones(n)


def frame_count(n_samples: int, config: DspConfig) -> int:
    if n_samples < config.frame_length_samples:
        return 0
    return 1 + (n_samples - config.frame_length_samples) // config.hop_length_samples


def frame_signal(buffer, config: DspConfig) -> np.ndarray:
    """Split audio into overlapping frames after pre-emphasis.

    Returns an array of shape (n_frames, frame_length); the trailing partial
    frame is dropped, and a too-short input yields zero frames.
    """
    samples = buffer.samples if isinstance(buffer, AudioBuffer) else np.asarray(buffer, dtype=np.float64)
    n = frame_count(len(samples), config)
    if n == 0:
        return np.empty((0, config.frame_length_samples))
    if config.pre_emphasis > 0.0:
        samples = np.append(samples[0], samples[1:] - config.pre_emphasis * samples[:-1])
    hop, flen = config.hop_length_samples, config.frame_length_samples
    idx = np.arange(flen)[None, :] + hop * np.arange(n)[:, None]
    return samples[idx]


def power_spectra(frames: np.ndarray, config: DspConfig) -> np.ndarray:
    """Windowed, zero-padded DFT magnitude squared for a batch of frames."""
    if frames.ndim != 2 or frames.shape[1] != config.frame_length_samples:
        raise ValueError(
            f"expected frames of length {config.frame_length_samples}, got shape {frames.shape}"
        )
    windowed = frames * window_vector(config)
    spectrum = np.fft.rfft(windowed, n=config.fft_size, axis=1)
    return np.abs(spectrum) ** 2


def power_spectrum(frame: np.ndarray, config: DspConfig) -> np.ndarray:
    """Power spectrum of a single frame (length fft_size/2 + 1, all >= 0)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 1 or len(frame) != config.frame_length_samples:
        raise ValueError(
            f"expected a frame of length {config.frame_length_samples}, got {frame.shape}"
        )
    return power_spectra(frame[None, :], config)[0]


def build_mel_filterbank(config: DspConfig, sample_rate_hz: int) -> MelFilterbank:
    """Triangular filters with centers equally spaced in mel over [0, rate/2].

    Filter edges are quantized to FFT bins; each filter rises linearly to
    weight 1 at its center bin and falls back to 0 at the next center.
    """
    n_bins = config.n_spectrum_bins
    mel_points = np.linspace(0.0, hz_to_mel(sample_rate_hz / 2.0), config.n_mel_filters + 2)
    hz_points = mel_to_hz(mel_points)
    edge_bins = np.floor((config.fft_size + 1) * hz_points / sample_rate_hz).astype(int)
    edge_bins = np.minimum(edge_bins, n_bins - 1)
    if np.any(np.diff(edge_bins) < 1):
        raise ConfigError(
            "mel filters collapse onto identical FFT bins; "
            "reduce n_mel_filters or increase fft_size"
        )
    filters = np.zeros((config.n_mel_filters, n_bins))
    for j in range(config.n_mel_filters):
        lo, mid, hi = edge_bins[j], edge_bins[j + 1], edge_bins[j + 2]
        for i in range(lo, mid):
            filters[j, i] = (i - lo) / (mid - lo)
        for i in range(mid, hi):
            filters[j, i] = (hi - i) / (hi - mid)
    return MelFilterbank(filters=filters, center_frequencies_hz=hz_points[1:-1])


def mfcc(power_spec: np.ndarray, filterbank: MelFilterbank, config: DspConfig) -> np.ndarray:
    """First n_mfcc coefficients of the orthonormal DCT-II of log mel energies."""
    power_spec = np.asarray(power_spec, dtype=np.float64)
    if power_spec.shape[-1] != filterbank.filters.shape[1]:
        raise ValueError(
            f"spectrum has {power_spec.shape[-1]} bins, filterbank expects "
            f"{filterbank.filters.shape[1]}"
        )
    mel_energies = power_spec @ filterbank.filters.T
    log_energies = np.log(mel_energies + LOG_FLOOR)
    coeffs = dct(log_energies, type=2, norm="ortho", axis=-1)
    return coeffs[..., : config.n_mfcc]


def extract_features(clip: AudioBuffer, config: DspConfig) -> np.ndarray:
    """Fixed-length feature vector for one 0.1 s clip.

    Per-frame MFCCs are aggregated to the per-coefficient mean followed by the
    per-coefficient population standard deviation, so the result has
    2 * n_mfcc entries regardless of frame count.
    """
    expected = int(round(CLIP_DURATION_S * clip.sample_rate_hz))
    if abs(len(clip) - expected) > 1:
        raise ValueError(
            f"clip must be {CLIP_DURATION_S} s (~{expected} samples at "
            f"{clip.sample_rate_hz} Hz), got {len(clip)} samples"
        )
    frames = frame_signal(clip, config)
    if len(frames) == 0:
        raise ValueError("clip too short to hold a single analysis frame")
    filterbank = _filterbank_cached(config, clip.sample_rate_hz)
    coeffs = mfcc(power_spectra(frames, config), filterbank, config)
    return np.concatenate([coeffs.mean(axis=0), coeffs.std(axis=0)])


def spectrogram_image(clip: AudioBuffer, config: DspConfig) -> np.ndarray:
    """Log-power spectrogram as uint8 grayscale, rows = bins, columns = frames.

    Intensities are scaled linearly to [0, 255] per image; a constant image
    (e.g. silence) maps to all zeros.
    """
    if len(clip) == 0:
        raise ValueError("clip is empty")
    frames = frame_signal(clip, config)
    if len(frames) == 0:
        # shorter than one frame: treat the whole clip as a single padded frame
        padded = np.zeros(config.frame_length_samples)
        padded[: len(clip)] = clip.samples
        frames = padded[None, :]
    log_power = np.log10(power_spectra(frames, config) + LOG_FLOOR).T
    lo, hi = log_power.min(), log_power.max()
    if hi - lo < 1e-12:
        return np.zeros(log_power.shape, dtype=np.uint8)
    scaled = (log_power - lo) / (hi - lo) * 255.0
    return np.round(scaled).astype(np.uint8)


def save_spectrogram_png(image: np.ndarray, path) -> None:
    """Write a spectrogram array as an 8-bit grayscale PNG (low bins at bottom)."""
    from PIL import Image

    Image.fromarray(image[::-1, :], mode="L").save(path, format="PNG")


_FILTERBANK_CACHE: dict[tuple, MelFilterbank] = {}


def _filterbank_cached(config: DspConfig, sample_rate_hz: int) -> MelFilterbank:
    key = (config, sample_rate_hz)
    fb = _FILTERBANK_CACHE.get(key)
    if fb is None:
        fb = _FILTERBANK_CACHE.setdefault(key, build_mel_filterbank(config, sample_rate_hz))
    return fb
