"""Real-time detection over a live PCM stream.

Audio chunks land in a bounded ring buffer; every fully-available window at a
hop boundary is classified exactly once, in order, so any chunking of the same
bytes yields the same events. The per-window mosquito verdict is smoothed by a
majority vote over the last smoothing_k raw stage-1 decisions, and
"record on detection" persists audio around maximal positive runs with
pre/post roll.

batch_equivalent() is the offline reference for the whole event sequence and
deliberately re-derives it by direct array slicing, without the ring buffer.
"""

from __future__ import annotations

import enum
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import svm
from .audio import AudioBuffer, write_wav
from .dsp import extract_features, build_mel_filterbank, power_spectra, frame_signal, DspConfig
from .errors import ConfigError, SessionError, StreamOverflowError
from .pipeline import TwoStageModel

N_SUMMARY_BANDS = 16


class RecordMode(enum.Enum):
    RECORD_ONLY = "record_only"
    RECORD_AND_DETECT = "record_and_detect"
    RECORD_ON_DETECTION = "record_on_detection"


@dataclass(frozen=True)
class StreamConfig:
    window_s: float = 0.1
    hop_s: float = 0.05
    smoothing_k: int = 3
    pre_roll_s: float = 1.0
    post_roll_s: float = 2.0
    mode: RecordMode = RecordMode.RECORD_AND_DETECT
    ring_capacity_s: float = 10.0
    emit_bands: bool = False

    def __post_init__(self):
        if self.hop_s <= 0 or self.window_s <= 0:
            raise ConfigError("window_s and hop_s must be positive")
        if self.hop_s > self.window_s:
            raise ConfigError("hop_s must not exceed window_s")
        if self.smoothing_k < 1 or self.smoothing_k % 2 == 0:
            raise ConfigError("smoothing_k must be a positive odd integer")
        if self.pre_roll_s < 0 or self.post_roll_s < 0:
            raise ConfigError("pre/post roll must be non-negative")
        if self.ring_capacity_s < 2 * self.window_s:
            raise ConfigError("ring capacity must hold at least two windows")


@dataclass(frozen=True)
class DetectionEvent:
    window_start_s: float
    stage1_score: float
    mosquito_present: bool
    species: object = None
    species_votes: dict | None = None
    bands: tuple | None = None


def _band_summary(window: np.ndarray, rate: int, dsp_config: DspConfig) -> tuple:
    """16 log mel-band energies of the window's mean power spectrum."""
    config = DspConfig(
        frame_length_samples=dsp_config.frame_length_samples,
        hop_length_samples=dsp_config.hop_length_samples,
        fft_size=dsp_config.fft_size,
        n_mel_filters=N_SUMMARY_BANDS,
        n_mfcc=min(dsp_config.n_mfcc, N_SUMMARY_BANDS),
        pre_emphasis=dsp_config.pre_emphasis,
        window=dsp_config.window,
    )
    filterbank = build_mel_filterbank(config, rate)
    spectrum = power_spectra(frame_signal(window, config), config).mean(axis=0)
    bands = np.log10(spectrum @ filterbank.filters.T + 1e-10)
    return tuple(float(b) for b in bands)


class _WindowClassifier:
    """Shared per-window logic: stage-1 score, majority smoothing, stage 2."""

    def __init__(self, model: TwoStageModel, config: StreamConfig, rate: int):
        self.model = model
        self.config = config
        self.rate = rate
        self.recent_raw: deque = deque(maxlen=config.smoothing_k)

    def classify(self, window: np.ndarray, start_s: float) -> DetectionEvent:
        feature = extract_features(AudioBuffer(window, self.rate), self.model.dsp_config)
        normalized = self.model.normalizer.transform(feature[None, :])
        score = float(svm.decision_function(self.model.stage1, normalized)[0])
        self.recent_raw.append(score > self.model.stage1_threshold)
        present = sum(self.recent_raw) * 2 > len(self.recent_raw)
        species = votes = None
        if present:
            winners, vote_rows = svm.predict_ovo_batch(self.model.stage2, normalized)
            species = winners[0]
            votes = {c: int(v) for c, v in zip(self.model.stage2.classes, vote_rows[0])}
        bands = _band_summary(window, self.rate, self.model.dsp_config) \
            if self.config.emit_bands else None
        return DetectionEvent(
            window_start_s=start_s,
            stage1_score=score,
            mosquito_present=present,
            species=species,
            species_votes=votes,
            bands=bands,
        )


class StreamSession:
    """One live detection session: single producer, single consumer.

    push_audio and poll_detections may be called from different threads; all
    state is guarded by one lock. Classification happens synchronously inside
    push_audio, so the ring buffer can only overflow if a single chunk exceeds
    its capacity.
    """

    def __init__(self, model: TwoStageModel, config: StreamConfig | None = None,
                 sample_rate_hz: int | None = None, session_id: str = "session"):
        self.model = model
        self.config = config or StreamConfig()
        self.rate = sample_rate_hz or 8000
        self.session_id = session_id
        self.window_len = int(round(self.config.window_s * self.rate))
        self.hop_len = int(round(self.config.hop_s * self.rate))
        self.capacity = int(round(self.config.ring_capacity_s * self.rate))
        self._ring = np.zeros(self.capacity)
        self._total = 0            # absolute samples pushed
        self._consumed = 0         # absolute start of the oldest retained sample
        self._windows_done = 0
        self._events: deque = deque()
        self._all_events: list[DetectionEvent] = []
        self._retained: list[np.ndarray] = []
        self._classifier = _WindowClassifier(model, self.config, self.rate)
        self._lock = threading.Lock()
        self._closed = False

    # -- producer side --------------------------------------------------

    def push_audio(self, chunk) -> int:
        """Append samples; classify every newly completed window. Returns the
        number of windows classified by this call."""
        with self._lock:
            self._ensure_open()
            samples = np.asarray(chunk, dtype=np.float64)
            if samples.ndim != 1:
                raise ValueError("audio chunks must be 1-D")
            if len(samples) == 0:
                return 0
            if self.config.mode is RecordMode.RECORD_ONLY:
                # no classification work scheduled; the ring is not consumed
                self._retained.append(samples.copy())
                self._append_ring(samples)
                return 0
            pending = self._total - self._next_window_start()
            if pending + len(samples) > self.capacity:
                raise StreamOverflowError(pending + len(samples) - self.capacity)
            self._retained.append(samples.copy())
            self._append_ring(samples)
            return self._classify_ready_windows()

    def _append_ring(self, samples: np.ndarray) -> None:
        pos = self._total % self.capacity
        first = min(len(samples), self.capacity - pos)
        self._ring[pos : pos + first] = samples[:first]
        if first < len(samples):
            self._ring[: len(samples) - first] = samples[first:]
        self._total += len(samples)
        self._consumed = max(self._consumed, self._total - self.capacity)

    def _next_window_start(self) -> int:
        return self._windows_done * self.hop_len

    def _window_samples(self, start: int) -> np.ndarray:
        if start < self._consumed:
            raise StreamOverflowError(self._consumed - start)
        pos = start % self.capacity
        end = pos + self.window_len
        if end <= self.capacity:
            return self._ring[pos:end].copy()
        return np.concatenate([self._ring[pos:], self._ring[: end - self.capacity]])

    def _classify_ready_windows(self) -> int:
        new_events = 0
        while self._next_window_start() + self.window_len <= self._total:
            start = self._next_window_start()
            event = self._classifier.classify(self._window_samples(start), start / self.rate)
            self._events.append(event)
            self._all_events.append(event)
            self._windows_done += 1
            new_events += 1
        return new_events

    # -- consumer side ---------------------------------------------------

    def poll_detections(self) -> list[DetectionEvent]:
        """Return and drain events completed since the last poll."""
        with self._lock:
            self._ensure_open()
            drained = list(self._events)
            self._events.clear()
            return drained

    @property
    def duration_s(self) -> float:
        return self._total / self.rate

    @property
    def events(self) -> list[DetectionEvent]:
        """All events since the session opened (also drained via poll)."""
        return list(self._all_events)

    def audio(self) -> AudioBuffer:
        """Everything pushed so far (kept for persistence)."""
        samples = np.concatenate(self._retained) if self._retained else np.zeros(0)
        return AudioBuffer(samples, self.rate)

    def set_mode(self, mode: RecordMode) -> None:
        """Explicit mode change; audio keeps flowing across the switch.

        Entering a detect mode starts classification at the live edge: audio
        that arrived while detection was off is not retro-classified, and the
        smoothing history starts fresh.
        """
        from dataclasses import replace

        with self._lock:
            self._ensure_open()
            old = self.config.mode
            if mode is old:
                return
            if old is RecordMode.RECORD_ONLY:
                self._windows_done = -(-self._total // self.hop_len)  # ceil
                self._classifier.recent_raw.clear()
            self.config = replace(self.config, mode=mode)
            if mode is not RecordMode.RECORD_ONLY:
                self._classify_ready_windows()

    def close(self) -> None:
        with self._lock:
            self._closed = True

    @property
    def closed(self) -> bool:
        return self._closed

    def _ensure_open(self):
        if self._closed:
            raise SessionError(f"session {self.session_id!r} is closed")

    def persist_segments(self, out_dir) -> list:
        """Write this session's recorded audio per the configured mode.

        RecordOnly / RecordAndDetect persist the whole stream as one segment;
        RecordOnDetection persists only the gated segments. Returns the paths.
        """
        from pathlib import Path

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        audio = self.audio()
        if len(audio) == 0:
            return []
        if self.config.mode is RecordMode.RECORD_ON_DETECTION:
            bounds = gated_segment_bounds(self._all_events, self.config, audio.duration_s)
        else:
            bounds = [(0.0, audio.duration_s)]
        paths = []
        for start_s, end_s in bounds:
            name = f"{self.session_id}_{int(round(start_s * 1000))}_{int(round(end_s * 1000))}.wav"
            path = out_dir / name
            write_wav(path, audio.slice_s(start_s, end_s - start_s))
            paths.append(path)
        return paths


def event_to_dict(event: DetectionEvent) -> dict:
    """Wire/JSONL form of an event; optional fields omitted when absent."""
    doc = {
        "window_start_s": event.window_start_s,
        "stage1_score": event.stage1_score,
        "mosquito_present": event.mosquito_present,
    }
    if event.species is not None:
        doc["species"] = str(event.species)
    if event.species_votes is not None:
        doc["votes"] = {str(k): v for k, v in event.species_votes.items()}
    if event.bands is not None:
        doc["bands"] = list(event.bands)
    return doc


def batch_equivalent(model: TwoStageModel, buffer: AudioBuffer,
                     config: StreamConfig | None = None) -> list[DetectionEvent]:
    """Reference event sequence for a whole buffer, computed by plain slicing.

    The streaming path must produce exactly this, field for field, for the
    same audio under any chunking.
    """
    config = config or StreamConfig()
    rate = buffer.sample_rate_hz
    window_len = int(round(config.window_s * rate))
    hop_len = int(round(config.hop_s * rate))
    classifier = _WindowClassifier(model, config, rate)
    events = []
    start = 0
    while start + window_len <= len(buffer):
        window = buffer.samples[start : start + window_len].copy()
        events.append(classifier.classify(window, start / rate))
        start += hop_len
    return events


def gated_segment_bounds(events, config: StreamConfig, duration_s: float) -> list[tuple]:
    """Merged [start, end] bounds around maximal runs of positive events."""
    runs = []
    run_start = None
    last_positive = None
    for event in events:
        if event.mosquito_present:
            if run_start is None:
                run_start = event.window_start_s
            last_positive = event.window_start_s
        elif run_start is not None:
            runs.append((run_start, last_positive))
            run_start = None
    if run_start is not None:
        runs.append((run_start, last_positive))
    merged: list[list] = []
    for t0, t1 in runs:
        start = max(0.0, t0 - config.pre_roll_s)
        end = min(duration_s, t1 + config.window_s + config.post_roll_s)
        if merged and start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [(a, b) for a, b in merged]
