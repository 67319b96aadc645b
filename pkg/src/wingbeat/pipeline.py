"""Two-stage classifier: standardize features, detect presence, identify species.

Stage 1 is a binary SVM over {background -> -1, any species -> +1}; when its
decision value clears the threshold, the one-vs-one stage-2 model picks the
species. Both stages share one normalizer fitted on the stage-1 training
features, and the whole model serializes to a single versioned JSON document
(including the DSP config, so inference is self-describing).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import svm
from .audio import AudioBuffer
from .dsp import CLIP_DURATION_S, DspConfig, extract_features
from .errors import ModelFormatError, TrainingError

BACKGROUND_LABEL = "background"


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension standardization; zero-variance dimensions pass through."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean=x.mean(axis=0), std=std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != len(self.mean):
            raise ValueError(f"feature dimension {x.shape[-1]} != normalizer {len(self.mean)}")
        return (x - self.mean) / self.std


@dataclass(frozen=True)
class TwoStageModel:
    normalizer: Normalizer
    stage1: svm.BinarySvmModel
    stage2: svm.MulticlassSvmModel
    species_list: tuple
    dsp_config: DspConfig
    stage1_threshold: float = 0.0
    background_label: str = BACKGROUND_LABEL

    def version_tag(self) -> str:
        """Content hash of the serialized document; stable model identity."""
        return hashlib.sha256(serialize_two_stage(self)).hexdigest()[:12]


@dataclass(frozen=True)
class Detection:
    """Outcome for one 0.1 s sample; species fields filled iff a mosquito
    was detected."""

    mosquito_present: bool
    stage1_score: float
    species: object = None
    stage2_votes: dict | None = None


def train_two_stage(features: np.ndarray, labels, stage1_config: svm.SvmTrainConfig,
                    stage2_config: svm.SvmTrainConfig | None = None,
                    dsp_config: DspConfig | None = None,
                    background_label: str = BACKGROUND_LABEL,
                    stage1_threshold: float = 0.0) -> TwoStageModel:
    """Train both stages on labeled feature vectors.

    labels mixes the background label with species names; the background
    class must be present along with at least two species.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = list(labels)
    if len(features) != len(labels):
        raise ValueError("one label per feature row required")
    species = [l for l in dict.fromkeys(labels) if l != background_label]
    if background_label not in labels:
        raise TrainingError(f"background class {background_label!r} missing from training data")
    if len(species) < 2:
        raise TrainingError("need at least two species classes for stage 2")
    normalizer = Normalizer.fit(features)
    normalized = normalizer.transform(features)
    label_arr = np.array(labels, dtype=object)
    stage1_y = np.where(label_arr == background_label, -1.0, 1.0)
    stage1 = svm.train_binary(normalized, stage1_y, stage1_config,
                              labels=(background_label, "mosquito"))
    species_mask = label_arr != background_label
    stage2 = svm.train_ovo(
        normalized[species_mask],
        list(label_arr[species_mask]),
        stage2_config if stage2_config is not None else stage1_config,
    )
    return TwoStageModel(
        normalizer=normalizer,
        stage1=stage1,
        stage2=stage2,
        species_list=tuple(species),
        dsp_config=dsp_config if dsp_config is not None else DspConfig(),
        stage1_threshold=stage1_threshold,
        background_label=background_label,
    )


def classify_batch(model: TwoStageModel, features: np.ndarray) -> list[Detection]:
    """Classify feature rows; stage 2 runs only where stage 1 fires."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    normalized = model.normalizer.transform(features)
    scores = svm.decision_function(model.stage1, normalized)
    detections: list[Detection] = [None] * len(features)
    positive = np.flatnonzero(scores > model.stage1_threshold)
    if len(positive):
        winners, votes = svm.predict_ovo_batch(model.stage2, normalized[positive])
        for row, winner, vote_row in zip(positive, winners, votes):
            detections[row] = Detection(
                mosquito_present=True,
                stage1_score=float(scores[row]),
                species=winner,
                stage2_votes={c: int(v) for c, v in zip(model.stage2.classes, vote_row)},
            )
    for row in range(len(features)):
        if detections[row] is None:
            detections[row] = Detection(mosquito_present=False, stage1_score=float(scores[row]))
    return detections


def classify_sample(model: TwoStageModel, feature: np.ndarray) -> Detection:
    return classify_batch(model, np.asarray(feature)[None, :])[0]


def classify_clip(model: TwoStageModel, clip: AudioBuffer) -> Detection:
    """extract_features followed by classify_sample."""
    return classify_sample(model, extract_features(clip, model.dsp_config))


# --- serialization ---------------------------------------------------------

def _dsp_config_to_dict(config: DspConfig) -> dict:
    return {
        "frame_length_samples": config.frame_length_samples,
        "hop_length_samples": config.hop_length_samples,
        "fft_size": config.fft_size,
        "n_mel_filters": config.n_mel_filters,
        "n_mfcc": config.n_mfcc,
        "pre_emphasis": config.pre_emphasis,
        "window": config.window,
    }


def serialize_two_stage(model: TwoStageModel) -> bytes:
    doc = {
        "version": svm.MODEL_FORMAT_VERSION,
        "type": "two_stage",
        "kernel": {"kind": model.stage1.kernel.kind, "gamma": model.stage1.kernel.gamma},
        "classes": [model.background_label, *model.species_list],
        "normalizer": {"mean": model.normalizer.mean.tolist(),
                       "std": model.normalizer.std.tolist()},
        "stage1": svm.binary_to_dict(model.stage1),
        "stage2": svm.ovo_to_dict(model.stage2),
        "species_list": list(model.species_list),
        "background_label": model.background_label,
        "stage1_threshold": model.stage1_threshold,
        "dsp_config": _dsp_config_to_dict(model.dsp_config),
    }
    return json.dumps(doc).encode()


def deserialize_two_stage(data: bytes) -> TwoStageModel:
    doc = svm.load_model_document(data, expected_type="two_stage")
    try:
        normalizer = Normalizer(
            mean=np.array(doc["normalizer"]["mean"], dtype=np.float64),
            std=np.array(doc["normalizer"]["std"], dtype=np.float64),
        )
        return TwoStageModel(
            normalizer=normalizer,
            stage1=svm.binary_from_dict(doc["stage1"]),
            stage2=svm.ovo_from_dict(doc["stage2"]),
            species_list=tuple(doc["species_list"]),
            dsp_config=DspConfig(**doc["dsp_config"]),
            stage1_threshold=float(doc["stage1_threshold"]),
            background_label=doc["background_label"],
        )
    except KeyError as exc:
        raise ModelFormatError(f"missing field {exc.args[0]!r} in two-stage model") from exc


def save_model(model: TwoStageModel, path) -> None:
    import os

    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(serialize_two_stage(model))
    os.replace(tmp, path)


def load_model(path) -> TwoStageModel:
    with open(path, "rb") as fh:
        return deserialize_two_stage(fh.read())
