"""Soft-margin SVM trained with sequential minimal optimization.

Self-contained: kernels, a Platt-style two-multiplier working-set solver with
per-class box constraints (cost-sensitive weighting), a one-vs-one multiclass
wrapper, and versioned JSON serialization. Training is deterministic for a
fixed (data, config) pair: all candidate-pair randomization is driven by the
config seed.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ModelFormatError, ModelVersionError, TrainingError

MODEL_FORMAT_VERSION = 1

KERNEL_KINDS = ("linear", "rbf")


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    gamma: float | None = None  # rbf only; None = 1 / (n_features * feature variance)

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}, expected one of {KERNEL_KINDS}")
        if self.kind == "rbf" and self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass(frozen=True)
class SvmTrainConfig:
    c: float = 10.0
    class_weight_pos: float = 1.0
    class_weight_neg: float = 1.0
    kernel: KernelSpec = field(default_factory=KernelSpec)
    tolerance: float = 1e-3
    max_passes: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("c must be positive")
        if self.class_weight_pos <= 0 or self.class_weight_neg <= 0:
            raise ValueError("class weights must be positive")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")


@dataclass(frozen=True)
class BinarySvmModel:
    """Decision function f(x) = sum_i dual_coef_i * k(sv_i, x) + bias."""

    support_vectors: np.ndarray   # (m, d)
    dual_coefficients: np.ndarray  # (m,), alpha_i * y_i
    bias: float
    kernel: KernelSpec
    label_neg: object = -1
    label_pos: object = +1


@dataclass(frozen=True)
class MulticlassSvmModel:
    classes: tuple
    pairwise_models: dict  # (class_a, class_b) -> BinarySvmModel, a before b in classes


def kernel_matrix(spec: KernelSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gram matrix K[i, j] = k(a_i, b_j); gamma must be resolved for rbf."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if spec.kind == "linear":
        return a @ b.T
    if spec.gamma is None:
        raise ValueError("rbf kernel evaluated without a resolved gamma")
    sq = np.maximum(
        np.sum(a**2, axis=1)[:, None] + np.sum(b**2, axis=1)[None, :] - 2.0 * (a @ b.T),
        0.0,
    )
    return np.exp(-spec.gamma * sq)


def kernel_eval(spec: KernelSpec, x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(kernel_matrix(spec, x[None, :], y[None, :])[0, 0])


def resolve_gamma(spec: KernelSpec, x: np.ndarray) -> KernelSpec:
    """Fill in the data-driven default gamma = 1 / (n_features * var(X))."""
    if spec.kind != "rbf" or spec.gamma is not None:
        return spec
    variance = float(np.var(x))
    if variance <= 0:
        variance = 1.0
    return replace(spec, gamma=1.0 / (x.shape[1] * variance))


class _Smo:
    """Working-set-of-two dual solver with an incremental error cache."""

    # steps smaller than this are treated as no progress
    MIN_STEP = 1e-12
    # hard cap on sweeps so a pathological instance cannot spin forever
    MAX_EPOCHS = 2000

    def __init__(self, k: np.ndarray, y: np.ndarray, box: np.ndarray,
                 tolerance: float, max_passes: int, seed: int):
        self.k = k
        self.y = y.astype(np.float64)
        self.box = box
        self.tol = tolerance
        self.max_passes = max_passes
        self.rng = np.random.default_rng(seed)
        self.n = len(y)
        self.alpha = np.zeros(self.n)
        self.bias = 0.0
        # g_i = sum_j alpha_j y_j K_ij (decision value without bias)
        self.g = np.zeros(self.n)

    def solve(self):
        quiet_passes = 0
        epoch = 0
        while quiet_passes < self.max_passes and epoch < self.MAX_EPOCHS:
            changed = 0
            for i in self.rng.permutation(self.n):
                changed += self._examine(int(i))
            quiet_passes = quiet_passes + 1 if changed == 0 else 0
            epoch += 1
        return self.alpha, self.bias

    def _error(self, i: int) -> float:
        return self.g[i] + self.bias - self.y[i]

    def _examine(self, i: int) -> int:
        e_i = self._error(i)
        r = e_i * self.y[i]
        violates = (r < -self.tol and self.alpha[i] < self.box[i]) or (
            r > self.tol and self.alpha[i] > 0.0
        )
        if not violates:
            return 0
        nonbound = np.flatnonzero((self.alpha > 0.0) & (self.alpha < self.box))
        if len(nonbound) > 1:
            # second-choice heuristic: largest |E_i - E_j| first
            errors = self.g[nonbound] + self.bias - self.y[nonbound]
            j = int(nonbound[np.argmax(np.abs(e_i - errors))])
            if self._step(i, j):
                return 1
            for j in self.rng.permutation(nonbound):
                if self._step(i, int(j)):
                    return 1
        for j in self.rng.permutation(self.n):
            if self._step(i, int(j)):
                return 1
        return 0

    def _step(self, i: int, j: int) -> bool:
        if i == j:
            return False
        a_i, a_j = self.alpha[i], self.alpha[j]
        y_i, y_j = self.y[i], self.y[j]
        e_i, e_j = self._error(i), self._error(j)
        if y_i != y_j:
            lo = max(0.0, a_j - a_i)
            hi = min(self.box[j], self.box[i] + a_j - a_i)
        else:
            lo = max(0.0, a_i + a_j - self.box[i])
            hi = min(self.box[j], a_i + a_j)
        if lo >= hi:
            return False
        k_ii, k_jj, k_ij = self.k[i, i], self.k[j, j], self.k[i, j]
        curvature = k_ii + k_jj - 2.0 * k_ij
        if curvature > 1e-15:
            a_j_new = np.clip(a_j + y_j * (e_i - e_j) / curvature, lo, hi)
        else:
            # flat direction: evaluate the dual objective at both ends
            a_j_new = self._endpoint(i, j, lo, hi, e_i, e_j)
            if a_j_new is None:
                return False
        if abs(a_j_new - a_j) < self.MIN_STEP:
            return False
        a_i_new = a_i + y_i * y_j * (a_j - a_j_new)
        a_i_new = min(max(a_i_new, 0.0), self.box[i])
        d_i = a_i_new - a_i
        d_j = a_j_new - a_j
        b1 = self.bias - e_i - y_i * d_i * k_ii - y_j * d_j * k_ij
        b2 = self.bias - e_j - y_i * d_i * k_ij - y_j * d_j * k_jj
        if 0.0 < a_i_new < self.box[i]:
            self.bias = b1
        elif 0.0 < a_j_new < self.box[j]:
            self.bias = b2
        else:
            self.bias = (b1 + b2) / 2.0
        self.alpha[i] = a_i_new
        self.alpha[j] = a_j_new
        self.g += y_i * d_i * self.k[i] + y_j * d_j * self.k[j]
        return True

    def _endpoint(self, i, j, lo, hi, e_i, e_j):
        """Platt's zero-curvature rule: move alpha_j to the better endpoint."""
        y_j = self.y[j]
        f_i = e_i + self.y[i]
        f_j = e_j + y_j
        l1 = self.alpha[i] + self.y[i] * y_j * (self.alpha[j] - lo)
        h1 = self.alpha[i] + self.y[i] * y_j * (self.alpha[j] - hi)
        k_ii, k_jj, k_ij = self.k[i, i], self.k[j, j], self.k[i, j]

        def objective(a_i_v, a_j_v):
            v_i = f_i - self.alpha[i] * self.y[i] * k_ii - self.alpha[j] * y_j * k_ij - self.bias
            v_j = f_j - self.alpha[i] * self.y[i] * k_ij - self.alpha[j] * y_j * k_jj - self.bias
            return (
                a_i_v + a_j_v
                - 0.5 * k_ii * a_i_v**2 - 0.5 * k_jj * a_j_v**2
                - self.y[i] * y_j * k_ij * a_i_v * a_j_v
                - self.y[i] * a_i_v * v_i - y_j * a_j_v * v_j
            )

        lobj = objective(l1, lo)
        hobj = objective(h1, hi)
        if lobj > hobj + 1e-12:
            return lo
        if hobj > lobj + 1e-12:
            return hi
        return None


def train_binary(x: np.ndarray, y: np.ndarray, config: SvmTrainConfig,
                 labels: tuple = (-1, +1)) -> BinarySvmModel:
    """Train on features x with labels y in {-1, +1}.

    The per-class box constraints are C * class_weight_pos for the +1 class
    and C * class_weight_neg for the -1 class. On return every training point
    satisfies the KKT conditions within config.tolerance.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("x must be (n, d) with one label per row")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be -1 or +1")
    if len(np.unique(y)) < 2:
        raise TrainingError("training data contains a single class")
    kernel = resolve_gamma(config.kernel, x)
    box = np.where(y > 0, config.c * config.class_weight_pos, config.c * config.class_weight_neg)
    k = kernel_matrix(kernel, x, x)
    alpha, bias = _Smo(k, y, box, config.tolerance, config.max_passes, config.seed).solve()
    sv = alpha > 1e-12
    return BinarySvmModel(
        support_vectors=x[sv].copy(),
        dual_coefficients=(alpha * y)[sv],
        bias=float(bias),
        kernel=kernel,
        label_neg=labels[0],
        label_pos=labels[1],
    )


def decision_function(model: BinarySvmModel, x: np.ndarray) -> np.ndarray:
    """Decision values for a batch of feature rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if len(model.support_vectors) == 0:
        return np.full(len(x), model.bias)
    k = kernel_matrix(model.kernel, x, model.support_vectors)
    return k @ model.dual_coefficients + model.bias


def decision_value(model: BinarySvmModel, x) -> float:
    return float(decision_function(model, np.asarray(x))[0])


def predict_binary(model: BinarySvmModel, x) -> object:
    # sign(0) resolves to the positive class so prediction is total
    return model.label_pos if decision_value(model, x) >= 0.0 else model.label_neg


def kkt_violation(model: BinarySvmModel, x: np.ndarray, y: np.ndarray,
                  config: SvmTrainConfig) -> float:
    """Largest complementarity violation over the training set (0 = optimal).

    Uses the trained model's margins: points with alpha = 0 need margin >= 1,
    interior points margin == 1, bound points margin <= 1.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    margins = y * decision_function(model, x)
    box = np.where(y > 0, config.c * config.class_weight_pos, config.c * config.class_weight_neg)
    alpha = np.zeros(len(x))
    # recover alpha for support vectors by matching rows
    for sv_row, coef in zip(model.support_vectors, model.dual_coefficients):
        match = np.flatnonzero((x == sv_row).all(axis=1) & (np.abs(alpha) < 1e-15))
        if len(match):
            alpha[match[0]] = abs(coef)
    worst = 0.0
    for a, m, c in zip(alpha, margins, box):
        if a <= 1e-9:
            worst = max(worst, 1.0 - m)
        elif a >= c - 1e-9:
            worst = max(worst, m - 1.0)
        else:
            worst = max(worst, abs(m - 1.0))
    return worst


def class_pairs(classes) -> list[tuple]:
    return list(itertools.combinations(classes, 2))


def train_ovo(x: np.ndarray, labels, config: SvmTrainConfig) -> MulticlassSvmModel:
    """One binary model per unordered class pair, trained on that pair's rows."""
    x = np.asarray(x, dtype=np.float64)
    labels = list(labels)
    classes = list(dict.fromkeys(labels))
    if len(classes) < 2:
        raise TrainingError("one-vs-one training needs at least two classes")
    counts = {c: labels.count(c) for c in classes}
    for c, n in counts.items():
        if n < 2:
            raise TrainingError(f"class {c!r} has only {n} sample(s); need at least 2")
    label_arr = np.array(labels, dtype=object)
    models = {}
    for pair_index, (a, b) in enumerate(class_pairs(classes)):
        mask = (label_arr == a) | (label_arr == b)
        pair_x = x[mask]
        pair_y = np.where(label_arr[mask] == a, 1.0, -1.0)
        pair_config = replace(config, seed=config.seed + pair_index)
        models[(a, b)] = train_binary(pair_x, pair_y, pair_config, labels=(b, a))
    return MulticlassSvmModel(classes=tuple(classes), pairwise_models=models)


def ovo_decision_values(model: MulticlassSvmModel, x: np.ndarray) -> dict:
    """Pairwise decision values for a batch, keyed by class pair."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return {pair: decision_function(m, x) for pair, m in model.pairwise_models.items()}


def predict_ovo_batch(model: MulticlassSvmModel, x: np.ndarray):
    """Predict a batch; returns (labels list, votes (n, K) int array).

    Ties on votes are broken by the larger sum of |decision value| over the
    tied class's winning pairs, then lexicographically by class string.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = len(x)
    classes = model.classes
    index = {c: k for k, c in enumerate(classes)}
    votes = np.zeros((n, len(classes)), dtype=int)
    margin_mass = np.zeros((n, len(classes)))
    for (a, b), values in ovo_decision_values(model, x).items():
        wins_a = values >= 0.0
        votes[:, index[a]] += wins_a
        votes[:, index[b]] += ~wins_a
        abs_values = np.abs(values)
        margin_mass[:, index[a]] += np.where(wins_a, abs_values, 0.0)
        margin_mass[:, index[b]] += np.where(wins_a, 0.0, abs_values)
    winners = []
    for row in range(n):
        top = votes[row].max()
        tied = [k for k in range(len(classes)) if votes[row, k] == top]
        if len(tied) > 1:
            top_mass = max(margin_mass[row, k] for k in tied)
            tied = [k for k in tied if margin_mass[row, k] >= top_mass - 1e-12]
            tied.sort(key=lambda k: str(classes[k]))
        winners.append(classes[tied[0]])
    return winners, votes


def predict_ovo(model: MulticlassSvmModel, x):
    """Predict one feature vector; returns (class, votes dict)."""
    winners, votes = predict_ovo_batch(model, np.asarray(x)[None, :])
    return winners[0], {c: int(v) for c, v in zip(model.classes, votes[0])}


# --- serialization ---------------------------------------------------------

def _kernel_to_dict(spec: KernelSpec) -> dict:
    return {"kind": spec.kind, "gamma": spec.gamma}


def _kernel_from_dict(doc: dict) -> KernelSpec:
    kind = doc.get("kind")
    if kind not in KERNEL_KINDS:
        raise ModelFormatError(f"unknown kernel kind {kind!r} in field 'kernel.kind'")
    return KernelSpec(kind=kind, gamma=doc.get("gamma"))


def binary_to_dict(model: BinarySvmModel) -> dict:
    return {
        "kernel": _kernel_to_dict(model.kernel),
        "bias": model.bias,
        "support_vectors": model.support_vectors.tolist(),
        "dual_coefficients": model.dual_coefficients.tolist(),
        "label_neg": model.label_neg,
        "label_pos": model.label_pos,
    }


def binary_from_dict(doc: dict) -> BinarySvmModel:
    try:
        return BinarySvmModel(
            support_vectors=np.array(doc["support_vectors"], dtype=np.float64).reshape(
                len(doc["support_vectors"]), -1
            ),
            dual_coefficients=np.array(doc["dual_coefficients"], dtype=np.float64),
            bias=float(doc["bias"]),
            kernel=_kernel_from_dict(doc["kernel"]),
            label_neg=doc["label_neg"],
            label_pos=doc["label_pos"],
        )
    except KeyError as exc:
        raise ModelFormatError(f"missing field {exc.args[0]!r} in binary model") from exc


def ovo_to_dict(model: MulticlassSvmModel) -> dict:
    return {
        "classes": list(model.classes),
        "models": [
            {"pair": [a, b], **binary_to_dict(m)}
            for (a, b), m in model.pairwise_models.items()
        ],
    }


def ovo_from_dict(doc: dict) -> MulticlassSvmModel:
    try:
        classes = tuple(doc["classes"])
        models = {}
        for entry in doc["models"]:
            a, b = entry["pair"]
            models[(a, b)] = binary_from_dict(entry)
    except KeyError as exc:
        raise ModelFormatError(f"missing field {exc.args[0]!r} in multiclass model") from exc
    expected = set(class_pairs(classes))
    if set(models) != expected:
        raise ModelFormatError("multiclass document does not cover every class pair exactly once")
    return MulticlassSvmModel(classes=classes, pairwise_models=models)


def serialize_binary(model: BinarySvmModel) -> bytes:
    doc = {"version": MODEL_FORMAT_VERSION, "type": "binary", **binary_to_dict(model)}
    return json.dumps(doc).encode()


def deserialize_binary(data: bytes) -> BinarySvmModel:
    doc = load_model_document(data, expected_type="binary")
    return binary_from_dict(doc)


def load_model_document(data: bytes, expected_type: str | None = None) -> dict:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    version = doc.get("version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelVersionError(
            f"unsupported model document version {version!r}; expected {MODEL_FORMAT_VERSION}"
        )
    if expected_type is not None and doc.get("type") != expected_type:
        raise ModelFormatError(f"expected a {expected_type!r} document, got {doc.get('type')!r}")
    return doc
