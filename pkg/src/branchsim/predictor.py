"""Correctness and difficulty predictors.

Three interchangeable correctness sources feed the orchestration policy:
trace-embedded probabilities, a synthetic calibrated oracle (one quality
scalar spans perfect-oracle to uniform noise), and a frozen feed-forward MLP
evaluated on stored activation vectors. The MLP here is inference only: no
training, no gradients.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import percentile

LAYERNORM_EPS = 1e-5
BATCHNORM_EPS = 1e-5
# Keeps the correctness head strictly inside (0, 1) even for saturating logits.
_PROB_CLIP = 1e-12

ACTIVATION_KINDS = ("relu", "gelu")


class WeightFormatError(Exception):
    """A weight manifest or blob is malformed."""


@dataclass
class MlpWeights:
    """A frozen MLP: input layer-norm, affine hidden layers with optional
    inference-mode batch-norm, and a linear head.

    Weight matrices are (out, in); the forward pass is ``W @ x + b``. A
    1-dim head is a correctness probe (sigmoid output); a 5-dim head is a
    difficulty classifier (softmax output). Dropout used during training is
    identity at inference and has no representation here.
    """

    input_dim: int
    layer_dims: list[int]
    head_dim: int
    activations: list[str]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    ln_gain: np.ndarray | None = None
    ln_bias: np.ndarray | None = None
    bn_mean: list[np.ndarray] | None = None
    bn_var: list[np.ndarray] | None = None
    bn_gain: list[np.ndarray] | None = None
    bn_bias: list[np.ndarray] | None = None
    # Which transformer layer the activations come from; metadata only.
    activation_layer: int = 14

    @property
    def has_batchnorm(self) -> bool:
        return self.bn_mean is not None

    def validate(self) -> None:
        dims = [self.input_dim, *self.layer_dims, self.head_dim]
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise WeightFormatError(
                f"expected {len(dims) - 1} weight/bias pairs, got "
                f"{len(self.weights)}/{len(self.biases)}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (dims[k + 1], dims[k])
            if w.shape != expected:
                raise WeightFormatError(
                    f"layer {k}: weight shape {w.shape} does not chain, "
                    f"expected {expected}")
            if b.shape != (dims[k + 1],):
                raise WeightFormatError(
                    f"layer {k}: bias shape {b.shape}, expected ({dims[k + 1]},)")
        if len(self.activations) != len(self.layer_dims):
            raise WeightFormatError("one activation kind per hidden layer required")
        for kind in self.activations:
            if kind not in ACTIVATION_KINDS:
                raise WeightFormatError(f"unknown activation kind {kind!r}")
        if (self.ln_gain is None) != (self.ln_bias is None):
            raise WeightFormatError("layer-norm gain and bias must come together")
        if self.ln_gain is not None and self.ln_gain.shape != (self.input_dim,):
            raise WeightFormatError("layer-norm parameters must match input_dim")
        bn_parts = (self.bn_mean, self.bn_var, self.bn_gain, self.bn_bias)
        if any(p is not None for p in bn_parts):
            if any(p is None for p in bn_parts):
                raise WeightFormatError("batch-norm needs mean/var/gain/bias together")
            for part in bn_parts:
                assert part is not None
                if len(part) != len(self.layer_dims):
                    raise WeightFormatError("one batch-norm set per hidden layer required")
                for k, vec in enumerate(part):
                    if vec.shape != (self.layer_dims[k],):
                        raise WeightFormatError(
                            f"batch-norm vector {k} has shape {vec.shape}, "
                            f"expected ({self.layer_dims[k]},)")
            assert self.bn_var is not None
            for vec in self.bn_var:
                if not np.all(vec > 0):
                    raise WeightFormatError("batch-norm running variances must be > 0")


def _gelu(x: np.ndarray) -> np.ndarray:
    # Exact (erf-based) GeLU; hidden widths are small enough that an
    # elementwise loop is not worth a scipy dependency.
    return x * 0.5 * (1.0 + np.fromiter((math.erf(v / math.sqrt(2.0)) for v in x),
                                        dtype=np.float64, count=len(x)))


def _activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "gelu":
        return _gelu(x)
    raise WeightFormatError(f"unknown activation kind {kind!r}")


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def mlp_forward(weights: MlpWeights, activation) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic forward pass. Returns (logits, probabilities): a sigmoid
    probability for a 1-dim head, a softmax distribution otherwise."""
    x = np.asarray(activation, dtype=np.float64)
    if x.shape != (weights.input_dim,):
        raise WeightFormatError(
            f"activation shape {x.shape} does not match expected "
            f"({weights.input_dim},)")
    mean = x.mean()
    var = x.var()
    x = (x - mean) / math.sqrt(var + LAYERNORM_EPS)
    if weights.ln_gain is not None:
        x = x * weights.ln_gain + weights.ln_bias
    for k in range(len(weights.layer_dims)):
        x = weights.weights[k] @ x + weights.biases[k]
        if weights.has_batchnorm:
            assert weights.bn_mean and weights.bn_var and weights.bn_gain and weights.bn_bias
            x = (x - weights.bn_mean[k]) / np.sqrt(weights.bn_var[k] + BATCHNORM_EPS)
            x = x * weights.bn_gain[k] + weights.bn_bias[k]
        x = _activate(x, weights.activations[k])
    logits = weights.weights[-1] @ x + weights.biases[-1]
    if weights.head_dim == 1:
        probs = np.clip(1.0 / (1.0 + np.exp(-logits)), _PROB_CLIP, 1.0 - _PROB_CLIP)
    else:
        probs = _softmax(logits)
    return logits, probs


# ---------------------------------------------------------------------------
# Weight file format: text manifest + raw float32 blob.


def save_weights(weights: MlpWeights, manifest_path: str | Path) -> None:
    """Write a key/value manifest plus a sibling ``.bin`` blob of row-major
    little-endian float32 values in declaration order (layer-norm, then per
    hidden layer weight/bias and batch-norm stats, then the head)."""
    weights.validate()
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    parts: list[np.ndarray] = []
    if weights.ln_gain is not None:
        parts.append(weights.ln_gain)
        parts.append(weights.ln_bias)
    for k in range(len(weights.layer_dims)):
        parts.append(weights.weights[k].reshape(-1))
        parts.append(weights.biases[k])
        if weights.has_batchnorm:
            assert weights.bn_mean and weights.bn_var and weights.bn_gain and weights.bn_bias
            parts.extend((weights.bn_mean[k], weights.bn_var[k],
                          weights.bn_gain[k], weights.bn_bias[k]))
    parts.append(weights.weights[-1].reshape(-1))
    parts.append(weights.biases[-1])
    blob = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])
    blob.astype("<f4").tofile(blob_path)
    lines = [
        f"input_dim={weights.input_dim}",
        "layer_dims=" + ",".join(str(d) for d in weights.layer_dims),
        f"head_dim={weights.head_dim}",
        "activations=" + ",".join(weights.activations),
        "input_layernorm=" + ("affine" if weights.ln_gain is not None else "identity"),
        "batchnorm=" + ("true" if weights.has_batchnorm else "false"),
        f"activation_layer={weights.activation_layer}",
        f"weights={blob_path.name}",
    ]
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_manifest(manifest_path: Path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for line_no, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(),
                                   start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise WeightFormatError(f"{manifest_path.name} line {line_no}: "
                                    f"expected key=value")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def load_weights(manifest_path: str | Path) -> MlpWeights:
    manifest_path = Path(manifest_path)
    entries = _parse_manifest(manifest_path)
    try:
        input_dim = int(entries["input_dim"])
        layer_dims = [int(d) for d in entries["layer_dims"].split(",") if d]
        head_dim = int(entries["head_dim"])
    except KeyError as exc:
        raise WeightFormatError(f"manifest missing required key {exc}") from exc
    raw_acts = entries.get("activations", "relu").split(",")
    if len(raw_acts) == 1 and len(layer_dims) > 1:
        raw_acts = raw_acts * len(layer_dims)
    activations = [a.strip() for a in raw_acts]
    has_layernorm = entries.get("input_layernorm", "affine") == "affine"
    has_batchnorm = entries.get("batchnorm", "false").lower() in ("true", "1", "yes")
    blob_path = manifest_path.parent / entries.get("weights",
                                                   manifest_path.with_suffix(".bin").name)
    if not blob_path.exists():
        raise WeightFormatError(f"weight blob not found: {blob_path}")
    flat = np.fromfile(blob_path, dtype="<f4").astype(np.float64)

    cursor = 0

    def take(n: int) -> np.ndarray:
        nonlocal cursor
        if cursor + n > flat.size:
            raise WeightFormatError(
                f"weight blob too short: needed {cursor + n} floats, "
                f"found {flat.size}")
        out = flat[cursor:cursor + n]
        cursor += n
        return out.copy()

    ln_gain = ln_bias = None
    if has_layernorm:
        ln_gain = take(input_dim)
        ln_bias = take(input_dim)
    dims = [input_dim, *layer_dims, head_dim]
    weights_list, biases = [], []
    bn_mean: list[np.ndarray] | None = [] if has_batchnorm else None
    bn_var: list[np.ndarray] | None = [] if has_batchnorm else None
    bn_gain: list[np.ndarray] | None = [] if has_batchnorm else None
    bn_bias: list[np.ndarray] | None = [] if has_batchnorm else None
    for k in range(len(layer_dims)):
        out_dim, in_dim = dims[k + 1], dims[k]
        weights_list.append(take(out_dim * in_dim).reshape(out_dim, in_dim))
        biases.append(take(out_dim))
        if has_batchnorm:
            assert bn_mean is not None and bn_var is not None
            assert bn_gain is not None and bn_bias is not None
            bn_mean.append(take(out_dim))
            bn_var.append(take(out_dim))
            bn_gain.append(take(out_dim))
            bn_bias.append(take(out_dim))
    weights_list.append(take(head_dim * dims[-2]).reshape(head_dim, dims[-2]))
    biases.append(take(head_dim))
    if cursor != flat.size:
        raise WeightFormatError(f"weight blob has {flat.size - cursor} trailing floats")
    model = MlpWeights(
        input_dim=input_dim, layer_dims=layer_dims, head_dim=head_dim,
        activations=activations, weights=weights_list, biases=biases,
        ln_gain=ln_gain, ln_bias=ln_bias,
        bn_mean=bn_mean, bn_var=bn_var, bn_gain=bn_gain, bn_bias=bn_bias,
        activation_layer=int(entries.get("activation_layer", "14")),
    )
    model.validate()
    return model


def load_activations(path: str | Path, input_dim: int) -> np.ndarray:
    """Read activation vectors: raw little-endian float32 (file length a
    multiple of input_dim) or one whitespace/comma separated vector per text
    line. Returns an array of shape (n_vectors, input_dim)."""
    path = Path(path)
    data = path.read_bytes()
    try:
        text = data.decode("utf-8")
        rows = []
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            values = [float(tok) for tok in line.replace(",", " ").split()]
            if len(values) != input_dim:
                raise WeightFormatError(
                    f"{path.name} line {line_no}: expected {input_dim} values, "
                    f"got {len(values)}")
            rows.append(values)
        if not rows:
            raise WeightFormatError(f"{path.name}: no activation vectors found")
        return np.asarray(rows, dtype=np.float64)
    except (UnicodeDecodeError, ValueError):
        pass
    flat = np.frombuffer(data, dtype="<f4").astype(np.float64)
    if flat.size == 0 or flat.size % input_dim != 0:
        raise WeightFormatError(
            f"{path.name}: raw float32 length {flat.size} is not a multiple "
            f"of input_dim {input_dim}")
    return flat.reshape(-1, input_dim)


# ---------------------------------------------------------------------------
# Synthetic calibrated oracle


@dataclass(frozen=True)
class SyntheticPredictorConfig:
    """Quality-controlled stand-in for a trained correctness probe.

    rho=1 reproduces the 0/1 oracle exactly; rho=0 is uniform noise; between,
    the prediction is a linear blend, so mean(p | oracle=1) = rho + (1-rho)/2.
    """

    rho: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")


def synthetic_predict(converged_correct: bool, config: SyntheticPredictorConfig,
                      rng: random.Random) -> float:
    """Blend the 0/1 oracle with uniform noise. The noise draw happens for
    every call regardless of rho, so changing rho never shifts the stream."""
    oracle = 1.0 if converged_correct else 0.0
    u = rng.random()
    p = config.rho * oracle + (1.0 - config.rho) * u
    return min(max(p, 0.0), 1.0)


def calibrate_tau(validation_predictions, pct: float) -> float:
    """Early-termination threshold as a nearest-rank percentile of validation
    predictions."""
    if len(validation_predictions) == 0:
        raise ValueError("no validation predictions supplied")
    return percentile(validation_predictions, pct)


# ---------------------------------------------------------------------------
# Difficulty prediction

# Default 5x5 confusion matrix (rows = true level, columns = predicted level)
# for the noisy-label mode. The row structure is configuration, pinned only to
# the reproducible facts: P(pred <= 3 | level 1) = 0.81,
# P(pred > 3 | level 5) = 0.81, and mean diagonal accuracy 0.42.
DEFAULT_CONFUSION = (
    (0.40, 0.25, 0.16, 0.12, 0.07),
    (0.18, 0.42, 0.20, 0.13, 0.07),
    (0.08, 0.18, 0.40, 0.22, 0.12),
    (0.04, 0.10, 0.22, 0.42, 0.22),
    (0.03, 0.06, 0.10, 0.35, 0.46),
)

DIFFICULTY_MODES = ("actual", "mlp", "noisy-label")


def validate_confusion(matrix) -> None:
    if len(matrix) != 5:
        raise ValueError("confusion matrix must have 5 rows")
    for i, row in enumerate(matrix):
        if len(row) != 5:
            raise ValueError(f"confusion row {i} must have 5 entries")
        if any(p < 0 for p in row):
            raise ValueError(f"confusion row {i} has negative entries")
        if abs(sum(row) - 1.0) > 1e-6:
            raise ValueError(f"confusion row {i} sums to {sum(row)}, expected 1")


def sample_confused_level(true_level: int, matrix, rng: random.Random) -> int:
    """Sample a predicted difficulty from the confusion-matrix row of the true
    level."""
    row = matrix[true_level - 1]
    u = rng.random()
    acc = 0.0
    for level, p in enumerate(row, start=1):
        acc += p
        if u < acc:
            return level
    return 5


def predict_difficulty(mode: str, *, actual_label: int | None = None,
                       activation=None, weights: MlpWeights | None = None,
                       confusion=None, rng: random.Random | None = None) -> int:
    """Difficulty label from one of three sources: the trace label
    (``actual``), the classifier head's argmax (``mlp``), or a label sampled
    through a confusion matrix (``noisy-label``)."""
    if mode == "actual":
        if actual_label is None:
            raise ValueError("actual mode requires a trace difficulty label")
        return actual_label
    if mode == "mlp":
        if activation is None or weights is None:
            raise ValueError("mlp mode requires an activation vector and weights")
        _, probs = mlp_forward(weights, activation)
        return int(np.argmax(probs)) + 1
    if mode == "noisy-label":
        if actual_label is None:
            raise ValueError("noisy-label mode requires a trace difficulty label")
        if rng is None:
            raise ValueError("noisy-label mode requires an rng")
        matrix = DEFAULT_CONFUSION if confusion is None else confusion
        validate_confusion(matrix)
        return sample_confused_level(actual_label, matrix, rng)
    raise ValueError(f"unknown difficulty mode {mode!r}")
