"""Encoder/classifier pair and checkpoint serialization.

The inference path is deliberately tiny: encode, apply the linear head,
argmax.  Everything the augmentation machinery does during training stays
out of this path, which is what makes the "operators attached vs bypassed"
equality check meaningful.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ReportIOError, ShapeMismatchError, ValidationError
from .tensor import Parameter, ParameterRegistry, Tensor, add, gelu, matmul

CHECKPOINT_MAGIC = "latentaug-checkpoint"


@dataclass
class Encoder:
    """MLP mapping raw features to latents; GELU between layers, linear output."""

    weights: list[Parameter]
    biases: list[Parameter]
    widths: list[int]

    def params(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


@dataclass
class Classifier:
    """Single linear head from latent width d to C logits."""

    W: Parameter
    b: Parameter

    def params(self) -> list[Parameter]:
        return [self.W, self.b]


def default_encoder_widths(input_dim: int, d: int = 64) -> list[int]:
    return [input_dim, 256, 128, d]


def init_encoder(
    prefix: str, widths: list[int], registry: ParameterRegistry, rng: np.random.Generator
) -> Encoder:
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ConfigurationError(f"encoder widths must be >= 1 with >= 2 entries, got {widths}")
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(
            registry.add(
                Parameter(f"{prefix}.W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            )
        )
        biases.append(registry.add(Parameter(f"{prefix}.b{i}", np.zeros(fan_out))))
    return Encoder(weights=weights, biases=biases, widths=list(widths))


def init_classifier(
    prefix: str, d: int, n_classes: int, registry: ParameterRegistry, rng: np.random.Generator
) -> Classifier:
    if n_classes < 2:
        raise ConfigurationError(f"classifier needs >= 2 classes, got {n_classes}")
    bound = 1.0 / math.sqrt(d)
    return Classifier(
        W=registry.add(Parameter(f"{prefix}.W", rng.uniform(-bound, bound, size=(d, n_classes)))),
        b=registry.add(Parameter(f"{prefix}.b", np.zeros(n_classes))),
    )


def encode(encoder: Encoder, x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.data.shape[1] != encoder.widths[0]:
        raise ShapeMismatchError(
            f"encoder expects [B, {encoder.widths[0]}], got {x.data.shape}"
        )
    h = x
    last = len(encoder.weights) - 1
    for i, (w, b) in enumerate(zip(encoder.weights, encoder.biases)):
        h = add(matmul(h, w), b)
        if i != last:
            h = gelu(h)
    return h


def classify(classifier: Classifier, z: Tensor) -> Tensor:
    return add(matmul(z, classifier.W), classifier.b)


def inference_forward(bundle, x: Tensor) -> np.ndarray:
    """Predicted class per row: argmax of the clean-path logits, lowest index
    winning ties.  Touches only the encoder and the (primary) classifier."""
    logits = classify(bundle.classifier, encode(bundle.encoder, x))
    return np.argmax(logits.data, axis=1)


# ---------------------------------------------------------------------------
# checkpoints: one JSON manifest line, then raw little-endian float64 blocks
# in manifest order.  Saving what was loaded reproduces the file byte-exactly.


def save_checkpoint(path, registry: ParameterRegistry) -> None:
    manifest = {
        "format": CHECKPOINT_MAGIC,
        "dtype": "<f8",
        "params": [{"name": p.name, "shape": list(p.data.shape)} for p in registry],
    }
    try:
        with open(path, "wb") as fh:
            fh.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode() + b"\n")
            for p in registry:
                fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    except OSError as exc:
        raise ReportIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, registry: ParameterRegistry) -> None:
    """Restore parameter values in place; names and shapes must match exactly."""
    try:
        with open(path, "rb") as fh:
            header = fh.readline()
            blob = fh.read()
    except OSError as exc:
        raise ReportIOError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        manifest = json.loads(header)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"checkpoint {path}: malformed manifest") from exc
    if manifest.get("format") != CHECKPOINT_MAGIC or manifest.get("dtype") != "<f8":
        raise ValidationError(f"checkpoint {path}: unrecognized format header")
    entries = manifest.get("params", [])
    expected = [(p.name, list(p.data.shape)) for p in registry]
    found = [(e.get("name"), list(e.get("shape", []))) for e in entries]
    if expected != found:
        raise ValidationError(
            f"checkpoint {path}: manifest does not match the registry "
            f"(expected {len(expected)} params, found {len(found)})"
        )
    offset = 0
    for p in registry:
        nbytes = p.data.size * 8
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ValidationError(f"checkpoint {path}: truncated data for {p.name!r}")
        p.data[...] = np.frombuffer(chunk, dtype="<f8").reshape(p.data.shape)
        offset += nbytes
    if offset != len(blob):
        raise ValidationError(f"checkpoint {path}: {len(blob) - offset} trailing bytes")
