"""Batch-level latent degradation and cross-attention restoration.

The training-time mechanism:

* degrade: push each latent toward the rest of the batch, either through a
  one-layer self-attention transformer (SA), a random-subset pooling mixer
  (POOL), or plain additive noise (GAUSSIAN, the sample-agnostic baseline),
* restore: a one-layer cross-attention transformer whose queries come from
  the degraded batch and whose keys/values come from the original latents,
* supervise all three views with one shared linear head: the clean and
  restored views against the true labels, the degraded view against the
  batch's empirical label mixture.

Everything here is train-time only; the inference path never touches it.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .attention import (
    AttentionWeights,
    FeedForward,
    LayerNormParams,
    NormPlacement,
    cross_attention,
    init_attention_weights,
    init_feed_forward,
    init_layer_norm,
    pool_mix,
    require_batch,
    self_attention,
    transformer_layer,
)
from .errors import ConfigurationError, ReportIOError, ValidationError
from .model import (
    Classifier,
    Encoder,
    classify,
    default_encoder_widths,
    encode,
    init_classifier,
    init_encoder,
)
from .rng import StreamHub
from .tensor import (
    ParameterRegistry,
    Tape,
    Tensor,
    add,
    cross_entropy_soft,
    dropout,
    sgd_step,
)

ATTENTION_HEADS = 4


class OperatorKind(Enum):
    SA = "sa"
    POOL = "pool"
    GAUSSIAN = "gaussian"


class Variant(Enum):
    """Which loss terms train the model."""

    ERM = "erm"
    D_ONLY = "d_only"
    R_ONLY = "r_only"
    D_PLUS_R = "d_plus_r"

    @property
    def uses_degraded_term(self) -> bool:
        return self in (Variant.D_ONLY, Variant.D_PLUS_R)

    @property
    def uses_restored_term(self) -> bool:
        return self in (Variant.R_ONLY, Variant.D_PLUS_R)

    @property
    def uses_operators(self) -> bool:
        return self is not Variant.ERM


def head_dim_for(kind: OperatorKind, d: int) -> int:
    # SA uses d/4 per head; POOL's restorer runs much narrower at d/32
    return max(1, d // 4) if kind is OperatorKind.SA else max(1, d // 32)


def ff_dim_for(kind: OperatorKind, d: int) -> int:
    return max(1, d // 4) if kind is OperatorKind.SA else max(1, d // 8)


@dataclass
class DegradationOperator:
    kind: OperatorKind
    dropout_rate: float
    subset_fraction: float
    noise_scale: float
    placement: NormPlacement
    attn: AttentionWeights | None
    ff: FeedForward | None
    ln1: LayerNormParams | None
    ln2: LayerNormParams | None
    pre_mixes_raw_input: bool = False

    def params(self):
        if self.kind is OperatorKind.GAUSSIAN:
            return []
        out = [] if self.attn is None else self.attn.params()
        return out + self.ff.params() + self.ln1.params() + self.ln2.params()


@dataclass
class RestorationOperator:
    kind: OperatorKind
    dropout_rate: float
    placement: NormPlacement
    attn: AttentionWeights
    ff: FeedForward
    ln1: LayerNormParams
    ln2: LayerNormParams
    pre_mixes_raw_input: bool = False

    def params(self):
        return self.attn.params() + self.ff.params() + self.ln1.params() + self.ln2.params()


def init_degrader(
    kind: OperatorKind,
    d: int,
    placement: NormPlacement,
    registry: ParameterRegistry,
    rng: np.random.Generator,
    dropout_rate: float = 0.5,
    subset_fraction: float = 0.5,
    noise_scale: float = 1.0,
    pre_mixes_raw_input: bool = False,
) -> DegradationOperator:
    if kind is OperatorKind.GAUSSIAN:
        return DegradationOperator(
            kind, dropout_rate, subset_fraction, noise_scale, placement,
            attn=None, ff=None, ln1=None, ln2=None,
        )
    attn = None
    if kind is OperatorKind.SA:
        attn = init_attention_weights(
            "degrade.attn", d, head_dim_for(kind, d), ATTENTION_HEADS, registry, rng
        )
    ff = init_feed_forward("degrade.ff", d, ff_dim_for(kind, d), registry, rng)
    ln1 = init_layer_norm("degrade.ln1", d, registry)
    ln2 = init_layer_norm("degrade.ln2", d, registry)
    return DegradationOperator(
        kind, dropout_rate, subset_fraction, noise_scale, placement,
        attn=attn, ff=ff, ln1=ln1, ln2=ln2, pre_mixes_raw_input=pre_mixes_raw_input,
    )


def init_restorer(
    kind: OperatorKind,
    d: int,
    placement: NormPlacement,
    registry: ParameterRegistry,
    rng: np.random.Generator,
    dropout_rate: float = 0.5,
    pre_mixes_raw_input: bool = False,
) -> RestorationOperator:
    # the restorer is always cross-attention; only its widths follow the kind
    # (the GAUSSIAN baseline borrows the SA widths since it has no mixer of its own)
    width_kind = OperatorKind.SA if kind is OperatorKind.GAUSSIAN else kind
    attn = init_attention_weights(
        "restore.attn", d, head_dim_for(width_kind, d), ATTENTION_HEADS, registry, rng
    )
    ff = init_feed_forward("restore.ff", d, ff_dim_for(width_kind, d), registry, rng)
    ln1 = init_layer_norm("restore.ln1", d, registry)
    ln2 = init_layer_norm("restore.ln2", d, registry)
    return RestorationOperator(
        kind, dropout_rate, placement, attn, ff, ln1, ln2,
        pre_mixes_raw_input=pre_mixes_raw_input,
    )


def degrade(
    op: DegradationOperator, z: Tensor, training: bool, streams: StreamHub
) -> Tensor:
    """One degraded view of the latent batch.

    SA/POOL need at least two rows — their whole point is mixing across the
    batch.  GAUSSIAN is z + noise_scale * eps and accepts any batch.
    """
    if op.kind is OperatorKind.GAUSSIAN:
        eps = streams.stream("noise").standard_normal(z.data.shape) * op.noise_scale
        return add(z, Tensor(eps))
    require_batch(z, 2, f"{op.kind.value} degradation")
    if op.kind is OperatorKind.SA:
        def mixer(t):
            return self_attention(t, op.attn, op.dropout_rate, training, streams.stream("mask"))
    else:
        def mixer(t):
            mixed, _ = pool_mix(t, op.subset_fraction, streams.stream("subset"))
            return dropout(mixed, op.dropout_rate, training, streams.stream("mask"))
    return transformer_layer(
        z, mixer, op.ff, op.placement, op.ln1, op.ln2, op.pre_mixes_raw_input
    )


def restore(
    op: RestorationOperator,
    z_degraded: Tensor,
    z_original: Tensor,
    training: bool,
    streams: StreamHub,
) -> Tensor:
    """Rebuild sample-specific latents: queries from the degraded batch,
    keys/values from the originals."""
    def mixer(t):
        return cross_attention(
            t, z_original, op.attn, op.dropout_rate, training, streams.stream("mask")
        )

    return transformer_layer(
        z_degraded, mixer, op.ff, op.placement, op.ln1, op.ln2, op.pre_mixes_raw_input
    )


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class ModelBundle:
    """Everything trained together.  With ``share_classifier`` (the default)
    a single linear head scores all three latent views; otherwise the
    degraded/restored views get their own auxiliary head and the primary
    head keeps the inference path to itself."""

    encoder: Encoder
    classifier: Classifier
    aux_classifier: Classifier | None
    degrader: DegradationOperator
    restorer: RestorationOperator
    share_classifier: bool
    registry: ParameterRegistry

    def augmented_view_head(self) -> Classifier:
        return self.classifier if self.share_classifier else self.aux_classifier

    def trainable_registry(self, variant: Variant) -> ParameterRegistry:
        reg = ParameterRegistry()
        reg.extend(self.encoder.params())
        reg.extend(self.classifier.params())
        if variant.uses_operators:
            if not self.share_classifier:
                reg.extend(self.aux_classifier.params())
            reg.extend(self.degrader.params())
        if variant.uses_restored_term:
            reg.extend(self.restorer.params())
        return reg


def build_bundle(
    input_dim: int,
    n_classes: int,
    d: int,
    hub: StreamHub,
    kind: OperatorKind = OperatorKind.SA,
    placement: NormPlacement = NormPlacement.POST,
    encoder_widths: list[int] | None = None,
    dropout_rate: float = 0.5,
    subset_fraction: float = 0.5,
    noise_scale: float = 1.0,
    share_classifier: bool = True,
    pre_mixes_raw_input: bool = False,
) -> ModelBundle:
    widths = encoder_widths if encoder_widths is not None else default_encoder_widths(input_dim, d)
    if widths[0] != input_dim or widths[-1] != d:
        raise ConfigurationError(
            f"encoder widths {widths} must run from input_dim {input_dim} to latent width {d}"
        )
    registry = ParameterRegistry()
    encoder = init_encoder("encoder", widths, registry, hub.stream("init", "encoder"))
    classifier = init_classifier("classifier", d, n_classes, registry, hub.stream("init", "classifier"))
    aux = None
    if not share_classifier:
        aux = init_classifier("aux_classifier", d, n_classes, registry, hub.stream("init", "aux"))
    degrader = init_degrader(
        kind, d, placement, registry, hub.stream("init", "degrade"),
        dropout_rate=dropout_rate, subset_fraction=subset_fraction,
        noise_scale=noise_scale, pre_mixes_raw_input=pre_mixes_raw_input,
    )
    restorer = init_restorer(
        kind, d, placement, registry, hub.stream("init", "restore"),
        dropout_rate=dropout_rate, pre_mixes_raw_input=pre_mixes_raw_input,
    )
    return ModelBundle(
        encoder=encoder,
        classifier=classifier,
        aux_classifier=aux,
        degrader=degrader,
        restorer=restorer,
        share_classifier=share_classifier,
        registry=registry,
    )


# ---------------------------------------------------------------------------
# soft labels and the composite loss


def build_soft_label(y_onehot: np.ndarray) -> np.ndarray:
    """Empirical class mixture of a one-hot label batch: entry c is the
    fraction of batch rows labeled c."""
    y = np.asarray(y_onehot, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValidationError(f"soft label needs a 2-D one-hot batch, got shape {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)) or not np.all(y.sum(axis=1) == 1.0):
        raise ValidationError("soft label input rows must be exactly one-hot")
    return y.mean(axis=0)


@dataclass(frozen=True)
class LossBreakdown:
    original: float
    degraded: float
    restored: float
    total: float
    used_degraded: bool
    used_restored: bool


@dataclass
class LossOutput:
    """Loss tensors (for backward) plus the float breakdown and latent views."""

    total: Tensor
    breakdown: LossBreakdown
    z: Tensor
    z_degraded: Tensor | None
    z_restored: Tensor | None
    term_original: Tensor | None = None
    term_degraded: Tensor | None = None
    term_restored: Tensor | None = None


def augmentation_loss(
    bundle: ModelBundle,
    x: Tensor,
    y_onehot: np.ndarray,
    variant: Variant,
    streams: StreamHub,
    training: bool = True,
    stop_grad_into_encoder_for_l2: bool = False,
) -> LossOutput:
    """The composite objective.  Term by term:

    * original:  CE(head(z), y)
    * degraded:  CE(head(D(z)), soft_label(y))  — every row against the
      same batch mixture, so confidently class-specific predictions on
      degraded latents are penalized,
    * restored:  CE(head(R(D(z), z)), y)

    Variants drop terms (and their operators) from the graph; dropped terms
    report 0 with their ``used_*`` flag off.  ``stop_grad_into_encoder_for_l2``
    recomputes the degraded view from a detached copy of z for the degraded
    term only, replaying the identical dropout/subset draws.
    """
    y = np.asarray(y_onehot, dtype=np.float64)
    if y.shape[0] != x.data.shape[0]:
        raise ValidationError(f"labels rows {y.shape[0]} != batch rows {x.data.shape[0]}")
    z = encode(bundle.encoder, x)
    l1 = cross_entropy_soft(classify(bundle.classifier, z), Tensor(y))

    z_d = None
    z_r = None
    l2 = None
    l3 = None
    if variant.uses_operators:
        degrade_streams = streams.child("degrade")
        z_d = degrade(bundle.degrader, z, training, degrade_streams)
        head = bundle.augmented_view_head()
        if variant.uses_degraded_term:
            soft = build_soft_label(y)
            target = Tensor(np.tile(soft, (y.shape[0], 1)))
            z_for_l2 = z_d
            if stop_grad_into_encoder_for_l2:
                # identical stream labels -> identical masks and subsets
                z_for_l2 = degrade(bundle.degrader, z.detach(), training, streams.child("degrade"))
            l2 = cross_entropy_soft(classify(head, z_for_l2), target)
        if variant.uses_restored_term:
            z_r = restore(bundle.restorer, z_d, z, training, streams.child("restore"))
            l3 = cross_entropy_soft(classify(head, z_r), Tensor(y))

    total = l1
    if l2 is not None:
        total = add(total, l2)
    if l3 is not None:
        total = add(total, l3)

    breakdown = LossBreakdown(
        original=float(l1.data),
        degraded=float(l2.data) if l2 is not None else 0.0,
        restored=float(l3.data) if l3 is not None else 0.0,
        total=float(total.data),
        used_degraded=l2 is not None,
        used_restored=l3 is not None,
    )
    return LossOutput(
        total=total, breakdown=breakdown, z=z, z_degraded=z_d, z_restored=z_r,
        term_original=l1, term_degraded=l2, term_restored=l3,
    )


def effective_lr(base_lr: float, lr_adjust: float, variant: Variant) -> float:
    """The three-term objective triples the raw loss scale, so its runs use a
    fixed fractional adjustment (default one half) of the base learning rate."""
    return base_lr * lr_adjust if variant is Variant.D_PLUS_R else base_lr


def training_step(
    bundle: ModelBundle,
    trainable: ParameterRegistry,
    x: np.ndarray,
    y_onehot: np.ndarray,
    variant: Variant,
    streams: StreamHub,
    base_lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    lr_adjust: float = 0.5,
    stop_grad_into_encoder_for_l2: bool = False,
) -> LossBreakdown:
    """One optimization step: forward the variant's loss, backprop through
    all active modules jointly, apply momentum SGD."""
    with Tape() as tape:
        out = augmentation_loss(
            bundle, Tensor(x), y_onehot, variant, streams,
            training=True,
            stop_grad_into_encoder_for_l2=stop_grad_into_encoder_for_l2,
        )
    out.total.assert_finite("training loss")
    tape.backward(out.total)
    sgd_step(trainable, effective_lr(base_lr, lr_adjust, variant), momentum, weight_decay)
    return out.breakdown


# ---------------------------------------------------------------------------
# latent dump files: a plain-text interchange format for latent triples


def format_float(v: float) -> str:
    return f"{v:.17g}"


@dataclass
class LatentDump:
    z: np.ndarray
    z_degraded: np.ndarray
    z_restored: np.ndarray
    classes: np.ndarray
    domains: np.ndarray
    seed: int
    step: int


def write_latent_dump(
    path,
    z: np.ndarray,
    z_degraded: np.ndarray,
    z_restored: np.ndarray,
    classes: np.ndarray,
    domains: np.ndarray,
    n_classes: int,
    seed: int,
    step: int,
) -> None:
    b, d = z.shape
    if z_degraded.shape != (b, d) or z_restored.shape != (b, d):
        raise ValidationError(
            f"latent groups disagree: {z.shape} / {z_degraded.shape} / {z_restored.shape}"
        )
    lines = [f"{b} {d} {n_classes} {seed} {step}"]
    for group in (z, z_degraded, z_restored):
        for row in group:
            lines.append(" ".join(format_float(v) for v in row))
    for c, dom in zip(classes, domains):
        lines.append(f"{format_float(float(c))} {format_float(float(dom))}")
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise ReportIOError(f"cannot write latent dump {path}: {exc}") from exc


def read_latent_dump(path) -> LatentDump:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ReportIOError(f"cannot read latent dump {path}: {exc}") from exc
    if not lines:
        raise ValidationError(f"latent dump {path}: empty file")
    header = lines[0].split()
    if len(header) != 5:
        raise ValidationError(f"latent dump {path}: header must be 'B d C seed step'")
    b, d, c, seed, step = (int(v) for v in header)
    if len(lines) != 1 + 4 * b:
        raise ValidationError(
            f"latent dump {path}: expected {1 + 4 * b} lines for B={b}, got {len(lines)}"
        )

    def block(start, width):
        rows = [np.array([float(v) for v in ln.split()]) for ln in lines[start : start + b]]
        arr = np.stack(rows)
        if arr.shape != (b, width):
            raise ValidationError(f"latent dump {path}: block at line {start} has shape {arr.shape}")
        return arr

    z = block(1, d)
    z_d = block(1 + b, d)
    z_r = block(1 + 2 * b, d)
    labels = block(1 + 3 * b, 2)
    return LatentDump(
        z=z, z_degraded=z_d, z_restored=z_r,
        classes=labels[:, 0].astype(np.int64), domains=labels[:, 1].astype(np.int64),
        seed=seed, step=step,
    )
