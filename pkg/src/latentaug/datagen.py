"""Synthetic corpora for the desk-scale experiments.

Multi-domain classification: each class is a Gaussian cloud around a
prototype on a sphere, and each domain sees those clouds through its own
linear distortion (block rotation, scale, translation) plus observation
noise.  Holding out one domain gives a genuine distribution shift whose
size is controlled by the rotation angle.

Long-tailed classification: one domain, exponentially decaying class
counts with a configurable head/tail imbalance ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ReportIOError, ValidationError
from .rng import StreamHub

DEFAULT_ROTATION_STEP = math.pi / 8
DEFAULT_NOISE_STD = 0.25
DEFAULT_CLASS_JITTER = 1.0
DEFAULT_PROTOTYPE_RADIUS = 3.0
DEFAULT_MIN_ANGLE = 0.5  # radians between any two class prototypes

_FLOAT_FMT = "{:.17g}"


@dataclass
class DomainSpec:
    """One domain's view of the shared class geometry."""

    domain_id: int
    rotation_angle: float
    scale: float = 1.0
    translation: np.ndarray | None = None
    noise_std: float = DEFAULT_NOISE_STD

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigurationError(f"domain scale must be > 0, got {self.scale}")
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")


@dataclass
class SyntheticDataset:
    features: np.ndarray
    classes: np.ndarray
    domains: np.ndarray
    n_classes: int
    n_domains: int
    input_dim: int
    seed: int
    prototypes: np.ndarray | None = None
    class_jitter_std: float = 0.0
    domain_specs: list[DomainSpec] = field(default_factory=list)

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx: np.ndarray) -> "SyntheticDataset":
        return SyntheticDataset(
            features=self.features[idx],
            classes=self.classes[idx],
            domains=self.domains[idx],
            n_classes=self.n_classes,
            n_domains=self.n_domains,
            input_dim=self.input_dim,
            seed=self.seed,
            prototypes=self.prototypes,
            class_jitter_std=self.class_jitter_std,
            domain_specs=self.domain_specs,
        )


@dataclass
class LongTailConfig:
    n_classes: int = 10
    head_count: int = 500
    imbalance_ratio: float = 100.0
    class_jitter_std: float = DEFAULT_CLASS_JITTER
    noise_std: float = DEFAULT_NOISE_STD

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigurationError(f"long-tail needs >= 2 classes, got {self.n_classes}")
        if self.imbalance_ratio < 1:
            raise ConfigurationError(f"imbalance_ratio must be >= 1, got {self.imbalance_ratio}")
        if self.head_count < self.imbalance_ratio:
            raise ConfigurationError(
                f"head_count {self.head_count} < imbalance_ratio {self.imbalance_ratio}: "
                "the tail class would round to zero samples"
            )

    def class_counts(self) -> np.ndarray:
        c = self.n_classes
        exponents = -np.arange(c) / (c - 1)
        counts = np.rint(self.head_count * self.imbalance_ratio**exponents).astype(np.int64)
        return counts


def longtail_groups(n_classes: int) -> dict[str, np.ndarray]:
    """Class-index thirds, head first: boundaries at floor(C/3), floor(2C/3)."""
    a, b = n_classes // 3, 2 * n_classes // 3
    return {
        "many": np.arange(0, a),
        "medium": np.arange(a, b),
        "few": np.arange(b, n_classes),
    }


def default_domain_specs(
    n_domains: int,
    rotation_step: float = DEFAULT_ROTATION_STEP,
    noise_std: float = DEFAULT_NOISE_STD,
) -> list[DomainSpec]:
    return [
        DomainSpec(domain_id=j, rotation_angle=j * rotation_step, noise_std=noise_std)
        for j in range(n_domains)
    ]


def rotation_matrix(input_dim: int, angle: float) -> np.ndarray:
    """Block-diagonal planar rotation: every consecutive coordinate pair turns
    by the same angle (a leftover odd coordinate stays fixed)."""
    r = np.eye(input_dim)
    c, s = math.cos(angle), math.sin(angle)
    for i in range(0, input_dim - 1, 2):
        r[i, i] = c
        r[i, i + 1] = -s
        r[i + 1, i] = s
        r[i + 1, i + 1] = c
    return r


def sample_prototypes(
    n_classes: int,
    input_dim: int,
    rng: np.random.Generator,
    radius: float = DEFAULT_PROTOTYPE_RADIUS,
    min_angle: float = DEFAULT_MIN_ANGLE,
    max_tries: int = 2000,
) -> np.ndarray:
    """Class anchors on the sphere with enforced pairwise angular separation."""
    if radius <= 0:
        raise ConfigurationError(f"prototype radius must be > 0, got {radius}")
    cos_limit = math.cos(min_angle)
    accepted: list[np.ndarray] = []
    for _ in range(max_tries):
        v = rng.standard_normal(input_dim)
        v /= np.linalg.norm(v)
        if all(float(v @ u) < cos_limit for u in accepted):
            accepted.append(v)
            if len(accepted) == n_classes:
                return radius * np.stack(accepted)
    raise ConfigurationError(
        f"could not place {n_classes} prototypes in dimension {input_dim} "
        f"with min angle {min_angle:.3f} after {max_tries} tries"
    )


def apply_domain(spec: DomainSpec, points: np.ndarray) -> np.ndarray:
    r = rotation_matrix(points.shape[1], spec.rotation_angle)
    out = spec.scale * (points @ r.T)
    if spec.translation is not None:
        out = out + spec.translation
    return out


def generate_multidomain(
    hub: StreamHub,
    n_classes: int = 7,
    n_domains: int = 4,
    per_cell: int = 60,
    input_dim: int = 32,
    domain_specs: list[DomainSpec] | None = None,
    class_jitter_std: float = DEFAULT_CLASS_JITTER,
    prototype_radius: float = DEFAULT_PROTOTYPE_RADIUS,
    min_angle: float = DEFAULT_MIN_ANGLE,
) -> SyntheticDataset:
    """per_cell samples for every (class, domain) cell:

        x = domain(prototype_c + within-class jitter) + observation noise
    """
    if n_classes < 2 or n_domains < 2:
        raise ConfigurationError(
            f"need >= 2 classes and >= 2 domains, got {n_classes}/{n_domains}"
        )
    if per_cell < 1:
        raise ConfigurationError(f"per_cell must be >= 1, got {per_cell}")
    specs = domain_specs if domain_specs is not None else default_domain_specs(n_domains)
    if len(specs) != n_domains:
        raise ConfigurationError(f"{len(specs)} domain specs for {n_domains} domains")
    protos = sample_prototypes(
        n_classes, input_dim, hub.stream("prototypes"),
        radius=prototype_radius, min_angle=min_angle,
    )
    feats, classes, domains = [], [], []
    for spec in specs:
        for c in range(n_classes):
            cell = hub.stream("cell", spec.domain_id, c)
            base = protos[c] + cell.standard_normal((per_cell, input_dim)) * class_jitter_std
            x = apply_domain(spec, base)
            if spec.noise_std > 0:
                x = x + cell.standard_normal((per_cell, input_dim)) * spec.noise_std
            feats.append(x)
            classes.append(np.full(per_cell, c, dtype=np.int64))
            domains.append(np.full(per_cell, spec.domain_id, dtype=np.int64))
    seed = hub.key_path[0] if isinstance(hub.key_path[0], int) else 0
    return SyntheticDataset(
        features=np.concatenate(feats),
        classes=np.concatenate(classes),
        domains=np.concatenate(domains),
        n_classes=n_classes,
        n_domains=n_domains,
        input_dim=input_dim,
        seed=int(seed),
        prototypes=protos,
        class_jitter_std=class_jitter_std,
        domain_specs=list(specs),
    )


def generate_longtail(
    cfg: LongTailConfig, input_dim: int, hub: StreamHub
) -> SyntheticDataset:
    """Single-domain corpus with exponentially decaying class counts:
    count(c) = round(head_count * ratio^(-c/(C-1)))."""
    protos = sample_prototypes(cfg.n_classes, input_dim, hub.stream("prototypes"))
    counts = cfg.class_counts()
    feats, classes = [], []
    for c, n in enumerate(counts):
        cell = hub.stream("cell", 0, c)
        x = protos[c] + cell.standard_normal((int(n), input_dim)) * cfg.class_jitter_std
        if cfg.noise_std > 0:
            x = x + cell.standard_normal((int(n), input_dim)) * cfg.noise_std
        feats.append(x)
        classes.append(np.full(int(n), c, dtype=np.int64))
    seed = hub.key_path[0] if isinstance(hub.key_path[0], int) else 0
    n_total = int(counts.sum())
    return SyntheticDataset(
        features=np.concatenate(feats),
        classes=np.concatenate(classes),
        domains=np.zeros(n_total, dtype=np.int64),
        n_classes=cfg.n_classes,
        n_domains=1,
        input_dim=input_dim,
        seed=int(seed),
        prototypes=protos,
        class_jitter_std=cfg.class_jitter_std,
    )


def generate_balanced_eval(
    ds: SyntheticDataset, per_class: int, hub: StreamHub
) -> SyntheticDataset:
    """Fresh balanced draws from the same prototypes and noise model, for
    evaluating models trained on an imbalanced corpus."""
    if ds.prototypes is None:
        raise ValidationError("balanced eval needs a dataset with stored prototypes")
    noise_std = ds.domain_specs[0].noise_std if ds.domain_specs else DEFAULT_NOISE_STD
    feats, classes = [], []
    for c in range(ds.n_classes):
        cell = hub.stream("eval_cell", c)
        x = ds.prototypes[c] + cell.standard_normal((per_class, ds.input_dim)) * ds.class_jitter_std
        if noise_std > 0:
            x = x + cell.standard_normal((per_class, ds.input_dim)) * noise_std
        feats.append(x)
        classes.append(np.full(per_class, c, dtype=np.int64))
    n_total = per_class * ds.n_classes
    return SyntheticDataset(
        features=np.concatenate(feats),
        classes=np.concatenate(classes),
        domains=np.zeros(n_total, dtype=np.int64),
        n_classes=ds.n_classes,
        n_domains=1,
        input_dim=ds.input_dim,
        seed=ds.seed,
        prototypes=ds.prototypes,
        class_jitter_std=ds.class_jitter_std,
    )


# ---------------------------------------------------------------------------
# leave-one-domain-out split


@dataclass
class Split:
    train: SyntheticDataset
    val: SyntheticDataset
    test: SyntheticDataset


def leave_one_domain_out_split(
    ds: SyntheticDataset,
    held_out_domain: int,
    rng: np.random.Generator,
    train_fraction: float = 0.8,
) -> Split:
    """Test = the entire held-out domain.  The remaining samples split
    train/val per (class, domain) cell, so both sides stay stratified."""
    if held_out_domain not in set(np.unique(ds.domains)):
        raise ConfigurationError(
            f"held-out domain {held_out_domain} not present in dataset domains"
        )
    if not (0.0 < train_fraction < 1.0):
        raise ConfigurationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    test_idx = np.flatnonzero(ds.domains == held_out_domain)
    train_parts, val_parts = [], []
    for dom in sorted(set(np.unique(ds.domains)) - {held_out_domain}):
        for c in range(ds.n_classes):
            cell = np.flatnonzero((ds.domains == dom) & (ds.classes == c))
            if cell.size == 0:
                continue
            perm = rng.permutation(cell.size)
            n_train = int(math.floor(train_fraction * cell.size + 0.5))
            train_parts.append(cell[perm[:n_train]])
            val_parts.append(cell[perm[n_train:]])
    train_idx = np.concatenate(train_parts) if train_parts else np.array([], dtype=np.int64)
    val_idx = np.concatenate(val_parts) if val_parts else np.array([], dtype=np.int64)
    for name, idx in (("train", train_idx), ("val", val_idx), ("test", test_idx)):
        if idx.size == 0:
            raise ValidationError(f"leave-one-domain-out produced an empty {name} split")
    return Split(train=ds.subset(train_idx), val=ds.subset(val_idx), test=ds.subset(test_idx))


# ---------------------------------------------------------------------------
# dataset files: 'C D N input_dim seed' header, then one sample per line


def save_dataset(path, ds: SyntheticDataset) -> None:
    lines = [f"{ds.n_classes} {ds.n_domains} {len(ds)} {ds.input_dim} {ds.seed}"]
    for c, dom, row in zip(ds.classes, ds.domains, ds.features):
        lines.append(
            f"{c} {dom} " + " ".join(_FLOAT_FMT.format(v) for v in row)
        )
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise ReportIOError(f"cannot write dataset {path}: {exc}") from exc


def load_dataset(path) -> SyntheticDataset:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ReportIOError(f"cannot read dataset {path}: {exc}") from exc
    if not lines:
        raise ValidationError(f"dataset {path}: empty file")
    header = lines[0].split()
    if len(header) != 5:
        raise ValidationError(f"dataset {path}: header must be 'C D N input_dim seed'")
    n_classes, n_domains, n, input_dim, seed = (int(v) for v in header)
    if len(lines) != 1 + n:
        raise ValidationError(f"dataset {path}: expected {n} rows, found {len(lines) - 1}")
    classes = np.empty(n, dtype=np.int64)
    domains = np.empty(n, dtype=np.int64)
    feats = np.empty((n, input_dim))
    for i, ln in enumerate(lines[1:]):
        parts = ln.split()
        if len(parts) != 2 + input_dim:
            raise ValidationError(f"dataset {path}: row {i} has {len(parts)} fields")
        classes[i] = int(parts[0])
        domains[i] = int(parts[1])
        feats[i] = [float(v) for v in parts[2:]]
    return SyntheticDataset(
        features=feats, classes=classes, domains=domains,
        n_classes=n_classes, n_domains=n_domains, input_dim=input_dim, seed=seed,
    )
