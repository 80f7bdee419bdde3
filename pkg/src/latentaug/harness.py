"""Experiment orchestration: configs, training runs, grids, sweeps, reports.

Everything here is deterministic given (config, seed): every stochastic
site draws from a stream whose key is derived from the run seed plus a
fixed site label, so repeating a run — or running grid cells in any order
or in parallel — reproduces each report byte for byte (wall_time aside).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .datagen import (
    DEFAULT_CLASS_JITTER,
    DEFAULT_NOISE_STD,
    DEFAULT_ROTATION_STEP,
    LongTailConfig,
    SyntheticDataset,
    default_domain_specs,
    generate_balanced_eval,
    generate_longtail,
    generate_multidomain,
    leave_one_domain_out_split,
    longtail_groups,
)
from .degrade_restore import (
    ModelBundle,
    OperatorKind,
    Variant,
    build_bundle,
    degrade,
    restore,
    training_step,
    write_latent_dump,
)
from .attention import NormPlacement
from .errors import ConfigurationError, ReportIOError
from .metrics import accuracy, accuracy_suite, alignment, uniformity
from .model import encode, inference_forward
from .rng import StreamHub
from .tensor import Tensor

FLOAT_FMT = "{:.17g}"

CSV_COLUMNS = [
    "variant", "kind", "held_out", "seed", "test_acc", "clean_acc",
    "degraded_acc", "restored_acc", "align_test", "uniform_test",
]

SWEEP_SIZES = [4, 8, 16, 32, 64, 100]

GRID_SEEDS = 5


class Task(Enum):
    DG = "dg"
    LONGTAIL = "longtail"


@dataclass
class ExperimentConfig:
    """Flat bag of every knob a run can turn.  The config file format is one
    `key=value` per line with these field names; unknown keys are rejected."""

    task: Task = Task.DG
    seed: int = 0
    # data
    n_classes: int = 7
    n_domains: int = 4
    per_cell: int = 40
    input_dim: int = 32
    rotation_step: float = DEFAULT_ROTATION_STEP
    noise_std: float = DEFAULT_NOISE_STD
    class_jitter_std: float = DEFAULT_CLASS_JITTER
    held_out_domain: int = 3
    train_fraction: float = 0.8
    # long-tail data
    head_count: int = 500
    imbalance_ratio: float = 100.0
    eval_per_class: int = 100
    # model
    latent_dim: int = 64
    operator_kind: OperatorKind = OperatorKind.SA
    placement: NormPlacement = NormPlacement.POST
    variant: Variant = Variant.D_PLUS_R
    dropout_rate: float = 0.5
    subset_fraction: float = 0.5
    noise_scale: float = 1.0
    share_classifier: bool = True
    stop_grad_into_encoder_for_l2: bool = False
    pre_mixes_raw_input: bool = False
    # optimization
    batch_size: int = 32
    epochs: int = 40
    base_lr: float = 0.10
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_adjust: float = 0.5
    # artifacts
    dump_latents: bool = False

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.input_dim < 1 or self.latent_dim < 1:
            raise ConfigurationError("input_dim and latent_dim must be positive")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if (
            self.batch_size < 2
            and self.variant.uses_operators
            and self.operator_kind is not OperatorKind.GAUSSIAN
        ):
            raise ConfigurationError(
                "batch_size=1 cannot feed a batch-mixing degradation operator"
            )
        if self.task is Task.DG:
            if self.n_domains < 2:
                raise ConfigurationError(f"n_domains must be >= 2, got {self.n_domains}")
            if not (0 <= self.held_out_domain < self.n_domains):
                raise ConfigurationError(
                    f"held_out_domain {self.held_out_domain} outside 0..{self.n_domains - 1}"
                )
            if self.per_cell < 2:
                raise ConfigurationError(f"per_cell must be >= 2, got {self.per_cell}")
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigurationError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not (0.0 < self.subset_fraction <= 1.0):
            raise ConfigurationError(
                f"subset_fraction must be in (0, 1], got {self.subset_fraction}"
            )
        if self.base_lr <= 0 or self.lr_adjust <= 0:
            raise ConfigurationError("base_lr and lr_adjust must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.eval_per_class < 1:
            raise ConfigurationError(f"eval_per_class must be >= 1, got {self.eval_per_class}")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, Enum) else v
        return out


_ENUM_FIELDS = {
    "task": Task,
    "operator_kind": OperatorKind,
    "placement": NormPlacement,
    "variant": Variant,
}


def _parse_value(name: str, kind, raw: str):
    if name in _ENUM_FIELDS:
        enum_cls = _ENUM_FIELDS[name]
        try:
            return enum_cls(raw)
        except ValueError:
            legal = ", ".join(m.value for m in enum_cls)
            raise ConfigurationError(
                f"config key '{name}': '{raw}' is not one of {legal}"
            ) from None
    if kind is bool:
        if raw.lower() in ("true", "false"):
            return raw.lower() == "true"
        raise ConfigurationError(f"config key '{name}': expected true/false, got '{raw}'")
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigurationError(
            f"config key '{name}': cannot parse '{raw}' as {kind.__name__}"
        ) from None
    raise ConfigurationError(f"config key '{name}' has unsupported type")


def parse_config(text: str) -> ExperimentConfig:
    """One `key=value` per line; blank lines and `#` comments are skipped;
    unknown and repeated keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    defaults = ExperimentConfig()
    seen: dict[str, object] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key=value, got '{raw_line}'")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in fields:
            raise ConfigurationError(f"config line {lineno}: unknown key '{key}'")
        if key in seen:
            raise ConfigurationError(f"config line {lineno}: key '{key}' repeated")
        seen[key] = _parse_value(key, type(getattr(defaults, key)), raw)
    return replace(defaults, **seen)


def load_config_file(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def format_config(cfg: ExperimentConfig) -> str:
    lines = [f"{k}={v}" for k, v in cfg.to_dict().items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunReport:
    config: dict
    epochs: list[dict]
    final: dict
    seed: int
    wall_time: float

    def to_json(self, include_wall_time: bool = True) -> str:
        obj = {
            "config": self.config,
            "epochs": self.epochs,
            "final": self.final,
            "seed": self.seed,
        }
        if include_wall_time:
            obj["wall_time"] = self.wall_time
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> RunReport:
    obj = json.loads(text)
    return RunReport(
        config=obj["config"], epochs=obj["epochs"], final=obj["final"],
        seed=obj["seed"], wall_time=obj.get("wall_time", 0.0),
    )


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return FLOAT_FMT.format(v)
    return str(v)


def summary_row(cfg: ExperimentConfig, report: RunReport) -> dict:
    """One CSV row: the ablation cell coordinates plus headline numbers."""
    kind = "none" if cfg.variant is Variant.ERM else cfg.operator_kind.value
    held_out = cfg.held_out_domain if cfg.task is Task.DG else -1
    f = report.final
    return {
        "variant": cfg.variant.value,
        "kind": kind,
        "held_out": held_out,
        "seed": cfg.seed,
        "test_acc": f["test_acc"],
        "clean_acc": f["clean_acc"],
        "degraded_acc": f["degraded_acc"],
        "restored_acc": f["restored_acc"],
        "align_test": f["align_test"],
        "uniform_test": f["uniform_test"],
    }


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_csv_cell(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def export_report(payload, path, fmt: str = "json") -> None:
    """Write a RunReport (or a list of summary rows) as JSON or CSV."""
    if fmt not in ("json", "csv"):
        raise ConfigurationError(f"format must be json or csv, got '{fmt}'")
    if isinstance(payload, RunReport):
        if fmt == "json":
            text = payload.to_json()
        else:
            cfg = config_from_echo(payload.config)
            text = rows_to_csv([summary_row(cfg, payload)])
    else:
        if fmt == "csv":
            text = rows_to_csv(list(payload))
        else:
            text = json.dumps(list(payload), sort_keys=True, indent=2) + "\n"
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise ReportIOError(f"cannot write report {path}: {exc}") from exc


def config_from_echo(echo: dict) -> ExperimentConfig:
    """Rebuild a typed config from the dict echoed into a report."""
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(echo) - fields
    if unknown:
        raise ConfigurationError(f"config echo has unknown keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in echo.items():
        if name in _ENUM_FIELDS:
            kwargs[name] = _ENUM_FIELDS[name](value)
        else:
            kwargs[name] = value
    return ExperimentConfig(**kwargs)


# ---------------------------------------------------------------------------
# data assembly and batching


@dataclass
class RunData:
    train: SyntheticDataset
    val: SyntheticDataset
    test: SyntheticDataset


def build_run_data(cfg: ExperimentConfig, hub: StreamHub) -> RunData:
    if cfg.task is Task.DG:
        specs = default_domain_specs(
            cfg.n_domains, rotation_step=cfg.rotation_step, noise_std=cfg.noise_std
        )
        ds = generate_multidomain(
            hub.child("data"),
            n_classes=cfg.n_classes,
            n_domains=cfg.n_domains,
            per_cell=cfg.per_cell,
            input_dim=cfg.input_dim,
            domain_specs=specs,
            class_jitter_std=cfg.class_jitter_std,
        )
        split = leave_one_domain_out_split(
            ds, cfg.held_out_domain, hub.stream("split"), cfg.train_fraction
        )
        return RunData(train=split.train, val=split.val, test=split.test)
    lt = LongTailConfig(
        n_classes=cfg.n_classes,
        head_count=cfg.head_count,
        imbalance_ratio=cfg.imbalance_ratio,
        class_jitter_std=cfg.class_jitter_std,
        noise_std=cfg.noise_std,
    )
    train = generate_longtail(lt, cfg.input_dim, hub.child("data"))
    val = generate_balanced_eval(train, cfg.eval_per_class, hub.child("data", "val"))
    test = generate_balanced_eval(train, cfg.eval_per_class, hub.child("data", "test"))
    return RunData(train=train, val=val, test=test)


def epoch_batches(
    cfg: ExperimentConfig, train: SyntheticDataset, order_rng: np.random.Generator
) -> list[np.ndarray]:
    """Index batches for one epoch.

    Domain-generalization runs draw `batch_size` rows from each training
    domain per step, so every step sees every source domain.  Long-tail
    runs draw plain shuffled batches.
    """
    if cfg.task is Task.DG:
        domains = sorted(int(d) for d in np.unique(train.domains))
        perms = {}
        for dom in domains:
            idx = np.flatnonzero(train.domains == dom)
            perms[dom] = idx[order_rng.permutation(idx.size)]
        steps = min(perms[dom].size for dom in domains) // cfg.batch_size
        if steps == 0:
            raise ConfigurationError(
                f"batch_size {cfg.batch_size} exceeds the smallest training domain "
                f"({min(perms[dom].size for dom in domains)} rows)"
            )
        return [
            np.concatenate(
                [perms[dom][s * cfg.batch_size : (s + 1) * cfg.batch_size] for dom in domains]
            )
            for s in range(steps)
        ]
    perm = order_rng.permutation(len(train))
    steps = len(train) // cfg.batch_size
    if steps == 0:
        return [perm]
    return [perm[s * cfg.batch_size : (s + 1) * cfg.batch_size] for s in range(steps)]


def _one_hot(classes: np.ndarray, n_classes: int) -> np.ndarray:
    return np.eye(n_classes)[classes]


def _eval_batch_rows(cfg: ExperimentConfig, n: int) -> int:
    if cfg.task is Task.DG:
        rows = cfg.batch_size * max(1, cfg.n_domains - 1)
    else:
        rows = cfg.batch_size
    return max(2, min(rows, n))


def _snapshot(bundle: ModelBundle) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in bundle.registry}


def _restore_params(bundle: ModelBundle, snap: dict[str, np.ndarray]) -> None:
    for p in bundle.registry:
        p.data = snap[p.name].copy()


# ---------------------------------------------------------------------------
# single run


@dataclass
class RunArtifacts:
    bundle: ModelBundle
    data: RunData
    best_epoch: int | None


def run_experiment(
    cfg: ExperimentConfig,
    out_dir=None,
    return_artifacts: bool = False,
):
    """Train one configuration end to end and report it.

    The model evaluated at the end is the epoch snapshot with the best
    validation accuracy (ties keep the earlier epoch); the held-out test
    split plays no part in that selection.  With ``epochs=0`` the report
    holds only the untrained evaluation.
    """
    cfg.validate()
    t0 = time.perf_counter()
    hub = StreamHub(cfg.seed, "run")
    data = build_run_data(cfg, hub)
    bundle = build_bundle(
        input_dim=cfg.input_dim,
        n_classes=cfg.n_classes,
        d=cfg.latent_dim,
        hub=hub.child("model"),
        kind=cfg.operator_kind,
        placement=cfg.placement,
        dropout_rate=cfg.dropout_rate,
        subset_fraction=cfg.subset_fraction,
        noise_scale=cfg.noise_scale,
        share_classifier=cfg.share_classifier,
        pre_mixes_raw_input=cfg.pre_mixes_raw_input,
    )
    trainable = bundle.trainable_registry(cfg.variant)

    train_y_onehot = _one_hot(data.train.classes, cfg.n_classes)
    epoch_rows: list[dict] = []
    best_val = -math.inf
    best_epoch: int | None = None
    best_params: dict[str, np.ndarray] | None = None

    for epoch in range(cfg.epochs):
        batches = epoch_batches(cfg, data.train, hub.stream("order", epoch))
        sums = np.zeros(4)
        for step, idx in enumerate(batches):
            bd = training_step(
                bundle,
                trainable,
                data.train.features[idx],
                train_y_onehot[idx],
                cfg.variant,
                hub.child("step", epoch, step),
                base_lr=cfg.base_lr,
                momentum=cfg.momentum,
                weight_decay=cfg.weight_decay,
                lr_adjust=cfg.lr_adjust,
                stop_grad_into_encoder_for_l2=cfg.stop_grad_into_encoder_for_l2,
            )
            sums += (bd.original, bd.degraded, bd.restored, bd.total)
        means = sums / len(batches)
        train_acc = accuracy(inference_forward(bundle, Tensor(data.train.features)), data.train.classes)
        val_acc = accuracy(inference_forward(bundle, Tensor(data.val.features)), data.val.classes)
        epoch_rows.append({
            "epoch": epoch,
            "l1": float(means[0]), "l2": float(means[1]),
            "l3": float(means[2]), "total": float(means[3]),
            "train_acc": train_acc, "val_acc": val_acc,
        })
        if val_acc > best_val:
            best_val = val_acc
            best_epoch = epoch
            best_params = _snapshot(bundle)

    if best_params is not None:
        _restore_params(bundle, best_params)

    final = _final_evaluation(cfg, bundle, data, hub)
    final["best_epoch"] = best_epoch
    final["val_acc_best"] = best_val if best_params is not None else final["val_acc"]

    if cfg.dump_latents and out_dir is not None:
        _dump_latents(cfg, bundle, data, hub, Path(out_dir))

    report = RunReport(
        config=cfg.to_dict(),
        epochs=epoch_rows,
        final=final,
        seed=cfg.seed,
        wall_time=time.perf_counter() - t0,
    )
    if return_artifacts:
        return report, RunArtifacts(bundle=bundle, data=data, best_epoch=best_epoch)
    return report


def _encode_all(bundle: ModelBundle, features: np.ndarray) -> np.ndarray:
    return encode(bundle.encoder, Tensor(features)).data


def _final_evaluation(cfg, bundle, data: RunData, hub: StreamHub) -> dict:
    test_preds = inference_forward(bundle, Tensor(data.test.features))
    suite = accuracy_suite(
        bundle,
        data.test.features,
        data.test.classes,
        _eval_batch_rows(cfg, len(data.test)),
        hub.child("eval", "test"),
    )
    z_train = _encode_all(bundle, data.train.features)
    z_test = _encode_all(bundle, data.test.features)
    final = {
        "test_acc": accuracy(test_preds, data.test.classes),
        "val_acc": accuracy(inference_forward(bundle, Tensor(data.val.features)), data.val.classes),
        "clean_acc": suite["clean"],
        "degraded_acc": suite["degraded"],
        "restored_acc": suite["restored"],
        "align_train": alignment(z_train, data.train.classes),
        "align_test": alignment(z_test, data.test.classes),
        "uniform_train": uniformity(z_train),
        "uniform_test": uniformity(z_test),
    }
    if cfg.task is Task.LONGTAIL:
        groups = longtail_groups(cfg.n_classes)
        final["group_acc"] = {
            name: accuracy(
                test_preds[np.isin(data.test.classes, members)],
                data.test.classes[np.isin(data.test.classes, members)],
            )
            for name, members in groups.items()
        }
    return final


def _dump_latents(cfg, bundle, data: RunData, hub: StreamHub, out_dir: Path) -> None:
    rows = _eval_batch_rows(cfg, len(data.test))
    idx = np.arange(min(rows, len(data.test)))
    z = encode(bundle.encoder, Tensor(data.test.features[idx]))
    z_d = degrade(bundle.degrader, z, False, hub.child("dump", "degrade"))
    z_r = restore(bundle.restorer, z_d, z, False, hub.child("dump", "restore"))
    write_latent_dump(
        out_dir / "latents.txt",
        z.data, z_d.data, z_r.data,
        data.test.classes[idx], data.test.domains[idx],
        n_classes=cfg.n_classes, seed=cfg.seed, step=cfg.epochs,
    )


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class GridRun:
    config: ExperimentConfig
    report: RunReport


def grid_cells(base: ExperimentConfig) -> list[tuple[Variant, OperatorKind]]:
    """ERM once, then sample-aware and Gaussian rows for each loss variant."""
    if base.operator_kind is OperatorKind.GAUSSIAN:
        raise ConfigurationError(
            "grid base config must use a sample-aware operator (sa or pool); "
            "the Gaussian rows are added automatically"
        )
    cells: list[tuple[Variant, OperatorKind]] = [(Variant.ERM, base.operator_kind)]
    for kind in (base.operator_kind, OperatorKind.GAUSSIAN):
        for variant in (Variant.D_ONLY, Variant.R_ONLY, Variant.D_PLUS_R):
            cells.append((variant, kind))
    return cells


def plan_ablation_grid(
    base: ExperimentConfig, n_seeds: int = GRID_SEEDS, seed_base: int = 0
) -> list[ExperimentConfig]:
    """(2 kinds x 3 variants + ERM) x seeds x held-out domains, in a fixed
    deterministic order."""
    if base.task is not Task.DG:
        raise ConfigurationError("the ablation grid runs on the domain-generalization task")
    cfgs = []
    for variant, kind in grid_cells(base):
        for seed in range(seed_base, seed_base + n_seeds):
            for held_out in range(base.n_domains):
                cfgs.append(replace(
                    base, variant=variant, operator_kind=kind,
                    seed=seed, held_out_domain=held_out,
                ))
    return cfgs


def run_ablation_grid(
    base: ExperimentConfig,
    n_seeds: int = GRID_SEEDS,
    seed_base: int = 0,
    progress=None,
) -> list[GridRun]:
    runs = []
    plan = plan_ablation_grid(base, n_seeds=n_seeds, seed_base=seed_base)
    for i, cfg in enumerate(plan):
        report = run_experiment(cfg)
        runs.append(GridRun(config=cfg, report=report))
        if progress is not None:
            progress(i + 1, len(plan), cfg, report)
    return runs


def summarize_grid(runs: list[GridRun]) -> dict:
    """Mean and sample standard deviation of held-out test accuracy per
    (variant, kind) cell, recomputable from the individual reports."""
    cells: dict[str, list[float]] = {}
    for r in runs:
        kind = "none" if r.config.variant is Variant.ERM else r.config.operator_kind.value
        key = f"{r.config.variant.value}/{kind}"
        cells.setdefault(key, []).append(r.report.final["test_acc"])
    out = {}
    for key, accs in sorted(cells.items()):
        arr = np.asarray(accs)
        sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        out[key] = {"mean_test_acc": float(arr.mean()), "sd_test_acc": sd, "n": int(arr.size)}
    return out


def grid_summary_rows(runs: list[GridRun]) -> list[dict]:
    return [summary_row(r.config, r.report) for r in runs]


# ---------------------------------------------------------------------------
# batch-size sweep


def plan_batch_sweep(
    base: ExperimentConfig,
    sizes: list[int] | None = None,
    n_seeds: int = GRID_SEEDS,
    seed_base: int = 0,
) -> list[ExperimentConfig]:
    sizes = SWEEP_SIZES if sizes is None else list(sizes)
    cfgs = []
    for size in sizes:
        for seed in range(seed_base, seed_base + n_seeds):
            cfg = replace(base, batch_size=size, seed=seed)
            cfg.validate()  # rejects B=1 for batch-mixing operators up front
            cfgs.append(cfg)
    return cfgs


def batch_size_sweep(
    base: ExperimentConfig,
    sizes: list[int] | None = None,
    n_seeds: int = GRID_SEEDS,
    seed_base: int = 0,
    progress=None,
) -> list[GridRun]:
    runs = []
    plan = plan_batch_sweep(base, sizes=sizes, n_seeds=n_seeds, seed_base=seed_base)
    for i, cfg in enumerate(plan):
        report = run_experiment(cfg)
        runs.append(GridRun(config=cfg, report=report))
        if progress is not None:
            progress(i + 1, len(plan), cfg, report)
    return runs


def summarize_sweep(runs: list[GridRun]) -> dict:
    sizes: dict[int, list[float]] = {}
    for r in runs:
        sizes.setdefault(r.config.batch_size, []).append(r.report.final["test_acc"])
    return {
        str(size): {
            "mean_test_acc": float(np.mean(accs)),
            "sd_test_acc": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
            "n": len(accs),
        }
        for size, accs in sorted(sizes.items())
    }
