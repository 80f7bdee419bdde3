"""Shipping gates for the library: ten checks covering gradients, operator
symmetries, loss structure, inference purity, metric correctness, the
directional experiment claims, and artifact determinism.

Each test prints one `criterion NN [PASS|FAIL]` line (visible with `-s`, or
in captured output on failure) and the test names double as the pass/fail
report under `pytest -v`.  Criteria 6-8 share one module-scoped ablation
grid so the full gate stays inside a coffee-break budget.
"""

import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from latentaug import attention as A
from latentaug import tensor as T
from latentaug.datagen import (
    default_domain_specs,
    generate_multidomain,
    load_dataset,
    save_dataset,
)
from latentaug.degrade_restore import (
    NormPlacement,
    OperatorKind,
    Variant,
    augmentation_loss,
    build_bundle,
    build_soft_label,
    degrade,
    read_latent_dump,
    restore,
    write_latent_dump,
)
from latentaug.harness import (
    ExperimentConfig,
    Task,
    run_ablation_grid,
    run_experiment,
)
from latentaug.metrics import alignment, uniformity
from latentaug.model import (
    classify,
    encode,
    inference_forward,
    load_checkpoint,
    save_checkpoint,
)
from latentaug.rng import StreamHub

from fd import numeric_grad

N_SEEDS = 20
PER_OP_TOL = 1e-5
END_TO_END_TOL = 1e-4
PERM_TOL = 1e-12
LOSS_SUM_TOL = 1e-12
SHARED_GRAD_TOL = 1e-10
ORACLE_TOL = 1e-12
CHANCE = 1.0 / 7.0
GRID_BUDGET_S = 600.0
GRAD_BUDGET_S = 30.0
PERM_BUDGET_S = 5.0


def _verdict(num: int, name: str, checks: list[tuple[bool, str]]) -> None:
    ok = all(flag for flag, _ in checks)
    detail = "; ".join(msg for _, msg in checks)
    print(f"criterion {num:02d} [{'PASS' if ok else 'FAIL'}] {name}: {detail}", flush=True)
    assert ok, f"criterion {num:02d} {name}: {detail}"


# ---------------------------------------------------------------------------
# criterion 1 — gradient suite


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst per-coordinate relative error, measured against the gradient's
    own scale.  Two-sided differences carry an absolute rounding noise of
    roughly eps*|f|/h, so coordinates whose true derivative sits near zero
    are compared against a floor of 1e-3 * ||g||_inf rather than against
    their own (noise-dominated) magnitude; a wrong backward rule produces
    errors at gradient scale and still fails loudly."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * scale)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _fd_grad(f, x0: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Richardson-extrapolated central differences: (4*D(h/2) - D(h)) / 3.
    Cancelling the O(h^2) truncation term lets the step stay large enough
    that per-evaluation rounding (~eps*|f|/h) is negligible, so the oracle
    stays accurate even where the objective has strong curvature."""
    d_half = numeric_grad(f, np.array(x0, copy=True), h=h / 2)
    d_full = numeric_grad(f, np.array(x0, copy=True), h=h)
    return (4.0 * d_half - d_full) / 3.0


def _input_grad_err(build, x0) -> float:
    x0 = np.asarray(x0, dtype=np.float64)

    def value(xv):
        return float(build(T.Tensor(xv)).data)

    x = T.Tensor(x0, requires_grad=True)
    with T.Tape() as tape:
        loss = build(x)
    tape.backward(loss)
    return _rel_err(x.grad, _fd_grad(value, x0))


def _op_cases(r: np.random.Generator):
    """One scalar-valued builder per differentiable engine operation."""
    a = r.normal(size=(3, 4))
    b = r.normal(size=(4, 5))
    row = r.normal(size=(1, 4))
    logits = r.normal(size=(3, 4))
    target = np.exp(r.normal(size=(3, 4)))
    target /= target.sum(axis=1, keepdims=True)
    gain = 1.0 + 0.3 * r.normal(size=4)
    bias = 0.3 * r.normal(size=4)
    spread = r.normal(size=(3, 4)) * np.array([1.0, 2.0, 0.5, 1.5])
    drop_seed = int(r.integers(1 << 30))

    return [
        ("add_broadcast", lambda x: T.sum_all(T.add(x, T.Tensor(row))), a),
        ("add_bias_operand", lambda x: T.sum_all(T.add(T.Tensor(a), x)), row),
        ("mul", lambda x: T.sum_all(T.mul(x, T.Tensor(a))), a),
        ("scale", lambda x: T.sum_all(T.scale(x, -1.7)), a),
        ("matmul_left", lambda x: T.sum_all(T.matmul(x, T.Tensor(b))), a),
        ("matmul_right", lambda x: T.sum_all(T.matmul(T.Tensor(a), x)), b),
        ("transpose", lambda x: T.sum_all(T.matmul(T.transpose(x), T.Tensor(a))), a),
        (
            "slice_concat",
            lambda x: T.sum_all(
                T.concat_cols([T.slice_cols(x, 2, 4), T.slice_cols(x, 0, 2)])
            ),
            a,
        ),
        ("sum_all", lambda x: T.sum_all(x), a),
        ("mean_all", lambda x: T.mean_all(x), a),
        ("gelu", lambda x: T.sum_all(T.gelu(x)), a),
        ("softmax_rows", lambda x: T.sum_all(T.mul(T.softmax_rows(x), T.Tensor(a))), a),
        (
            "layer_norm_input",
            lambda x: T.sum_all(
                T.mul(T.layer_norm(x, T.Tensor(gain), T.Tensor(bias)), T.Tensor(a))
            ),
            spread,
        ),
        (
            "layer_norm_gain",
            lambda g: T.sum_all(
                T.mul(T.layer_norm(T.Tensor(spread), g, T.Tensor(bias)), T.Tensor(a))
            ),
            gain,
        ),
        (
            "layer_norm_bias",
            lambda bb: T.sum_all(
                T.mul(T.layer_norm(T.Tensor(spread), T.Tensor(gain), bb), T.Tensor(a))
            ),
            bias,
        ),
        (
            "dropout_fixed_mask",
            lambda x: T.sum_all(
                T.dropout(x, 0.4, True, np.random.default_rng(drop_seed))
            ),
            a,
        ),
        ("cross_entropy_logits", lambda x: T.cross_entropy_soft(x, T.Tensor(target)), logits),
    ]


def _end_to_end_errs(seed: int) -> list[float]:
    """Finite-difference check of the full three-term objective (dropout off,
    B=3, d=4, C=3) against every trainable parameter and the input batch."""
    hub = StreamHub(seed, "gate1")
    bundle = build_bundle(
        input_dim=5, n_classes=3, d=4, hub=hub.child("model"),
        kind=OperatorKind.SA, dropout_rate=0.0, encoder_widths=[5, 6, 4],
    )
    r = np.random.default_rng(seed + 77)
    x0 = r.normal(size=(3, 5))
    y = np.eye(3)[r.integers(0, 3, size=3)]

    def total_from(xt: T.Tensor) -> T.Tensor:
        return augmentation_loss(
            bundle, xt, y, Variant.D_PLUS_R, hub.child("loss"), training=True
        ).total

    errs = [_input_grad_err(total_from, x0)]
    x_const = T.Tensor(x0)
    for param in bundle.trainable_registry(Variant.D_PLUS_R):
        base = param.data.copy()

        def value(v, _p=param):
            _p.data[...] = v
            return float(total_from(x_const).data)

        param.grad = None
        with T.Tape() as tape:
            loss = total_from(x_const)
        tape.backward(loss)
        analytic = param.grad.copy()
        numeric = _fd_grad(value, base.copy())
        param.data[...] = base
        param.grad = None
        errs.append(_rel_err(analytic, numeric))
    return errs


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    worst_op = ("", 0.0)
    for seed in range(N_SEEDS):
        r = np.random.default_rng(1000 + seed)
        for name, build, x0 in _op_cases(r):
            err = _input_grad_err(build, x0)
            if err > worst_op[1]:
                worst_op = (name, err)
    worst_e2e = 0.0
    for seed in range(N_SEEDS):
        worst_e2e = max(worst_e2e, max(_end_to_end_errs(seed)))
    wall = time.perf_counter() - t0
    _verdict(1, "gradient suite", [
        (worst_op[1] < PER_OP_TOL,
         f"per-op max rel err {worst_op[1]:.2e} ({worst_op[0]}) < {PER_OP_TOL}"),
        (worst_e2e < END_TO_END_TOL,
         f"end-to-end max rel err {worst_e2e:.2e} < {END_TO_END_TOL}"),
        (wall < GRAD_BUDGET_S, f"runtime {wall:.1f}s < {GRAD_BUDGET_S:.0f}s"),
    ])


# ---------------------------------------------------------------------------
# criterion 2 — permutation symmetry


def test_criterion_02_permutation_symmetry():
    t0 = time.perf_counter()
    hub = StreamHub(0, "gate2")
    bundle = build_bundle(input_dim=6, n_classes=3, d=8, hub=hub.child("model"))
    reg = T.ParameterRegistry()
    w = A.init_attention_weights("attn", 8, 2, 4, reg, np.random.default_rng(5))

    worst_restore = 0.0
    worst_sa = 0.0
    for i in range(100):
        r = np.random.default_rng(4000 + i)
        z_d = r.normal(size=(5, 8))
        bank = r.normal(size=(9, 8))
        perm = r.permutation(9)
        out = restore(
            bundle.restorer, T.Tensor(z_d), T.Tensor(bank), False, hub.child("pair", i)
        ).data
        out_p = restore(
            bundle.restorer, T.Tensor(z_d), T.Tensor(bank[perm]), False, hub.child("pair", i)
        ).data
        worst_restore = max(worst_restore, float(np.max(np.abs(out - out_p))))

        z = r.normal(size=(7, 8))
        perm2 = r.permutation(7)
        sa = A.self_attention(T.Tensor(z), w, 0.0, False, np.random.default_rng(0)).data
        sa_p = A.self_attention(
            T.Tensor(z[perm2]), w, 0.0, False, np.random.default_rng(0)
        ).data
        worst_sa = max(worst_sa, float(np.max(np.abs(sa_p - sa[perm2]))))
    wall = time.perf_counter() - t0
    _verdict(2, "permutation symmetry", [
        (worst_restore < PERM_TOL,
         f"restoration bank-permutation invariance max dev {worst_restore:.2e} < {PERM_TOL}"),
        (worst_sa < PERM_TOL,
         f"self-attention equivariance max dev {worst_sa:.2e} < {PERM_TOL}"),
        (wall < PERM_BUDGET_S, f"runtime {wall:.2f}s < {PERM_BUDGET_S:.0f}s"),
    ])


# ---------------------------------------------------------------------------
# criterion 3 — loss structure


def test_criterion_03_loss_structure():
    worst_sum = 0.0
    for seed in range(10):
        hub = StreamHub(seed, "gate3")
        bundle = build_bundle(input_dim=5, n_classes=3, d=4, hub=hub.child("model"))
        r = np.random.default_rng(seed)
        x = T.Tensor(r.normal(size=(6, 5)))
        y = np.eye(3)[r.integers(0, 3, size=6)]
        out = augmentation_loss(bundle, x, y, Variant.D_PLUS_R, hub.child("loss"))
        b = out.breakdown
        worst_sum = max(
            worst_sum, abs(b.total - (b.original + b.degraded + b.restored))
        )

    single = np.tile(np.eye(3)[1], (5, 1))
    soft_is_label = bool(np.array_equal(build_soft_label(single), np.eye(3)[1]))

    # shared classifier: gradient of the total equals the sum of the three
    # per-term gradients, each recomputed with identical stochastic draws
    worst_shared = 0.0
    for seed in range(5):
        hub = StreamHub(seed, "gate3b")
        bundle = build_bundle(input_dim=5, n_classes=3, d=4, hub=hub.child("model"))
        r = np.random.default_rng(100 + seed)
        x = T.Tensor(r.normal(size=(6, 5)))
        y = np.eye(3)[r.integers(0, 3, size=6)]
        w = bundle.classifier.W

        def grad_of(select):
            w.grad = None
            with T.Tape() as tape:
                out = augmentation_loss(bundle, x, y, Variant.D_PLUS_R, hub.child("loss"))
                tape.backward(select(out))
            g = w.grad.copy()
            w.grad = None
            return g

        g_total = grad_of(lambda o: o.total)
        g_terms = (
            grad_of(lambda o: o.term_original)
            + grad_of(lambda o: o.term_degraded)
            + grad_of(lambda o: o.term_restored)
        )
        worst_shared = max(worst_shared, float(np.max(np.abs(g_total - g_terms))))

    _verdict(3, "loss structure", [
        (worst_sum < LOSS_SUM_TOL, f"total-vs-sum max dev {worst_sum:.2e} < {LOSS_SUM_TOL}"),
        (soft_is_label, "single-class batch soft label equals the one-hot label"),
        (worst_shared < SHARED_GRAD_TOL,
         f"shared-classifier grad vs term sum max dev {worst_shared:.2e} < {SHARED_GRAD_TOL}"),
    ])


# ---------------------------------------------------------------------------
# criterion 4 — inference-path equality


def test_criterion_04_inference_path_equality():
    cfg = ExperimentConfig(seed=0)  # combined objective, 40 epochs
    report, art = run_experiment(cfg, return_artifacts=True)
    bundle, data = art.bundle, art.data
    hub = StreamHub(cfg.seed, "gate4")
    checks = []
    for split_name, split in (("train", data.train), ("val", data.val), ("test", data.test)):
        x = T.Tensor(split.features)
        preds_detached = inference_forward(bundle, x)
        logits_detached = classify(bundle.classifier, encode(bundle.encoder, x)).data

        # attached-but-bypassed: the operators run on the same latents, but
        # the prediction is read off the clean branch
        z = encode(bundle.encoder, x)
        z_d = degrade(bundle.degrader, z, False, hub.child(split_name, "d"))
        restore(bundle.restorer, z_d, z, False, hub.child(split_name, "r"))
        logits_attached = classify(bundle.classifier, z).data
        preds_attached = np.argmax(logits_attached, axis=1)

        same_logits = logits_detached.tobytes() == logits_attached.tobytes()
        same_preds = bool(np.array_equal(preds_detached, preds_attached))
        checks.append(
            (same_logits and same_preds, f"{split_name} split bit-identical")
        )
    _verdict(4, "inference-path equality", checks)


# ---------------------------------------------------------------------------
# criterion 5 — metric oracles


def _alignment_oracle(x: np.ndarray, classes: np.ndarray) -> float:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    z = x / norms
    sq = []
    for i in range(len(z)):
        for j in range(i + 1, len(z)):
            if classes[i] == classes[j]:
                sq.append(float(np.sum((z[i] - z[j]) ** 2)))
    return math.fsum(sq) / len(sq)


def _uniformity_oracle(x: np.ndarray) -> float:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    z = x / norms
    vals = []
    for i in range(len(z)):
        for j in range(i + 1, len(z)):
            vals.append(math.exp(-2.0 * float(np.sum((z[i] - z[j]) ** 2))))
    return math.log(math.fsum(vals) / len(vals))


def test_criterion_05_metric_oracles():
    worst_align = 0.0
    worst_uniform = 0.0
    for n in (2, 3, 17, 64):
        r = np.random.default_rng(n)
        x = r.normal(size=(n, 6)) * 3.0
        classes = r.integers(0, 3, size=n)
        if len(np.unique(classes)) == n:  # guarantee at least one same-class pair
            classes[-1] = classes[0]
        worst_align = max(
            worst_align, abs(alignment(x, classes) - _alignment_oracle(x, classes))
        )
        worst_uniform = max(worst_uniform, abs(uniformity(x) - _uniformity_oracle(x)))

    cloud = np.tile(np.array([1.0, -2.0, 0.5]), (9, 1))
    cloud_labels = np.zeros(9, dtype=np.int64)
    align_cloud = alignment(cloud, cloud_labels)
    uniform_cloud = uniformity(cloud)
    antipodal = np.array([[3.0, 0.0], [-3.0, 0.0]])
    uniform_anti = uniformity(antipodal)

    _verdict(5, "metric oracles", [
        (worst_align < ORACLE_TOL, f"alignment vs brute force max dev {worst_align:.2e}"),
        (worst_uniform < ORACLE_TOL, f"uniformity vs brute force max dev {worst_uniform:.2e}"),
        (abs(align_cloud) <= 1e-12 and uniform_cloud == 0.0,
         "identical cloud gives align 0, uniform 0"),
        (abs(uniform_anti - (-8.0)) <= 1e-14, "antipodal pair gives uniform -8"),
    ])


# ---------------------------------------------------------------------------
# criteria 6-8 — the shared ablation grid


@pytest.fixture(scope="module")
def dg_grid():
    base = replace(ExperimentConfig(), stop_grad_into_encoder_for_l2=True)
    t0 = time.perf_counter()
    runs = run_ablation_grid(base, n_seeds=5)
    wall = time.perf_counter() - t0
    return runs, wall


def _grid_mean(runs, variant: Variant, key: str, kind: OperatorKind | None = None) -> float:
    vals = [
        r.report.final[key]
        for r in runs
        if r.config.variant is variant
        and (variant is Variant.ERM or r.config.operator_kind is kind)
    ]
    assert len(vals) == 20, f"expected 20 rows for {variant}, got {len(vals)}"
    return float(np.mean(vals))


def test_criterion_06_heldout_accuracy_ordering(dg_grid):
    runs, wall = dg_grid
    erm = _grid_mean(runs, Variant.ERM, "test_acc")
    d_only = _grid_mean(runs, Variant.D_ONLY, "test_acc", OperatorKind.SA)
    r_only = _grid_mean(runs, Variant.R_ONLY, "test_acc", OperatorKind.SA)
    d_plus_r = _grid_mean(runs, Variant.D_PLUS_R, "test_acc", OperatorKind.SA)
    _verdict(6, "held-out accuracy ordering", [
        (len(runs) == 140, f"grid of {len(runs)} runs"),
        (d_plus_r >= erm, f"combined {d_plus_r:.4f} >= baseline {erm:.4f}"),
        (d_plus_r >= d_only, f"combined >= degradation-only {d_only:.4f}"),
        (d_plus_r >= r_only, f"combined >= restoration-only {r_only:.4f}"),
        (wall < GRID_BUDGET_S, f"grid runtime {wall:.0f}s < {GRID_BUDGET_S:.0f}s"),
    ])


def test_criterion_07_degradation_confusion(dg_grid):
    runs, _ = dg_grid
    clean = _grid_mean(runs, Variant.D_PLUS_R, "clean_acc", OperatorKind.SA)
    degraded = _grid_mean(runs, Variant.D_PLUS_R, "degraded_acc", OperatorKind.SA)
    restored = _grid_mean(runs, Variant.D_PLUS_R, "restored_acc", OperatorKind.SA)
    _verdict(7, "degradation confusion", [
        (CHANCE < degraded, f"degraded {degraded:.4f} > chance {CHANCE:.4f}"),
        (degraded < clean, f"degraded {degraded:.4f} < clean {clean:.4f}"),
        (restored >= degraded, f"restored {restored:.4f} >= degraded {degraded:.4f}"),
    ])


def test_criterion_08_representation_quality(dg_grid):
    runs, _ = dg_grid
    align_erm = _grid_mean(runs, Variant.ERM, "align_test")
    align_dr = _grid_mean(runs, Variant.D_PLUS_R, "align_test", OperatorKind.SA)
    uniform_erm = _grid_mean(runs, Variant.ERM, "uniform_test")
    uniform_dr = _grid_mean(runs, Variant.D_PLUS_R, "uniform_test", OperatorKind.SA)
    _verdict(8, "representation quality", [
        (align_dr <= align_erm,
         f"alignment {align_dr:.4f} <= baseline {align_erm:.4f}"),
        (uniform_dr <= uniform_erm,
         f"uniformity {uniform_dr:.4f} <= baseline {uniform_erm:.4f}"),
    ])


# ---------------------------------------------------------------------------
# criterion 9 — long-tail


def test_criterion_09_longtail():
    base = ExperimentConfig(
        task=Task.LONGTAIL,
        n_classes=10,
        placement=NormPlacement.PRE,
        base_lr=0.05,
        stop_grad_into_encoder_for_l2=True,
    )
    finals = {}
    groups_ok = True
    for variant in (Variant.ERM, Variant.D_PLUS_R):
        finals[variant] = []
        for seed in range(5):
            report = run_experiment(replace(base, variant=variant, seed=seed))
            finals[variant].append(report.final["test_acc"])
            groups_ok = groups_ok and set(report.final.get("group_acc", {})) == {
                "many", "medium", "few",
            }
    erm = float(np.mean(finals[Variant.ERM]))
    d_plus_r = float(np.mean(finals[Variant.D_PLUS_R]))
    _verdict(9, "long-tail", [
        (d_plus_r >= erm, f"combined {d_plus_r:.4f} >= baseline {erm:.4f} (5 seeds)"),
        (groups_ok, "many/medium/few group accuracies present in every report"),
    ])


# ---------------------------------------------------------------------------
# criterion 10 — determinism and formats


def test_criterion_10_determinism_and_formats(tmp_path):
    cfg = ExperimentConfig(seed=1)
    a = run_experiment(cfg).to_json(include_wall_time=False)
    b = run_experiment(cfg).to_json(include_wall_time=False)
    report_ok = a == b

    # dataset file round trip
    ds = generate_multidomain(
        StreamHub(3, "gate10").child("data"),
        n_classes=3, n_domains=2, per_cell=5, input_dim=4,
        domain_specs=default_domain_specs(2),
    )
    p1, p2 = tmp_path / "ds1.txt", tmp_path / "ds2.txt"
    save_dataset(p1, ds)
    save_dataset(p2, load_dataset(p1))
    dataset_ok = p1.read_bytes() == p2.read_bytes()

    # checkpoint round trip into a differently initialized twin
    bundle_a = build_bundle(4, 3, 8, StreamHub(1, "gate10a").child("model"))
    bundle_b = build_bundle(4, 3, 8, StreamHub(2, "gate10b").child("model"))
    c1, c2 = tmp_path / "ck1.bin", tmp_path / "ck2.bin"
    save_checkpoint(c1, bundle_a.registry)
    load_checkpoint(c1, bundle_b.registry)
    save_checkpoint(c2, bundle_b.registry)
    checkpoint_ok = c1.read_bytes() == c2.read_bytes() and all(
        pa.data.tobytes() == pb.data.tobytes()
        for pa, pb in zip(bundle_a.registry, bundle_b.registry)
    )

    # latent dump round trip
    r = np.random.default_rng(9)
    z, z_d, z_r = (r.normal(size=(6, 5)) for _ in range(3))
    classes = r.integers(0, 3, size=6)
    domains = r.integers(0, 2, size=6)
    l1, l2 = tmp_path / "lat1.txt", tmp_path / "lat2.txt"
    write_latent_dump(l1, z, z_d, z_r, classes, domains, n_classes=3, seed=7, step=2)
    dump = read_latent_dump(l1)
    write_latent_dump(
        l2, dump.z, dump.z_degraded, dump.z_restored, dump.classes, dump.domains,
        n_classes=3, seed=dump.seed, step=dump.step,
    )
    dump_ok = l1.read_bytes() == l2.read_bytes()

    _verdict(10, "determinism and formats", [
        (report_ok, "identical (config, seed) reproduces the report byte-for-byte"),
        (dataset_ok, "dataset file round-trips byte-exactly"),
        (checkpoint_ok, "checkpoint round-trips byte-exactly"),
        (dump_ok, "latent dump round-trips byte-exactly"),
    ])
