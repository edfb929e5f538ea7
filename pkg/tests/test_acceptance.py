"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Criteria 1-3 and 6-9 reuse the exact suite functions behind the ``validate``
command; 4-5 check the Kronecker block identity and the gradient-SVD
collapse directly; 10-11 run the odd-to-even digit transfer end to end; 12
asserts byte-level reproducibility of every CLI command.

The digit-transfer criteria run on real MNIST IDX files when the
``LORA_DA_MNIST_DIR`` environment variable points at them, and on the
deterministic synthetic digit fixture otherwise (same loader, same IDX
format, same pipeline).
"""

import os
import time

import numpy as np
import pytest

from lora_da.cli import main
from lora_da.guidance import GuidanceConfig, InitMode, compute_init
from lora_da.mnist import load_mnist_idx, split_odd_even, synthesize_digit_dataset
from lora_da.stats import LayerStats
from lora_da.suites import (
    run_asymptotics_suite,
    run_courant_suite,
    run_fisher_distance_suite,
    run_trace_suite,
)
from lora_da.trainer import (
    MlpSpec,
    TrainConfig,
    build_adapters_for_mode,
    finetune,
    pretrain,
)

SEED = 2026


def report(criterion, name, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    print(f"[acceptance {criterion:>2}] {name}: {status} {detail}".rstrip())
    assert passed, f"criterion {criterion} ({name}) failed: {detail}"


@pytest.fixture(scope="module")
def courant_checks():
    t0 = time.perf_counter()
    checks = run_courant_suite(seed=SEED)
    return checks, time.perf_counter() - t0


@pytest.fixture(scope="module")
def asymptotics_checks():
    t0 = time.perf_counter()
    checks = {c.name: c for c in run_asymptotics_suite(seed=SEED)}
    return checks, time.perf_counter() - t0


@pytest.fixture(scope="module")
def digits_dir(tmp_path_factory):
    """Real MNIST when available, otherwise the synthetic IDX fixture."""
    env = os.environ.get("LORA_DA_MNIST_DIR")
    if env and os.path.exists(os.path.join(env, "train-images-idx3-ubyte")):
        return env, "mnist"
    root = tmp_path_factory.mktemp("digits")
    assert main(["make-toy-data", "--out", str(root), "--train-n", "24000",
                 "--seed", str(SEED)]) == 0
    return str(root), "synthetic"


@pytest.fixture(scope="module")
def digits_data(digits_dir):
    path, kind = digits_dir
    data = load_mnist_idx(
        os.path.join(path, "train-images-idx3-ubyte"),
        os.path.join(path, "train-labels-idx1-ubyte"),
    )
    return data, kind


def test_criterion_1_courant_fischer(courant_checks):
    checks, elapsed = courant_checks
    by_name = {c.name: c for c in checks}
    eq = by_name["courant.value_equals_smallest_eigsum"]
    dom = by_name["courant.random_frame_dominance"]
    ok = eq.passed and dom.passed and elapsed < 60
    report(1, "courant-fischer minimization", ok,
           f"max value gap {eq.value:.2e}, min frame margin {dom.value:.2e}, {elapsed:.1f}s")


def test_criterion_2_eigensolver_consistency(courant_checks):
    checks, elapsed = courant_checks
    agree = {c.name: c for c in checks}["courant.lobpcg_dense_agreement"]
    report(2, "iterative vs dense eigensolver", agree.passed and elapsed < 120,
           f"max relative eigenvalue gap {agree.value:.2e}, {elapsed:.1f}s")


def test_criterion_3_trace_inequality():
    t0 = time.perf_counter()
    checks = {c.name: c for c in run_trace_suite(seed=SEED)}
    elapsed = time.perf_counter() - t0
    gap = checks["trace.gap_non_negative"]
    eq = checks["trace.equality_on_invariant_subspaces"]
    report(3, "trace inequality", gap.passed and eq.passed and elapsed < 60,
           f"min gap {gap.value:.2e}, max equality defect {eq.value:.2e}, {elapsed:.1f}s")


def test_criterion_4_kronecker_block_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(100):
        d1, d2 = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        x = rng.standard_normal((d1, 2 * d1))
        zf = x @ x.T / (2 * d1) + 0.1 * np.eye(d1)
        y = rng.standard_normal((d2, 2 * d2))
        yf = y @ y.T / (2 * d2) + 0.1 * np.eye(d2)
        j_inv = np.linalg.inv(np.kron(yf, zf))
        zf_inv, yf_inv = np.linalg.inv(zf), np.linalg.inv(yf)
        for i in range(d2):
            block = j_inv[i * d1 : (i + 1) * d1, i * d1 : (i + 1) * d1]
            worst = max(worst, float(np.abs(block - zf_inv * yf_inv[i, i]).max()))
    elapsed = time.perf_counter() - t0
    report(4, "kronecker diagonal-block identity", worst <= 1e-9 and elapsed < 60,
           f"max entry gap {worst:.2e} over 100 draws, {elapsed:.1f}s")


def test_criterion_5_gradient_svd_collapse():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED + 1)
    worst = 0.0
    for _ in range(100):
        d1, d2 = int(rng.integers(3, 13)), int(rng.integers(3, 11))
        r = int(rng.integers(1, min(d1, d2)))
        g = rng.standard_normal((d1, d2))
        stats = LayerStats(g=g, zf=np.eye(d1), yf=np.eye(d2), sample_count=4, n_total=50)
        no_var = compute_init(
            stats, GuidanceConfig(rank=r, n_total=50, mode=InitMode.NO_VAR, damping_scale=0.0)
        )
        u, _, _ = np.linalg.svd(g, full_matrices=False)
        top = u[:, :r]
        gap = np.linalg.norm(no_var.a0 @ no_var.a0.T - top @ top.T, "fro")
        worst = max(worst, float(gap))
    elapsed = time.perf_counter() - t0
    report(5, "identity-curvature collapse to gradient SVD", worst < 1e-8 and elapsed < 60,
           f"max projector distance {worst:.2e} over 100 draws, {elapsed:.1f}s")


def test_criterion_6_constrained_mle_variance(asymptotics_checks):
    checks, elapsed = asymptotics_checks
    c = checks["asymptotics.constrained_variance_ratio"]
    report(6, "constrained-fit variance vs closed form", c.passed and elapsed < 900,
           f"ratio {c.value:.4f} (tolerance 15%), suite {elapsed:.1f}s")


def test_criterion_7_error_bound(asymptotics_checks):
    checks, elapsed = asymptotics_checks
    bound = checks["asymptotics.error_bound_ratio"]
    ident = checks["asymptotics.bias_identity_defect"]
    report(7, "bias+variance error bound", bound.passed and ident.passed and elapsed < 1200,
           f"worst ratio {bound.value:.3f} <= 1.10, identity defect {ident.value:.1e}")


def test_criterion_8_init_optimality(asymptotics_checks):
    checks, elapsed = asymptotics_checks
    var = checks["asymptotics.optimality_variance_dominated"]
    bias = checks["asymptotics.optimality_bias_dominated"]
    report(8, "guided subspace vs random draws", var.passed and bias.passed and elapsed < 1800,
           f"guided/random-mean: variance regime {var.value:.3f}, bias regime {bias.value:.3f}")


def test_criterion_9_fisher_distance_rate():
    t0 = time.perf_counter()
    checks = {c.name: c for c in run_fisher_distance_suite(seed=SEED)}
    elapsed = time.perf_counter() - t0
    slope = checks["fisher_distance.loglog_slope"]
    report(9, "inverse-fisher drift rate", slope.passed and elapsed < 120,
           f"log-log slope {slope.value:.3f} in [-0.75, -0.25], {elapsed:.1f}s")


def test_criterion_10_digit_transfer(digits_data):
    data, kind = digits_data
    t0 = time.perf_counter()
    step0_ok, inversions = [], []
    acc_full, acc_default = [], []
    for seed in (0, 1, 2):
        cfg = TrainConfig(seed=seed, rank=4, lr=5e-4, epochs=3)
        pre, fine, hold = split_odd_even(data, cfg.n_odd, cfg.n_even, seed=seed)
        model, _ = pretrain(MlpSpec(), pre, cfg)
        results = {}
        for mode in ("default", "full"):
            adapters, _ = build_adapters_for_mode(model, mode, cfg, fine)
            results[mode] = finetune(model, adapters, fine, cfg, eval_data=hold)
        step0_ok.append(results["full"].step0_loss <= results["default"].step0_loss)
        acc_full.append(results["full"].final_accuracy)
        acc_default.append(results["default"].final_accuracy)
        if results["full"].final_accuracy < results["default"].final_accuracy:
            inversions.append(seed)
    elapsed = time.perf_counter() - t0
    mean_full, mean_default = np.mean(acc_full), np.mean(acc_default)
    ok = all(step0_ok) and mean_full >= mean_default and elapsed < 1800
    report(10, f"digit transfer ({kind})", ok,
           f"step0 ok {step0_ok}, mean acc guided {mean_full:.4f} vs default "
           f"{mean_default:.4f}, seed inversions {inversions or 'none'}, {elapsed:.0f}s")


def test_criterion_11_init_overhead(digits_dir, tmp_path):
    path, kind = digits_dir
    out = tmp_path / "cmp"
    t0 = time.perf_counter()
    code = main([
        "compare", "--modes", "full", "--ranks", "1,2,4,8,16",
        "--data", path, "--out", str(out), "--seed", str(SEED),
        "--epochs", "160", "--eval-every", "0",
    ])
    elapsed = time.perf_counter() - t0
    assert code == 0
    rows = (out / "timing.csv").read_text().strip().splitlines()[1:]
    fracs = {}
    for row in rows:
        mode, rank, init_s, train_s, total_s = row.split(",")
        if mode == "full":
            fracs[int(rank)] = float(init_s) / float(total_s)
    ok = set(fracs) == {1, 2, 4, 8, 16} and all(f < 0.15 for f in fracs.values())
    detail = ", ".join(f"r{r}:{f:.1%}" for r, f in sorted(fracs.items()))
    report(11, f"initialization overhead ({kind})", ok, f"{detail}, {elapsed:.0f}s")


def test_criterion_12_format_and_determinism(digits_dir, tmp_path):
    path, _ = digits_dir
    fast = ["--n-odd", "2000", "--n-even", "500", "--epochs", "1",
            "--pretrain-epochs", "1", "--eval-max", "200"]
    ckpt = tmp_path / "ckpt.ldb"
    assert main(["pretrain", "--data", path, "--out", str(ckpt),
                 "--seed", str(SEED)] + fast) == 0

    pairs = []
    for tag in ("a", "b"):
        stats = tmp_path / f"stats_{tag}.ldb"
        init = tmp_path / f"init_{tag}.ldb"
        metrics = tmp_path / f"metrics_{tag}.csv"
        valrep = tmp_path / f"validate_{tag}.txt"
        cmp_dir = tmp_path / f"cmp_{tag}"
        assert main(["stats", "--model-checkpoint", str(ckpt), "--data", path,
                     "--samples", "128", "--out", str(stats), "--seed", str(SEED),
                     "--n-odd", "2000", "--n-even", "500"]) == 0
        assert main(["init", "--stats", str(stats), "--rank", "4", "--mode", "full",
                     "--damping", "1.0", "--out", str(init), "--seed", str(SEED)]) == 0
        assert main(["train", "--checkpoint", str(ckpt), "--data", path,
                     "--init-bundle", str(init), "--metrics-out", str(metrics),
                     "--seed", str(SEED)] + fast) == 0
        assert main(["validate", "--suite", "trace", "--seed", str(SEED),
                     "--report", str(valrep)]) == 0
        assert main(["compare", "--modes", "default,grad-svd", "--data", path,
                     "--out", str(cmp_dir), "--seed", str(SEED)] + fast) == 0
        pairs.append((
            stats.read_bytes(), init.read_bytes(), metrics.read_bytes(),
            (tmp_path / f"metrics_{tag}.csv.report").read_bytes(),
            valrep.read_bytes(), (cmp_dir / "comparison.csv").read_bytes(),
        ))
    labels = ("stats bundle", "init bundle", "metrics csv", "train report",
              "validate report", "comparison table")
    mism = [lab for lab, x, y in zip(labels, pairs[0], pairs[1]) if x != y]
    report(12, "format round-trip and command determinism", not mism,
           f"byte-identical: {', '.join(labels)}" if not mism else f"mismatch in {mism}")
