"""Named validation suites behind the ``validate`` command.

Each suite runs a fixed battery of randomized checks at documented
tolerances and returns one :class:`CheckResult` per check. Everything is
seeded, so a report is reproducible line for line under the same seed.

Monte Carlo tolerances follow standard-error budgets: with 2000 trials a
mean of squared errors carries a relative standard error around 2-3% for
these models (sqrt(2 / (k * trials)) with k effective chi-square degrees of
freedom), so the 15-20% windows leave an order of magnitude of headroom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .mle_lab import (
    SyntheticModel,
    TrialConfig,
    exact_fisher,
    fisher_distance_sweep,
    fit_constrained_mle,
    init_comparison,
    run_asymptotics,
    sample_dataset,
)

SUITE_NAMES = ("courant", "trace", "asymptotics", "fisher-distance")


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        out = f"{self.name}: value={self.value:.6g} tolerance={self.tolerance:.6g} {status}"
        return out + (f" ({self.detail})" if self.detail else "")


def _lab_model(seed: int) -> tuple[SyntheticModel, np.ndarray]:
    model = SyntheticModel.random(8, 3, n_points=16, seed=seed, anisotropy=4.0)
    rng = np.random.default_rng(seed)
    w0 = 0.3 * rng.standard_normal((8, 3))
    return model, w0


def _unit_identifiable_direction(rng, shape):
    d = rng.standard_normal(shape)
    d -= d.mean(axis=1, keepdims=True)
    return d / np.linalg.norm(d, "fro")


def run_courant_suite(seed: int = 0) -> list[CheckResult]:
    """Orthonormal-frame minimization against eigenvalue sums, plus
    agreement between the dense and iterative smallest-eigenpair solvers."""
    rng = np.random.default_rng([seed, 1])
    worst_eq = 0.0
    worst_margin = np.inf
    for _ in range(200):
        d = int(rng.integers(2, 33))
        r = int(rng.integers(1, min(d, 8) + 1))
        m = rng.standard_normal((d, d))
        m = 0.5 * (m + m.T)
        q, value = linalg.quad_min_orthonormal(m, r)
        expected = float(np.sum(np.linalg.eigvalsh(m)[:r]))
        worst_eq = max(worst_eq, abs(value - expected))
        cand = rng.standard_normal((1000, d, r))
        qs, _ = np.linalg.qr(cand)
        traces = np.einsum("kij,il,klj->k", qs, m, qs)
        worst_margin = min(worst_margin, float(traces.min() - value))
    checks = [
        CheckResult(
            "courant.value_equals_smallest_eigsum",
            worst_eq, 1e-8, worst_eq <= 1e-8,
            "max |tr(Q*T M Q*) - sum of r smallest eigenvalues| over 200 matrices",
        ),
        CheckResult(
            "courant.random_frame_dominance",
            worst_margin, -1e-8, worst_margin >= -1e-8,
            "min over 200x1000 random orthonormal frames of tr(QT M Q) - minimum",
        ),
    ]

    worst_rel = 0.0
    nonconv = 0
    for trial in range(20):
        mrng = np.random.default_rng([seed, 2, trial])
        m = mrng.standard_normal((256, 256))
        m = 0.5 * (m + m.T)
        res = linalg.smallest_eigpairs_lobpcg(
            lambda v: m @ v, d=256, r=8, tol=1e-6, max_iter=500, seed=trial
        )
        if not res.converged:
            nonconv += 1
            continue
        dense = np.linalg.eigvalsh(m)[:8]
        rel = np.abs(res.eigenvalues - dense) / np.maximum(1.0, np.abs(dense))
        worst_rel = max(worst_rel, float(rel.max()))
    checks.append(
        CheckResult(
            "courant.lobpcg_dense_agreement",
            worst_rel, 1e-6, worst_rel <= 1e-6 and nonconv == 0,
            f"max relative eigenvalue gap over 20 random 256x256, {nonconv} non-converged",
        )
    )
    return checks


def run_trace_suite(seed: int = 0) -> list[CheckResult]:
    """tr((AT J A)^-1) <= tr(AT J^-1 A) for SPD J, with equality on
    J-invariant subspaces."""
    from .mle_lab import verify_trace_inequality

    rng = np.random.default_rng([seed, 3])
    min_gap = np.inf
    for _ in range(1000):
        d = int(rng.integers(2, 17))
        r = int(rng.integers(1, d + 1))
        x = rng.standard_normal((d, d))
        j = x @ x.T + 0.05 * np.eye(d)
        a, _ = np.linalg.qr(rng.standard_normal((d, r)))
        min_gap = min(min_gap, verify_trace_inequality(j, a))
    worst_eq = 0.0
    for _ in range(200):
        d = int(rng.integers(2, 17))
        r = int(rng.integers(1, d + 1))
        x = rng.standard_normal((d, d))
        j = x @ x.T + 0.05 * np.eye(d)
        _, v = np.linalg.eigh(j)
        cols = rng.permutation(d)[:r]
        worst_eq = max(worst_eq, abs(verify_trace_inequality(j, v[:, cols])))
    return [
        CheckResult(
            "trace.gap_non_negative", min_gap, -1e-9, min_gap >= -1e-9,
            "min gap over 1000 random SPD J and orthonormal A",
        ),
        CheckResult(
            "trace.equality_on_invariant_subspaces", worst_eq, 1e-9, worst_eq <= 1e-9,
            "max |gap| over 200 eigenvector-spanned subspaces",
        ),
    ]


def run_asymptotics_suite(seed: int = 0, trials: int = 2000) -> list[CheckResult]:
    """Monte Carlo fits against the closed-form variance, the error bound,
    estimator normality, and guidance-matrix optimality."""
    checks = []
    model, w0 = _lab_model(seed + 2024)
    n = 2000
    rng = np.random.default_rng([seed, 4])

    # constrained variance at zero displacement
    a, _ = np.linalg.qr(rng.standard_normal((8, 2)))
    cfg = TrialConfig(n_samples=n, trials=trials, seed=seed + 1, w0=w0, w_tgt=w0.copy(), a=a)
    rep = run_asymptotics(model, cfg)
    ratio = rep.mean_sq_var / rep.theory_var
    checks.append(
        CheckResult(
            "asymptotics.constrained_variance_ratio", ratio, 0.15, abs(ratio - 1) <= 0.15,
            f"N E|What-Wproj|^2 / tr(pinv(AbarT J Abar)), {rep.trials_used} trials",
        )
    )
    checks.append(
        CheckResult(
            "asymptotics.pythagoras_defect", rep.max_pythagoras_defect, 1e-9,
            rep.max_pythagoras_defect <= 1e-9, "per-trial exact error decomposition",
        )
    )

    # bias + variance bound across 5 random subspaces, displacement c/sqrt(N)
    c = 2.0
    worst_ratio = 0.0
    worst_defect = rep.max_pythagoras_defect
    for k in range(5):
        arng = np.random.default_rng([seed, 5, k])
        a_k, _ = np.linalg.qr(arng.standard_normal((8, 2)))
        ddir = _unit_identifiable_direction(arng, (8, 3))
        cfg = TrialConfig(
            n_samples=n, trials=max(trials // 2, 200), seed=seed + 10 + k,
            w0=w0, w_tgt=w0 + (c / math.sqrt(n)) * ddir, a=a_k,
        )
        rep = run_asymptotics(model, cfg)
        worst_ratio = max(worst_ratio, rep.mean_sq_total / rep.theory_bound)
        worst_defect = max(worst_defect, rep.max_pythagoras_defect)
        bias_identity = abs(rep.bias_sq - (rep.delta_sq - rep.proj_sq))
        worst_defect = max(worst_defect, bias_identity)
    checks.append(
        CheckResult(
            "asymptotics.error_bound_ratio", worst_ratio, 1.10, worst_ratio <= 1.10,
            "max over 5 random A of E|What-Wtgt|^2 / (bias + variance bound)",
        )
    )
    checks.append(
        CheckResult(
            "asymptotics.bias_identity_defect", worst_defect, 1e-9, worst_defect <= 1e-9,
            "Pythagoras and bias identities per trial",
        )
    )

    # unconstrained estimator normality on the identifiable subspace
    j0 = exact_fisher(model, w0)
    eigvals, eigvecs = np.linalg.eigh(j0)
    keep = eigvals > 1e-10 * eigvals.max()
    basis = eigvecs[:, keep]
    target_cov = basis @ np.diag(1.0 / eigvals[keep]) @ basis.T
    flat = []
    identity = np.eye(8)
    norm_trials = max(trials, 1000)
    for t in range(norm_trials):
        data = sample_dataset(model, w0, n, seed=[seed, 6, t])
        fit = fit_constrained_mle(w0, identity, data, tol=1e-9)
        if fit.converged:
            flat.append(math.sqrt(n) * (fit.w_hat - w0).flatten(order="F"))
    flat = np.asarray(flat)
    emp_cov = (flat.T @ flat) / len(flat)
    emp_cov = basis @ basis.T @ emp_cov @ basis @ basis.T
    rel = float(
        np.linalg.norm(emp_cov - target_cov, "fro") / np.linalg.norm(target_cov, "fro")
    )
    checks.append(
        CheckResult(
            "asymptotics.mle_normality_covariance", rel, 0.20, rel <= 0.20,
            f"relative Frobenius gap to pinv Fisher over {len(flat)} trials",
        )
    )

    # guidance optimality in variance- and bias-dominated regimes
    comp_trials = max(trials // 6, 150)
    for regime, c8 in (("variance_dominated", 0.0), ("bias_dominated", 6.0)):
        drng = np.random.default_rng([seed, 7])
        if c8 > 0:
            ddir = _unit_identifiable_direction(drng, (8, 3))
            w_tgt = w0 + (c8 / math.sqrt(n)) * ddir
        else:
            w_tgt = w0.copy()
        cfg = TrialConfig(
            n_samples=n, trials=comp_trials, seed=seed + 77, w0=w0, w_tgt=w_tgt,
            a=np.zeros((8, 0)),
        )
        rep = init_comparison(model, cfg, rank=2, n_random=50)
        full = rep.outcome("full")
        margin = full.mean_sq_total / rep.random_mean
        checks.append(
            CheckResult(
                f"asymptotics.optimality_{regime}", margin, 1.0,
                rep.guided_beats_random_mean and rep.guided_within_one_se_of_best,
                f"guided mean / random-average mean; best-random gap within one "
                f"paired standard error: {rep.guided_within_one_se_of_best}",
            )
        )
    return checks


def run_fisher_distance_suite(seed: int = 0) -> list[CheckResult]:
    """Rate of the inverse-Fisher drift under a 1/sqrt(N) displacement."""
    model, w0 = _lab_model(seed + 31)
    sweep = fisher_distance_sweep(
        model, w0, c=1.0, n_list=[100, 1000, 10_000, 100_000], seed=seed
    )
    checks = [
        CheckResult(
            "fisher_distance.loglog_slope", sweep.slope, 0.25,
            -0.75 <= sweep.slope <= -0.25,
            f"distances {['%.3e' % d for d in sweep.distances]}",
        )
    ]
    half = fisher_distance_sweep(model, w0, c=0.5, n_list=[100_000], seed=seed)
    full = fisher_distance_sweep(model, w0, c=1.0, n_list=[100_000], seed=seed)
    ratio = full.distances[0] / half.distances[0]
    checks.append(
        CheckResult(
            "fisher_distance.first_order_scaling", ratio, 0.2, 1.8 <= ratio <= 2.2,
            "distance ratio when doubling the displacement at N=1e5",
        )
    )
    return checks


def run_suite(name: str, seed: int = 0) -> list[CheckResult]:
    if name == "courant":
        return run_courant_suite(seed)
    if name == "trace":
        return run_trace_suite(seed)
    if name == "asymptotics":
        return run_asymptotics_suite(seed)
    if name == "fisher-distance":
        return run_fisher_distance_suite(seed)
    if name == "all":
        out = []
        for suite in SUITE_NAMES:
            out.extend(run_suite(suite, seed))
        return out
    raise ValueError(f"unknown suite {name!r}; choose from {SUITE_NAMES + ('all',)}")
