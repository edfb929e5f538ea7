"""Exact small-model laboratory for the asymptotic theory behind the init rule.

The model family is a finite-support softmax classifier: inputs z are drawn
from a finite list of vectors with known probabilities and labels follow
``p(y | z; W) = softmax(W^T z)``. Finite support makes the Fisher matrix an
exact finite sum, so every theoretical quantity (variance formulas, trace
inequalities, Fisher-distance rates, guidance-matrix optimality) can be
checked against Monte Carlo without quadrature error.

Softmax families are shift degenerate: adding u 1^T to W leaves every
likelihood unchanged, so the Fisher matrix has an exact null space and the
constrained fit has flat directions. The lab adopts the minimum-norm
convention throughout: Newton steps use an eigenvalue-truncated
pseudo-inverse (which never moves along flat directions from a zero start)
and theoretical traces use the matching pseudo-inverse on the identifiable
subspace.

Trials are embarrassingly parallel; each derives its generator from
(master seed, trial index) and aggregation uses exact compensated summation,
so results do not depend on execution order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg

_PINV_RCOND = 1e-10


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class SyntheticModel:
    """Finite-support inputs with a softmax label link.

    ``support`` holds one input vector per row; ``probs`` their sampling
    probabilities. The support must span the input space, otherwise the
    Fisher matrix is singular beyond the inherent softmax shift direction.
    """

    support: np.ndarray
    probs: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.support.ndim != 2:
            raise ValueError("support must be a (points, d1) array")
        if self.probs.shape != (self.support.shape[0],):
            raise ValueError("one probability per support point required")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("probs must be non-negative and sum to 1")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if np.linalg.matrix_rank(self.support) < self.support.shape[1]:
            raise ValueError("support does not span the input space")

    @property
    def d1(self) -> int:
        return self.support.shape[1]

    @property
    def d2(self) -> int:
        return self.num_classes

    def class_probs(self, w: np.ndarray) -> np.ndarray:
        """p(y | z; W) for every support point, shape (points, num_classes)."""
        return _softmax_rows(self.support @ w)

    @classmethod
    def random(cls, d1: int, num_classes: int, n_points: int | None = None, seed: int = 0,
               anisotropy: float = 3.0):
        """A generic spanning model with anisotropic input directions."""
        rng = np.random.default_rng(seed)
        m = n_points if n_points is not None else 2 * d1
        if m < d1:
            raise ValueError("need at least d1 support points to span")
        scales = np.exp(rng.uniform(0.0, math.log(max(anisotropy, 1.0 + 1e-9)), size=d1))
        support = rng.standard_normal((m, d1)) * scales[np.newaxis, :]
        probs = rng.random(m) + 0.25
        probs /= probs.sum()
        return cls(support=support, probs=probs, num_classes=num_classes)


def exact_fisher(model: SyntheticModel, w: np.ndarray) -> np.ndarray:
    """Fisher information of the flattened weights, by exact enumeration.

    Flattening is column-wise: coordinate ``(i-1)*d1 + k`` is row k of
    column i. The result is symmetric PSD with an exact null direction per
    softmax shift; support deficiency (anything more singular than that) is
    rejected at model construction.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (model.d1, model.d2):
        raise ValueError(f"weights must be ({model.d1}, {model.d2}), got {w.shape}")
    p = model.class_probs(w)
    j = np.zeros((model.d1 * model.d2, model.d1 * model.d2))
    for i in range(model.support.shape[0]):
        z = model.support[i]
        c = np.diag(p[i]) - np.outer(p[i], p[i])
        j += model.probs[i] * np.kron(c, np.outer(z, z))
    return 0.5 * (j + j.T)


def sym_pinv(m: np.ndarray, rcond: float = _PINV_RCOND) -> np.ndarray:
    """Pseudo-inverse of a symmetric PSD matrix via eigenvalue truncation."""
    if m.size == 0:
        return np.zeros_like(m)
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    cut = rcond * max(float(w.max()), 1e-300)
    inv = np.where(w > cut, 1.0 / np.where(w > cut, w, 1.0), 0.0)
    return (v * inv) @ v.T


def lifted_basis(a: np.ndarray, d2: int) -> np.ndarray:
    """Basis of the flattened adapter subspace: kron(I_d2, A).

    Columns of W live in span(A) exactly when the flattened weights live in
    the span of this matrix (column-wise flattening).
    """
    return np.kron(np.eye(d2), a)


def sample_dataset(model: SyntheticModel, w_tgt: np.ndarray, n: int, seed) -> list:
    """Draw n i.i.d. (z, y) pairs from the model at ``w_tgt``."""
    rng = np.random.default_rng(seed)
    if n == 0:
        return []
    idx = rng.choice(model.support.shape[0], size=n, p=model.probs)
    p = model.class_probs(w_tgt)
    u = rng.random(n)
    cdf = np.cumsum(p, axis=1)
    labels = (u[:, np.newaxis] > cdf[idx]).sum(axis=1)
    return [(model.support[i], int(y)) for i, y in zip(idx, labels)]


def _compress(data) -> tuple[np.ndarray, np.ndarray]:
    """Group samples by distinct input vector; returns (inputs, class counts)."""
    index: dict[bytes, int] = {}
    zs: list[np.ndarray] = []
    counts: list[dict[int, int]] = []
    for z, y in data:
        z = np.asarray(z, dtype=np.float64)
        key = z.tobytes()
        if key not in index:
            index[key] = len(zs)
            zs.append(z)
            counts.append({})
        c = counts[index[key]]
        c[y] = c.get(y, 0) + 1
    d2 = max(max(c) for c in counts) + 1
    table = np.zeros((len(zs), d2))
    for i, c in enumerate(counts):
        for y, n in c.items():
            table[i, y] = n
    return np.asarray(zs), table


@dataclass
class FitResult:
    w_hat: np.ndarray
    b_hat: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float


def _fit_counts(zs, counts, w0, a, tol, max_iter):
    """Newton's method on the mean log-likelihood over the adapter coefficients.

    The objective is concave in B; steps use an eigenvalue-truncated
    pseudo-inverse of the negated Hessian, with backtracking as a safety
    net. Flat (shift-degenerate) directions carry zero gradient and are
    never entered from the zero start, which pins the minimum-norm solution.
    """
    d1, d2 = w0.shape
    r = a.shape[1]
    n = counts.sum()
    if n <= 0:
        raise ValueError("empty dataset")
    za = zs @ a
    row_tot = counts.sum(axis=1)
    occupied = row_tot > 0
    # every observed input labeled with a single class: the likelihood supremum
    # sits on the boundary and no finite maximizer exists
    separated = bool(np.all(counts.max(axis=1)[occupied] == row_tot[occupied]))
    b = np.zeros((r, d2))

    def mean_loglik(bmat):
        logits = zs @ (w0 + a @ bmat)
        logz = np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1))
        logz += logits.max(axis=1)
        return float(np.sum(counts * logits) - np.sum(row_tot * logz)) / n

    ll = mean_loglik(b)
    for it in range(1, max_iter + 1):
        p = _softmax_rows(zs @ (w0 + a @ b))
        grad = za.T @ (counts - row_tot[:, np.newaxis] * p) / n
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            return FitResult(w0 + a @ b, b, not (separated and r > 0), it - 1, gnorm)
        if r == 0:
            return FitResult(w0.copy(), b, True, it - 1, gnorm)
        hess = np.zeros((r * d2, r * d2))
        for i in range(zs.shape[0]):
            c = np.diag(p[i]) - np.outer(p[i], p[i])
            hess += (row_tot[i] / n) * np.kron(c, np.outer(za[i], za[i]))
        step_vec = sym_pinv(hess, 1e-12) @ grad.flatten(order="F")
        step = step_vec.reshape((r, d2), order="F")
        scale = 1.0
        for _ in range(40):
            cand = b + scale * step
            ll_cand = mean_loglik(cand)
            if ll_cand >= ll - 1e-15:
                break
            scale *= 0.5
        b = b + scale * step
        ll = mean_loglik(b)
    p = _softmax_rows(zs @ (w0 + a @ b))
    grad = za.T @ (counts - row_tot[:, np.newaxis] * p) / n
    return FitResult(w0 + a @ b, b, False, max_iter, float(np.linalg.norm(grad)))


def fit_constrained_mle(w0, a, data, tol: float = 1e-9, max_iter: int = 200) -> FitResult:
    """Maximum likelihood over ``{W0 + A B}`` with A fixed column-orthonormal.

    Returns the fitted weights and the flags described in
    :class:`FitResult`; non-convergence (for example on label-degenerate
    data, where the likelihood has no finite maximizer) returns the best
    iterate with ``converged=False``.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if a.shape[1] > 0:
        defect = np.linalg.norm(a.T @ a - np.eye(a.shape[1]), "fro")
        if defect > 1e-8:
            raise ValueError(f"A is not column-orthonormal (defect {defect:.3e})")
    if len(data) == 0:
        raise ValueError("empty dataset")
    zs, counts = _compress(data)
    if counts.shape[1] < w0.shape[1]:
        counts = np.hstack(
            [counts, np.zeros((counts.shape[0], w0.shape[1] - counts.shape[1]))]
        )
    return _fit_counts(zs, counts, w0, a, tol, max_iter)


@dataclass
class TrialConfig:
    """One Monte Carlo experiment: N samples per trial, a fixed subspace A."""

    n_samples: int
    trials: int
    seed: int
    w0: np.ndarray
    w_tgt: np.ndarray
    a: np.ndarray
    fit_tol: float = 1e-9
    fit_max_iter: int = 200

    def __post_init__(self):
        self.w0 = np.asarray(self.w0, dtype=np.float64)
        self.w_tgt = np.asarray(self.w_tgt, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.a.shape[1] > 0:
            defect = np.linalg.norm(self.a.T @ self.a - np.eye(self.a.shape[1]), "fro")
            if defect > 1e-10:
                raise ValueError(f"A is not column-orthonormal (defect {defect:.3e})")

    @property
    def closeness_constant(self) -> float:
        """||W_tgt - W0||_F * sqrt(N), the scale of the displacement."""
        return float(np.linalg.norm(self.w_tgt - self.w0, "fro") * math.sqrt(self.n_samples))


@dataclass
class MCReport:
    """Monte Carlo aggregates and the matching closed-form predictions.

    ``mean_sq_total`` estimates E||What - W_tgt||_F^2, ``mean_sq_var`` the
    in-subspace part E||What - W_proj||_F^2 and ``bias_sq`` the deterministic
    ||W_proj - W_tgt||_F^2; the first equals the sum of the other two exactly
    per trial. ``theory_var`` is tr(pinv(Abar^T J(W_tgt) Abar)) / N and
    ``theory_bound`` adds the bias to the relaxed per-column variance bound
    tr(Abar^T pinv(J(W0)) Abar) / N.
    """

    mean_sq_total: float
    mean_sq_var: float
    bias_sq: float
    theory_var: float
    theory_bound: float
    trials_used: int
    trials_failed: int
    se_total: float
    se_var: float
    n_samples: int
    closeness_constant: float
    delta_sq: float
    proj_sq: float
    max_pythagoras_defect: float
    sq_total_per_trial: np.ndarray | None = field(default=None, repr=False)

    def to_lines(self) -> list[str]:
        keys = (
            "mean_sq_total mean_sq_var bias_sq theory_var theory_bound trials_used "
            "trials_failed se_total se_var n_samples closeness_constant delta_sq "
            "proj_sq max_pythagoras_defect"
        ).split()
        return [f"{k}={getattr(self, k)!r}" for k in keys]


def run_asymptotics(model: SyntheticModel, cfg: TrialConfig) -> MCReport:
    """Repeated constrained fits versus the closed-form error decomposition."""
    delta = cfg.w_tgt - cfg.w0
    w_proj = cfg.w0 + cfg.a @ (cfg.a.T @ delta)
    bias_sq = float(np.linalg.norm(w_proj - cfg.w_tgt, "fro") ** 2)

    sq_total: list[float] = []
    sq_var: list[float] = []
    failed = 0
    max_defect = 0.0
    for t in range(cfg.trials):
        data = sample_dataset(model, cfg.w_tgt, cfg.n_samples, seed=[cfg.seed, t])
        fit = fit_constrained_mle(
            cfg.w0, cfg.a, data, tol=cfg.fit_tol, max_iter=cfg.fit_max_iter
        )
        if not fit.converged:
            failed += 1
            continue
        st = float(np.linalg.norm(fit.w_hat - cfg.w_tgt, "fro") ** 2)
        sv = float(np.linalg.norm(fit.w_hat - w_proj, "fro") ** 2)
        max_defect = max(max_defect, abs(st - (sv + bias_sq)))
        sq_total.append(st)
        sq_var.append(sv)

    used = len(sq_total)
    if used == 0:
        raise RuntimeError("all trials failed to converge")
    mean_total = math.fsum(sq_total) / used
    mean_var = math.fsum(sq_var) / used
    se_total = float(np.std(sq_total, ddof=1) / math.sqrt(used)) if used > 1 else float("nan")
    se_var = float(np.std(sq_var, ddof=1) / math.sqrt(used)) if used > 1 else float("nan")

    j_tgt = exact_fisher(model, cfg.w_tgt)
    abar = lifted_basis(cfg.a, model.d2)
    theory_var = float(np.trace(sym_pinv(abar.T @ j_tgt @ abar))) / cfg.n_samples
    j0_pinv = sym_pinv(exact_fisher(model, cfg.w0))
    theory_bound = bias_sq + float(np.trace(abar.T @ j0_pinv @ abar)) / cfg.n_samples

    return MCReport(
        mean_sq_total=mean_total,
        mean_sq_var=mean_var,
        bias_sq=bias_sq,
        theory_var=theory_var,
        theory_bound=theory_bound,
        trials_used=used,
        trials_failed=failed,
        se_total=se_total,
        se_var=se_var,
        n_samples=cfg.n_samples,
        closeness_constant=cfg.closeness_constant,
        delta_sq=float(np.linalg.norm(delta, "fro") ** 2),
        proj_sq=float(np.linalg.norm(cfg.a.T @ delta, "fro") ** 2),
        max_pythagoras_defect=max_defect,
        sq_total_per_trial=np.asarray(sq_total),
    )


def verify_trace_inequality(j: np.ndarray, a: np.ndarray) -> float:
    """Gap tr(A^T J^{-1} A) - tr((A^T J A)^{-1}), non-negative for SPD J.

    The gap vanishes exactly when span(A) is invariant under J (for example
    when the columns of A are eigenvectors of J).
    """
    j = np.asarray(j, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    eigs = np.linalg.eigvalsh(0.5 * (j + j.T))
    if eigs[0] <= 0:
        raise ValueError(f"J must be positive definite (min eigenvalue {eigs[0]:.3e})")
    reduced = a.T @ j @ a
    red_eigs = np.linalg.eigvalsh(0.5 * (reduced + reduced.T))
    if red_eigs[0] <= 0:
        raise ValueError("A^T J A is singular")
    lhs = float(np.trace(a.T @ np.linalg.solve(j, a)))
    rhs = float(np.trace(np.linalg.inv(reduced)))
    return lhs - rhs


@dataclass
class SweepResult:
    n_list: list[int]
    distances: list[float]
    slope: float | None
    exact_zero: bool


def fisher_distance_sweep(
    model: SyntheticModel, w0: np.ndarray, c: float, n_list, direction=None, seed: int = 0
) -> SweepResult:
    """Rate of ||pinv J(W0 + c/sqrt(N) dir) - pinv J(W0)||_F against N.

    Returns the log-log regression slope over ``n_list``; a displacement
    shrinking like 1/sqrt(N) should give a slope near -1/2. With c = 0 the
    distances are exactly zero and the slope is undefined.
    """
    n_list = [int(n) for n in n_list]
    if not n_list:
        raise ValueError("need at least one sample size")
    w0 = np.asarray(w0, dtype=np.float64)
    if direction is None:
        rng = np.random.default_rng(seed)
        direction = rng.standard_normal(w0.shape)
        # keep the probe direction identifiable: remove the softmax shift part
        direction -= direction.mean(axis=1, keepdims=True)
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction, "fro")
    j0_pinv = sym_pinv(exact_fisher(model, w0))
    distances = []
    for n in n_list:
        w_tgt = w0 + (c / math.sqrt(n)) * direction
        jt_pinv = sym_pinv(exact_fisher(model, w_tgt))
        distances.append(float(np.linalg.norm(jt_pinv - j0_pinv, "fro")))
    if all(d == 0.0 for d in distances):
        return SweepResult(n_list, distances, None, True)
    if len(n_list) < 2:
        return SweepResult(n_list, distances, None, False)
    slope = float(np.polyfit(np.log(n_list), np.log(distances), 1)[0])
    return SweepResult(n_list, distances, slope, False)


@dataclass
class CandidateOutcome:
    label: str
    mean_sq_total: float
    se: float
    sq_per_trial: np.ndarray = field(repr=False)


@dataclass
class ComparisonReport:
    candidates: list[CandidateOutcome]
    random_mean: float
    best_random: CandidateOutcome
    guided_beats_random_mean: bool
    guided_within_one_se_of_best: bool

    def outcome(self, label: str) -> CandidateOutcome:
        for c in self.candidates:
            if c.label == label:
                return c
        raise KeyError(label)


def exact_guidance_matrix(
    model: SyntheticModel, w0: np.ndarray, w_tgt: np.ndarray, n_samples: int
) -> np.ndarray:
    """Guidance matrix with exact Fisher blocks and the exact displacement."""
    d1, d2 = w0.shape
    j0_pinv = sym_pinv(exact_fisher(model, w0))
    var_term = np.zeros((d1, d1))
    for i in range(d2):
        var_term += j0_pinv[i * d1 : (i + 1) * d1, i * d1 : (i + 1) * d1]
    delta = w_tgt - w0
    omega = var_term / n_samples - delta @ delta.T
    return 0.5 * (omega + omega.T)


def init_comparison(
    model: SyntheticModel,
    cfg: TrialConfig,
    rank: int,
    n_random: int = 50,
    modes=("full", "no_var", "grad_svd"),
) -> ComparisonReport:
    """Mean fine-tuning error of guided versus random subspace choices.

    All candidates share the per-trial datasets (common random numbers), so
    differences between candidates are paired and their standard errors are
    small compared to the raw trial noise.
    """
    d2 = model.d2
    delta = cfg.w_tgt - cfg.w0
    j0 = exact_fisher(model, cfg.w0)
    candidates: list[tuple[str, np.ndarray]] = []
    if "full" in modes:
        omega = exact_guidance_matrix(model, cfg.w0, cfg.w_tgt, cfg.n_samples)
        a_full, _ = linalg.quad_min_orthonormal(omega, rank)
        candidates.append(("full", a_full))
    if "no_var" in modes:
        u, _, _ = linalg.svd_thin(delta)
        candidates.append(("no_var", u[:, :rank]))
    if "grad_svd" in modes:
        g_pop = -(j0 @ delta.flatten(order="F")).reshape(cfg.w0.shape, order="F")
        u, _, _ = linalg.svd_thin(g_pop)
        candidates.append(("grad_svd", u[:, :rank]))
    rng = np.random.default_rng(cfg.seed + 991)
    for k in range(n_random):
        q, _ = np.linalg.qr(rng.standard_normal((model.d1, rank)))
        candidates.append((f"random_{k}", q))

    # one dataset per trial, shared across every candidate
    compressed = []
    for t in range(cfg.trials):
        data = sample_dataset(model, cfg.w_tgt, cfg.n_samples, seed=[cfg.seed, t])
        zs, counts = _compress(data)
        if counts.shape[1] < d2:
            counts = np.hstack([counts, np.zeros((counts.shape[0], d2 - counts.shape[1]))])
        compressed.append((zs, counts))

    outcomes = []
    for label, a in candidates:
        sqs = []
        for zs, counts in compressed:
            fit = _fit_counts(zs, counts, cfg.w0, a, cfg.fit_tol, cfg.fit_max_iter)
            if not fit.converged:
                continue
            sqs.append(float(np.linalg.norm(fit.w_hat - cfg.w_tgt, "fro") ** 2))
        arr = np.asarray(sqs)
        outcomes.append(
            CandidateOutcome(
                label=label,
                mean_sq_total=float(arr.mean()),
                se=float(arr.std(ddof=1) / math.sqrt(len(arr))),
                sq_per_trial=arr,
            )
        )

    randoms = [o for o in outcomes if o.label.startswith("random_")]
    random_mean = float(np.mean([o.mean_sq_total for o in randoms]))
    best_random = min(randoms, key=lambda o: o.mean_sq_total)
    report = ComparisonReport(
        candidates=outcomes,
        random_mean=random_mean,
        best_random=best_random,
        guided_beats_random_mean=True,
        guided_within_one_se_of_best=True,
    )
    if "full" in modes:
        full = report.outcome("full")
        report.guided_beats_random_mean = full.mean_sq_total <= random_mean
        # paired comparison against the best random draw
        k = min(len(full.sq_per_trial), len(best_random.sq_per_trial))
        diff = full.sq_per_trial[:k] - best_random.sq_per_trial[:k]
        se_diff = float(diff.std(ddof=1) / math.sqrt(k)) if k > 1 else float("inf")
        report.guided_within_one_se_of_best = float(diff.mean()) <= se_diff
    return report
