"""Dense and iterative symmetric linear algebra kernels.

Everything here is a pure function on immutable arrays: symmetric
eigendecomposition, orthonormal-frame quadratic minimization, a block
iterative solver for extremal eigenpairs of an implicit symmetric operator,
damped SPD factorization/solve, thin SVD and QR orthonormalization.

Eigenvalues are always returned in ascending order, so the minimizing
r-frame of a quadratic form is always "the first r columns". Degenerate
eigenvalues admit any orthonormal basis of their eigenspace; callers that
compare results should compare subspace projectors, not raw vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

# dense eigendecomposition is preferred up to this width; above it the
# implicit-operator iterative path avoids materializing d x d matrices
DENSE_EIG_MAX_DIM = 1024


@dataclass
class SymEigResult:
    """Eigenpairs of a symmetric matrix or operator, eigenvalues ascending.

    ``eigenvectors[:, i]`` pairs with ``eigenvalues[i]``. ``converged`` is
    False only when the iterative path ran out of iterations; the fields then
    hold the best iterate.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    converged: bool = True
    iterations: int = 0


@dataclass
class SpdFactor:
    """Cholesky factorization of ``M + lam * I`` for repeated solves."""

    chol: tuple
    lam: float
    dim: int
    near_singular: bool = False


def _as_square_sym(m, tol=1e-9):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    scale = max(1.0, float(np.linalg.norm(m, "fro")))
    defect = float(np.linalg.norm(m - m.T, "fro"))
    if defect > tol * scale:
        raise ValueError(f"matrix is not symmetric (defect {defect:.3e} > {tol:.0e} * scale)")
    return 0.5 * (m + m.T)


def sym_eig_dense(m) -> SymEigResult:
    """Full eigendecomposition of a symmetric matrix, eigenvalues ascending."""
    m = _as_square_sym(m)
    w, u = scipy.linalg.eigh(m)
    return SymEigResult(eigenvalues=w, eigenvectors=u)


def quad_min_orthonormal(m, r: int):
    """Minimize tr(Q^T M Q) over column-orthonormal d x r frames.

    Returns ``(q_star, value)`` where the columns of ``q_star`` are
    eigenvectors for the r smallest eigenvalues and ``value`` is their sum,
    the attained minimum.
    """
    m = _as_square_sym(m)
    d = m.shape[0]
    if not 1 <= r <= d:
        raise ValueError(f"rank r={r} out of range [1, {d}]")
    res = sym_eig_dense(m)
    q = res.eigenvectors[:, :r].copy()
    return q, float(np.sum(res.eigenvalues[:r]))


def _probe_symmetry(apply, d, rng, n_probes=16, tol=1e-8):
    """Reject operators whose bilinear form is measurably asymmetric."""
    norm_est = 1.0
    for _ in range(n_probes):
        u = rng.standard_normal(d)
        v = rng.standard_normal(d)
        au = apply(u.reshape(d, 1)).ravel()
        av = apply(v.reshape(d, 1)).ravel()
        norm_est = max(norm_est, np.linalg.norm(au) / np.linalg.norm(u))
        norm_est = max(norm_est, np.linalg.norm(av) / np.linalg.norm(v))
        defect = abs(float(u @ av) - float(v @ au))
        if defect > tol * np.linalg.norm(u) * np.linalg.norm(v) * norm_est:
            raise ValueError(
                f"operator failed the symmetry probe (defect {defect:.3e}, "
                f"norm estimate {norm_est:.3e})"
            )


def smallest_eigpairs_lobpcg(
    apply, d: int, r: int, tol: float = 1e-6, max_iter: int = 500, seed: int = 0
) -> SymEigResult:
    """Locally optimal block preconditioned CG for the r smallest eigenpairs.

    ``apply`` must accept a (d, k) block and return the operator applied to
    each column; it is probed for symmetry before iterating. Convergence is
    declared when every residual satisfies
    ``||A v - lam v|| <= tol * max(1, |lam|)``. On stagnation past
    ``max_iter`` the best iterate is returned with ``converged=False``.

    The trial subspace is [X, R, P] re-orthonormalized each sweep via a
    rank-revealing SVD, which keeps the Rayleigh-Ritz step well conditioned
    on indefinite spectra.
    """
    if not 1 <= r <= d:
        raise ValueError(f"block size r={r} out of range [1, {d}]")
    rng = np.random.default_rng(seed)
    _probe_symmetry(apply, d, rng)

    if 3 * r + 2 >= d:
        # the trial basis would span nearly all of R^d; densify instead
        dense = apply(np.eye(d))
        res = sym_eig_dense(0.5 * (dense + dense.T))
        return SymEigResult(res.eigenvalues[:r], res.eigenvectors[:, :r], True, 0)

    x, _ = np.linalg.qr(rng.standard_normal((d, r)))
    ax = apply(x)
    p = ap = None
    for it in range(1, max_iter + 1):
        g = x.T @ ax
        theta, c = np.linalg.eigh(0.5 * (g + g.T))
        x, ax = x @ c, ax @ c
        resid = ax - x * theta
        if np.all(np.linalg.norm(resid, axis=0) <= tol * np.maximum(1.0, np.abs(theta))):
            return SymEigResult(theta, x, True, it)

        blocks, ablocks = [x, resid], [ax, apply(resid)]
        if p is not None:
            blocks.append(p)
            ablocks.append(ap)
        s = np.hstack(blocks)
        a_s = np.hstack(ablocks)
        u, sv, vt = np.linalg.svd(s, full_matrices=False)
        keep = sv > 1e-10 * sv[0]
        basis = u[:, keep]
        # A @ basis without re-applying: basis = s @ (vt.T[:, keep] / sv[keep])
        a_basis = a_s @ (vt.T[:, keep] / sv[keep])
        gs = basis.T @ a_basis
        _, c2 = np.linalg.eigh(0.5 * (gs + gs.T))
        y = c2[:, :r]
        x_new, ax_new = basis @ y, a_basis @ y
        cx = x.T @ x_new
        p_dir = x_new - x @ cx
        q, rr = np.linalg.qr(p_dir)
        diag = np.abs(np.diag(rr))
        dkeep = diag > 1e-12 * max(diag.max(), 1e-300)
        if dkeep.any():
            p = q[:, dkeep]
            ap = apply(p)
        else:
            p = ap = None
        x, ax = x_new, ax_new

    g = x.T @ ax
    theta, c = np.linalg.eigh(0.5 * (g + g.T))
    return SymEigResult(theta, x @ c, False, max_iter)


def factorize_spd(m, damping_scale: float) -> SpdFactor:
    """Cholesky-factorize ``M + lam I`` with ``lam = damping_scale * tr(M)/d``.

    The damping has an absolute floor of 1e-12 so that exactly singular
    sample moments still factorize; a factor whose pivots are all tiny is
    flagged ``near_singular`` rather than rejected.
    """
    m = _as_square_sym(m)
    if damping_scale < 0:
        raise ValueError("damping_scale must be >= 0")
    d = m.shape[0]
    lam = max(damping_scale * float(np.trace(m)) / d, 1e-12)
    try:
        # finiteness already verified by the symmetry gate above
        chol = scipy.linalg.cho_factor(m + lam * np.eye(d), lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        pivots = np.linalg.eigvalsh(m + lam * np.eye(d))
        raise ValueError(
            f"SPD factorization failed even with damping {lam:.3e} "
            f"(smallest pivot {pivots[0]:.3e})"
        ) from exc
    diag = np.abs(np.diag(chol[0]))
    near_singular = bool(diag.min() <= 1e-6 * max(diag.max(), 1e-300)) or lam >= diag.max() ** 2
    return SpdFactor(chol=chol, lam=lam, dim=d, near_singular=near_singular)


def spd_solve(factor: SpdFactor, b) -> np.ndarray:
    """Solve ``(M + lam I) X = B`` using a prepared factor."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != factor.dim:
        raise ValueError(f"rhs has {b.shape[0]} rows, factor dimension is {factor.dim}")
    return scipy.linalg.cho_solve(factor.chol, b, check_finite=False)


def spd_inverse(factor: SpdFactor) -> np.ndarray:
    """Dense inverse of ``M + lam I`` from its Cholesky factor (LAPACK potri)."""
    c, lower = factor.chol
    inv, info = scipy.linalg.lapack.dpotri(c, lower=lower)
    if info != 0:
        raise ValueError(f"inverse from Cholesky factor failed (info={info})")
    if lower:
        out = np.tril(inv) + np.tril(inv, -1).T
    else:
        out = np.triu(inv) + np.triu(inv, 1).T
    return out


def sym_eig_smallest_dense(m, r: int) -> SymEigResult:
    """Only the r smallest eigenpairs of a symmetric matrix (dense solver)."""
    m = _as_square_sym(m)
    if not 1 <= r <= m.shape[0]:
        raise ValueError(f"rank r={r} out of range [1, {m.shape[0]}]")
    w, u = scipy.linalg.eigh(m, subset_by_index=[0, r - 1])
    return SymEigResult(eigenvalues=w, eigenvectors=u)


def sym_eig_largest_dense(m, r: int) -> SymEigResult:
    """Only the r largest eigenpairs, returned in descending order."""
    m = _as_square_sym(m)
    d = m.shape[0]
    if not 1 <= r <= d:
        raise ValueError(f"rank r={r} out of range [1, {d}]")
    w, u = scipy.linalg.eigh(m, subset_by_index=[d - r, d - 1])
    return SymEigResult(eigenvalues=w[::-1].copy(), eigenvectors=u[:, ::-1].copy())


def svd_thin(m):
    """Thin SVD ``M = U diag(S) V^T`` with singular values descending.

    Returns ``(u, s, v)`` with V (not V^T), so columns of both u and v pair
    with entries of s.
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return u, s, vt.T


def orthonormalize(q) -> np.ndarray:
    """QR-orthonormalize the columns of ``q``, preserving their span.

    Raises on rank deficiency (smallest R pivot below 1e-10 of the largest).
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {q.shape}")
    qq, rr = np.linalg.qr(q)
    diag = np.abs(np.diag(rr))
    if diag.min() < 1e-10 * max(diag.max(), 1e-300):
        raise ValueError(
            f"columns are numerically rank deficient (pivot ratio {diag.min() / diag.max():.3e})"
        )
    return qq
