"""Adapter initialization from sampled curvature statistics.

Given per-layer statistics (mean gradient G, input second moment Zf,
output-gradient second moment Yf, total fine-tune size N) this module

1. estimates the parameter displacement toward the target optimum column by
   column as ``D[:, i] = -(Zf + lam I)^{-1} G[:, i] * [(Yf + lam' I)^{-1}]_(i,i)``,
   i.e. minus the blockwise inverse curvature applied to the gradient;
2. assembles the guidance operator
   ``Omega = tr((Yf + lam' I)^{-1}) / N * (Zf + lam I)^{-1} - D D^T``,
   whose first term prices per-direction estimation variance and whose
   second term rewards directions that capture the displacement (the sum of
   the per-column inverse-curvature blocks collapses to the trace factor
   because each block is the same matrix scaled by one diagonal entry);
3. returns A0 as the eigenvectors of Omega for its r smallest eigenvalues
   and B0 = A0^T D, so that W0 + A0 B0 is the orthogonal projection of
   W0 + D onto the adapter subspace.

Baseline and ablation modes (variance-only, displacement-only, plain
gradient SVD, principal/minor weight SVD) share the same entry point.

Omega is materialized densely only up to ``DENSE_EIG_MAX_DIM``; above that
it is applied implicitly (one triangular solve plus a rank-bounded
correction per matvec) and the iterative eigensolver is used, so no d1 x d1
matrix beyond Zf itself is ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np

from . import linalg
from .linalg import DENSE_EIG_MAX_DIM, SpdFactor
from .stats import LayerStats


class InitMode(IntEnum):
    """Initialization strategies; integer values are the on-disk encoding."""

    FULL = 0
    NO_BIAS = 1
    NO_VAR = 2
    GRAD_SVD = 3
    PISSA = 4
    MILORA = 5


# ablation naming used in reports: estimating the displacement with the raw
# gradient instead of the inverse-curvature gradient
NO_VAR_NO_FISHER = InitMode.GRAD_SVD

_MODE_NAMES = {
    InitMode.FULL: "full",
    InitMode.NO_BIAS: "no-bias",
    InitMode.NO_VAR: "no-var",
    InitMode.GRAD_SVD: "grad-svd",
    InitMode.PISSA: "pissa",
    InitMode.MILORA: "milora",
}
_NAME_MODES = {v: k for k, v in _MODE_NAMES.items()}
_NAME_MODES["no-var-no-fisher"] = InitMode.GRAD_SVD


def mode_name(mode: InitMode) -> str:
    return _MODE_NAMES[InitMode(mode)]


def parse_mode(name: str) -> InitMode:
    try:
        return _NAME_MODES[name.strip().lower()]
    except KeyError:
        raise ValueError(
            f"unknown init mode {name!r}; choose from {sorted(_NAME_MODES)}"
        ) from None


class EigPath(Enum):
    DENSE = "dense"
    LOBPCG = "lobpcg"
    AUTO = "auto"


@dataclass
class GuidanceConfig:
    rank: int
    n_total: int
    damping_scale: float = 1e-4
    mode: InitMode = InitMode.FULL
    eig_path: EigPath = EigPath.AUTO
    grad_step_scale: float = 1.0
    lobpcg_tol: float = 1e-6
    lobpcg_max_iter: int = 500
    seed: int = 0

    def validate(self, d1: int, d2: int):
        if not 1 <= self.rank <= min(d1, d2):
            raise ValueError(f"rank {self.rank} out of range [1, {min(d1, d2)}]")
        if self.n_total < 1:
            raise ValueError("n_total must be >= 1")


@dataclass
class DeltaEstimate:
    """Estimated displacement from the pretrained weights to the target optimum."""

    matrix: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("delta estimate has non-finite entries")


@dataclass
class GuidanceOperator:
    """The guidance matrix held as an implicit symmetric operator.

    ``apply`` computes ``(c / n_total) * (Zf + lam I)^{-1} v - D (D^T v)``
    where ``c = tr((Yf + lam' I)^{-1})``. A dense copy is materialized lazily
    for widths where the dense eigensolver is preferred.
    """

    inv_trace_y: float
    zf_factor: SpdFactor
    delta: DeltaEstimate
    n_total: int
    dense: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.zf_factor.dim

    def apply(self, v: np.ndarray) -> np.ndarray:
        d = self.delta.matrix
        return (self.inv_trace_y / self.n_total) * linalg.spd_solve(
            self.zf_factor, v
        ) - d @ (d.T @ v)

    def materialize(self) -> np.ndarray:
        if self.dense is None:
            d = self.delta.matrix
            inv = linalg.spd_inverse(self.zf_factor)
            dense = (self.inv_trace_y / self.n_total) * inv - d @ d.T
            self.dense = 0.5 * (dense + dense.T)
        return self.dense


@dataclass
class InitResult:
    """Adapter initialization for one layer.

    ``a0`` is column-orthonormal except in the weight-SVD modes, which scale
    the singular vectors and set ``orthonormal=False``; those modes also
    return the residual base weight to install in place of W0.
    """

    a0: np.ndarray
    b0: np.ndarray
    omega_eigvals: np.ndarray
    mode: InitMode
    orthonormal: bool = True
    w_residual: np.ndarray | None = None
    converged: bool = True


def _damped_inverse_y(yf: np.ndarray, damping_scale: float):
    """Inverse of the damped output-gradient moment; returns (inverse, trace).

    Uses the same relative damping rule as the input-moment factorization.
    """
    inv = linalg.spd_inverse(linalg.factorize_spd(yf, damping_scale))
    return inv, float(np.trace(inv))


def _delta_from_prepared(zf_factor, y_inv_diag, g) -> np.ndarray:
    solved = linalg.spd_solve(zf_factor, g)
    return -solved * y_inv_diag[np.newaxis, :]


def estimate_delta(stats: LayerStats, damping_scale: float) -> DeltaEstimate:
    """Blockwise inverse-curvature gradient estimate of the displacement.

    Both second moments receive the same relative damping
    ``lam = damping_scale * tr(M)/dim`` (floored at 1e-12) before inversion;
    sample estimates from a few hundred samples are rank deficient at real
    layer widths.
    """
    zf_factor = linalg.factorize_spd(stats.zf, damping_scale)
    y_inv, _ = _damped_inverse_y(stats.yf, damping_scale)
    return DeltaEstimate(matrix=_delta_from_prepared(zf_factor, np.diag(y_inv), stats.g))


def build_omega(
    stats: LayerStats, delta: DeltaEstimate, cfg: GuidanceConfig, _zf_factor=None,
    _inv_trace_y=None,
) -> GuidanceOperator:
    """Assemble the guidance operator from finalized statistics."""
    cfg.validate(*stats.dims)
    zf_factor = _zf_factor or linalg.factorize_spd(stats.zf, cfg.damping_scale)
    if _inv_trace_y is None:
        _, _inv_trace_y = _damped_inverse_y(stats.yf, cfg.damping_scale)
    op = GuidanceOperator(
        inv_trace_y=_inv_trace_y,
        zf_factor=zf_factor,
        delta=delta,
        n_total=cfg.n_total,
    )
    d1 = stats.dims[0]
    if cfg.eig_path is EigPath.DENSE or (
        cfg.eig_path is EigPath.AUTO and d1 <= DENSE_EIG_MAX_DIM
    ):
        op.materialize()
    return op


def _smallest_eigpairs(op: GuidanceOperator, cfg: GuidanceConfig):
    """Dispatch between the dense and iterative eigensolvers."""
    d1 = op.dim
    use_dense = cfg.eig_path is EigPath.DENSE or (
        cfg.eig_path is EigPath.AUTO and d1 <= DENSE_EIG_MAX_DIM
    )
    if use_dense:
        res = linalg.sym_eig_smallest_dense(op.materialize(), cfg.rank)
        return res.eigenvalues, res.eigenvectors, True
    res = linalg.smallest_eigpairs_lobpcg(
        op.apply, d1, cfg.rank, tol=cfg.lobpcg_tol,
        max_iter=cfg.lobpcg_max_iter, seed=cfg.seed,
    )
    return res.eigenvalues, res.eigenvectors, res.converged


def compute_init(
    stats: LayerStats, cfg: GuidanceConfig, w0: np.ndarray | None = None
) -> InitResult:
    """Compute (A0, B0) for one layer under the configured mode."""
    cfg.validate(*stats.dims)
    r = cfg.rank
    mode = InitMode(cfg.mode)

    if mode in (InitMode.PISSA, InitMode.MILORA):
        if w0 is None:
            raise ValueError(f"mode {mode_name(mode)} requires the pretrained weight w0")
        u, s, v = linalg.svd_thin(w0)
        cols = slice(0, r) if mode is InitMode.PISSA else slice(len(s) - r, len(s))
        su = np.sqrt(s[cols])
        a0 = u[:, cols] * su[np.newaxis, :]
        b0 = su[:, np.newaxis] * v[:, cols].T
        return InitResult(
            a0=a0,
            b0=b0,
            omega_eigvals=s[cols].copy(),
            mode=mode,
            orthonormal=False,
            w_residual=w0 - a0 @ b0,
        )

    if mode is InitMode.GRAD_SVD:
        u, s, _ = linalg.svd_thin(stats.g)
        a0 = u[:, :r].copy()
        b0 = a0.T @ (-stats.g) * cfg.grad_step_scale
        return InitResult(a0=a0, b0=b0, omega_eigvals=-(s[:r] ** 2), mode=mode)

    zf_factor = linalg.factorize_spd(stats.zf, cfg.damping_scale)
    y_inv, inv_trace_y = _damped_inverse_y(stats.yf, cfg.damping_scale)
    delta = DeltaEstimate(
        matrix=_delta_from_prepared(zf_factor, np.diag(y_inv), stats.g)
    )

    if mode is InitMode.NO_VAR:
        u, s, _ = linalg.svd_thin(delta.matrix)
        a0 = u[:, :r].copy()
        return InitResult(
            a0=a0, b0=a0.T @ delta.matrix, omega_eigvals=-(s[:r] ** 2), mode=mode
        )

    if mode is InitMode.NO_BIAS:
        # variance term alone: smallest eigenpairs of the inverse moment are
        # the largest eigenpairs of the damped moment itself
        res = linalg.sym_eig_largest_dense(
            stats.zf + zf_factor.lam * np.eye(stats.dims[0]), r
        )
        eig = (inv_trace_y / cfg.n_total) / res.eigenvalues
        return InitResult(
            a0=res.eigenvectors, b0=res.eigenvectors.T @ delta.matrix,
            omega_eigvals=eig, mode=mode,
        )

    op = build_omega(stats, delta, cfg, _zf_factor=zf_factor, _inv_trace_y=inv_trace_y)
    eigvals, a0, converged = _smallest_eigpairs(op, cfg)
    return InitResult(
        a0=a0,
        b0=a0.T @ delta.matrix,
        omega_eigvals=eigvals,
        mode=InitMode.FULL,
        converged=converged,
    )


def bias_residual(delta: DeltaEstimate, a: np.ndarray) -> float:
    """Squared distance from the estimated target to the adapter subspace.

    For column-orthonormal ``a`` this is ``||D||_F^2 - ||a^T D||_F^2``, the
    squared norm of the component of D outside span(a); non-negative up to
    rounding.
    """
    a = np.asarray(a, dtype=np.float64)
    gram_defect = np.linalg.norm(a.T @ a - np.eye(a.shape[1]), "fro")
    if gram_defect > 1e-8:
        raise ValueError(f"a is not column-orthonormal (defect {gram_defect:.3e})")
    d = delta.matrix
    return float(np.sum(d * d) - np.sum((a.T @ d) ** 2))
