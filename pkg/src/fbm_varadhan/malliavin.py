"""Malliavin derivatives and matrices of the endpoint, the bracket transport
system and its Gram matrix, and Monte Carlo scaling probes.

Derivative rows ``f^k(s) = eps J_1 J_s^{-1} V_k(X_s)`` are sampled at the coarse
grid nodes and read as step functions with left-endpoint values, so every
``H``-inner product reduces to the exact Gram form.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .errors import DomainError
from .fields import BracketTable, hypo_check, local_spanning_eigenvalue, omega_tensor
from .flow import Trajectory, solve_batch
from .gaussian_driver import GridSpec, sample_fbm
from .hilbert import GramForm, gram_matrix

_DEGENERATE = 1e-14
QUANTILES = (0.5, 0.9, 0.99)


@dataclass
class MalliavinRows:
    """``f[k, i, j] = eps * (J_1 J_{t_j}^{-1} V_k(X_{t_j}))_i`` at coarse nodes."""

    f: np.ndarray
    eps: float
    spec: GridSpec


@dataclass
class MalliavinMatrix:
    gamma: np.ndarray
    eps: float

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.clip(np.linalg.eigvalsh(self.gamma), 0.0, None)

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.gamma))


@dataclass
class BetaState:
    """Transport coefficients ``beta[k, I, J]`` on the refined grid; ``beta[0] = Id``."""

    beta: np.ndarray
    words: tuple
    eps: float
    l: int
    substeps: int


def malliavin_rows(traj: Trajectory, sys, eps: float) -> MalliavinRows:
    """Derivative rows of ``X_1`` at the coarse nodes; the row at ``s = 1`` is ``eps V(X_1)``."""
    Xc = traj.coarse(traj.X)
    Jic = traj.coarse(traj.Jinv)
    V = sys.V(Xc.T)  # (m+1, n, d)
    inner = np.einsum("abt,tbk->kat", Jic, V)
    f = eps * np.einsum("ab,kbt->kat", traj.J1, inner)
    return MalliavinRows(f, float(eps), traj.spec)


def _steps(rows: MalliavinRows) -> np.ndarray:
    """Left-endpoint step coefficients, shape ``(d, n, m)``."""
    return rows.f[:, :, :-1]


def malliavin_matrix(rows: MalliavinRows, Q: GramForm) -> MalliavinMatrix:
    """``gamma^{ab} = sum_k <f^{k,a}, f^{k,b}>`` via the Gram form."""
    if Q.spec.m != rows.spec.m:
        raise DomainError("rows and Gram form live on different grids")
    psi = _steps(rows)
    g = np.einsum("kaj,jl,kbl->ab", psi, Q.Q, psi)
    return MalliavinMatrix(0.5 * (g + g.T), rows.eps)


def kernel_gram(spec: GridSpec) -> np.ndarray:
    """Gram matrix from the double integral of ``H(2H-1)|u-v|^{2H-2}`` (``H > 1/2`` only).

    Each Toeplitz lag is integrated by adaptive quadrature on the difference
    variable; used as an independent check of the covariance route.
    """
    H = spec.H
    if H <= 0.5:
        raise DomainError("kernel representation needs H > 1/2")
    a = H * (2 * H - 1)
    dt = spec.dt
    lags = np.empty(spec.m)
    for k in range(spec.m):
        f = lambda r: (dt - abs(r)) * abs(k * dt + r) ** (2 * H - 2)
        pts = [0.0] + ([-k * dt] if k == 1 else [])
        val, _ = integrate.quad(f, -dt, dt, points=pts, limit=200, epsabs=1e-14, epsrel=1e-12)
        lags[k] = a * val
    idx = np.arange(spec.m)
    return lags[np.abs(idx[:, None] - idx[None, :])]


def malliavin_matrix_kernel(rows: MalliavinRows) -> MalliavinMatrix:
    """Same matrix as :func:`malliavin_matrix` through the fractional kernel."""
    K = kernel_gram(rows.spec)
    psi = _steps(rows)
    g = np.einsum("kaj,jl,kbl->ab", psi, K, psi)
    return MalliavinMatrix(0.5 * (g + g.T), rows.eps)


# ---------------------------------------------------------------------------
# bracket transport system


def _raw_increments(traj: Trajectory, eps: float) -> np.ndarray:
    if eps == 0:
        return np.zeros_like(traj.increments)
    return traj.increments / eps


def _taylor4(Z):
    Z2 = Z @ Z
    Z3 = Z2 @ Z
    eye = np.broadcast_to(np.eye(Z.shape[-1]), Z.shape)
    return eye + Z + Z2 / 2 + Z3 / 6 + Z3 @ Z / 24


def _propagate(Z):
    """``beta_{k+1} = P(Z_k) beta_k`` for ``Z (..., K, S, S)``; returns ``(..., K+1, S, S)``."""
    P = _taylor4(Z)
    K = Z.shape[-3]
    S = Z.shape[-1]
    out = np.empty(Z.shape[:-3] + (K + 1, S, S))
    out[..., 0, :, :] = np.eye(S)
    for k in range(K):
        out[..., k + 1, :, :] = P[..., k, :, :] @ out[..., k, :, :]
    return out


def _omega_step_matrices(traj_X, dB, table, eps):
    """``Z_k = -sum_j Omega_j(X_k) dB_k^j`` with coefficients frozen at the left node."""
    W = omega_tensor(table, traj_X, eps)  # (..., K, d, S, S)
    return -np.einsum("...kjab,...kj->...kab", W, dB)


def beta_system(traj: Trajectory, table: BracketTable, eps: float, l: int | None = None) -> BetaState:
    """Solve ``d beta = -sum_j Omega_j(X) beta dB^j``, ``beta(0) = Id``.

    ``Omega_j[I, K] = eps^{|I*j|-|K|} w^K_{I*j}(X)`` over the table's words.
    The coefficients are frozen at the left node of each refined step and the
    constant-coefficient step is taken with the fourth-order Taylor propagator,
    so the scheme is first order in the step through the coefficient freezing.

    Raises
    ------
    OmegaSpanError
        If a bracket cannot be expanded at some node of the trajectory.
    """
    l = table.l if l is None else l
    if any(len(w) > l for w in table.words):
        raise DomainError("table words exceed the requested level")
    Xl = traj.X[:, :-1].T
    Z = _omega_step_matrices(Xl, _raw_increments(traj, eps), table, eps)
    return BetaState(_propagate(Z), table.words, float(eps), int(l), traj.substeps)


def scaled_brackets(table: BracketTable, x, eps: float) -> np.ndarray:
    """``V^eps_[I](x) = eps^{|I|} V_[I](x)`` for the table's words, shape ``(..., S, n)``."""
    lens = np.array([len(w) for w in table.words])
    return table.values(x) * (float(eps) ** lens)[:, None]


def beta_identity_residual(traj: Trajectory, beta: BetaState, table: BracketTable, eps: float) -> float:
    """``max_{t, I} |Jinv(t) V^eps_[I](X_t) - sum_J beta^J_I(t) V^eps_[J](x_0)|``."""
    lhs = np.einsum("abt,tIb->tIa", traj.Jinv, scaled_brackets(table, traj.X.T, eps))
    W0 = scaled_brackets(table, traj.X[:, 0], eps)
    rhs = np.einsum("tIJ,Ja->tIa", beta.beta, W0)
    return float(np.abs(lhs - rhs).max())


def _letter_rows(beta_coarse, words, d):
    """Left-endpoint rows ``beta[(i), K]`` for the single letters, shape ``(..., d, S, m)``."""
    pos = [words.index((i,)) for i in range(1, d + 1)]
    return np.moveaxis(beta_coarse[..., :-1, pos, :], -3, -1)


def m_matrix(beta: BetaState, Q: GramForm, d: int | None = None) -> np.ndarray:
    """Gram matrix of the transport coefficients, indexed by the table's words.

    ``M[K, K'] = sum_i <beta^K_(i), beta^K'_(i)>_H`` contracts over the driving
    letters ``i``, so that ``gamma = J_1 W^T M W J_1^T`` with ``W`` the rows
    ``V^eps_[K](x_0)``.
    """
    d = Q.spec.d if d is None else d
    bc = beta.beta[:: beta.substeps]
    if bc.shape[0] != Q.spec.m + 1:
        raise DomainError("beta and Gram form live on different grids")
    R = _letter_rows(bc, list(beta.words), d)
    M = np.einsum("iKj,jl,iLl->KL", R, Q.Q, R)
    return 0.5 * (M + M.T)


def m_eigen_series(beta: BetaState, Q: GramForm, d: int | None = None) -> np.ndarray:
    """Smallest eigenvalue of the normalised matrix ``M_t`` at each coarse node ``t > 0``."""
    d = Q.spec.d if d is None else d
    bc = beta.beta[:: beta.substeps]
    R = _letter_rows(bc, list(beta.words), d)
    lens = np.array([len(w) for w in beta.words], dtype=float)
    H = Q.spec.H
    out = []
    for j in range(1, Q.spec.m + 1):
        t = j / Q.spec.m
        Mt = np.einsum("iKa,ab,iLb->KL", R[..., :j], Q.Q[:j, :j], R[..., :j])
        scale = t ** (-lens * H)
        Mt = scale[:, None] * Mt * scale[None, :]
        out.append(np.linalg.eigvalsh(0.5 * (Mt + Mt.T))[0])
    return np.array(out)


# ---------------------------------------------------------------------------
# Monte Carlo probes


def _fine_drives(spec, N, seed, substeps, eps):
    ens = sample_fbm(spec, N, seed)
    K = spec.m * substeps
    fine = np.arange(K + 1) / K
    vals = np.stack([np.stack([np.interp(fine, spec.times, p) for p in path]) for path in ens.paths])
    return eps * vals


def malliavin_ensemble(sys, x0, spec: GridSpec, eps: float, N: int, seed: int, substeps: int = 2):
    """Trajectories and Malliavin matrices for ``N`` sampled drives.

    The same seed gives the same Gaussian paths for every ``eps`` (common random
    numbers), so changes across ``eps`` are not masked by sampling noise.
    """
    Q = gram_matrix(spec)
    trajs = solve_batch(sys, x0, spec, _fine_drives(spec, N, seed, substeps, eps), substeps, eps)
    mats = [malliavin_matrix(malliavin_rows(t, sys, eps), Q) for t in trajs]
    return trajs, mats, Q


def _fit_slope(eps, y):
    x = np.log(np.asarray(eps, dtype=float))
    y = np.log(np.asarray(y, dtype=float))
    if len(x) < 2:
        return float("nan"), float("nan")
    if len(x) == 2:
        return float((y[1] - y[0]) / (x[1] - x[0])), 0.0
    coef, cov = np.polyfit(x, y, 1, cov=True)
    return float(coef[0]), float(np.sqrt(max(cov[0, 0], 0.0)))


@dataclass
class ScalingReport:
    system: str
    H: float
    rows: list
    slope: float
    stderr: float
    degenerate: bool = False
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "H": self.H,
            "rows": self.rows,
            "slope": self.slope,
            "stderr": self.stderr,
            "degenerate": self.degenerate,
            "notes": list(self.notes),
        }


def inv_gamma_scaling(sys, x0, H: float, eps_grid, N: int, seed: int, m: int = 32, substeps: int = 2) -> ScalingReport:
    """Quantiles of ``1 / lambda_min(gamma)`` per ``eps`` and the log-log slope of the median."""
    if N < 100:
        raise DomainError("scaling probe needs N >= 100")
    if any(not 0 < e <= 1 for e in eps_grid):
        raise DomainError("eps values must lie in (0, 1]")
    spec = GridSpec(m, H, sys.d)
    rows = []
    degenerate = False
    notes = []
    for e in eps_grid:
        _, mats, _ = malliavin_ensemble(sys, x0, spec, e, N, seed, substeps)
        lam = np.array([g.lambda_min for g in mats])
        if np.any(lam < _DEGENERATE):
            degenerate = True
            msg = f"eps={e}: {int(np.sum(lam < _DEGENERATE))} samples with lambda_min < {_DEGENERATE:g}"
            warnings.warn(msg)
            notes.append(msg)
        inv = 1.0 / np.maximum(lam, np.finfo(float).tiny)
        q = np.quantile(inv, QUANTILES)
        rows.append({"eps": float(e), "median": float(q[0]), "q90": float(q[1]), "q99": float(q[2]), "N": int(N)})
    slope, se = _fit_slope([r["eps"] for r in rows], [r["median"] for r in rows])
    return ScalingReport(sys.name, float(H), rows, slope, se, degenerate, notes)


def write_scaling_csv(report: ScalingReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eps", "quantile", "value", "slope", "stderr"])
        for r in report.rows:
            for name, qv in zip(("median", "q90", "q99"), QUANTILES):
                w.writerow([repr(r["eps"]), qv, repr(r[name]), repr(report.slope), repr(report.stderr)])


@dataclass
class ChainSample:
    lambda_gamma: float
    lambda_M: float
    sigma_J1: float
    lambda_hat: float
    residual: float

    def bound(self, eps, l):
        return self.lambda_hat * eps ** (2 * l) * self.lambda_M * self.sigma_J1**2


def hypoelliptic_chain(sys, x0, table: BracketTable, H: float, eps: float, N: int, seed: int, m: int = 32, substeps: int = 2):
    """Per-sample terms of the lower bound ``lambda_min(gamma) >= lambda eps^{2l} lambda_min(M) sigma_min(J_1)^2``.

    ``lambda`` is the sampled spanning constant of ``table`` over the points of
    the realised trajectory (``x_0`` included); ``table`` should carry the
    reduced word set also used for ``M``.
    """
    spec = GridSpec(m, H, sys.d)
    trajs, mats, Q = malliavin_ensemble(sys, x0, spec, eps, N, seed, substeps)
    out = []
    for tr, g in zip(trajs, mats):
        b = beta_system(tr, table, eps)
        M = m_matrix(b, Q)
        lam_hat, _ = hypo_check(table, tr.X.T)
        out.append(
            ChainSample(
                g.lambda_min,
                float(np.linalg.eigvalsh(M)[0]),
                float(np.linalg.svd(tr.J1, compute_uv=False)[-1]),
                lam_hat,
                beta_identity_residual(tr, b, table, eps),
            )
        )
    return out


__all__ = [
    "BetaState",
    "ChainSample",
    "MalliavinMatrix",
    "MalliavinRows",
    "ScalingReport",
    "beta_identity_residual",
    "beta_system",
    "hypoelliptic_chain",
    "inv_gamma_scaling",
    "kernel_gram",
    "local_spanning_eigenvalue",
    "m_eigen_series",
    "m_matrix",
    "malliavin_ensemble",
    "malliavin_matrix",
    "malliavin_matrix_kernel",
    "malliavin_rows",
    "scaled_brackets",
    "write_scaling_csv",
]
