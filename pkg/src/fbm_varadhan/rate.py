"""Energy minimisation over Cameron-Martin controls.

``d2(y)`` is the least energy ``0.5 |h|^2`` of a control ``h = embed_cm(psi)``
steering the deterministic flow from ``x0`` to ``y``; ``d2_R(y)`` adds the
requirement that the deterministic Malliavin matrix of the endpoint has
determinant at least ``delta_det``.

The constraint is handled by an augmented Lagrangian with penalty doubling,
the inner problems by L-BFGS in whitened coordinates ``z = L^T psi``
(``Q = L L^T``), where the energy is ``0.5 |z|^2``. The constraint Jacobian comes
from the flow's per-step derivative weights; the gradient of the determinant
is obtained by automatic differentiation of the same discretisation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .errors import DomainError, FlowBlowUp
from .flow import _kernels, phi, psi_jacobian
from .gaussian_driver import GridSpec
from .hilbert import GramForm, StepCoeffs, gram_matrix, indicator_increments
from .malliavin import malliavin_matrix, malliavin_rows

DEFAULTS = {
    "restarts": 8,
    "seed": 0,
    "grids": (8, 16, 32),
    "substeps": 4,
    "tol_c": 1e-7,
    "tol_g": 1e-5,
    "mu0": 10.0,
    "max_outer": 40,
    "max_inner": 500,
}


@dataclass
class RateResult:
    """Outcome of one (restricted or plain) energy minimisation."""

    y: np.ndarray
    d2: float
    psi_star: StepCoeffs | None
    constraint_residual: float
    det_gamma: float
    restarts_used: int
    stationarity: float = float("nan")
    grid_delta: float = float("nan")
    restricted: bool = False
    delta_det: float | None = None
    feasible: bool = True
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "y": [float(v) for v in np.atleast_1d(self.y)],
            "d2": None if not np.isfinite(self.d2) else float(self.d2),
            "d2_infinite": bool(not np.isfinite(self.d2)),
            "psi_star": None if self.psi_star is None else json.loads(self.psi_star.to_json()),
            "constraint_residual": float(self.constraint_residual),
            "det_gamma": float(self.det_gamma),
            "restarts_used": int(self.restarts_used),
            "stationarity": float(self.stationarity),
            "grid_delta": float(self.grid_delta),
            "restricted": bool(self.restricted),
            "delta_det": self.delta_det,
            "feasible": bool(self.feasible),
            "history": self.history,
        }


def objective_gradient(psi: StepCoeffs, sys, x0, substeps: int = 4):
    """``(Phi_1(h), dPhi_1/dpsi)`` with the Jacobian of shape ``(n, d*m)``.

    Column ``(i, j)`` (component-major) is ``J_1 sum_k q_k dE_kj e_i``, the
    response of the endpoint to the step coefficient ``psi_ij``.
    """
    tr = phi(psi, sys, x0, substeps)
    G = psi_jacobian(tr)
    return tr.X1.copy(), G.reshape(G.shape[0], -1)


def det_gamma_phi(psi: StepCoeffs, sys, x0, Q: GramForm, substeps: int = 4) -> float:
    """Determinant of the Malliavin matrix of the deterministic endpoint (unit noise scale)."""
    tr = phi(psi, sys, x0, substeps)
    return malliavin_matrix(malliavin_rows(tr, sys, 1.0), Q).det


@lru_cache(maxsize=32)
def _fine_basis(spec: GridSpec, substeps: int) -> np.ndarray:
    K = spec.m * substeps
    return indicator_increments(spec, np.arange(K + 1) / K)


def _det_fn(sys, spec: GridSpec, substeps: int, Q: np.ndarray):
    """Jitted ``psi (d, m) -> (det gamma, grad)`` through the flow kernel."""
    key = (spec, substeps)
    cache = sys.__dict__.setdefault("_det_cache", {})
    if key in cache:
        return cache[key]
    E = jnp.asarray(_fine_basis(spec, substeps))
    Qj = jnp.asarray(Q)
    full = _kernels(sys)["full"]
    M = sys.matrix

    def det(psi, x0):
        vals = psi @ E.T
        incs = jnp.diff(vals, axis=1).T
        X, J, Ji, _ = full(x0, incs)
        Xc, Jic = X[::substeps][:-1], Ji[::substeps][:-1]
        V = jax.vmap(M)(Xc)
        rows = jnp.einsum("ab,tbc,tck->kat", J[-1], Jic, V)
        g = jnp.einsum("kaj,jl,kbl->ab", rows, Qj, rows)
        return jnp.linalg.det(0.5 * (g + g.T))

    fn = jax.jit(jax.value_and_grad(det))
    cache[key] = fn
    return fn


class _Problem:
    def __init__(self, y, sys, x0, spec, opts, delta_det=None):
        self.y = np.asarray(y, dtype=float).reshape(-1)
        self.sys = sys
        self.x0 = np.asarray(x0, dtype=float).reshape(-1)
        self.spec = spec
        self.opts = opts
        self.Q = gram_matrix(spec)
        self.L = self.Q.chol
        self.delta_det = delta_det
        self.shape = (spec.d, spec.m)
        self.det = _det_fn(sys, spec, opts["substeps"], self.Q.Q) if delta_det is not None else None

    def psi(self, z):
        Z = z.reshape(self.shape)
        return solve_triangular(self.L, Z.T, trans="T", lower=True).T

    def z(self, psi):
        return (psi @ self.L).ravel()

    def to_z_grad(self, g_psi):
        """Gradient in ``z`` of a function with ``psi``-gradient ``g_psi (d, m)``."""
        return solve_triangular(self.L, g_psi.T, lower=True).T.ravel()

    def constraint(self, psi):
        x1, G = objective_gradient(StepCoeffs(self.spec, psi), self.sys, self.x0, self.opts["substeps"])
        return x1 - self.y, G.reshape(-1, *self.shape)

    def det_value(self, psi):
        v, g = self.det(jnp.asarray(psi), jnp.asarray(self.x0))
        return float(v), np.asarray(g)

    def slack(self, psi):
        """Relative slack ``det / delta_det - 1`` (scale-free in ``delta_det``) and its gradient."""
        v, g = self.det_value(psi)
        return v / self.delta_det - 1.0, g / self.delta_det

    def inequality_terms(self, psi, nu, mu):
        """Augmented-Lagrangian term for ``slack >= 0`` with multiplier ``nu``."""
        if self.det is None:
            return 0.0, np.zeros(self.shape)
        s, gs = self.slack(psi)
        act = max(0.0, nu - mu * s)
        return (act * act - nu * nu) / (2 * mu), -act * gs

    def lagrangian(self, z, lam, nu, mu):
        psi = self.psi(z)
        try:
            c, G = self.constraint(psi)
        except FlowBlowUp:
            return 1e30, np.zeros_like(z)
        ival, igrad = self.inequality_terms(psi, nu, mu)
        val = 0.5 * z @ z + lam @ c + 0.5 * mu * c @ c + ival
        g_psi = np.einsum("a,aij->ij", lam + mu * c, G) + igrad
        return float(val), z + self.to_z_grad(g_psi)

    def stationarity(self, z, lam=None, nu=None):
        """KKT residual in whitened coordinates with least-squares multipliers.

        The gradient of the energy is projected off the span of the constraint
        gradients (the determinant slack counts when it is active), which does
        not depend on the quality of the running multiplier estimates.
        """
        psi = self.psi(z)
        _, G = self.constraint(psi)
        cols = [self.to_z_grad(Ga) for Ga in G]
        if self.det is not None:
            s, gs = self.slack(psi)
            if s < 1e-6:
                cols.append(self.to_z_grad(gs))
        A = np.stack(cols, axis=1)
        mult, *_ = np.linalg.lstsq(A, -z, rcond=None)
        return float(np.linalg.norm(z + A @ mult))


def _augmented_lagrangian(prob: _Problem, z0):
    o = prob.opts
    z = np.asarray(z0, dtype=float).copy()
    lam = np.zeros(prob.y.size)
    nu = 0.0
    mu = o["mu0"]
    prev = np.inf
    for outer in range(o["max_outer"]):
        # inexact inner solves early on, tightened as the multipliers settle
        gtol = max(1e-12, 1e-3 * 0.1**outer)
        res = minimize(
            prob.lagrangian,
            z,
            args=(lam, nu, mu),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": o["max_inner"], "gtol": gtol, "ftol": 1e-15, "maxls": 100},
        )
        z = res.x
        try:
            c, _ = prob.constraint(prob.psi(z))
        except FlowBlowUp:
            return None
        violation = float(np.linalg.norm(c))
        lam = lam + mu * c
        if prob.det is not None:
            s, _ = prob.slack(prob.psi(z))
            violation = max(violation, -s)
            nu = max(0.0, nu - mu * s)
        if violation <= o["tol_c"]:
            st = prob.stationarity(z, lam, nu)
            if st <= o["tol_g"]:
                break
        if violation > 0.25 * prev:
            mu = min(2 * mu, 1e10)
        prev = violation
    psi = prob.psi(z)
    c, _ = prob.constraint(psi)
    return {
        "z": z,
        "psi": psi,
        "energy": 0.5 * float(z @ z),
        "residual": float(np.linalg.norm(c)),
        "stationarity": prob.stationarity(z, lam, nu),
        "outer": outer + 1,
    }


def _starts(prob: _Problem, restarts: int, seed: int, extra=()):
    rng = np.random.default_rng(seed)
    size = prob.spec.d * prob.spec.m
    # the zero control is a stationary point of the determinant, useless as a restricted start
    starts = [] if prob.det is not None else [np.zeros(size)]
    for _ in range(restarts):
        z = rng.standard_normal(size)
        starts.append(z / np.linalg.norm(z))
    return list(extra) + starts


def _accept(prob, sol):
    if sol is None or sol["residual"] > prob.opts["tol_c"]:
        return False
    if prob.det is not None:
        v, _ = prob.det_value(sol["psi"])
        return v >= prob.delta_det * (1 - prob.opts["tol_c"])
    return True


def _minimize(y, sys, x0, spec: GridSpec, opts, delta_det=None, warm=None) -> RateResult:
    opts = {**DEFAULTS, **(opts or {})}
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape != (sys.n,) or not np.all(np.isfinite(y)):
        raise DomainError(f"target must be a finite point of R^{sys.n}")
    if spec.d != sys.d:
        raise DomainError("grid driver dimension does not match the system")
    grids = [m for m in opts["grids"] if m <= spec.m] or [spec.m]
    if grids[-1] != spec.m:
        grids.append(spec.m)
    best = None
    history = []
    n_starts = 0
    for level, m in enumerate(grids):
        prob = _Problem(y, sys, x0, GridSpec(m, spec.H, spec.d), opts, delta_det)
        if level == 0:
            extra = []
            if warm is not None:
                w = warm if warm.spec.m == m else _restrict(warm, m)
                extra.append(prob.z(w.psi))
            starts = _starts(prob, opts["restarts"], opts["seed"], extra)
        else:
            factor = m // best_psi.spec.m
            starts = [prob.z(best_psi.prolong(factor).psi)]
        cands = []
        for z0 in starts:
            sol = _augmented_lagrangian(prob, z0)
            n_starts += 1
            if _accept(prob, sol):
                cands.append(sol)
        if not cands:
            if level == 0:
                return RateResult(y, float("inf"), None, float("nan"), float("nan"), n_starts,
                                  restricted=delta_det is not None, delta_det=delta_det, feasible=False)
            break
        best = min(cands, key=lambda s: s["energy"])
        best_psi = StepCoeffs(prob.spec, best["psi"])
        history.append({"m": m, "d2": best["energy"], "residual": best["residual"]})
    final = prob.spec if best_psi.spec.m == prob.spec.m else best_psi.spec
    Q = gram_matrix(final)
    det = det_gamma_phi(best_psi, sys, x0, Q, opts["substeps"])
    delta = abs(history[-1]["d2"] - history[-2]["d2"]) if len(history) > 1 else float("nan")
    return RateResult(
        y,
        best["energy"],
        best_psi,
        best["residual"],
        det,
        n_starts,
        best["stationarity"],
        delta,
        delta_det is not None,
        delta_det,
        True,
        history,
    )


def _restrict(psi: StepCoeffs, m: int) -> StepCoeffs:
    """Average a step function down to a coarser grid that divides its own."""
    f = psi.spec.m // m
    if f < 1 or psi.spec.m % m:
        raise DomainError("cannot restrict to a non-dividing grid")
    return StepCoeffs(GridSpec(m, psi.spec.H, psi.spec.d), psi.psi.reshape(psi.spec.d, m, f).mean(axis=2))


def minimize_energy(y, sys, x0, spec: GridSpec, opts=None, warm: StepCoeffs | None = None) -> RateResult:
    """``d2(y) = min 0.5 psi^T Q psi`` subject to ``Phi_1(embed_cm(psi)) = y``.

    Multi-start augmented Lagrangian, coarse to fine over ``opts["grids"]`` (up
    to ``spec.m``). Returns ``d2 = inf`` with ``feasible = False`` when no start
    meets the constraint tolerance.
    """
    return _minimize(y, sys, x0, spec, opts, None, warm)


def minimize_energy_restricted(y, sys, x0, spec: GridSpec, delta_det: float = 1e-6, opts=None) -> RateResult:
    """Same as :func:`minimize_energy` with the extra constraint ``det gamma_Phi(psi) >= delta_det``.

    The inequality enters the augmented Lagrangian through the relative slack
    ``det / delta_det - 1`` with its own multiplier.
    """
    if not delta_det > 0:
        raise DomainError("delta_det must be positive")
    return _minimize(y, sys, x0, spec, opts, float(delta_det))


def minimize_pair(y, sys, x0, spec: GridSpec, delta_det: float = 1e-6, opts=None):
    """Restricted and plain minimisations with ``d2 <= d2_R`` by construction.

    The plain run is warm-started from the restricted minimiser, which is
    feasible for it; if it still ends above, the restricted minimiser is kept.
    """
    rR = minimize_energy_restricted(y, sys, x0, spec, delta_det, opts)
    r = minimize_energy(y, sys, x0, spec, opts, warm=rR.psi_star)
    if rR.feasible and (not r.feasible or r.d2 > rR.d2):
        r = RateResult(
            rR.y, rR.d2, rR.psi_star, rR.constraint_residual, rR.det_gamma, r.restarts_used + rR.restarts_used,
            rR.stationarity, rR.grid_delta, False, None, True, r.history,
        )
    return r, rR
