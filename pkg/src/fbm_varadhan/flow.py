"""State, Jacobian and inverse Jacobian along piecewise-linear drives.

The equation ``dX = sum_i V_i(X) dw^i`` is solved as an ODE driven by the
piecewise-linear interpolant of ``w`` (Wong-Zakai). On every sub-interval the
drive has a constant slope, so with pseudo-time ``tau`` in [0, 1] and increment
``delta`` the step solves

    X' = V(X) delta,   J' = A J,   Jinv' = -Jinv A,   A = sum_i delta_i DV_i(X),

with the classical fourth-order Runge-Kutta method. The same stages integrate
``q' = Jinv V(X)`` (an ``n x d`` matrix per step); ``J_1 q_k e_i`` is the
derivative of ``X_1`` with respect to the ``i``-th drive increment of step
``k``. Directional and Malliavin derivatives, and the rate-function gradient,
are all built from these per-step weights.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from .errors import DomainError, FlowBlowUp
from .gaussian_driver import GridSpec
from .hilbert import StepCoeffs, embed_cm, indicator_increments

BLOWUP = 1e8


@dataclass
class Drive:
    """Path values ``w`` at the nodes of ``spec``, shape ``(d, m+1)``; the ODE sees ``eps * w``."""

    spec: GridSpec
    values: np.ndarray
    eps: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1 and self.spec.d == 1:
            v = v[None, :]
        if v.shape != (self.spec.d, self.spec.m + 1):
            raise DomainError(f"drive has shape {v.shape}, expected {(self.spec.d, self.spec.m + 1)}")
        if np.any(np.abs(v[:, 0]) > 1e-14):
            raise DomainError("drive must start at 0")
        if not 0.0 <= self.eps <= 1.0:
            raise DomainError(f"noise scale {self.eps} outside [0, 1]")
        self.values = v

    @classmethod
    def zero(cls, spec):
        return cls(spec, np.zeros((spec.d, spec.m + 1)))

    def fine_values(self, substeps: int) -> np.ndarray:
        """``eps * w`` at the nodes of the refined grid (linear interpolation)."""
        fine = np.arange(self.spec.m * substeps + 1) / (self.spec.m * substeps)
        t = self.spec.times
        return self.eps * np.stack([np.interp(fine, t, row) for row in self.values])


@dataclass
class Trajectory:
    """Solution on the refined grid.

    Attributes
    ----------
    spec : GridSpec
        Coarse grid; the refined grid has ``spec.m * substeps`` steps.
    X : ndarray, shape (n, K+1)
    J, Jinv : ndarray, shape (n, n, K+1)
    weights : ndarray, shape (K, n, d)
        Per-step integrals of ``Jinv V(X)`` in pseudo-time.
    increments : ndarray, shape (K, d)
        Effective drive increments (already scaled by ``eps``).
    """

    spec: GridSpec
    substeps: int
    X: np.ndarray
    J: np.ndarray
    Jinv: np.ndarray
    weights: np.ndarray
    increments: np.ndarray
    eps: float = 1.0

    @property
    def times(self) -> np.ndarray:
        K = self.X.shape[1] - 1
        return np.arange(K + 1) / K

    @property
    def X1(self) -> np.ndarray:
        return self.X[:, -1]

    @property
    def J1(self) -> np.ndarray:
        return self.J[:, :, -1]

    def coarse(self, arr):
        """Restrict a time-last array to the coarse nodes."""
        return arr[..., :: self.substeps]

    def inverse_defect(self) -> float:
        """``max_t |J(t) Jinv(t) - Id|_inf``."""
        P = np.einsum("abt,bct->tac", self.J, self.Jinv)
        return float(np.abs(P - np.eye(self.X.shape[0])).max())

    def to_csv(self, path, include_J: bool = False) -> None:
        n = self.X.shape[0]
        head = ["t"] + [f"X{a + 1}" for a in range(n)]
        if include_J:
            head += [f"J{a + 1}{b + 1}" for a in range(n) for b in range(n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(head)
            for k, t in enumerate(self.times):
                row = [repr(float(t))] + [repr(float(v)) for v in self.X[:, k]]
                if include_J:
                    row += [repr(float(v)) for v in self.J[:, :, k].ravel()]
                w.writerow(row)

    def to_binary(self, path) -> None:
        """JSON header line followed by X, J, Jinv as little-endian float64."""
        header = {
            "spec": self.spec.to_dict(),
            "substeps": self.substeps,
            "eps": self.eps,
            "shapes": [list(self.X.shape), list(self.J.shape), list(self.Jinv.shape)],
            "dtype": "<f8",
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for arr in (self.X, self.J, self.Jinv):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


# ---------------------------------------------------------------------------
# jax kernels, cached per system


def _kernels(sys):
    cached = getattr(sys, "_flow_kernels", None)
    if cached is not None:
        return cached
    M = sys.matrix
    n = sys.n

    def rhs(x, J, Ji, delta):
        Vx = M(x)
        A = jax.jacfwd(lambda z: M(z) @ delta)(x)
        return Vx @ delta, A @ J, -Ji @ A, Ji @ Vx

    def full_step(carry, delta):
        x, J, Ji = carry
        k1 = rhs(x, J, Ji, delta)
        k2 = rhs(x + 0.5 * k1[0], J + 0.5 * k1[1], Ji + 0.5 * k1[2], delta)
        k3 = rhs(x + 0.5 * k2[0], J + 0.5 * k2[1], Ji + 0.5 * k2[2], delta)
        k4 = rhs(x + k3[0], J + k3[1], Ji + k3[2], delta)
        new = tuple(c + (a + 2 * b + 2 * e + f) / 6.0 for c, a, b, e, f in zip((x, J, Ji), k1, k2, k3, k4))
        q = (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3]) / 6.0
        return new, (new[0], new[1], new[2], q)

    def full(x0, incs):
        eye = jnp.eye(n)
        _, (Xs, Js, Jis, qs) = jax.lax.scan(full_step, (x0, eye, eye), incs)
        return (
            jnp.concatenate([x0[None], Xs]),
            jnp.concatenate([eye[None], Js]),
            jnp.concatenate([eye[None], Jis]),
            qs,
        )

    def x_step(x, delta):
        f = lambda z: M(z) @ delta
        k1 = f(x)
        k2 = f(x + 0.5 * k1)
        k3 = f(x + 0.5 * k2)
        k4 = f(x + k3)
        new = x + (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        return new, jnp.max(jnp.abs(new))

    def endpoint(x0, incs):
        x1, norms = jax.lax.scan(x_step, x0, incs)
        peak = jnp.max(norms)
        return x1, jnp.where(jnp.isfinite(peak), peak, jnp.inf)

    ker = {
        "full": jax.jit(full),
        "full_batch": jax.jit(jax.vmap(full, in_axes=(None, 0))),
        "endpoint_batch": jax.jit(jax.vmap(endpoint, in_axes=(None, 0))),
    }
    sys._flow_kernels = ker
    return ker


def _check_x0(sys, x0):
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (sys.n,):
        raise DomainError(f"x0 has {x0.size} entries, system has n={sys.n}")
    return x0


def _solve_fine(sys, x0, fine_vals, spec, substeps, eps) -> Trajectory:
    x0 = _check_x0(sys, x0)
    if fine_vals.shape[0] != sys.d:
        raise DomainError(f"drive dimension {fine_vals.shape[0]} does not match system d={sys.d}")
    incs = np.diff(fine_vals, axis=1).T
    X, J, Ji, q = (np.asarray(a) for a in _kernels(sys)["full"](jnp.asarray(x0), jnp.asarray(incs)))
    if not np.all(np.isfinite(X)) or np.abs(X).max() > BLOWUP:
        raise FlowBlowUp(f"|X| exceeded {BLOWUP:g} on system {sys.name}")
    return Trajectory(
        spec,
        substeps,
        X.T,
        np.moveaxis(J, 0, -1),
        np.moveaxis(Ji, 0, -1),
        q,
        incs,
        eps,
    )


def solve_flow(drive: Drive, sys, x0, substeps: int = 1) -> Trajectory:
    """Solve state, Jacobian and inverse Jacobian along ``eps * drive``.

    Raises
    ------
    FlowBlowUp
        If ``|X|`` exceeds ``1e8`` (or becomes non-finite).
    """
    if substeps < 1:
        raise DomainError("substeps must be >= 1")
    return _solve_fine(sys, x0, drive.fine_values(substeps), drive.spec, substeps, drive.eps)


def fine_cm_values(psi: StepCoeffs, substeps: int) -> np.ndarray:
    """Cameron-Martin path of ``psi`` at the nodes of the refined grid, shape ``(d, K+1)``."""
    K = psi.spec.m * substeps
    return embed_cm(psi, np.arange(K + 1) / K)


def phi(psi: StepCoeffs, sys, x0, substeps: int = 4, drive: Drive | None = None) -> Trajectory:
    """Deterministic flow driven by ``h = embed_cm(psi)`` (plus ``eps * drive`` if given).

    ``h`` is evaluated exactly at every refined node, so only the interpolation
    between refined nodes is approximate.
    """
    vals = fine_cm_values(psi, substeps)
    eps = 1.0
    if drive is not None:
        if drive.spec.m != psi.spec.m:
            raise DomainError("drive and psi live on different grids")
        vals = vals + drive.fine_values(substeps)
        eps = drive.eps
    return _solve_fine(sys, x0, vals, psi.spec, substeps, eps)


def translate_drive(b: Drive, h) -> Drive:
    """Drive for ``eps * b + h`` (returned with unit scale).

    ``h`` is a :class:`StepCoeffs` (evaluated at ``b``'s nodes) or an array of
    node values on ``b``'s grid or on a coarser grid that divides it.
    """
    if isinstance(h, StepCoeffs):
        if h.spec.d != b.spec.d:
            raise DomainError("translation has the wrong driver dimension")
        hv = embed_cm(h, b.spec.times)
    else:
        hv = np.asarray(h, dtype=float)
        if hv.ndim == 1:
            hv = hv[None, :]
        if hv.shape[0] != b.spec.d:
            raise DomainError("translation has the wrong driver dimension")
        mh = hv.shape[1] - 1
        if mh != b.spec.m:
            if mh < 1 or b.spec.m % mh:
                raise DomainError(f"cannot re-sample a path on {mh} steps onto {b.spec.m}")
            th = np.arange(mh + 1) / mh
            hv = np.stack([np.interp(b.spec.times, th, row) for row in hv])
    return Drive(b.spec, b.eps * b.values + hv, 1.0)


def derivative_weights(traj: Trajectory) -> np.ndarray:
    """``G[k, :, i] = d X_1 / d(increment i of step k)``, shape ``(K, n, d)``."""
    return np.einsum("ab,kbi->kai", traj.J1, traj.weights)


def directional_derivative(traj: Trajectory, sys, psi_dir: StepCoeffs, eps: float) -> np.ndarray:
    """``D_h X_1`` for ``h = embed_cm(psi_dir)``: ``eps * J_1 sum_k q_k dh_k``."""
    if psi_dir.spec.m != traj.spec.m:
        raise DomainError("direction lives on a different grid")
    dh = np.diff(fine_cm_values(psi_dir, traj.substeps), axis=1).T
    return eps * np.einsum("kai,ki->a", derivative_weights(traj), dh)


def psi_jacobian(traj: Trajectory) -> np.ndarray:
    """``d X_1 / d psi`` for a flow driven by ``embed_cm(psi)``, shape ``(n, d, m)``."""
    K = traj.spec.m * traj.substeps
    E = np.diff(indicator_increments(traj.spec, np.arange(K + 1) / K), axis=0)
    return np.einsum("kai,kj->aij", derivative_weights(traj), E)


def z_limit_check(h: StepCoeffs, B, sys, x0, eps_seq, substeps: int = 4) -> list:
    """Difference quotients ``(Phi_1(eps B + h) - Phi_1(h)) / eps`` against ``Z(h)``.

    ``Z(h) = J_1(h) sum_k q_k(h) dB_k`` uses the same step weights as the flow.
    Returns one row per ``eps`` with the error and its ratio to the previous row.
    """
    drive = B if isinstance(B, Drive) else Drive(h.spec, B)
    if any(not 0 < e <= 1 for e in eps_seq):
        raise DomainError("eps values must lie in (0, 1]")
    base = phi(h, sys, x0, substeps)
    unit = Drive(drive.spec, drive.values, 1.0)
    dB = np.diff(unit.fine_values(substeps), axis=1).T
    Z = np.einsum("kai,ki->a", derivative_weights(base), dB)
    rows = []
    prev = None
    for e in eps_seq:
        tr = phi(h, sys, x0, substeps, Drive(drive.spec, drive.values, e))
        err = float(np.linalg.norm((tr.X1 - base.X1) / e - Z))
        rows.append({"eps": float(e), "error": err, "ratio": None if prev in (None, 0.0) else err / prev})
        prev = err
    return rows


def endpoints_batch(sys, x0, fine_vals) -> tuple:
    """Endpoints for a batch of refined drive values ``(N, d, K+1)``.

    Returns ``(X1 (N, n), blown (N,) bool)``.
    """
    x0 = _check_x0(sys, x0)
    incs = np.swapaxes(np.diff(fine_vals, axis=2), 1, 2)
    x1, peak = _kernels(sys)["endpoint_batch"](jnp.asarray(x0), jnp.asarray(incs))
    x1, peak = np.asarray(x1), np.asarray(peak)
    return x1, ~(peak <= BLOWUP)


def solve_batch(sys, x0, spec: GridSpec, fine_vals, substeps: int, eps: float) -> list:
    """Trajectories (with Jacobians) for a batch of refined drive values ``(N, d, K+1)``."""
    x0 = _check_x0(sys, x0)
    incs = np.swapaxes(np.diff(fine_vals, axis=2), 1, 2)
    X, J, Ji, q = (np.asarray(a) for a in _kernels(sys)["full_batch"](jnp.asarray(x0), jnp.asarray(incs)))
    out = []
    for k in range(X.shape[0]):
        if not np.all(np.isfinite(X[k])) or np.abs(X[k]).max() > BLOWUP:
            raise FlowBlowUp(f"|X| exceeded {BLOWUP:g} on sample {k}")
        out.append(
            Trajectory(spec, substeps, X[k].T, np.moveaxis(J[k], 0, -1), np.moveaxis(Ji[k], 0, -1), q[k], incs[k], eps)
        )
    return out
