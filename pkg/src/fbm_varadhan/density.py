"""Monte Carlo endpoint densities and the small-noise slope ``eps^2 log p_eps(y)``.

Far-tail points are out of reach of plain sampling (the density at ``y`` is of
order ``exp(-d2(y) / eps^2)``), so by default the drive is shifted by the
Cameron-Martin path of the energy minimiser ``psi*`` and samples are reweighted
by the exact likelihood ratio

    exp(-B(psi*) / eps - |psi*|^2 / (2 eps^2)),   B(psi) = sum_ij psi_ij dB^i_j.

The shift acts on the coarse drive values before interpolation, so the
estimator is unbiased for the density of the simulated endpoint.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import DomainError, FlowBlowUp
from .flow import endpoints_batch
from .gaussian_driver import GridSpec, sample_fbm
from .hilbert import StepCoeffs, embed_cm, gram_matrix
from .rate import RateResult, _restrict, minimize_pair

DEFAULT_EPS = (0.5, 0.4, 0.3, 0.25, 0.2)
BATCHES = 20
BLOWUP_FRACTION = 1e-3


@dataclass
class EndpointSample:
    x: np.ndarray
    weights: np.ndarray | None
    eps: float
    blown: int = 0


def _chunk_endpoints(sys, x0, spec, eps, count, seed, first, substeps, shift_nodes):
    ens = sample_fbm(spec, count, seed, first_index=first)
    vals = eps * ens.paths
    if shift_nodes is not None:
        vals = vals + shift_nodes[None]
    K = spec.m * substeps
    if substeps > 1:
        fine = np.arange(K + 1) / K
        vals = np.apply_along_axis(lambda r: np.interp(fine, spec.times, r), -1, vals)
    x1, blown = endpoints_batch(sys, x0, vals)
    return x1, blown, np.diff(ens.paths, axis=-1)


def simulate_endpoints(
    sys,
    x0,
    H: float,
    eps: float,
    N: int,
    seed: int,
    substeps: int = 1,
    m: int = 16,
    shift: StepCoeffs | None = None,
    chunk: int = 20000,
) -> EndpointSample:
    """``N`` endpoint samples of the equation driven by ``eps B`` (plus ``embed_cm(shift)``).

    With a shift, likelihood-ratio weights are returned. Samples are a
    deterministic function of ``(seed, N)`` and do not depend on ``chunk``.

    Raises
    ------
    FlowBlowUp
        If more than 0.1% of the paths blow up; fewer are dropped and counted.
    """
    if N < 1000:
        raise DomainError("need N >= 1000 endpoint samples")
    if not 0 <= eps <= 1:
        raise DomainError(f"noise scale {eps} outside [0, 1]")
    spec = GridSpec(m, H, sys.d)
    shift_nodes = None
    if shift is not None:
        if shift.spec.m != m:
            shift = shift.prolong(m // shift.spec.m) if m % shift.spec.m == 0 else _restrict(shift, m)
        shift_nodes = embed_cm(shift, spec.times)
        Q = gram_matrix(spec)
        sq = float(np.einsum("ij,jk,ik->", shift.psi, Q.Q, shift.psi))
    xs, ws, bad = [], [], []
    for start in range(0, N, chunk):
        count = min(chunk, N - start)
        x1, blown, dB = _chunk_endpoints(sys, x0, spec, eps, count, seed, start, substeps, shift_nodes)
        xs.append(x1)
        bad.append(blown)
        if shift is not None:
            if eps == 0:
                raise DomainError("importance shift needs eps > 0")
            lin = np.einsum("ij,nij->n", shift.psi, dB)
            ws.append(np.exp(-lin / eps - sq / (2 * eps * eps)))
    x = np.concatenate(xs)
    blown = np.concatenate(bad)
    nb = int(blown.sum())
    if nb > BLOWUP_FRACTION * N:
        raise FlowBlowUp(f"{nb} of {N} paths blew up (eps={eps})")
    w = np.concatenate(ws) if ws else None
    if nb:
        x = x[~blown]
        w = None if w is None else w[~blown]
    return EndpointSample(x, w, float(eps), nb)


def silverman(samples, weights=None) -> np.ndarray:
    """Per-coordinate Silverman bandwidth (normal reference rule)."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    N, n = x.shape
    if weights is None:
        sd = x.std(axis=0, ddof=1)
    else:
        w = np.asarray(weights) / np.sum(weights)
        mean = w @ x
        sd = np.sqrt(w @ (x - mean) ** 2)
    if n == 1:
        q75, q25 = np.percentile(x[:, 0], [75, 25])
        spread = min(sd[0], (q75 - q25) / 1.34) if q75 > q25 else sd[0]
        return np.array([0.9 * spread * N ** (-0.2)])
    return sd * (4.0 / ((n + 2) * N)) ** (1.0 / (n + 4))


@dataclass
class KdeResult:
    p_hat: float
    stderr: float
    bandwidth: np.ndarray
    batch_means: np.ndarray
    tail_unreliable: bool = False
    degenerate: bool = False


def kde(samples, y, bandwidth="silverman", weights=None, scale: float = 1.0, batches: int = BATCHES) -> KdeResult:
    """Product-Gaussian kernel estimate of the density at ``y``.

    Parameters
    ----------
    samples : array_like, shape (N, n) or (N,)
    y : array_like, shape (n,)
    bandwidth : "silverman", float or array_like
        Rule name or explicit per-coordinate bandwidth.
    weights : array_like, optional
        Likelihood-ratio weights (mean one under the sampling law).
    scale : float
        Multiplier applied to the bandwidth.
    batches : int
        Number of consecutive batches for the batch-means standard error.

    Notes
    -----
    Under the rule bandwidth, samples that are constant in some coordinate have
    no density; the estimate is 0 (flagged degenerate) when ``y`` lies off that
    set, and a ``DomainError`` is raised when it lies on it.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    N, n = x.shape
    if N < 1000:
        raise DomainError("KDE needs N >= 1000 samples")
    y = np.asarray(y, dtype=float).reshape(-1)
    spread = np.ptp(x, axis=0)
    degenerate = bool(np.all(spread == 0))
    if isinstance(bandwidth, str):
        if bandwidth != "silverman":
            raise DomainError(f"unknown bandwidth rule {bandwidth!r}")
        if degenerate:
            raise DomainError("bandwidth rule is undefined for identical samples; pass an explicit bandwidth")
        flat = spread == 0
        b = silverman(x) * scale
        if np.any(flat):
            # the law sits on a lower-dimensional set; it has no density there
            if np.any(y[flat] != x[0, flat]):
                return KdeResult(0.0, 0.0, b, np.zeros(batches), True, True)
            raise DomainError("samples are singular through y; the density is not defined")
    else:
        b = np.broadcast_to(np.asarray(bandwidth, dtype=float) * scale, (n,)).copy()
    if np.any(b <= 0):
        raise DomainError("bandwidth must be positive")
    logk = np.sum(norm.logpdf((y - x) / b) - np.log(b), axis=1)
    k = np.exp(logk)
    if weights is not None:
        k = k * np.asarray(weights, dtype=float)
    means = np.array([part.mean() for part in np.array_split(k, batches)])
    p = float(k.mean())
    se = float(means.std(ddof=1) / np.sqrt(batches))
    return KdeResult(p, se, b, means, bool(p < 10 * se), degenerate)


def bootstrap_ci(batch_means, level=0.95, reps: int = 2000, seed: int = 0):
    """Percentile bootstrap interval for the mean of the batch means."""
    rng = np.random.default_rng(seed)
    bm = np.asarray(batch_means)
    idx = rng.integers(0, bm.size, size=(reps, bm.size))
    boot = bm[idx].mean(axis=1)
    a = (1 - level) / 2
    lo, hi = np.quantile(boot, [a, 1 - a])
    return float(lo), float(hi)


def fit_limit(eps, v, se=None):
    """Weighted fit ``v = v0 + c1 eps^2 log(1/eps) + c2 eps^2``; returns ``(v0, se(v0), coefs)``.

    With two points the ``eps^2`` term is dropped; with one no fit is made.
    """
    eps = np.asarray(eps, dtype=float)
    v = np.asarray(v, dtype=float)
    if eps.size < 2:
        return None, None, None
    cols = [np.ones_like(eps), eps**2 * np.log(1 / eps)]
    if eps.size >= 3:
        cols.append(eps**2)
    A = np.stack(cols, axis=1)
    w = np.ones_like(eps) if se is None else 1.0 / np.maximum(np.asarray(se, dtype=float), 1e-12)
    Aw, vw = A * w[:, None], v * w
    coef, *_ = np.linalg.lstsq(Aw, vw, rcond=None)
    dof = eps.size - A.shape[1]
    resid = vw - Aw @ coef
    sigma2 = max(float(resid @ resid) / dof, 1.0) if dof > 0 else 1.0
    cov = sigma2 * np.linalg.pinv(Aw.T @ Aw)
    return float(coef[0]), float(np.sqrt(cov[0, 0])), coef.tolist()


@dataclass
class DensityReport:
    y: list
    eps_grid: list
    rows: list
    d2: float
    d2R: float
    v0: float | None = None
    v0_ci: tuple | None = None
    tol: float = float("nan")
    upper_ok: bool | None = None
    lower_ok: bool | None = None
    corollary: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.upper_ok) and bool(self.lower_ok)

    def to_dict(self) -> dict:
        fin = lambda v: None if v is None or not np.isfinite(v) else float(v)
        return {
            "y": self.y,
            "eps_grid": self.eps_grid,
            "rows": self.rows,
            "d2": fin(self.d2),
            "d2R": fin(self.d2R),
            "v0": fin(self.v0),
            "v0_ci": None if self.v0_ci is None else [float(c) for c in self.v0_ci],
            "tol": fin(self.tol),
            "upper_ok": self.upper_ok,
            "lower_ok": self.lower_ok,
            "passed": self.passed,
            "corollary": self.corollary,
            "flags": list(self.flags),
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "p_hat", "stderr", "v_hat"])
            for r in self.rows:
                w.writerow([repr(r["eps"]), repr(r["p_hat"]), repr(r["stderr"]), repr(r["v_hat"])])

    def write_plot_data(self, path) -> None:
        """Two columns ``eps^2  v_hat`` for plotting."""
        with open(path, "w") as fh:
            for r in self.rows:
                fh.write(f"{r['eps'] ** 2!r} {r['v_hat']!r}\n")


def _ratio_log(p):
    return np.log(p) if p > 0 else -np.inf


def varadhan_report(
    sys,
    x0,
    H: float,
    y,
    eps_grid=DEFAULT_EPS,
    N: int = 200000,
    seed: int = 0,
    m: int = 16,
    substeps: int = 1,
    rates: tuple[RateResult, RateResult] | None = None,
    delta_det: float = 1e-6,
    importance: bool = True,
    rate_opts=None,
) -> DensityReport:
    """Estimate ``v(eps) = eps^2 log p_eps(y)`` on ``eps_grid`` and extrapolate to ``eps = 0``.

    ``rates`` is a ``(plain, restricted)`` pair from
    :func:`~fbm_varadhan.rate.minimize_pair`; it is computed on the same grid when
    omitted. The same seed (hence the same Gaussian paths) is used for every
    ``eps``, which keeps the fitted slope free of independent sampling noise.
    """
    eps_grid = [float(e) for e in eps_grid]
    if any(b >= a for a, b in zip(eps_grid, eps_grid[1:])):
        raise DomainError("eps grid must be strictly decreasing")
    if any(not 0 < e <= 1 for e in eps_grid):
        raise DomainError("eps values must lie in (0, 1]")
    y = np.asarray(y, dtype=float).reshape(-1)
    if rates is None:
        rates = minimize_pair(y, sys, x0, GridSpec(m, H, sys.d), delta_det, rate_opts)
    r, rR = rates
    d2, d2R = float(r.d2), float(rR.d2)
    flags = []
    rep = DensityReport([float(v) for v in y], eps_grid, [], d2, d2R)
    if not np.isfinite(d2):
        rep.flags.append("unreachable")
        importance = False
    shift = r.psi_star if importance and r.psi_star is not None else None
    rows = []
    n = sys.n
    for e in eps_grid:
        smp = simulate_endpoints(sys, x0, H, e, N, seed, substeps, m, shift)
        k = kde(smp.x, y, "silverman", smp.weights, scale=e)
        if k.degenerate:
            lo_b = hi_b = k
            flags.append(f"eps={e}: samples are singular and miss y")
        else:
            lo_b = kde(smp.x, y, k.bandwidth * 0.5, smp.weights)
            hi_b = kde(smp.x, y, k.bandwidth * 1.5, smp.weights)
        lo, hi = bootstrap_ci(k.batch_means, seed=seed)
        v = e * e * _ratio_log(k.p_hat)
        row = {
            "eps": e,
            "p_hat": k.p_hat,
            "stderr": k.stderr,
            "p_ci": [lo, hi],
            "v_hat": float(v),
            "v_ci": [float(e * e * _ratio_log(lo)), float(e * e * _ratio_log(hi))],
            "v_se": float(e * e * k.stderr / k.p_hat) if k.p_hat > 0 else float("inf"),
            "bandwidth": k.bandwidth.tolist(),
            "v_bandwidth_half": float(e * e * _ratio_log(lo_b.p_hat)),
            "v_bandwidth_1p5": float(e * e * _ratio_log(hi_b.p_hat)),
            "tail_unreliable": bool(k.tail_unreliable or k.p_hat <= 0),
            "blown": smp.blown,
        }
        if row["tail_unreliable"]:
            msg = f"eps={e}: p_hat below 10 standard errors, excluded from the fit"
            warnings.warn(msg)
            flags.append(msg)
        rows.append(row)
    rep.rows = rows
    rep.flags.extend(flags)
    good = [row for row in rows if not row["tail_unreliable"]]
    if len(eps_grid) == 1:
        rep.flags.append("no-limit")
        return rep
    if len(good) < 2:
        rep.flags.append("no-limit")
        if not np.isfinite(d2):
            rep.flags.append("density decays faster than any exp(-c/eps^2) scale tested")
        return rep
    v0, se0, coef = fit_limit([g["eps"] for g in good], [g["v_hat"] for g in good], [g["v_se"] for g in good])
    rep.v0 = v0
    rep.v0_ci = (v0 - 1.96 * se0, v0 + 1.96 * se0)
    rep.tol = 0.15 * max(1.0, d2R if np.isfinite(d2R) else d2)
    rep.upper_ok = bool(v0 <= -d2 + rep.tol)
    rep.lower_ok = bool(v0 >= -d2R - rep.tol)
    if np.isfinite(d2R):
        g_vals = [np.log(g["p_hat"]) + d2R / g["eps"] ** 2 + n * np.log(g["eps"]) for g in good]
        inv = [1 / g["eps"] ** 2 for g in good]
        slope = float(np.polyfit(inv, g_vals, 1)[0])
        rep.corollary = {"g": [float(v) for v in g_vals], "min": float(min(g_vals)), "slope": slope, "ok": bool(slope >= -rep.tol)}
    return rep
