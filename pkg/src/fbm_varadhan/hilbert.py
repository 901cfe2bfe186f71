"""Step-function Hilbert space of the fBm covariance and Cameron-Martin paths.

An element of the Hilbert space is a step function on the working grid,
``psi = sum_j psi_j 1_(t_{j-1}, t_j]`` per component, and inner products are
exact through the Gram matrix of grid-interval indicators. The Cameron-Martin
path of ``psi`` is ``h(t) = <1_[0,t], psi>``; the map is an isometry, so the
energy of ``h`` is computed from ``psi`` and the fractional kernel never has to
be formed.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError
from .gaussian_driver import GridSpec, fbm_covariance, rect_increment

CACHE_ENV = "FBM_VARADHAN_CACHE"
_MIN_EIG = 1e-12
PVAR_MAX_STEPS = 2048


@dataclass
class StepCoeffs:
    """Coefficients ``psi`` of shape ``(d, m)`` on the grid of ``spec``."""

    spec: GridSpec
    psi: np.ndarray

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float)
        if psi.ndim == 1 and self.spec.d == 1:
            psi = psi[None, :]
        if psi.shape != (self.spec.d, self.spec.m):
            raise DomainError(f"psi has shape {psi.shape}, expected {(self.spec.d, self.spec.m)}")
        if not np.all(np.isfinite(psi)):
            raise DomainError("psi has non-finite entries")
        self.psi = psi

    @classmethod
    def zeros(cls, spec):
        return cls(spec, np.zeros((spec.d, spec.m)))

    @classmethod
    def ones(cls, spec):
        return cls(spec, np.ones((spec.d, spec.m)))

    def to_json(self) -> str:
        return json.dumps({"spec": self.spec.to_dict(), "psi": self.psi.tolist()}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StepCoeffs":
        obj = json.loads(text)
        return cls(GridSpec(**obj["spec"]), np.array(obj["psi"], dtype=float))

    def prolong(self, factor: int) -> "StepCoeffs":
        """Same step function written on a grid refined by ``factor``."""
        return StepCoeffs(self.spec.refine(factor), np.repeat(self.psi, factor, axis=1))


@dataclass(frozen=True)
class GramForm:
    """Gram matrix ``Q_jk`` of the grid-interval indicators, with its Cholesky factor."""

    spec: GridSpec
    Q: np.ndarray
    chol: np.ndarray
    min_eig: float


def _gram_dense(spec: GridSpec) -> np.ndarray:
    t = spec.times
    s0, s1 = np.meshgrid(t[:-1], t[:-1], indexing="ij")
    e0, e1 = np.meshgrid(t[1:], t[1:], indexing="ij")
    Q = rect_increment(s0, e0, s1, e1, spec.H)
    return 0.5 * (Q + Q.T)


def _cache_file(spec):
    root = os.environ.get(CACHE_ENV)
    if not root:
        return None
    return Path(root) / f"gram_m{spec.m}_H{spec.H!r}.npz"


def _checksum(Q):
    return hashlib.sha256(np.ascontiguousarray(Q, dtype="<f8").tobytes()).hexdigest()


def gram_matrix(spec: GridSpec) -> GramForm:
    """Build (or load from the cache directory in ``$FBM_VARADHAN_CACHE``) the Gram form.

    Raises
    ------
    DomainError
        If the smallest eigenvalue is below ``1e-12``.
    """
    Q = None
    cache = _cache_file(spec)
    if cache is not None and cache.exists():
        with np.load(cache) as data:
            if str(data["checksum"]) == _checksum(data["Q"]):
                Q = np.array(data["Q"])
    if Q is None:
        Q = _gram_dense(spec)
        if cache is not None:
            cache.parent.mkdir(parents=True, exist_ok=True)
            np.savez(cache, Q=Q, checksum=_checksum(Q))
    lam = float(np.linalg.eigvalsh(Q)[0])
    if lam <= _MIN_EIG:
        raise DomainError(f"Gram matrix badly conditioned: smallest eigenvalue {lam:.3e} (m={spec.m}, H={spec.H})")
    return GramForm(spec, Q, np.linalg.cholesky(Q), lam)


def _same_spec(*items):
    specs = {(x.spec.m, x.spec.H, x.spec.d) for x in items}
    if len(specs) != 1:
        raise DomainError("operands live on different grids")


def inner_h(psi: StepCoeffs, phi: StepCoeffs, Q: GramForm) -> float:
    """``sum_i psi_i^T Q phi_i``."""
    _same_spec(psi, phi, Q)
    return float(np.einsum("ij,jk,ik->", psi.psi, Q.Q, phi.psi))


def cm_norm_sq(psi: StepCoeffs, Q: GramForm) -> float:
    return inner_h(psi, psi, Q)


def indicator_increments(spec: GridSpec, times) -> np.ndarray:
    """Matrix ``E[k, j] = R(s_k, t_j) - R(s_k, t_{j-1})`` so that ``h(s_k) = E @ psi``."""
    s = np.asarray(times, dtype=float)[:, None]
    t = spec.times[None, :]
    R = fbm_covariance(np.broadcast_to(s, (s.shape[0], t.shape[1])), np.broadcast_to(t, (s.shape[0], t.shape[1])), spec.H)
    return np.diff(R, axis=1)


def embed_cm(psi: StepCoeffs, times=None) -> np.ndarray:
    """Values of the Cameron-Martin path ``h = R psi`` at ``times`` (default: grid nodes).

    Returns an array of shape ``(d, len(times))``; ``h(0) = 0``.
    """
    times = psi.spec.times if times is None else np.asarray(times, dtype=float)
    E = indicator_increments(psi.spec, times)
    return psi.psi @ E.T


def pvar_norm(path, p: float, return_points: bool = False):
    """Exact p-variation over subdivisions made of grid points.

    Parameters
    ----------
    path : array_like
        Shape ``(K+1,)`` or ``(n, K+1)`` (time on the last axis); increments are
        measured in the Euclidean norm.
    p : float
        Exponent, ``p >= 1``.
    return_points : bool
        Also return the maximising subdivision (list of node indices).
    """
    if p < 1:
        raise DomainError("p-variation needs p >= 1")
    x = np.asarray(path, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    K = x.shape[1] - 1
    if K > PVAR_MAX_STEPS:
        raise DomainError(f"p-variation limited to {PVAR_MAX_STEPS} steps, got {K}")
    if K < 1:
        return (0.0, [0]) if return_points else 0.0
    best = np.zeros(K + 1)
    link = np.zeros(K + 1, dtype=int)
    for j in range(1, K + 1):
        dist = np.linalg.norm(x[:, :j] - x[:, j:j + 1], axis=0) ** p
        cand = best[:j] + dist
        i = int(np.argmax(cand))
        best[j] = cand[i]
        link[j] = i
    value = best[K] ** (1.0 / p)
    if not return_points:
        return float(value)
    pts = [K]
    while pts[-1] != 0:
        pts.append(int(link[pts[-1]]))
    return float(value), pts[::-1]


def _partition_variation(Rg, P, rho):
    P = np.asarray(sorted(set(P)))
    a, b = P[:-1], P[1:]
    rect = Rg[np.ix_(b, b)] - Rg[np.ix_(b, a)] - Rg[np.ix_(a, b)] + Rg[np.ix_(a, a)]
    return float(np.sum(np.abs(rect) ** rho)) ** (1.0 / rho)


def rho_variation_lower(spec: GridSpec, rho: float, partitions=(), greedy: bool = True) -> float:
    """Lower bound for the 2-d rho-variation of the covariance on the grid.

    Takes the maximum of ``(sum_ab |R rect_ab|^rho)^(1/rho)`` over square partitions
    ``P x P``: the trivial one, the full grid, any supplied ``partitions`` and a
    greedy refinement starting from ``{0, 1}``. Every value is a lower bound of the
    grid supremum, which itself bounds the true variation from below.
    """
    t = spec.times
    Rg = fbm_covariance(t[:, None] * np.ones_like(t)[None, :], np.ones_like(t)[:, None] * t[None, :], spec.H)
    cands = [[0, spec.m], list(range(spec.m + 1))] + [list(P) for P in partitions]
    best = max(_partition_variation(Rg, P, rho) for P in cands)
    if greedy and spec.m <= 256:
        P = {0, spec.m}
        cur = _partition_variation(Rg, P, rho)
        while True:
            scores = [(_partition_variation(Rg, P | {k}, rho), k) for k in range(1, spec.m) if k not in P]
            if not scores:
                break
            val, k = max(scores)
            if val <= cur:
                break
            P.add(k)
            cur = val
        best = max(best, cur)
    return best
