"""Fractional Brownian motion on a uniform grid of [0, 1].

Paths are produced exactly (no path-regularity approximation): fractional
Gaussian noise increments are drawn either by a dense Cholesky factor or by
circulant embedding (Davies-Harte) and then cumulatively summed.

Random numbers come from a counter-based generator keyed by
``(seed, path index, component)``, so any sub-range of paths can be regenerated
on its own and the ensemble does not depend on chunking or worker count.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
from scipy.linalg import cholesky, toeplitz

from .errors import DomainError, FbmError

H_MIN = 0.25 + 1e-6
H_MAX = 1.0 - 1e-6
_EIG_TOL = 1e-10
_T_TOL = 1e-12


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid ``t_j = j/m`` on [0, 1] together with the driver law.

    Parameters
    ----------
    m : int
        Number of steps (at least 2).
    H : float
        Hurst parameter, restricted to ``(0.25 + 1e-6, 1 - 1e-6)``.
    d : int
        Number of independent fBm components.
    """

    m: int
    H: float
    d: int = 1

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 2:
            raise DomainError(f"grid needs m >= 2 steps, got {self.m}")
        if not (H_MIN < self.H < H_MAX):
            raise DomainError(f"Hurst parameter {self.H} outside ({H_MIN}, {H_MAX})")
        if int(self.d) != self.d or self.d < 1:
            raise DomainError(f"driver dimension must be >= 1, got {self.d}")
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "H", float(self.H))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.m + 1) / self.m

    @property
    def dt(self) -> float:
        return 1.0 / self.m

    def refine(self, factor: int) -> "GridSpec":
        return GridSpec(self.m * int(factor), self.H, self.d)

    def index_of(self, t: float) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid node."""
        j = int(round(t * self.m))
        if not (0 <= j <= self.m) or abs(j / self.m - t) > _T_TOL:
            raise DomainError(f"time {t} is not on the grid with m={self.m}")
        return j

    def to_dict(self) -> dict:
        return {"m": self.m, "H": self.H, "d": self.d}


def _check_hurst(H):
    if not (0.25 < H < 1.0):
        raise DomainError(f"Hurst parameter {H} outside (1/4, 1)")


def _check_times(*ts):
    for t in ts:
        a = np.asarray(t, dtype=float)
        if np.any(a < -_T_TOL) or np.any(a > 1 + _T_TOL):
            raise DomainError("times must lie in [0, 1]")


def fbm_covariance(s, t, H):
    """``R(s, t) = (s^{2H} + t^{2H} - |t - s|^{2H}) / 2``; broadcasts over arrays."""
    _check_hurst(H)
    _check_times(s, t)
    s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    out = 0.5 * (s ** (2 * H) + t ** (2 * H) - np.abs(t - s) ** (2 * H))
    return out if out.ndim else float(out)


def rect_increment(s, t, u, v, H):
    """Covariance of the increments ``B_t - B_s`` and ``B_v - B_u``."""
    if np.any(np.asarray(s) > np.asarray(t)) or np.any(np.asarray(u) > np.asarray(v)):
        raise DomainError("rect_increment needs s <= t and u <= v")
    return (
        fbm_covariance(t, v, H)
        - fbm_covariance(t, u, H)
        - fbm_covariance(s, v, H)
        + fbm_covariance(s, u, H)
    )


def fgn_autocovariance(k, H, m):
    """Autocovariance at lag ``k`` of fBm increments over steps of length ``1/m``."""
    k = np.abs(np.asarray(k, dtype=float))
    g = 0.5 * (np.abs(k + 1) ** (2 * H) + np.abs(k - 1) ** (2 * H) - 2 * k ** (2 * H))
    return g * float(m) ** (-2 * H)


def increment_covariance(spec: GridSpec) -> np.ndarray:
    """Toeplitz covariance matrix of the ``m`` grid increments."""
    return toeplitz(fgn_autocovariance(np.arange(spec.m), spec.H, spec.m))


def circulant_eigenvalues(spec: GridSpec) -> np.ndarray:
    """Eigenvalues of the even circulant extension (size ``2m``) of the fGn covariance."""
    m = spec.m
    g = fgn_autocovariance(np.arange(m + 1), spec.H, m)
    row = np.concatenate([g, g[m - 1:0:-1]])
    return np.fft.fft(row).real


def _normals(seed: int, first: int, count: int, d: int, k: int) -> np.ndarray:
    """Standard normals of shape (count, d, k), keyed by (seed, path, component)."""
    base = jax.random.PRNGKey(int(seed) % (1 << 64))
    idx = jnp.arange(first, first + count, dtype=jnp.uint32)
    comps = jnp.arange(d, dtype=jnp.uint32)
    z = _keyed_normals(base, idx, comps, k)
    return np.asarray(z)


def _keyed_normals_impl(base, idx, comps, k):
    def one_path(i):
        key_i = jax.random.fold_in(base, i)
        return jax.vmap(lambda c: jax.random.normal(jax.random.fold_in(key_i, c), (k,)))(comps)

    return jax.vmap(one_path)(idx)


_keyed_normals = jax.jit(_keyed_normals_impl, static_argnums=3)


@dataclass
class FbmEnsemble:
    """``N`` sampled paths, array of shape ``(N, d, m + 1)`` with ``B_0 = 0``."""

    spec: GridSpec
    paths: np.ndarray
    seed: int
    method: str
    fallback: bool = False
    notes: list = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.paths.shape[0]

    def header(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "seed": int(self.seed),
            "method": self.method,
            "N": int(self.N),
            "fallback": bool(self.fallback),
            "dtype": "<f8",
            "shape": list(self.paths.shape),
        }

    def to_binary(self, path) -> None:
        """One JSON header line, then the paths as little-endian float64 in C order."""
        with open(path, "wb") as fh:
            fh.write(json.dumps(self.header(), sort_keys=True).encode() + b"\n")
            fh.write(np.ascontiguousarray(self.paths, dtype="<f8").tobytes())

    @classmethod
    def from_binary(cls, path) -> "FbmEnsemble":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            data = np.frombuffer(fh.read(), dtype="<f8")
        paths = data.reshape(header["shape"]).astype(float)
        spec = GridSpec(**header["spec"])
        return cls(spec, paths, header["seed"], header["method"], header["fallback"])

    def to_csv(self, path, max_paths: int = 1000) -> None:
        if self.N > max_paths:
            raise ValueError(f"CSV export is for small ensembles (N <= {max_paths})")
        t = self.spec.times
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "component", "j", "t", "value"])
            for p in range(self.N):
                for c in range(self.spec.d):
                    for j in range(self.spec.m + 1):
                        w.writerow([p, c, j, repr(float(t[j])), repr(float(self.paths[p, c, j]))])


def _increments_cholesky(spec, seed, first, count):
    cov = increment_covariance(spec)
    try:
        L = cholesky(cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FbmError(f"increment covariance not positive definite (m={spec.m}, H={spec.H})") from exc
    z = _normals(seed, first, count, spec.d, spec.m)
    return z @ L.T


def _increments_circulant(spec, seed, first, count, lam):
    m = spec.m
    M = 2 * m
    z = _normals(seed, first, count, spec.d, 2 * M)
    w = z[..., :M] + 1j * z[..., M:]
    y = np.fft.fft(np.sqrt(lam / M) * w, axis=-1)
    # real part of y has exactly the circulant covariance
    return y.real[..., :m]


def sample_fbm(
    spec: GridSpec,
    N: int,
    seed: int,
    method: str = "circulant",
    first_index: int = 0,
    chunk: int = 65536,
) -> FbmEnsemble:
    """Draw ``N`` exact fBm paths on ``spec``'s grid.

    Parameters
    ----------
    spec : GridSpec
    N : int
        Number of paths; path ``i`` uses the random stream of index
        ``first_index + i``.
    seed : int
        64-bit master seed.
    method : {"circulant", "cholesky"}
        Circulant embedding falls back to Cholesky (with ``fallback=True``) when an
        embedding eigenvalue is below ``-1e-10``.
    """
    if N < 1:
        raise DomainError("need N >= 1 paths")
    if method not in ("circulant", "cholesky"):
        raise DomainError(f"unknown sampling method {method!r}")
    notes = []
    fallback = False
    lam = None
    if method == "circulant":
        lam = circulant_eigenvalues(spec)
        if lam.min() < -_EIG_TOL:
            msg = f"negative circulant eigenvalue {lam.min():.3e}; using cholesky"
            warnings.warn(msg)
            notes.append(msg)
            fallback = True
        else:
            lam = np.clip(lam, 0.0, None)
    used = "cholesky" if (method == "cholesky" or fallback) else "circulant"

    out = np.empty((N, spec.d, spec.m + 1))
    out[..., 0] = 0.0
    for start in range(0, N, chunk):
        count = min(chunk, N - start)
        first = first_index + start
        if used == "cholesky":
            inc = _increments_cholesky(spec, seed, first, count)
        else:
            inc = _increments_circulant(spec, seed, first, count, lam)
        out[start:start + count, :, 1:] = np.cumsum(inc, axis=-1)
    return FbmEnsemble(spec, out, int(seed), method, fallback, notes)


def empirical_covariance_report(ens: FbmEnsemble, pairs) -> list:
    """Compare empirical ``E[B_s B_t]`` with the exact covariance at grid pairs.

    Components are pooled (they are i.i.d.). The z-score uses the exact variance
    of the product of two centred Gaussians, ``R(s,s) R(t,t) + R(s,t)^2``.

    Returns
    -------
    list of dict
        Keys ``pair``, ``empirical``, ``exact``, ``z``.
    """
    spec = ens.spec
    rows = []
    n_eff = ens.N * spec.d
    for s, t in pairs:
        i, j = spec.index_of(s), spec.index_of(t)
        prod = ens.paths[:, :, i] * ens.paths[:, :, j]
        emp = float(prod.mean())
        exact = fbm_covariance(s, t, spec.H)
        var = fbm_covariance(s, s, spec.H) * fbm_covariance(t, t, spec.H) + exact**2
        z = (emp - exact) / np.sqrt(var / n_eff) if var > 0 else 0.0
        rows.append({"pair": (float(s), float(t)), "empirical": emp, "exact": float(exact), "z": float(z)})
    return rows


DEFAULT_PAIRS = ((0.25, 0.25), (0.5, 0.5), (1.0, 1.0), (0.25, 0.5), (0.25, 1.0), (0.5, 1.0))
