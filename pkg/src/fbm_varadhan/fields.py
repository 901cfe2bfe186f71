"""Smooth vector field systems, iterated Lie brackets and the spanning check.

A system is given by a jax-traceable map ``x -> V(x)`` returning the ``n x d``
matrix whose columns are the fields ``V_1..V_d``. Derivatives of any order are
obtained by nested forward-mode differentiation, so bracket fields and their
jets are exact (no finite differences).

Words are tuples of 1-based letters. The bracket of a word is built
recursively, ``V_[j] = V_j`` and ``V_[I*j] = [V_[I], V_j]`` with
``[U, W] = DW U - DU W``.
"""

from __future__ import annotations

import itertools
from functools import cached_property

import jax
import jax.numpy as jnp
import numpy as np

from .errors import DomainError, JetOrderError, OmegaSpanError

MAX_WORDS = 10**6


class VectorFieldSystem:
    """Fields ``V_1..V_d`` on ``R^n``.

    Parameters
    ----------
    name : str
    n, d : int
        State and driver dimensions.
    matrix : callable
        jax-traceable ``x (n,) -> (n, d)``.
    jet_order : int or None
        Highest derivative order the system can supply (``None``: unlimited).
    test_only : bool
        Marks systems that are not C-infinity bounded (kept for closed-form checks).
    box : tuple of float
        Default sampling box ``[low, high]^n`` for the spanning check.
    """

    def __init__(self, name, n, d, matrix, jet_order=None, test_only=False, box=(-np.pi, np.pi)):
        self.name = name
        self.n = int(n)
        self.d = int(d)
        self.matrix = matrix
        self.jet_order = jet_order
        self.test_only = test_only
        self.box = box

    def __repr__(self):
        return f"VectorFieldSystem({self.name!r}, n={self.n}, d={self.d})"

    def field(self, i):
        """Column ``V_i`` (1-based) as a callable ``x -> (n,)``."""
        if not 1 <= i <= self.d:
            raise DomainError(f"letter {i} outside 1..{self.d}")
        return lambda x: self.matrix(x)[:, i - 1]

    @cached_property
    def _V(self):
        return jax.jit(jax.vmap(self.matrix))

    @cached_property
    def _DV(self):
        return jax.jit(jax.vmap(jax.jacfwd(self.matrix)))

    def V(self, x):
        """Batched field matrix: ``x (..., n) -> (..., n, d)``."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.n)
        return np.asarray(self._V(flat)).reshape(x.shape[:-1] + (self.n, self.d))

    def DV(self, x):
        """Batched derivative ``[..., a, i, c] = d V_i^a / d x_c``."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.n)
        return np.asarray(self._DV(flat)).reshape(x.shape[:-1] + (self.n, self.d, self.n))

    def jet(self, x, i, order):
        """``[V_i(x), DV_i(x), ..., D^order V_i(x)]``."""
        if self.jet_order is not None and order > self.jet_order:
            raise JetOrderError(f"{self.name} supplies jets up to order {self.jet_order}, asked {order}")
        return jet(self.field(i), x, order)


def jet(fn, x, order):
    """Derivatives of ``fn`` at ``x`` up to ``order`` by nested forward mode."""
    x = jnp.asarray(x, dtype=float)
    out = []
    g = fn
    for _ in range(order + 1):
        out.append(np.asarray(g(x)))
        g = jax.jacfwd(g)
    return out


def bracket_field(U, W):
    """Callable for ``[U, W] = DW U - DU W``."""

    def br(x):
        return jax.jacfwd(W)(x) @ U(x) - jax.jacfwd(U)(x) @ W(x)

    return br


def bracket(U, W, x):
    """Value of ``[U, W]`` at ``x``."""
    return np.asarray(bracket_field(U, W)(jnp.asarray(x, dtype=float)))


def enumerate_words(d: int, l: int) -> list:
    """All words of length 1..l over ``{1..d}`` in lexicographic order."""
    if d < 1 or l < 1:
        raise DomainError("need d >= 1 and l >= 1")
    total = sum(d**k for k in range(1, l + 1))
    if total > MAX_WORDS:
        raise DomainError(f"{total} words exceeds the limit of {MAX_WORDS}")
    words = [w for k in range(1, l + 1) for w in itertools.product(range(1, d + 1), repeat=k)]
    return sorted(words)


def graded(words) -> list:
    """Sort words by length, then lexicographically."""
    return sorted(words, key=lambda w: (len(w), w))


class BracketTable:
    """Bracket fields ``V_[I]`` for an index set of words of length at most ``l``.

    ``words`` is the index set used by the spanning check, the coefficient solve
    and the transport system. It defaults to every word of length ``<= l``; see
    :func:`reduce_words` for an independent subset.
    """

    def __init__(self, sys: VectorFieldSystem, l: int, words=None, _cache=None):
        self.sys = sys
        self.l = int(l)
        self.words = tuple(graded(words if words is not None else enumerate_words(sys.d, l)))
        if any(len(w) > self.l for w in self.words):
            raise DomainError("index set contains words longer than the level")
        self._cache = {} if _cache is None else _cache
        self._batch = {}

    def __repr__(self):
        return f"BracketTable({self.sys.name!r}, l={self.l}, {len(self.words)} words)"

    def field(self, word):
        word = tuple(word)
        if word not in self._cache:
            if len(word) == 1:
                self._cache[word] = self.sys.field(word[0])
            else:
                self._cache[word] = bracket_field(self.field(word[:-1]), self.sys.field(word[-1]))
        return self._cache[word]

    def jet(self, word, x, order):
        return jet(self.field(word), x, order)

    def values(self, x, words=None):
        """Stacked bracket values: ``x (..., n) -> (..., len(words), n)``."""
        words = self.words if words is None else tuple(tuple(w) for w in words)
        if words not in self._batch:
            fields = [self.field(w) for w in words]
            self._batch[words] = jax.jit(jax.vmap(lambda z: jnp.stack([f(z) for f in fields])))
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.sys.n)
        out = np.asarray(self._batch[words](flat))
        return out.reshape(x.shape[:-1] + (len(words), self.sys.n))

    def restrict(self, words) -> "BracketTable":
        return BracketTable(self.sys, self.l, words, _cache=self._cache)


def build_bracket_table(sys: VectorFieldSystem, l: int) -> BracketTable:
    """All ``V_[I]`` with ``|I| <= l``; entries carry jets of any order via autodiff."""
    if l < 1:
        raise DomainError("level must be >= 1")
    if sys.jet_order is not None and sys.jet_order < l:
        raise JetOrderError(f"brackets up to level {l} need jets of order {l}; {sys.name} has {sys.jet_order}")
    return BracketTable(sys, l)


def box_sampler(sys: VectorFieldSystem, seed: int = 0, low=None, high=None, extra_points=None):
    """Callable ``trials -> points``: uniform in a box plus optional fixed points."""
    lo = sys.box[0] if low is None else low
    hi = sys.box[1] if high is None else high

    def sample(trials):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(lo, hi, size=(trials, sys.n))
        if extra_points is not None:
            pts = np.concatenate([pts, np.asarray(extra_points, dtype=float).reshape(-1, sys.n)])
        return pts

    return sample


def local_spanning_eigenvalue(table: BracketTable, points) -> np.ndarray:
    """Smallest eigenvalue of ``sum_I V_[I](x) V_[I](x)^T`` at each point."""
    vals = table.values(points)
    G = np.einsum("...ka,...kb->...ab", vals, vals)
    return np.linalg.eigvalsh(G)[..., 0]


def hypo_check(table: BracketTable, sampler, trials: int = 1000):
    """Sampled constant of the uniform spanning condition.

    Parameters
    ----------
    table : BracketTable
    sampler : callable or array_like
        ``sampler(trials)`` returning points ``(P, n)``, or the points themselves.
    trials : int

    Returns
    -------
    (float, ndarray)
        Minimum over the sample of the local smallest eigenvalue, and the
        minimising point. A non-positive value means the condition fails on the
        sample; a positive one only certifies the sampled set.
    """
    pts = sampler(trials) if callable(sampler) else np.asarray(sampler, dtype=float)
    pts = pts.reshape(-1, table.sys.n)
    lam = local_spanning_eigenvalue(table, pts)
    k = int(np.argmin(lam))
    return float(lam[k]), pts[k].copy()


def reduce_words(table: BracketTable, points, rtol: float = 1e-9) -> BracketTable:
    """Keep words whose bracket field is independent, as a function, of earlier ones.

    Words are scanned by length then lexicographically; a word is kept when its
    values over ``points`` (stacked into one long vector) raise the rank of the
    kept set. Single letters are always kept. Dropped words are then exactly
    combinations of kept words of no greater length on the sample, so their
    expansion never needs negative powers of the noise scale.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, table.sys.n)
    vals = table.values(pts, table.words)
    kept, cols = [], []
    scale = max(float(np.abs(vals).max()), 1.0)
    for k, w in enumerate(table.words):
        v = vals[:, k, :].ravel()
        if len(w) == 1:
            kept.append(w)
            cols.append(v)
            continue
        A = np.stack(cols + [v], axis=1)
        s = np.linalg.svd(A, compute_uv=False)
        if s[-1] > rtol * scale * np.sqrt(len(v)):
            kept.append(w)
            cols.append(v)
    return table.restrict(kept)


def _min_norm(A, b):
    """Batched minimum-norm least squares; ``A (..., n, k)``, ``b (..., n)``."""
    Ap = np.linalg.pinv(A, rcond=1e-10)
    coef = np.einsum("...kn,...n->...k", Ap, b)
    resid = np.linalg.norm(np.einsum("...nk,...k->...n", A, coef) - b, axis=-1)
    return coef, resid


def omega_solve(table: BracketTable, word, x, tol: float = 1e-8, basis=None) -> dict:
    """Coefficients ``w_J`` with ``V_[word](x) = sum_J w_J V_[J](x)``, minimum norm.

    ``word`` may be longer than the level. ``basis`` defaults to the table's words.

    Raises
    ------
    OmegaSpanError
        If the reconstruction residual exceeds ``tol``.
    """
    basis = table.words if basis is None else tuple(tuple(b) for b in basis)
    x = np.asarray(x, dtype=float)
    target = table.values(x, [tuple(word)])[0]
    A = table.values(x, basis).T
    coef, resid = _min_norm(A, target)
    if resid > tol:
        raise OmegaSpanError(f"bracket {tuple(word)} not spanned at {x}: residual {resid:.3e}", x, float(resid))
    return dict(zip(basis, coef.tolist()))


def omega_tensor(table: BracketTable, X, eps: float, tol: float = 1e-8) -> np.ndarray:
    """Scaled expansion coefficients for the bracket transport system.

    Returns ``W`` of shape ``(..., d, S, S)`` with
    ``W[..., j, I, K] = eps^(|I*j| - |K|) * w^K_{I*j}(x)`` over the table's words
    ``S``. Words ``I*j`` in the index set use the identity expansion; others are
    expanded by minimum-norm least squares over indexed words no longer than
    ``I*j``.
    """
    X = np.asarray(X, dtype=float)
    words = table.words
    S = len(words)
    pos = {w: k for k, w in enumerate(words)}
    d = table.sys.d
    lens = np.array([len(w) for w in words])
    out = np.zeros(X.shape[:-1] + (d, S, S))
    targets = {}
    for a, I in enumerate(words):
        for j in range(1, d + 1):
            W = I + (j,)
            if W in pos:
                out[..., j - 1, a, pos[W]] = 1.0
            else:
                targets.setdefault(len(W), []).append((a, j, W))
    base_vals = table.values(X, words)
    for length, items in targets.items():
        sel = np.nonzero(lens <= length)[0]
        A = np.swapaxes(base_vals[..., sel, :], -1, -2)
        tvals = table.values(X, [w for _, _, w in items])
        for q, (a, j, W) in enumerate(items):
            coef, resid = _min_norm(A, tvals[..., q, :])
            bad = resid > tol * np.maximum(1.0, np.linalg.norm(tvals[..., q, :], axis=-1))
            if np.any(bad):
                idx = np.unravel_index(int(np.argmax(resid)), resid.shape)
                raise OmegaSpanError(
                    f"bracket {W} not spanned at {X[idx]}: residual {float(resid[idx]):.3e}",
                    X[idx],
                    float(resid[idx]),
                )
            out[..., j - 1, a, sel] = coef * eps ** (length - lens[sel])
    return out
