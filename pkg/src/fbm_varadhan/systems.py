"""Built-in vector field systems, addressable by name."""

from __future__ import annotations

import jax.numpy as jnp
import numpy as np
import sympy

from .errors import DomainError
from .fields import VectorFieldSystem


def elliptic_identity(n: int = 2) -> VectorFieldSystem:
    """Constant fields ``V_i = e_i`` on ``R^n`` (``d = n``)."""
    return VectorFieldSystem("elliptic-identity", n, n, lambda x: jnp.eye(n, dtype=x.dtype) + 0.0 * x[0])


def elliptic_perturbed() -> VectorFieldSystem:
    """Bounded perturbation of the identity on ``R^2``; smallest singular value >= 0.49."""

    def matrix(x):
        return jnp.array(
            [
                [1.0 + 0.3 * jnp.sin(x[1]), 0.2 * jnp.cos(x[0])],
                [0.2 * jnp.sin(x[0]), 1.0 + 0.3 * jnp.cos(x[1])],
            ]
        )

    return VectorFieldSystem("elliptic-perturbed", 2, 2, matrix)


def scalar_linear() -> VectorFieldSystem:
    """``V(x) = x`` on ``R``; unbounded, kept for its closed forms."""
    return VectorFieldSystem("scalar-linear", 1, 1, lambda x: x.reshape(1, 1), test_only=True, box=(0.1, 3.0))


def constant_scalar() -> VectorFieldSystem:
    """``V = 1`` on ``R``."""
    return VectorFieldSystem("constant-scalar", 1, 1, lambda x: jnp.ones((1, 1)) + 0.0 * x[0])


def heisenberg_sin() -> VectorFieldSystem:
    """``V_1 = d/dx1`` and ``V_2 = d/dx2 + sin(x1) d/dx3`` on ``R^3``."""

    def matrix(x):
        zero = 0.0 * x[0]
        return jnp.array([[1.0 + zero, zero], [zero, 1.0 + zero], [zero, jnp.sin(x[0])]])

    return VectorFieldSystem("heisenberg-sin", 3, 2, matrix)


def degenerate_line() -> VectorFieldSystem:
    """Single field ``d/dx1`` on ``R^2``: only the line through ``x0`` is reachable."""
    return VectorFieldSystem("degenerate-line", 2, 1, lambda x: jnp.array([[1.0], [0.0]]) + 0.0 * x[0])


REGISTRY = {
    "elliptic-identity": elliptic_identity,
    "elliptic-perturbed": elliptic_perturbed,
    "scalar-linear": scalar_linear,
    "constant-scalar": constant_scalar,
    "heisenberg-sin": heisenberg_sin,
    "degenerate-line": degenerate_line,
}

# default start points used by the CLI
DEFAULT_X0 = {
    "elliptic-identity": [0.0, 0.0],
    "elliptic-perturbed": [0.0, 0.0],
    "scalar-linear": [1.0],
    "constant-scalar": [0.0],
    "heisenberg-sin": [0.0, 0.0, 0.0],
    "degenerate-line": [0.0, 0.0],
}


def get_system(name: str, **kwargs) -> VectorFieldSystem:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise DomainError(f"unknown system {name!r}; choose from {sorted(REGISTRY)}") from None
    return factory(**kwargs)


def from_expressions(rows, name: str = "inline") -> VectorFieldSystem:
    """System from a nested list of expression strings in ``x1..xn``.

    ``rows[a][i]`` is component ``a`` of ``V_{i+1}``, e.g.
    ``[["1", "0"], ["0", "1"], ["0", "sin(x1)"]]`` for the Heisenberg-type system.
    """
    n = len(rows)
    d = len(rows[0])
    if any(len(r) != d for r in rows):
        raise DomainError("ragged field matrix")
    syms = sympy.symbols(" ".join(f"x{k + 1}" for k in range(n)), seq=True)
    exprs = [[sympy.sympify(e) for e in r] for r in rows]
    free = set().union(*(e.free_symbols for r in exprs for e in r))
    if not free <= set(syms):
        raise DomainError(f"unknown symbols {sorted(map(str, free - set(syms)))}")
    fns = [[sympy.lambdify(syms, e, modules="jax") for e in r] for r in exprs]

    def matrix(x):
        args = [x[k] for k in range(n)]
        return jnp.stack([jnp.stack([jnp.asarray(f(*args), dtype=x.dtype) + 0.0 * x[0] for f in r]) for r in fns])

    return VectorFieldSystem(name, n, d, matrix, box=(-np.pi, np.pi))
