import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from _oracles import heisenberg_brackets, heisenberg_lambda
from fbm_varadhan.errors import DomainError, JetOrderError, OmegaSpanError
from fbm_varadhan.fields import (
    BracketTable,
    VectorFieldSystem,
    bracket,
    box_sampler,
    build_bracket_table,
    enumerate_words,
    graded,
    hypo_check,
    jet,
    local_spanning_eigenvalue,
    omega_solve,
    omega_tensor,
    reduce_words,
)
from fbm_varadhan.systems import (
    REGISTRY,
    elliptic_identity,
    elliptic_perturbed,
    from_expressions,
    get_system,
    heisenberg_sin,
)

HEIS = heisenberg_sin()
TABLE3 = build_bracket_table(HEIS, 3)
points3 = arrays(np.float64, 3, elements=st.floats(-4, 4))
batch3 = arrays(np.float64, (8, 3), elements=st.floats(-4, 4))
LONG = ((1, 2, 1, 1), (1, 2, 1, 2))


def test_enumerate_words():
    assert enumerate_words(1, 2) == [(1,), (1, 1)]
    assert len(enumerate_words(2, 2)) == 6
    w = enumerate_words(2, 3)
    assert len(w) == 14 and w == sorted(w)
    assert graded(w)[:2] == [(1,), (2,)]
    with pytest.raises(DomainError):
        enumerate_words(0, 2)
    with pytest.raises(DomainError):
        enumerate_words(10, 7)


def test_bracket_examples():
    U, W = HEIS.field(1), HEIS.field(2)
    assert np.allclose(bracket(U, W, np.zeros(3)), [0, 0, 1], atol=1e-15)
    E = elliptic_identity(3)
    assert np.allclose(bracket(E.field(1), E.field(3), np.ones(3)), 0)
    assert np.allclose(bracket(W, W, np.array([0.3, -1.0, 2.0])), 0)


@settings(max_examples=10)
@given(points3)
def test_bracket_antisymmetric(x):
    P = elliptic_perturbed()
    for sys, a, b in ((HEIS, 1, 2), (P, 1, 2)):
        xx = x[: sys.n]
        lhs = bracket(sys.field(a), sys.field(b), xx)
        rhs = -bracket(sys.field(b), sys.field(a), xx)
        assert np.allclose(lhs, rhs, atol=1e-12)


@given(batch3)
def test_heisenberg_table_matches_hand_brackets(X):
    vals = TABLE3.values(X)
    long = TABLE3.values(X, LONG)
    for x, v, lv in zip(X, vals, long):
        ref = heisenberg_brackets(x)
        for k, w in enumerate(TABLE3.words):
            assert np.allclose(v[k], ref[w], atol=1e-13), w
        for k, w in enumerate(LONG):
            assert np.allclose(lv[k], ref[w], atol=1e-13), w


def test_table_level_one_and_commuting_fields():
    t1 = build_bracket_table(HEIS, 1)
    assert t1.words == ((1,), (2,))
    x = np.array([0.4, 0.1, -0.2])
    assert np.allclose(t1.values(x), HEIS.V(x).T)
    E = build_bracket_table(elliptic_identity(2), 4)
    vals = E.values(np.array([0.5, -1.0]))
    lens = np.array([len(w) for w in E.words])
    assert np.all(vals[lens >= 2] == 0)


def test_jets_consistent_with_eval_and_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-5
    for w in ((1, 2), (1, 2, 1)):
        x = rng.uniform(-2, 2, 3)
        j = TABLE3.jet(w, x, 1)
        assert np.allclose(j[0], TABLE3.values(x, [w])[0])
        shifted = np.concatenate([x + h * np.eye(3), x - h * np.eye(3)])
        v = TABLE3.values(shifted, [w])[:, 0]
        fd = ((v[:3] - v[3:]) / (2 * h)).T
        assert np.linalg.norm(j[1] - fd) <= 1e-6 * max(np.linalg.norm(j[1]), 1.0)
    # system jets at order 0 equal eval
    x = np.array([0.2, 0.3, 0.4])
    assert np.allclose(HEIS.jet(x, 2, 0)[0], HEIS.V(x)[:, 1])
    assert np.allclose(jet(jnp.sin, 0.0, 3)[3], -1.0)


def test_jet_order_guard():
    limited = VectorFieldSystem("limited", 3, 2, HEIS.matrix, jet_order=2)
    with pytest.raises(JetOrderError):
        build_bracket_table(limited, 3)
    with pytest.raises(JetOrderError):
        limited.jet(np.zeros(3), 1, 3)
    assert build_bracket_table(limited, 2).l == 2


def test_hypo_check_elliptic_is_one():
    t = build_bracket_table(elliptic_identity(2), 1)
    lam, _ = hypo_check(t, box_sampler(t.sys, seed=1), 200)
    assert lam == pytest.approx(1.0, abs=1e-14)
    pts = box_sampler(t.sys, seed=2)(50)
    assert np.allclose(local_spanning_eigenvalue(t, pts), 1.0, atol=1e-14)


def test_hypo_check_heisenberg_levels():
    ref2, x2 = heisenberg_lambda(2)
    ref3, _ = heisenberg_lambda(3)
    assert ref2 < 1e-12 and abs(x2 - np.pi / 2) < 1e-3
    lam2, arg2 = hypo_check(build_bracket_table(HEIS, 2), box_sampler(HEIS, seed=0), 2000)
    assert lam2 < 1e-3
    assert abs(abs(arg2[0]) - np.pi / 2) < 0.1
    lam3, _ = hypo_check(TABLE3, box_sampler(HEIS, seed=0), 2000)
    assert lam3 >= 0.15
    assert lam3 == pytest.approx(ref3, abs=1e-3)
    # the grid oracle minimum is attained at x1 = pi/2
    lam, _ = hypo_check(TABLE3, [[np.pi / 2, 0.0, 0.0]])
    assert lam == pytest.approx(ref3, abs=1e-12)


def test_box_sampler_extra_points_and_determinism():
    s = box_sampler(HEIS, seed=5, extra_points=[[9.0, 9.0, 9.0]])
    a, b = s(10), s(10)
    assert np.array_equal(a, b) and a.shape == (11, 3)
    assert np.all(a[-1] == 9.0)


def test_reduce_words_heisenberg():
    pts = box_sampler(HEIS, seed=0)(64)
    red = reduce_words(TABLE3, pts)
    assert red.words == ((1,), (2,), (1, 2), (1, 2, 1))
    E = reduce_words(build_bracket_table(elliptic_identity(2), 3), np.zeros((4, 2)))
    assert E.words == ((1,), (2,))


def test_omega_identity_expansion():
    x = np.array([0.3, 0.2, -0.5])
    red = reduce_words(TABLE3, box_sampler(HEIS, seed=0)(64))
    for w in red.words:
        om = omega_solve(red, w, x)
        rec = sum(c * red.values(x, [k])[0, 0] for k, c in om.items())
        assert np.allclose(rec, red.values(x, [w])[0, 0], atol=1e-12)
        # the indicator is feasible, so the minimum-norm solution is no longer
        assert np.linalg.norm(list(om.values())) <= 1 + 1e-12
    # two independent fields: the expansion is the indicator
    t1 = build_bracket_table(HEIS, 1)
    om = omega_solve(t1, (2,), x)
    assert om[(2,)] == pytest.approx(1.0, abs=1e-12) and abs(om[(1,)]) < 1e-12


def test_omega_elliptic_bracket_vanishes():
    t = build_bracket_table(elliptic_identity(2), 2)
    om = omega_solve(t, (1, 2), np.array([0.1, 0.2]))
    assert all(abs(v) < 1e-15 for v in om.values())


def test_omega_heisenberg_length_four():
    x = np.zeros(3)
    ref = heisenberg_brackets(x)
    basis = TABLE3.words
    A = np.array([ref[w] for w in basis]).T
    for word in ((1, 2, 1, 2), (1, 2, 1, 1)):
        # dense least-squares oracle on the hand brackets
        want = np.linalg.lstsq(A, np.array(ref[word]), rcond=None)[0]
        om = omega_solve(TABLE3, word, x)
        assert np.allclose([om[w] for w in basis], want, atol=1e-12)
    om = omega_solve(TABLE3, (1, 2, 1, 1), x)
    assert om[(1, 2)] == pytest.approx(-0.5) and om[(2, 1)] == pytest.approx(0.5)


def test_omega_span_failure():
    t = build_bracket_table(HEIS, 1)
    with pytest.raises(OmegaSpanError) as info:
        omega_solve(t, (1, 2), np.zeros(3))
    assert info.value.residual > 0.5


@given(points3, st.sampled_from([(1, 2, 1, 1), (2, 1, 1, 2), (1, 2, 2), (2, 2, 1, 1)]))
def test_omega_reconstruction_where_spanning(x, word):
    tol = 1e-8
    if local_spanning_eigenvalue(TABLE3, x[None])[0] <= 10 * tol:
        return
    om = omega_solve(TABLE3, word, x, tol=tol)
    rec = sum(c * TABLE3.values(x, [k])[0, 0] for k, c in om.items())
    assert np.linalg.norm(rec - TABLE3.values(x, [word])[0, 0]) < tol


def test_omega_tensor_scaling():
    red = reduce_words(TABLE3, box_sampler(HEIS, seed=0)(64))
    X = np.array([[0.4, 0.0, 0.0], [1.0, 2.0, 3.0]])
    W1 = omega_tensor(red, X, 1.0)
    We = omega_tensor(red, X, 0.5)
    words = red.words
    lens = np.array([len(w) for w in words])
    for j in range(2):
        for a, I in enumerate(words):
            scale = 0.5 ** (len(I) + 1 - lens)
            assert np.allclose(We[:, j, a], W1[:, j, a] * scale, atol=1e-14)
    # (1,)*(2,) = (1,2) is indexed: identity expansion
    assert W1[0, 1, words.index((1,)), words.index((1, 2))] == 1.0
    E = build_bracket_table(elliptic_identity(2), 1)
    assert np.all(omega_tensor(E, np.zeros((3, 2)), 0.3) == 0)


def test_registry_and_expressions():
    for name in REGISTRY:
        sys = get_system(name)
        assert sys.name == name
    with pytest.raises(DomainError):
        get_system("nope")
    inline = from_expressions([["1", "0"], ["0", "1"], ["0", "sin(x1)"]])
    x = np.random.default_rng(3).normal(size=(6, 3))
    assert np.allclose(inline.V(x), HEIS.V(x), atol=1e-15)
    assert np.allclose(inline.DV(x), HEIS.DV(x), atol=1e-15)
    with pytest.raises(DomainError):
        from_expressions([["1", "y"]])
    with pytest.raises(DomainError):
        from_expressions([["1", "0"], ["0"]])
