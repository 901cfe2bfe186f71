import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import gaussian_v, lognormal_pdf, normal_pdf
from fbm_varadhan.density import (
    bootstrap_ci,
    fit_limit,
    kde,
    silverman,
    simulate_endpoints,
    varadhan_report,
)
from fbm_varadhan.errors import DomainError, FlowBlowUp
from fbm_varadhan.fields import VectorFieldSystem
from fbm_varadhan.gaussian_driver import GridSpec, sample_fbm
from fbm_varadhan.hilbert import StepCoeffs
from fbm_varadhan.systems import degenerate_line, elliptic_identity, scalar_linear

EI = elliptic_identity(2)
SL = scalar_linear()


def test_constant_fields_exactly_gaussian():
    s = simulate_endpoints(EI, [1.0, 2.0], 0.6, 0.3, 2000, seed=4)
    B1 = sample_fbm(GridSpec(16, 0.6, 2), 2000, 4).paths[:, :, -1]
    assert np.allclose(s.x, np.array([1.0, 2.0]) + 0.3 * B1, atol=1e-14)
    assert s.weights is None and s.blown == 0


def test_scalar_linear_exactly_lognormal():
    s = simulate_endpoints(SL, [1.0], 0.7, 0.5, 2000, seed=5, substeps=8)
    B1 = sample_fbm(GridSpec(16, 0.7), 2000, 5).paths[:, 0, -1]
    assert np.allclose(s.x[:, 0], np.exp(0.5 * B1), rtol=1e-6)


def test_zero_noise_concentrates():
    s = simulate_endpoints(SL, [1.3], 0.5, 0.0, 1000, seed=0)
    assert np.all(s.x == 1.3)


def test_simulation_deterministic_and_chunk_free():
    a = simulate_endpoints(SL, [1.0], 0.5, 0.4, 3000, seed=8, chunk=1000)
    b = simulate_endpoints(SL, [1.0], 0.5, 0.4, 3000, seed=8)
    assert np.array_equal(a.x, b.x)


def test_simulation_errors():
    with pytest.raises(DomainError):
        simulate_endpoints(SL, [1.0], 0.5, 0.4, 999, seed=0)
    with pytest.raises(DomainError):
        simulate_endpoints(SL, [1.0], 0.5, 1.2, 1000, seed=0)
    quad = VectorFieldSystem("quadratic", 1, 1, lambda x: (x * x).reshape(1, 1))
    with pytest.raises(FlowBlowUp):
        simulate_endpoints(quad, [1.0], 0.5, 1.0, 2000, seed=0)


def test_importance_weights_have_unit_mean():
    spec = GridSpec(16, 0.5)
    shift = StepCoeffs(spec, np.full(16, 0.8))
    s = simulate_endpoints(SL, [1.0], 0.5, 0.5, 100_000, seed=2, shift=shift)
    w = s.weights
    assert abs(w.mean() - 1) < 4 * w.std() / np.sqrt(w.size)
    # the shifted law moves the endpoints to exp(h(1)) = exp(0.8)
    assert np.median(s.x) == pytest.approx(np.exp(0.8), rel=0.05)


def test_kde_standard_normal():
    x = np.random.default_rng(0).standard_normal(1_000_000)
    k = kde(x, [0.0])
    assert abs(k.p_hat - normal_pdf(0.0)) < 0.005
    assert not k.tail_unreliable and not k.degenerate


@pytest.mark.parametrize("eps", [0.5, 0.3])
def test_kde_lognormal(eps):
    s = simulate_endpoints(SL, [1.0], 0.7, eps, 200_000, seed=1)
    k = kde(s.x, [1.0], scale=eps)
    assert abs(k.p_hat - lognormal_pdf(1.0, eps)) < 3 * k.stderr


def test_kde_degenerate_samples():
    x = np.full((2000, 1), 0.5)
    k = kde(x, [0.5], bandwidth=0.1)
    assert k.degenerate
    assert k.p_hat == pytest.approx(1 / (0.1 * math.sqrt(2 * math.pi)))
    with pytest.raises(DomainError):
        kde(x, [0.5])
    # singular in one coordinate only
    pts = np.column_stack([np.linspace(-1, 1, 2000), np.zeros(2000)])
    k = kde(pts, [0.0, 1.0])
    assert k.degenerate and k.p_hat == 0.0 and k.tail_unreliable
    with pytest.raises(DomainError):
        kde(pts, [0.0, 0.0])


def test_kde_errors_and_tail_flag():
    x = np.random.default_rng(1).standard_normal(2000)
    with pytest.raises(DomainError):
        kde(x[:500], [0.0])
    with pytest.raises(DomainError):
        kde(x, [0.0], bandwidth="scott")
    with pytest.raises(DomainError):
        kde(x, [0.0], bandwidth=-1.0)
    assert kde(x, [6.0]).tail_unreliable


def test_silverman_rule():
    x = np.random.default_rng(2).standard_normal((10_000, 2))
    b = silverman(x)
    assert np.allclose(b, x.std(axis=0, ddof=1) * (4 / (4 * 10_000)) ** (1 / 6))
    b1 = silverman(x[:, 0])
    assert b1[0] == pytest.approx(0.9 * min(x[:, 0].std(ddof=1), np.subtract(*np.percentile(x[:, 0], [75, 25])) / 1.34) * 10_000 ** -0.2)


def test_bootstrap_ci_shrinks_with_n():
    widths = []
    for N in (20_000, 80_000):
        x = np.random.default_rng(N).standard_normal(N)
        k = kde(x, [0.0], bandwidth=0.2)
        lo, hi = bootstrap_ci(k.batch_means)
        assert lo <= k.p_hat <= hi
        widths.append(hi - lo)
    assert 1.4 < widths[0] / widths[1] < 2.8


@settings(max_examples=20)
@given(st.floats(-2, 0), st.floats(-3, 3), st.floats(-3, 3))
def test_fit_limit_recovers_model(v0, c1, c2):
    eps = np.array([0.5, 0.4, 0.3, 0.25, 0.2])
    v = v0 + c1 * eps**2 * np.log(1 / eps) + c2 * eps**2
    got, se, coef = fit_limit(eps, v, np.full(5, 0.01))
    assert got == pytest.approx(v0, abs=1e-9)
    assert coef[1] == pytest.approx(c1, abs=1e-7)


def test_fit_limit_small_grids():
    assert fit_limit([0.5], [1.0]) == (None, None, None)
    v0, _, coef = fit_limit([0.5, 0.25], [-1 + 0.25 * math.log(2), -1 + 0.0625 * math.log(4)])
    assert v0 == pytest.approx(-1.0) and len(coef) == 2


def test_gaussian_pipeline_consistency():
    v = np.array([1.0, 0.0])
    rep = varadhan_report(EI, [0.0, 0.0], 0.5, v, [0.5, 0.35, 0.25], N=200_000, seed=0,
                          rate_opts={"restarts": 1, "grids": (8,)})
    for row in rep.rows:
        want = gaussian_v(1.0, 2, row["eps"])
        lo, hi = row["v_ci"]
        assert abs(row["v_hat"] - want) <= 3 * (hi - lo) / 2
    assert rep.d2 == pytest.approx(0.5, abs=1e-6)


def test_single_eps_no_limit(tmp_path):
    rep = varadhan_report(SL, [1.0], 0.5, [2.0], [0.5], N=5000, seed=0, rate_opts={"restarts": 1, "grids": (8,)})
    assert "no-limit" in rep.flags and rep.v0 is None and len(rep.rows) == 1
    assert not rep.passed
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["eps", "p_hat", "stderr", "v_hat"]
    rep.write_plot_data(tmp_path / "r.dat")
    assert len(open(tmp_path / "r.dat").read().split()) == 2


def test_report_grid_validation():
    with pytest.raises(DomainError):
        varadhan_report(SL, [1.0], 0.5, [2.0], [0.3, 0.5], N=5000)
    with pytest.raises(DomainError):
        varadhan_report(SL, [1.0], 0.5, [2.0], [1.5, 0.5], N=5000)


def test_unreachable_target_report():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = varadhan_report(degenerate_line(), [0.0, 0.0], 0.5, [0.5, 1.0], [0.5, 0.4], N=5000,
                              rate_opts={"restarts": 1, "grids": (8,)})
    assert "unreachable" in rep.flags
    assert "density decays faster than any exp(-c/eps^2) scale tested" in rep.flags
    assert rep.v0 is None and not rep.passed
    d = rep.to_dict()
    assert d["d2"] is None
