import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certilax import AttackSpec, ConfigurationError, NumericalFailure
from certilax import relaxation as rx
from certilax.model import forward, interval_bounds, margin_at, random_network
from certilax.solver import FunctionNlp, SolveConfig, kkt_residuals, solve, solve_nlp


def _nonneg_projection(a, newton):
    a = np.asarray(a, dtype=float)
    kw = {}
    if newton:
        kw = dict(
            jac=lambda x: (2 * (x - a), -np.eye(a.size), np.zeros((0, a.size))),
            hess=lambda x, y, z: 2 * np.eye(a.size),
        )
    return FunctionNlp(
        a.size,
        lambda x: (float((x - a) @ (x - a)), -x, np.zeros(0)),
        lambda x, y, z: 2 * (x - a) - y,
        **kw,
    )


@pytest.mark.parametrize("newton", [False, True])
@settings(max_examples=25, deadline=None)
@given(a=st.lists(st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3), min_size=1, max_size=6))
def test_nonnegative_projection_closed_form(newton, a):
    a = np.array(a)
    sol = solve_nlp(_nonneg_projection(a, newton), np.ones_like(a))
    assert sol.report.converged
    assert np.max(np.abs(sol.x - np.maximum(a, 0))) <= 1e-7
    assert np.max(np.abs(sol.y - np.maximum(-2 * a, 0))) <= 1e-7


def test_equality_closed_form():
    nlp = FunctionNlp(1, lambda x: (float(x[0] ** 2), np.zeros(0), x - 1.0), lambda x, y, z: 2 * x + z)
    sol = solve_nlp(nlp, np.array([5.0]))
    assert sol.report.converged
    assert sol.x[0] == pytest.approx(1.0, abs=1e-7)
    assert sol.z[0] == pytest.approx(-2.0, abs=1e-7)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SolveConfig(kkt_tol=0)
    with pytest.raises(ConfigurationError):
        SolveConfig(penalty_growth=1.0)
    with pytest.raises(ConfigurationError):
        SolveConfig(max_outer=0)


def test_non_finite_values_raise():
    nlp = FunctionNlp(1, lambda x: (float("nan"), -x, np.zeros(0)), lambda x, y, z: np.array([np.nan]))
    with pytest.raises(NumericalFailure):
        solve_nlp(nlp, np.array([1.0]))


def test_budget_exhaustion_returns_iterate():
    # infeasible: x <= -1 and x >= 1
    nlp = FunctionNlp(
        1,
        lambda x: (float(x[0] ** 2), np.array([x[0] + 1.0, 1.0 - x[0]]), np.zeros(0)),
        lambda x, y, z: 2 * x + y[0] - y[1],
    )
    sol = solve_nlp(nlp, np.array([0.3]), cfg=SolveConfig(max_outer=5))
    assert not sol.report.converged
    assert np.all(sol.y >= 0) and np.all(np.isfinite(sol.x))


def _tiny(seed, rho, r=3, norm="l2", variant="plain"):
    rng = np.random.default_rng(seed)
    net = random_network([2, 3, 2], seed)
    x = rng.uniform(0, 1, 2)
    c = int(np.argmax(forward(net, x)[1]))
    spec = AttackSpec(x, c, 1 - c, rho, norm)
    prob = rx.build(net, spec, bounds=interval_bounds(net, spec), variant=variant, r=r)
    return prob, rx.initialize(prob, forward(net, x)[0], seed, delta=0.05)


def test_tiny_instance_tight_at_zero_radius():
    for seed in range(10):
        prob, init = _tiny(seed, 0.0)
        point, mult, rep = solve(prob, init, prob.zero_multipliers())
        assert rep.converged
        f = prob.evaluate(point)[0] + prob.mobj.w_0
        assert f == pytest.approx(margin_at(prob.net, prob.mobj, prob.spec.x_hat), abs=1e-5)


@pytest.mark.parametrize("variant, norm", [(v, q) for v in rx.VARIANTS for q in ("l2", "linf")])
def test_multiplier_sign_and_feasibility_progress(variant, norm):
    for seed in range(5):
        prob, init = _tiny(seed, 0.2, norm=norm, variant=variant)
        point, mult, rep = solve(prob, init, prob.zero_multipliers())
        y, _ = prob.pack(mult)
        assert np.all(y >= 0)
        hist = rep.history
        assert all(h["min_y"] >= 0 for h in hist)
        for prev, cur in zip(hist, hist[1:]):
            assert cur["violation"] <= prev["violation"] or prev["penalty_raised"] or cur["penalty_raised"]


def test_kkt_report_recomputable():
    for seed in range(5):
        prob, init = _tiny(seed, 0.2)
        point, mult, rep = solve(prob, init, prob.zero_multipliers())
        y, z = prob.pack(mult)
        again = kkt_residuals(prob, point.flatten(), y, z)
        assert abs(again.stationarity - rep.stationarity) <= 1e-12 * (1 + rep.stationarity)
        assert abs(again.primal_feas - rep.primal_feas) <= 1e-12
        assert abs(again.complementarity - rep.complementarity) <= 1e-12
        assert min(again.stationarity, again.primal_feas, again.complementarity) >= 0


def test_deterministic_output():
    prob, init = _tiny(3, 0.15, variant="full")
    a = solve(prob, init, prob.zero_multipliers())
    b = solve(prob, init, prob.zero_multipliers())
    assert np.array_equal(a[0].flatten(), b[0].flatten())
    ya, za = prob.pack(a[1])
    yb, zb = prob.pack(b[1])
    assert np.array_equal(ya, yb) and np.array_equal(za, zb)


@pytest.mark.parametrize("inner", ["lbfgs", "newton"])
def test_inner_solvers_agree(inner):
    prob, init = _tiny(1, 0.1, variant="full")
    point, _, rep = solve(prob, init, prob.zero_multipliers(), SolveConfig(inner=inner, max_outer=100))
    ref_point, _, ref = solve(prob, init, prob.zero_multipliers())
    assert rep.converged and ref.converged
    assert prob.evaluate(point)[0] == pytest.approx(prob.evaluate(ref_point)[0], abs=1e-5)


def test_log_file_has_one_line_per_outer_iteration(tmp_path):
    path = tmp_path / "solve.log"
    prob, init = _tiny(2, 0.1)
    _, _, rep = solve(prob, init, prob.zero_multipliers(), SolveConfig(log_path=str(path)))
    lines = path.read_text().splitlines()
    assert len(lines) == rep.outer_iterations
    assert all(line.startswith("outer=") for line in lines)


def test_zero_radius_rows_get_zero_multipliers():
    prob, init = _tiny(0, 0.0)
    _, mult, _ = solve(prob, init, prob.zero_multipliers())
    assert mult.y0[0] == 0.0
