import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _ref import central_jacobian, spec_for, x_form_constraints, x_form_lagrangian
from certilax import AttackSpec, ConfigurationError, MlpNetwork, PreconditionError
from certilax import relaxation as rx
from certilax.model import forward, interval_bounds, margin_at, margin_objective, random_network
from certilax.oracle import exact_margin
from certilax.solver import solve

CASES = [(v, q) for v in rx.VARIANTS for q in ("l2", "linf")]


def _problem(seed, rho=0.1, norm="l2", variant="plain", r=3):
    net, spec = spec_for(seed, rho, norm)
    return rx.build(net, spec, bounds=interval_bounds(net, spec), variant=variant, r=r)


def _trace_point(prob, x):
    acts, _ = forward(prob.net, x)
    return rx.BmPoint([a.copy() for a in acts], [np.zeros((d, prob.rank - 1)) for d in prob.dims])


def _rel(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))


def test_plain_l2_constraint_counts():
    net = random_network([2, 3, 2], 0)
    spec = AttackSpec(np.array([0.4, 0.6]), 0, 1, 0.1)
    prob = rx.build(net, spec, variant="plain", r=2)
    kinds = [b.kind for b in prob.g_blocks]
    assert kinds == ["ball", "box_lo", "box_hi", "sign", "relu", "trace"]
    assert prob.num_ineq == 1 + 2 * 2 + 2 * 3 + 1
    assert prob.num_eq == 3


def test_full_variant_swaps_sign_for_bounds():
    net = random_network([2, 3, 2], 0)
    spec = AttackSpec(np.array([0.4, 0.6]), 0, 1, 0.1)
    b = interval_bounds(net, spec)
    prob = rx.build(net, spec, bounds=b, variant="full", r=2)
    kinds = [blk.kind for blk in prob.g_blocks]
    assert "sign" not in kinds
    elem = [blk for blk in prob.g_blocks if blk.kind == "elem"]
    assert len(elem) == 1 and elem[0].layer == 1
    assert np.array_equal(elem[0].radius, b.radii[0])


def test_linf_replaces_ball_with_elementwise_input():
    net, spec = spec_for(1, 0.1, "linf")
    prob = rx.build(net, spec, bounds=interval_bounds(net, spec), variant="plain")
    first = prob.g_blocks[0]
    assert first.kind == "elem" and first.layer == 0 and first.size == spec.x_hat.size
    assert prob.zero_multipliers().y0.shape == (spec.x_hat.size,)


def test_build_errors():
    net, spec = spec_for(0, 0.1, "l2")
    with pytest.raises(ConfigurationError):
        rx.build(net, spec, variant="full")
    with pytest.raises(ConfigurationError):
        rx.build(net, AttackSpec(spec.x_hat, spec.true_class, spec.target_class, 0.1, "linf"))
    with pytest.raises(ConfigurationError):
        rx.build(net, spec, r=1)
    with pytest.raises(ConfigurationError):
        rx.build(net, spec, variant="dense")


@pytest.mark.parametrize("variant, norm", CASES)
def test_rank_one_trace_is_feasible(variant, norm):
    for seed in range(10):
        prob = _problem(seed, 0.2, norm, variant, r=2)
        rng = np.random.default_rng(seed)
        lo, hi = prob.spec.input_box()
        x = np.clip(prob.spec.x_hat + 0.05 * rng.uniform(-1, 1, lo.size), lo, hi)
        if not prob.spec.contains(x):
            x = prob.spec.x_hat
        f, g, h = prob.evaluate(_trace_point(prob, x))
        assert np.max(np.abs(h)) <= 1e-12
        assert np.all(g <= 1e-12)
        assert f + prob.mobj.w_0 == pytest.approx(margin_at(prob.net, prob.mobj, x), abs=1e-12)


def test_zero_radius_ball_is_active():
    prob = _problem(4, 0.0, "l2", "plain", r=2)
    _, g, _ = prob.evaluate(_trace_point(prob, prob.spec.x_hat))
    assert g[0] == 0.0


@pytest.mark.parametrize("variant, norm", CASES)
def test_constraints_match_matrix_form(variant, norm):
    rng = np.random.default_rng(5)
    for seed in range(10):
        prob = _problem(seed, 0.15, norm, variant, r=3)
        point = prob.unflatten(rng.normal(0, 0.8, prob.num_vars))
        f, g, h = prob.evaluate(point)
        rf, rg, rh = x_form_constraints(prob, point.factor())
        scale = 1.0 + np.max(np.abs(np.concatenate([rg, rh])))
        assert abs(f - rf) <= 1e-12 * scale
        assert np.max(np.abs(g - rg)) <= 1e-12 * scale
        assert np.max(np.abs(h - rh)) <= 1e-12 * scale


def test_objective_gradient_blocks():
    prob = _problem(2, 0.1, "l2", "plain", r=3)
    point = prob.unflatten(np.random.default_rng(0).normal(size=prob.num_vars))
    gf, Jg, _ = rx.gradients(prob, point)
    grad = prob.unflatten(gf)
    assert np.array_equal(grad.u[-1], prob.mobj.w_ell)
    assert all(not np.any(a) for a in grad.u[:-1])
    assert all(not np.any(v) for v in grad.V)
    at_center = prob.unflatten(point.flatten())
    at_center.u[0] = prob.spec.x_hat.copy()
    at_center.V[0][:] = 0.0
    _, Jg, _ = rx.gradients(prob, at_center)
    assert not np.any(Jg[0])


@pytest.mark.parametrize("variant, norm", CASES)
def test_jacobians_match_central_differences(variant, norm):
    rng = np.random.default_rng(11)
    for trial in range(50):
        prob = _problem(trial % 7, 0.1, norm, variant, r=2 + trial % 3)
        x = rng.normal(0, 0.7, prob.num_vars)
        gf, Jg, Jh = prob.jacobians_flat(x)
        J = np.vstack([gf[None, :], Jg, Jh])
        fd = central_jacobian(prob.evaluate_flat, x)
        assert np.max(np.abs(J - fd) / np.maximum(1.0, np.abs(J))) <= 1e-6


@pytest.mark.parametrize("variant, norm", CASES)
def test_lagrangian_hessian_matches_gradient_differences(variant, norm):
    prob = _problem(3, 0.1, norm, variant, r=3)
    rng = np.random.default_rng(0)
    x = rng.normal(size=prob.num_vars)
    y, z = prob.pack(prob.random_multipliers(rng))
    H = prob.lagrangian_hessian_flat(x, y, z)
    step = 1e-6
    fd = np.empty_like(H)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        fd[:, i] = (prob.lagrangian_grad_flat(x + e, y, z) - prob.lagrangian_grad_flat(x - e, y, z)) / (2 * step)
    assert np.allclose(H, H.T, atol=1e-12)
    assert np.max(np.abs(H - fd)) <= 1e-6 * max(1.0, np.max(np.abs(H)))


def test_initialize_is_seeded_and_small():
    for seed in range(100):
        prob = _problem(seed % 10, 0.1, "l2", "plain", r=3)
        acts, _ = forward(prob.net, prob.spec.x_hat)
        a = rx.initialize(prob, acts, seed)
        b = rx.initialize(prob, acts, seed)
        assert np.array_equal(a.flatten(), b.flatten())
        vmax = max(np.max(np.abs(v)) for v in a.V)
        assert vmax <= 1e-3
        _, _, h = prob.evaluate(a)
        wmax = max(np.max(np.sum(np.abs(W), axis=1)) for W, _ in prob.net.hidden_layers)
        assert np.max(np.abs(h)) <= 2e-3 * (1 + wmax * vmax)


def test_npcq_examples():
    net = MlpNetwork((np.array([[1.0, 0.5], [0.2, 1.0]]), np.eye(2)), (np.array([1.0, 2.0]), np.zeros(2)))
    spec = AttackSpec(np.array([0.5, 0.5]), 0, 1, 0.1)
    prob = rx.build(net, spec, r=3)
    rng = np.random.default_rng(0)
    good = rx.initialize(prob, forward(net, spec.x_hat)[0], 0, delta=0.5)
    assert rx.npcq_check(prob, good).ok
    net0 = MlpNetwork(net.weights, (np.zeros(2), np.zeros(2)))
    prob0 = rx.build(net0, spec, r=3)
    zero = rx.BmPoint([np.zeros(2), np.zeros(2)], [rng.normal(size=(2, 2)) for _ in range(2)])
    rep = rx.npcq_check(prob0, zero)
    assert not rep.ok and rep.worst_preact == 0.0
    assert sorted(rep.offending) == [(0, 0), (0, 1)]


def test_zero_multiplier_slack_example():
    prob = _problem(6, 0.1, "l2", "plain", r=2)
    point = rx.BmPoint([np.zeros(d) for d in prob.dims], [np.zeros((d, 1)) for d in prob.dims])
    rep = rx.assemble_slack(prob, point, prob.zero_multipliers())
    w = prob.mobj.w_ell
    expected = np.zeros((prob.n + 1, prob.n + 1))
    expected[0, -w.size :] = expected[-w.size :, 0] = 0.5 * w
    assert np.array_equal(rep.S, expected)
    assert rep.z0 == 0.0
    assert rep.lambda_min == pytest.approx(-0.5 * np.linalg.norm(w), abs=1e-12)
    lb = rx.dual_lower_bound(rep, prob.R, 0.0)
    assert lb == pytest.approx(-0.5 * prob.R**2 * np.linalg.norm(w), rel=1e-8)


def test_dual_bound_nonnegative_eigenvalue():
    rep = rx.SlackReport(S=np.eye(2), z0=0.7, lambda_min=1.0, xi=np.array([1.0, 0.0]))
    assert rx.dual_lower_bound(rep, 3.0, 0.25) == 0.95


@pytest.mark.parametrize("variant, norm", CASES)
def test_lagrangian_identity(variant, norm):
    rng = np.random.default_rng(17)
    samples = 250
    for i in range(samples):
        prob = _problem(i % 5, 0.1 + 0.1 * (i % 3), norm, variant, r=2 + i % 3)
        point = prob.unflatten(rng.normal(0, 0.7, prob.num_vars))
        mult = prob.random_multipliers(rng)
        y, z = prob.pack(mult)
        ref = x_form_lagrangian(prob, point.factor(), y, z)
        assert _rel(rx.lagrangian_value(prob, point, mult), ref) <= 1e-10
        assert _rel(rx.slack_lagrangian(prob, point, mult, float(rng.normal())), ref) <= 1e-10
        rep = rx.assemble_slack(prob, point, mult)
        U = point.factor()
        via_report = rep.z0 + mult.mu * prob.R**2 + np.sum((rep.S - mult.mu * np.eye(prob.n + 1)) * (U @ U.T))
        assert _rel(via_report, ref) <= 1e-10


@pytest.mark.parametrize("variant, norm", CASES)
def test_slack_report_invariants(variant, norm):
    rng = np.random.default_rng(2)
    for seed in range(10):
        prob = _problem(seed, 0.1, norm, variant)
        point = prob.unflatten(rng.normal(size=prob.num_vars))
        rep = rx.assemble_slack(prob, point, prob.random_multipliers(rng))
        S, xi = rep.S, rep.xi
        assert S.shape == (prob.n + 1, prob.n + 1)
        assert np.max(np.abs(S - S.T)) <= 1e-12
        assert abs(np.linalg.norm(xi) - 1) <= 1e-12
        assert abs(xi @ S @ xi - rep.lambda_min) <= 1e-8
        assert np.linalg.norm(S @ xi - rep.lambda_min * xi) <= 1e-7 * np.linalg.norm(S)
        assert rep.eps_feas >= 0.0
        # the row-0 condition of S U = 0 fixes z0
        assert (S @ point.factor())[0, 0] == pytest.approx(0.0, abs=1e-10 * (1 + np.linalg.norm(S)))
        again = rx.slack_with_z0(prob, rep.multipliers, rep.z0)
        assert np.allclose(again.S, S, atol=1e-12)


def test_assemble_rejects_unsanitized():
    prob = _problem(0)
    point = prob.unflatten(np.zeros(prob.num_vars))
    mult = prob.zero_multipliers()
    mult.y0 = np.array([-0.3])
    with pytest.raises(PreconditionError):
        rx.assemble_slack(prob, point, mult)
    mult = prob.zero_multipliers()
    mult.mu = 0.5
    with pytest.raises(PreconditionError):
        rx.assemble_slack(prob, point, mult)


def test_sanitize_examples():
    prob = _problem(0, variant="full")
    m = prob.random_multipliers(np.random.default_rng(0))
    same = rx.sanitize_multipliers(m)
    for a, b in zip(m.inequality_arrays(), same.inequality_arrays()):
        assert np.array_equal(a, b)
    m.y0 = np.array([-0.3])
    m.yk2[0][0] = -1.0
    m.zk[0][0] = -2.0
    m.mu = 0.4
    out = rx.sanitize_multipliers(m)
    assert out.y0[0] == 0.0 and out.yk2[0][0] == 0.0
    assert out.zk[0][0] == -2.0
    assert out.mu == 0.0


def test_variant_consistency_at_rank_one():
    # at V = 0 the full bound rows imply the plain sign rows
    rng = np.random.default_rng(8)
    for seed in range(20):
        full = _problem(seed, 0.2, "l2", "full", r=2)
        plain = rx.build(full.net, full.spec, bounds=full.bounds, variant="plain", r=2)
        u = [full.spec.x_hat.copy()]
        for c, r in zip(full.bounds.centers, full.bounds.radii):
            u.append(c + r * rng.uniform(-1, 1, c.size))
        point = rx.BmPoint(u, [np.zeros((d, 1)) for d in full.dims])
        _, gf, _ = full.evaluate(point)
        _, gp, _ = plain.evaluate(point)
        rows = np.cumsum([0] + [b.size for b in full.g_blocks])
        for i, b in enumerate(full.g_blocks):
            if b.kind == "elem" and b.layer > 0:
                assert np.all(gf[rows[i] : rows[i + 1]] <= 1e-12)
        prow = np.cumsum([0] + [b.size for b in plain.g_blocks])
        for i, b in enumerate(plain.g_blocks):
            if b.kind == "sign":
                assert np.all(gp[prow[i] : prow[i + 1]] <= 1e-12)


def _solved(seed, rho, norm, variant):
    prob = _problem(seed, rho, norm, variant, r=2)
    mobj = prob.mobj
    net, spec = prob.net, prob.spec
    acts, _ = forward(net, spec.x_hat)
    point, mult, rep = solve(prob, rx.initialize(prob, acts, seed), prob.zero_multipliers())
    exact, _ = exact_margin(net, spec, mobj)
    return prob, point, mult, rep, exact


@pytest.mark.parametrize("variant, norm", CASES)
def test_auto_radius_strictly_interior_after_solve(variant, norm):
    for seed in range(5):
        prob, point, _, _, _ = _solved(seed, 0.2, norm, variant)
        assert point.trace() < prob.R**2


@pytest.mark.parametrize("variant, norm", CASES)
def test_random_multiplier_bounds_are_sound(variant, norm):
    rng = np.random.default_rng(23)
    for trial in range(125):
        seed = trial % 25
        prob = _problem(seed, 0.15, norm, variant, r=2)
        exact, _ = exact_margin(prob.net, prob.spec, prob.mobj)
        mult = prob.random_multipliers(rng, scale=float(rng.choice([0.01, 0.3, 3.0])))
        point = prob.unflatten(rng.normal(size=prob.num_vars))
        rep = rx.assemble_slack(prob, point, mult)
        assert rx.dual_lower_bound(rep, prob.R, prob.mobj.w_0) <= exact + 1e-9


@pytest.mark.parametrize("variant, norm", CASES)
def test_perturbed_solution_bounds_are_sound(variant, norm):
    rng = np.random.default_rng(29)
    for seed in range(5):
        prob, point, mult, _, exact = _solved(seed, 0.15, norm, variant)
        y, z = prob.pack(mult)
        for _ in range(20):
            yp = y + rng.normal(0, 0.05, y.size) * (1 + np.abs(y))
            zp = z + rng.normal(0, 0.05, z.size) * (1 + np.abs(z))
            m = rx.sanitize_multipliers(prob.unpack(yp, zp))
            rep = rx.assemble_slack(prob, point, m)
            assert rx.dual_lower_bound(rep, prob.R, prob.mobj.w_0) <= exact + 1e-9
            lb, _ = rx.tighten_bound(prob, point, m, prob.mobj.w_0)
            assert lb <= exact + 1e-9


@pytest.mark.parametrize("variant, norm", CASES)
@pytest.mark.parametrize("rho", [0.0, 0.1])
def test_tightened_bound_is_sound_and_no_worse(variant, norm, rho):
    for seed in range(6):
        prob, point, mult, _, exact = _solved(seed, rho, norm, variant)
        m = rx.sanitize_multipliers(mult)
        plain_lb = rx.dual_lower_bound(rx.assemble_slack(prob, point, m), prob.R, prob.mobj.w_0)
        lb, rep = rx.tighten_bound(prob, point, m, prob.mobj.w_0)
        assert lb >= plain_lb - 1e-12
        assert lb <= exact + 1e-9
        # the stored certificate re-checks from multipliers and z0 alone
        again = rx.slack_with_z0(prob, rep.multipliers, rep.z0, rep.T)
        assert rx.dual_lower_bound(again, prob.R, prob.mobj.w_0) == pytest.approx(lb, abs=1e-10)


def test_zero_radius_reduction_is_exact():
    for seed in range(10):
        prob, point, mult, _, exact = _solved(seed, 0.0, "l2", "full")
        lb, _ = rx.tighten_bound(prob, point, rx.sanitize_multipliers(mult), prob.mobj.w_0)
        assert lb == pytest.approx(exact, abs=1e-6)
        assert lb <= exact + 1e-9


def test_reduction_basis_reproduces_pinned_factor():
    prob, point, _, _, _ = _solved(1, 0.0, "linf", "plain")
    T = rx.reduction_basis(prob)
    assert T is not None
    fixed, vals, _ = prob.pinned()
    units = fixed[fixed < prob.n]
    keep = np.setdiff1d(np.arange(prob.n + 1), units + 1)
    flat = point.flatten()
    flat[fixed] = vals
    U = prob.unflatten(flat).factor()
    assert np.allclose(T @ U[keep], U, atol=1e-15)
    assert rx.reduction_basis(_problem(1, 0.1, "l2", "plain")) is None


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 500), z0=st.floats(-5, 5), scale=st.floats(0.01, 3.0))
def test_slack_with_z0_shifts_only_corner(seed, z0, scale):
    prob = _problem(seed % 20, 0.1, "linf", "full")
    m = prob.random_multipliers(np.random.default_rng(seed), scale)
    a = rx.slack_with_z0(prob, m, 0.0).S
    b = rx.slack_with_z0(prob, m, z0).S
    d = a - b
    assert d[0, 0] == pytest.approx(z0, abs=1e-12)
    d[0, 0] = 0.0
    assert not np.any(d)
