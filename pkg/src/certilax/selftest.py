"""Built-in invariant suites behind ``certilax selftest``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import relaxation as rx
from .attack import AttackSpec, PgdConfig, pgd_upper_bound
from .model import forward, interval_bounds, margin_objective, random_network
from .oracle import exact_margin
from .solver import solve
from .staircase import StaircaseConfig, certify_class, escape


@dataclass
class SuiteResult:
    name: str
    ok: int
    total: int

    @property
    def passed(self) -> bool:
        return self.total > 0 and self.ok == self.total


def _instance(seed: int, rho: float, norm: str):
    rng = np.random.default_rng(seed)
    dims = [int(rng.integers(2, 4)), 4, 4, 3]
    net = random_network(dims, 1000 + seed)
    x = rng.uniform(0.0, 1.0, dims[0])
    c = int(np.argmax(forward(net, x)[1]))
    return net, AttackSpec(x, c, (c + 1) % 3, rho, norm)


def _random_point(prob: rx.BmProblem, rng) -> rx.BmPoint:
    return prob.unflatten(rng.normal(0.0, 0.7, prob.num_vars))


def _problems(seeds: int):
    for seed in range(seeds):
        for norm in ("l2", "linf"):
            for variant in rx.VARIANTS:
                net, spec = _instance(seed, 0.1, norm)
                yield seed, rx.build(net, spec, bounds=interval_bounds(net, spec), variant=variant, r=3)


def suite_gradients(seeds: int) -> SuiteResult:
    ok = total = 0
    h = 1e-5
    for seed, prob in _problems(seeds):
        rng = np.random.default_rng(seed)
        x = _random_point(prob, rng).flatten()
        gf, Jg, Jh = prob.jacobians_flat(x)
        J = np.vstack([gf[None, :], Jg, Jh])
        fd = np.empty_like(J)
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = h
            fp, gp, hp = prob.evaluate_flat(x + e)
            fm, gm, hm = prob.evaluate_flat(x - e)
            fd[:, i] = np.concatenate([[fp - fm], gp - gm, hp - hm]) / (2 * h)
        rel = np.linalg.norm(J - fd) / max(1.0, np.linalg.norm(J))
        total += 1
        ok += rel <= 1e-6
    return SuiteResult("gradient_check", ok, total)


def suite_lagrangian(seeds: int, samples: int = 20) -> SuiteResult:
    ok = total = 0
    for seed, prob in _problems(seeds):
        rng = np.random.default_rng(seed + 77)
        for _ in range(samples):
            point = _random_point(prob, rng)
            mult = prob.random_multipliers(rng)
            lhs = rx.lagrangian_value(prob, point, mult)
            rhs = rx.slack_lagrangian(prob, point, mult, z0=float(rng.normal()))
            total += 1
            ok += abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))
    return SuiteResult("lagrangian_identity", ok, total)


def suite_sandwich(seeds: int) -> tuple[SuiteResult, SuiteResult, SuiteResult]:
    ok = total = 0
    kkt_ok = kkt_total = 0
    det_ok = det_total = 0
    cfg = StaircaseConfig(r_max=4)
    for seed in range(seeds):
        for rho, norm in ((0.05, "l2"), (0.15, "linf")):
            net, spec = _instance(seed, rho, norm)
            mobj = margin_objective(net, spec.true_class, spec.target_class)
            exact, _ = exact_margin(net, spec, mobj)
            cert = certify_class(net, spec, cfg, "full")
            total += 1
            ok += cert.phi_lb - 1e-6 <= exact <= cert.phi_ub + 1e-6
            if seed < 2:
                again = certify_class(net, spec, cfg, "full")
                det_total += 1
                det_ok += again.phi_lb == cert.phi_lb and again.phi_ub == cert.phi_ub and again.r_final == cert.r_final
            # slack invariant at the converged point of a plain solve
            prob = rx.build(net, spec, mobj, interval_bounds(net, spec), "full", 2)
            acts, _ = forward(net, cert.x_adv)
            pt, m, rep = solve(prob, rx.initialize(prob, acts), prob.zero_multipliers())
            if rep.converged:
                S = rx.assemble_slack(prob, pt, rx.sanitize_multipliers(m)).S
                kkt_total += 1
                kkt_ok += rx.slack_residual(prob, pt, S) <= 1e-4 * (1 + np.linalg.norm(S))
    return (
        SuiteResult("sandwich_vs_oracle", ok, total),
        SuiteResult("kkt_slack_invariant", kkt_ok, kkt_total),
        SuiteResult("determinism", det_ok, det_total),
    )


def suite_pgd(seeds: int) -> SuiteResult:
    ok = total = 0
    for seed in range(seeds):
        for norm in ("l2", "linf"):
            net, spec = _instance(seed, 0.3, norm)
            mobj = margin_objective(net, spec.true_class, spec.target_class)
            res = pgd_upper_bound(net, spec, mobj, PgdConfig(iterations=50, restarts=2, seed=seed))
            hist = np.asarray(res.history)
            total += 1
            ok += bool(np.all(np.diff(hist) <= 0)) and spec.contains(res.x_adv, 1e-12)
    return SuiteResult("pgd_contract", ok, total)


def suite_bounds(seeds: int) -> SuiteResult:
    ok = total = 0
    for seed in range(seeds):
        for norm in ("l2", "linf"):
            net, spec = _instance(seed, 0.2, norm)
            b = interval_bounds(net, spec)
            rng = np.random.default_rng(seed)
            lo, hi = spec.input_box()
            xs = rng.uniform(lo, hi, size=(500, lo.size))
            good = True
            for x in xs:
                if not spec.contains(x):
                    continue
                acts, _ = forward(net, x)
                for k, (W, bias) in enumerate(net.hidden_layers):
                    pre = W @ acts[k] + bias
                    good &= bool(np.all(pre >= b.lbs[k] - 1e-12) and np.all(pre <= b.ubs[k] + 1e-12))
            total += 1
            ok += good
    return SuiteResult("interval_soundness", ok, total)


def suite_escape(seeds: int) -> SuiteResult:
    ok = total = 0
    for seed, prob in _problems(seeds):
        rng = np.random.default_rng(seed)
        pt = _random_point(prob, rng)
        rep = rx.SlackReport(S=np.eye(prob.n + 1), z0=0.0, lambda_min=-1.0, xi=rng.normal(size=prob.n + 1))
        lifted = escape(pt, rep, 0.0)
        wider = prob.with_rank(prob.rank + 1)
        total += 1
        ok += lifted.rank == pt.rank + 1 and wider.evaluate(lifted)[0] == prob.evaluate(pt)[0]
    return SuiteResult("escape_lift", ok, total)


def run_selftest(seeds: int = 10) -> list[SuiteResult]:
    small = max(1, min(seeds, 3))
    sandwich, kkt, det = suite_sandwich(seeds)
    return [
        suite_gradients(small),
        suite_lagrangian(small),
        sandwich,
        kkt,
        det,
        suite_pgd(seeds),
        suite_bounds(small),
        suite_escape(small),
    ]
