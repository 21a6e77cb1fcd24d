"""Exact margins on tiny networks by activation-pattern enumeration.

Within one activation pattern the network is affine in the input, so the
margin is a linear function over a polyhedron intersected with the input
region. Linf regions give linear programs (solved with HiGHS through
scipy); l2 regions add one ball and are solved with the augmented
Lagrangian solver, which is globally optimal on these convex problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .attack import AttackSpec, feasible_project
from .exceptions import ConfigurationError, SizeError
from .model import MarginObjective, MlpNetwork, interval_bounds, margin_at
from .solver import FunctionNlp, SolveConfig, solve_nlp

HARD_CAP = 24


@dataclass(frozen=True)
class OracleConfig:
    max_hidden_neurons: int = 16
    per_pattern_tol: float = 1e-9
    grid_resolution: int = 400

    def __post_init__(self):
        if not 1 <= self.max_hidden_neurons <= HARD_CAP:
            raise ConfigurationError(f"max_hidden_neurons must lie in [1, {HARD_CAP}]")
        if not self.per_pattern_tol > 0:
            raise ConfigurationError("per_pattern_tol must be positive")
        if self.grid_resolution < 1:
            raise ConfigurationError("grid_resolution must be >= 1")


@dataclass
class OracleResult:
    phi_exact: float
    x_argmin: np.ndarray
    nodes: int = 0
    feasible_patterns: list[tuple[tuple[int, ...], ...]] = field(default_factory=list, repr=False)


@dataclass
class _Region:
    """Affine state ``x_k = A x + a`` plus accumulated half-spaces ``G x <= e``."""

    A: np.ndarray
    a: np.ndarray
    G: np.ndarray
    e: np.ndarray
    pattern: tuple[tuple[int, ...], ...]


def _add_rows(G, e, rows, rhs):
    if not len(rhs):
        return G, e
    norms = np.maximum(np.linalg.norm(rows, axis=1), 1e-300)
    return np.vstack([G, rows / norms[:, None]]), np.concatenate([e, rhs / norms])


def _lp(c, G, e, lo, hi):
    return linprog(c, A_ub=G if len(e) else None, b_ub=e if len(e) else None, bounds=list(zip(lo, hi)), method="highs")


def _box(spec: AttackSpec):
    return spec.input_box()


def _feasible(spec, G, e, tol) -> bool:
    """Half-spaces meet the input box (a relaxation of the l2 region)."""
    lo, hi = _box(spec)
    res = _lp(np.zeros(lo.size), G, e + tol, lo, hi)
    return res.status == 0


def _leaf_linf(spec, c, c0, G, e, tol):
    lo, hi = _box(spec)
    res = _lp(c, G, e + tol, lo, hi)
    if res.status != 0:
        return None
    return float(res.fun + c0), np.clip(res.x, lo, hi)


def _leaf_l2(spec, c, c0, G, e, tol):
    lo, hi = _box(spec)
    start = _lp(np.zeros(lo.size), G, e + tol, lo, hi)
    if start.status != 0:
        return None
    n = lo.size
    xh, rho2 = spec.x_hat, spec.radius**2
    I = np.eye(n)
    # pattern rows, then the valid-input box -x <= 0 and x <= 1
    Gx = np.vstack([G, -I, I])
    rhs = np.concatenate([e, np.zeros(n), np.ones(n)])

    def fun(x):
        d = x - xh
        return float(c @ x), np.concatenate([Gx @ x - rhs, [d @ d - rho2]]), np.zeros(0)

    def lag(x, y, z):
        return c + Gx.T @ y[:-1] + 2.0 * y[-1] * (x - xh)

    def jac(x):
        return c.copy(), np.vstack([Gx, 2.0 * (x - xh)[None, :]]), np.zeros((0, n))

    def hess(x, y, z):
        return 2.0 * y[-1] * I

    m = len(rhs) + 1
    nlp = FunctionNlp(n, fun, lag, g_blocks=np.r_[np.zeros(m - 1, dtype=int), 1], h_blocks=np.zeros(0, dtype=int), jac=jac, hess=hess)
    sol = solve_nlp(nlp, start.x, cfg=SolveConfig(kkt_tol=1e-10, feas_tol=0.1 * tol, max_outer=80))
    scale = 1.0 + rho2
    if sol.report.primal_feas > 10.0 * tol * scale:
        return None
    x = feasible_project(spec, sol.x)
    return float(c @ sol.x + c0), x


def exact_margin_details(net: MlpNetwork, spec: AttackSpec, mobj: MarginObjective, cfg: OracleConfig | None = None) -> OracleResult:
    """Depth-first enumeration of activation patterns with feasibility pruning.

    Units that interval propagation proves stable are not branched on. The
    reported ``phi_exact`` is the margin evaluated by a forward pass at the
    best (projected) leaf point.
    """
    cfg = cfg or OracleConfig()
    if net.num_hidden > cfg.max_hidden_neurons:
        raise SizeError(f"{net.num_hidden} hidden neurons exceed the limit of {cfg.max_hidden_neurons}")
    if spec.radius == 0:
        return OracleResult(margin_at(net, mobj, spec.x_hat), spec.x_hat.copy())
    bounds = interval_bounds(net, spec)
    n = net.input_dim
    tol = cfg.per_pattern_tol
    leaf = _leaf_linf if spec.norm == "linf" else _leaf_l2
    best = [np.inf, None]
    result = OracleResult(np.inf, spec.x_hat.copy())
    hidden = net.hidden_layers

    def finish(reg: _Region):
        c = mobj.w_ell @ reg.A
        c0 = float(mobj.w_ell @ reg.a + mobj.w_0)
        out = leaf(spec, c, c0, reg.G, reg.e, tol)
        if out is None:
            return
        result.feasible_patterns.append(reg.pattern)
        val, x = out
        phi = margin_at(net, mobj, x)
        if phi < best[0]:
            best[0], best[1] = phi, x

    def descend(reg: _Region, layer: int, unit: int, P, q, states):
        result.nodes += 1
        W, b = hidden[layer]
        if unit == W.shape[0]:
            D = np.array(states, dtype=float)
            nxt = _Region(D[:, None] * P, D * q, reg.G, reg.e, reg.pattern + (tuple(states),))
            if layer + 1 == len(hidden):
                finish(nxt)
            else:
                W2, b2 = hidden[layer + 1]
                descend(nxt, layer + 1, 0, W2 @ nxt.A, W2 @ nxt.a + b2, [])
            return
        lb, ub = bounds.lbs[layer][unit], bounds.ubs[layer][unit]
        if lb >= 0:
            descend(reg, layer, unit + 1, P, q, states + [1])
            return
        if ub <= 0:
            descend(reg, layer, unit + 1, P, q, states + [0])
            return
        for state in (1, 0):
            sign = -1.0 if state else 1.0
            G, e = _add_rows(reg.G, reg.e, sign * P[unit][None, :], np.array([-sign * q[unit]]))
            if not _feasible(spec, G, e, tol):
                continue
            sub = _Region(reg.A, reg.a, G, e, reg.pattern)
            descend(sub, layer, unit + 1, P, q, states + [state])

    W1, b1 = hidden[0] if hidden else (None, None)
    root = _Region(np.eye(n), np.zeros(n), np.zeros((0, n)), np.zeros(0), ())
    if not hidden:
        finish(root)
    else:
        descend(root, 0, 0, W1.copy(), b1.copy(), [])
    if best[1] is None:
        raise ArithmeticError("no feasible activation pattern found")
    result.phi_exact = float(best[0])
    result.x_argmin = best[1]
    return result


def exact_margin(net: MlpNetwork, spec: AttackSpec, mobj: MarginObjective, cfg: OracleConfig | None = None) -> tuple[float, np.ndarray]:
    res = exact_margin_details(net, spec, mobj, cfg)
    return res.phi_exact, res.x_argmin


def _axis(lo, hi, k):
    return lo + (hi - lo) * (np.arange(k + 1) / k)


def grid_margin(net: MlpNetwork, spec: AttackSpec, mobj: MarginObjective, grid_n: int = 400) -> float:
    """Minimum margin over a feasible grid with ``grid_n`` intervals per axis.

    Grid points sit at ``lo + (hi - lo) * i / grid_n``, so doubling ``grid_n``
    visits a superset of the points.
    """
    n = net.input_dim
    if n > 2:
        raise SizeError("grid_margin supports at most two input dimensions")
    if grid_n < 1:
        raise ConfigurationError("grid_n must be >= 1")
    lo, hi = spec.input_box()
    axes = [_axis(lo[i], hi[i], grid_n) for i in range(n)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    if spec.norm == "l2":
        d = np.linalg.norm(pts - spec.x_hat, axis=1)
        pts = pts[d <= spec.radius * (1 + 1e-12) + 1e-15]
    # batched forward pass
    h = pts.T
    for W, b in net.hidden_layers:
        h = np.maximum(W @ h + b[:, None], 0.0)
    vals = mobj.w_ell @ h + mobj.w_0
    return float(vals.min())
