"""Augmented Lagrangian solver for smooth nonlinear programs.

Problems are ``min f(x)`` subject to ``g(x) <= 0`` and ``h(x) = 0``. A problem
object exposes

* ``num_vars``
* ``evaluate_flat(x) -> (f, g, h)``
* ``lagrangian_grad_flat(x, y, z) -> grad f + J_g^T y + J_h^T z``
* ``g_block_ids()`` and ``h_block_ids()``, integer block labels per row.

Inequalities enter through the squared-hinge (Rockafellar) augmentation.
Each block has its own penalty, raised only when that block stalls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import ConfigurationError, NumericalFailure

_PENALTY_CAP = 1e8
# outer iterations without a halving of the violation before giving up
_STALL_WINDOW = 6


@dataclass(frozen=True)
class SolveConfig:
    kkt_tol: float = 1e-7
    feas_tol: float = 1e-8
    max_outer: int = 60
    max_inner: int = 400
    penalty_init: float = 10.0
    penalty_growth: float = 5.0
    seed: int = 0
    log_path: str | None = None
    inner: str = "auto"

    def __post_init__(self):
        for name in ("kkt_tol", "feas_tol", "penalty_init"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ConfigurationError("iteration limits must be >= 1")
        if not self.penalty_growth > 1:
            raise ConfigurationError("penalty_growth must exceed 1")
        if self.inner not in ("auto", "newton", "lbfgs"):
            raise ConfigurationError("inner must be 'auto', 'newton' or 'lbfgs'")


@dataclass
class KktReport:
    stationarity: float
    primal_feas: float
    complementarity: float
    inside_trace: bool
    converged: bool
    grad_f_norm: float = 0.0
    outer_iterations: int = 0
    history: list[dict] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {
            "stationarity": self.stationarity,
            "primal_feas": self.primal_feas,
            "complementarity": self.complementarity,
            "inside_trace": self.inside_trace,
            "converged": self.converged,
        }


@dataclass
class NlpSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    report: KktReport
    history: list[dict] = field(default_factory=list)


class FunctionNlp:
    """Adapter turning plain callables into a solver problem.

    ``fun(x) -> (f, g, h)``; ``lag_grad(x, y, z)`` returns the Lagrangian
    gradient. Every constraint row is its own block unless ``g_blocks`` or
    ``h_blocks`` are given. With ``jac(x) -> (grad_f, J_g, J_h)`` and
    ``hess(x, y, z)`` (Lagrangian Hessian) the Newton inner solver is used.
    """

    def __init__(self, num_vars, fun, lag_grad, g_blocks=None, h_blocks=None, m_ineq=None, m_eq=None, jac=None, hess=None):
        self.num_vars = int(num_vars)
        self._fun = fun
        self._lag = lag_grad
        if jac is not None and hess is not None:
            self.jacobians_flat = jac
            self.lagrangian_hessian_flat = hess
        if g_blocks is None or h_blocks is None:
            _, g, h = fun(np.zeros(self.num_vars))
            m_ineq, m_eq = len(g), len(h)
        self._gb = np.arange(m_ineq) if g_blocks is None else np.asarray(g_blocks, dtype=int)
        self._hb = np.arange(m_eq) if h_blocks is None else np.asarray(h_blocks, dtype=int)

    def evaluate_flat(self, x):
        f, g, h = self._fun(x)
        return float(f), np.atleast_1d(np.asarray(g, dtype=float)), np.atleast_1d(np.asarray(h, dtype=float))

    def lagrangian_grad_flat(self, x, y, z):
        return np.asarray(self._lag(x, y, z), dtype=float)

    def g_block_ids(self):
        return self._gb

    def h_block_ids(self):
        return self._hb


def kkt_residuals(nlp, x, y, z, cfg: SolveConfig | None = None, inside_trace: bool = True) -> KktReport:
    """KKT residuals of ``(x, y, z)`` recomputed from scratch."""
    cfg = cfg or SolveConfig()
    f, g, h = nlp.evaluate_flat(x)
    zero_y, zero_z = np.zeros_like(g), np.zeros_like(h)
    grad_f = nlp.lagrangian_grad_flat(x, zero_y, zero_z)
    lag = nlp.lagrangian_grad_flat(x, y, z)
    stat = float(np.linalg.norm(lag))
    feas = max(float(np.max(g, initial=0.0)), float(np.max(np.abs(h), initial=0.0)))
    feas = max(feas, 0.0)
    comp = float(np.max(np.abs(y * g), initial=0.0))
    gnorm = float(np.linalg.norm(grad_f))
    ok = stat <= cfg.kkt_tol * (1.0 + gnorm) and feas <= cfg.feas_tol and comp <= cfg.kkt_tol and bool(np.all(y >= 0))
    return KktReport(stat, feas, comp, inside_trace, ok and inside_trace, grad_f_norm=gnorm)


def _block_max(values: np.ndarray, ids: np.ndarray, nblocks: int) -> np.ndarray:
    out = np.zeros(nblocks)
    if values.size:
        np.maximum.at(out, ids, values)
    return out


@dataclass
class _InnerResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    nit: int


def _line_search(phi, x, f0, g0, d, alpha, max_trials=40):
    """Step along ``d`` meeting the (approximate) Wolfe conditions.

    Near a minimiser, function decreases drop below round-off long before
    the gradient does, so a step whose value is unchanged up to round-off is
    accepted when its slope is not strongly positive.
    """
    dphi0 = g0 @ d
    f_tol = 1e-12 * (1.0 + abs(f0))
    lo, hi = 0.0, np.inf
    dlo = dphi0
    best = None
    for _ in range(max_trials):
        xa = x + alpha * d
        fa, ga = phi(xa)
        da = ga @ d
        decrease = fa <= f0 + 1e-4 * alpha * dphi0 or (fa <= f0 + f_tol and da <= -(1.0 - 2e-4) * dphi0)
        if not decrease:
            hi = alpha
        elif da < 0.9 * dphi0:
            lo, dlo = alpha, da
            best = (xa, fa, ga, alpha)
        else:
            return xa, fa, ga, alpha
        if np.isfinite(hi):
            alpha = 0.5 * (lo + hi)
        else:
            alpha *= 4.0
    return best


def _lbfgs(phi, x0, gtol, maxiter, memory=20) -> _InnerResult:
    """Limited-memory BFGS on ``phi(x) -> (value, gradient)``; stops on ``||grad||_2 <= gtol``."""
    x = np.array(x0, dtype=float)
    f, g = phi(x)
    S, Y = [], []
    nit = 0
    while nit < maxiter and np.linalg.norm(g) > gtol:
        q = g.copy()
        alphas = []
        for s, yv in zip(reversed(S), reversed(Y)):
            a = (s @ q) / (yv @ s)
            alphas.append(a)
            q -= a * yv
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        else:
            q /= max(1.0, np.linalg.norm(g))
        for (s, yv), a in zip(zip(S, Y), reversed(alphas)):
            b = (yv @ q) / (yv @ s)
            q += (a - b) * s
        d = -q
        if g @ d >= 0:
            S, Y = [], []
            d = -g / max(1.0, np.linalg.norm(g))
        step = _line_search(phi, x, f, g, d, 1.0)
        nit += 1
        if step is None:
            if S:
                S, Y = [], []
                continue
            break
        xn, fn, gn, _ = step
        s, yv = xn - x, gn - g
        if s @ yv > 1e-16 * np.linalg.norm(s) * np.linalg.norm(yv):
            S.append(s)
            Y.append(yv)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        x, f, g = xn, fn, gn
    return _InnerResult(x, f, g, nit)


def _newton(nlp, phi, x0, y_c, z_c, cgv, chv, gtol, maxiter) -> _InnerResult:
    """Regularised Newton on the augmented Lagrangian (generalised Hessian of the hinge)."""
    x = np.array(x0, dtype=float)
    f, grad = phi(x)
    nit = 0
    tau = 0.0
    while nit < maxiter and np.linalg.norm(grad) > gtol:
        _, g, h = nlp.evaluate_flat(x)
        _, Jg, Jh = nlp.jacobians_flat(x)
        yh = np.maximum(0.0, y_c + cgv * g)
        zh = z_c + chv * h
        act = (y_c + cgv * g) > 0
        H = nlp.lagrangian_hessian_flat(x, yh, zh)
        Ja = Jg[act]
        H += (Ja.T * cgv[act]) @ Ja + (Jh.T * chv) @ Jh
        scale = max(1.0, float(np.max(np.abs(np.diag(H)))))
        tau = 0.0 if tau == 0.0 else max(tau * 0.1, 1e-12 * scale)
        d = None
        for _ in range(40):
            try:
                cf = cho_factor(H + tau * np.eye(H.shape[0]))
                d = -cho_solve(cf, grad)
                break
            except np.linalg.LinAlgError:
                tau = max(10.0 * tau, 1e-10 * scale)
        nit += 1
        if d is None or not np.all(np.isfinite(d)) or grad @ d >= 0:
            d = -grad / scale
        step = _line_search(phi, x, f, grad, d, 1.0)
        if step is None:
            break
        x, f, grad, _ = step
    return _InnerResult(x, f, grad, nit)


def solve_nlp(nlp, x0, y0=None, z0=None, cfg: SolveConfig | None = None, log: Callable[[str], None] | None = None) -> NlpSolution:
    """Run the augmented Lagrangian method from ``(x0, y0, z0)``.

    The returned multipliers satisfy ``y >= 0`` exactly. When the iteration
    budget runs out the last iterate is returned with ``converged = False``.
    """
    cfg = cfg or SolveConfig()
    x = np.array(x0, dtype=float, copy=True)
    f, g, h = nlp.evaluate_flat(x)
    y = np.zeros_like(g) if y0 is None else np.maximum(np.array(y0, dtype=float), 0.0)
    z = np.zeros_like(h) if z0 is None else np.array(z0, dtype=float, copy=True)
    gid, hid = np.asarray(nlp.g_block_ids()), np.asarray(nlp.h_block_ids())
    ng = int(gid.max()) + 1 if gid.size else 0
    nh = int(hid.max()) + 1 if hid.size else 0
    cg = np.full(ng, cfg.penalty_init)
    ch = np.full(nh, cfg.penalty_init)
    prev_g = np.full(ng, np.inf)
    prev_h = np.full(nh, np.inf)
    history = []
    gnorm0 = float(np.linalg.norm(nlp.lagrangian_grad_flat(x, np.zeros_like(g), np.zeros_like(h))))
    omega = 1e-2 * (1.0 + gnorm0)
    target = 0.1 * cfg.kkt_tol * (1.0 + gnorm0)
    sink = log
    if cfg.log_path is not None and sink is None:
        path = Path(cfg.log_path)

        def sink(line):
            with path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    use_newton = cfg.inner == "newton" or (
        cfg.inner == "auto" and hasattr(nlp, "lagrangian_hessian_flat") and hasattr(nlp, "jacobians_flat")
    )
    report = None
    for outer in range(cfg.max_outer):
        cgv, chv = cg[gid], ch[hid]
        y_c, z_c = y.copy(), z.copy()

        def phi(xv):
            fv, gv, hv = nlp.evaluate_flat(xv)
            yh = np.maximum(0.0, y_c + cgv * gv)
            zh = z_c + chv * hv
            val = fv + zh @ hv - 0.5 * chv @ (hv * hv) + np.sum((yh * yh - y_c * y_c) / (2.0 * cgv))
            grad = nlp.lagrangian_grad_flat(xv, yh, zh)
            if not (np.isfinite(val) and np.all(np.isfinite(grad))):
                raise NumericalFailure("non-finite augmented Lagrangian")
            return val, grad

        if use_newton:
            res = _newton(nlp, phi, x, y_c, z_c, cgv, chv, omega, min(cfg.max_inner, 50))
        else:
            res = _lbfgs(phi, x, omega, cfg.max_inner)
        x = np.asarray(res.x, dtype=float)
        f, g, h = nlp.evaluate_flat(x)
        if not (np.isfinite(f) and np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
            raise NumericalFailure("non-finite constraint values")
        y_new = np.maximum(0.0, y + cgv * g)
        z_new = z + chv * h
        vg = _block_max(np.abs(np.maximum(g, -y_new / cgv)), gid, ng)
        vh = _block_max(np.abs(h), hid, nh)
        y, z = y_new, z_new
        report = kkt_residuals(nlp, x, y, z, cfg)
        report.outer_iterations = outer + 1
        viol = max(float(np.max(vg, initial=0.0)), float(np.max(vh, initial=0.0)))
        raised = False
        for pen, v, pv in ((cg, vg, prev_g), (ch, vh, prev_h)):
            bump = (v > 0.25 * pv) & (v > cfg.feas_tol) & (pen < _PENALTY_CAP)
            pen[bump] = np.minimum(pen[bump] * cfg.penalty_growth, _PENALTY_CAP)
            raised = raised or bool(np.any(bump))
        prev_g, prev_h = vg, vh
        history.append(
            {
                "outer": outer,
                "f": float(f),
                "violation": viol,
                "stationarity": report.stationarity,
                "penalty_raised": raised,
                "penalty_max": float(max(np.max(cg, initial=0.0), np.max(ch, initial=0.0))),
                "inner_iterations": int(res.nit),
                "min_y": float(np.min(y, initial=0.0)),
            }
        )
        if sink is not None:
            sink(
                f"outer={outer} f={f:.12g} viol={viol:.3e} stat={report.stationarity:.3e} "
                f"comp={report.complementarity:.3e} pen={history[-1]['penalty_max']:.3e} inner={res.nit}"
            )
        if report.converged:
            break
        capped = all(np.all(p[v > cfg.feas_tol] >= _PENALTY_CAP) for p, v in ((cg, vg), (ch, vh)))
        if capped and len(history) > _STALL_WINDOW:
            if viol > 0.5 * history[-1 - _STALL_WINDOW]["violation"]:
                break
        omega = max(0.1 * omega, target)
    return NlpSolution(x, y, z, report, history)


class PinnedNlp:
    """Restriction of a problem to its free variables.

    Variables in ``fixed_idx`` are held at ``fixed_vals`` and the inequality
    rows in ``drop_rows`` are removed (they must hold at the fixed values).
    """

    def __init__(self, nlp, fixed_idx, fixed_vals, drop_rows):
        self.base = nlp
        n_all = nlp.num_vars
        self.fixed_idx = np.asarray(fixed_idx, dtype=int)
        self.free = np.setdiff1d(np.arange(n_all), self.fixed_idx)
        self.template = np.zeros(n_all)
        self.template[self.fixed_idx] = fixed_vals
        m = len(nlp.g_block_ids())
        self.keep = np.setdiff1d(np.arange(m), np.asarray(drop_rows, dtype=int))
        self.num_vars = len(self.free)
        self._m = m
        if hasattr(nlp, "jacobians_flat") and hasattr(nlp, "lagrangian_hessian_flat"):
            self.jacobians_flat = self._jacobians_flat
            self.lagrangian_hessian_flat = self._lagrangian_hessian_flat

    def full(self, x):
        out = self.template.copy()
        out[self.free] = x
        return out

    def full_y(self, y):
        out = np.zeros(self._m)
        out[self.keep] = y
        return out

    def evaluate_flat(self, x):
        f, g, h = self.base.evaluate_flat(self.full(x))
        return f, g[self.keep], h

    def lagrangian_grad_flat(self, x, y, z):
        return self.base.lagrangian_grad_flat(self.full(x), self.full_y(y), z)[self.free]

    def _jacobians_flat(self, x):
        gf, Jg, Jh = self.base.jacobians_flat(self.full(x))
        return gf[self.free], Jg[np.ix_(self.keep, self.free)], Jh[:, self.free]

    def _lagrangian_hessian_flat(self, x, y, z):
        H = self.base.lagrangian_hessian_flat(self.full(x), self.full_y(y), z)
        return H[np.ix_(self.free, self.free)]

    def g_block_ids(self):
        return np.asarray(self.base.g_block_ids())[self.keep]

    def h_block_ids(self):
        return self.base.h_block_ids()


def solve(prob, init_point, init_mult, cfg: SolveConfig | None = None, log=None):
    """Solve a relaxation instance; returns ``(point, mult, KktReport)``.

    Zero-radius ball rows are enforced by fixing the variables they pin; the
    returned multipliers of those rows are zero and the residuals refer to
    the remaining free problem. ``inside_trace`` (strictly inside the trace
    ball) is part of the convergence verdict.
    """
    from .relaxation import sanitize_multipliers

    cfg = cfg or SolveConfig()
    y0, z0 = prob.pack(sanitize_multipliers(init_mult))
    fixed_idx, fixed_vals, drop = prob.pinned()
    x0 = init_point.flatten()
    if fixed_idx.size:
        nlp = PinnedNlp(prob, fixed_idx, fixed_vals, drop)
        sol = solve_nlp(nlp, x0[nlp.free], y0[nlp.keep], z0, cfg, log=log)
        x, y = nlp.full(sol.x), nlp.full_y(sol.y)
    else:
        sol = solve_nlp(prob, x0, y0, z0, cfg, log=log)
        x, y = sol.x, sol.y
    point = prob.unflatten(x)
    point = type(point)([a.copy() for a in point.u], [v.copy() for v in point.V])
    mult = prob.unpack(y, sol.z)
    inside = point.trace() < prob.R**2
    rep = sol.report
    rep.inside_trace = inside
    rep.converged = rep.converged and inside
    rep.history = sol.history
    return point, mult, rep
