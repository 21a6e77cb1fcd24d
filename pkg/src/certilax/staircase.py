"""Rank staircase: certify one target class, then aggregate over classes."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import relaxation as rx
from .attack import AttackSpec, PgdConfig, PgdResult, pgd_upper_bound
from .exceptions import ConfigurationError, InvalidInputError, NumericalFailure
from .model import MlpNetwork, PreactivationBounds, forward, interval_bounds, margin_objective
from .solver import KktReport, SolveConfig, solve

STATUSES = ("robust", "not_robust", "unknown")
_RADIUS_RETRIES = 3


@dataclass(frozen=True)
class StaircaseConfig:
    r_init: int = 2
    r_max: int = 10
    eps_feas_tol: float = 1e-6
    escape_step: float | None = None  # None: 1e-3 * max(1, ||u||)
    solver: SolveConfig = field(default_factory=SolveConfig)
    pgd: PgdConfig = field(default_factory=PgdConfig)
    strict_alg1: bool = False
    tighten: bool = True
    R: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.r_init <= self.r_max:
            raise ConfigurationError("need 2 <= r_init <= r_max")
        if not self.eps_feas_tol > 0:
            raise ConfigurationError("eps_feas_tol must be positive")
        if self.escape_step is not None and self.escape_step < 0:
            raise ConfigurationError("escape_step must be non-negative")


@dataclass
class RoundRecord:
    rank: int
    f: float
    eps_feas: float
    phi_lb: float
    stationarity: float
    primal_feas: float
    complementarity: float
    converged: bool
    npcq_ok: bool
    # eps_feas of the untightened slack, the one that drives the escape
    eps_feas_plain: float = float("nan")

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ClassCertificate:
    target_class: int
    phi_lb: float
    phi_ub: float
    r_final: int
    eps_feas: float
    kkt: KktReport | None
    npcq_ok: bool
    rounds: list[RoundRecord] = field(default_factory=list)
    x_adv: np.ndarray | None = None
    error: str | None = None
    # the certificate behind phi_lb: multipliers, z0 and the problem they belong to
    multipliers: rx.Multipliers | None = field(default=None, repr=False)
    z0: float = float("nan")
    problem: rx.BmProblem | None = field(default=None, repr=False)
    slack: rx.SlackReport | None = field(default=None, repr=False)

    def recompute_bound(self) -> float:
        """Re-derive ``phi_lb`` from the stored multipliers and ``z0``."""
        if self.multipliers is None or self.problem is None:
            return -np.inf
        rep = rx.slack_with_z0(self.problem, self.multipliers, self.z0, self.slack.T if self.slack is not None else None)
        return rx.dual_lower_bound(rep, self.problem.R, self.problem.mobj.w_0)


@dataclass
class CertificateResult:
    true_class: int
    certificates: list[ClassCertificate]
    phi_star_lb: float
    phi_star_ub: float
    status: str
    misclassified: bool = False

    @property
    def numerical_failure(self) -> bool:
        return any(c.error == "numerical_failure" for c in self.certificates)


def escape(point: rx.BmPoint, report: rx.SlackReport, eps: float) -> rx.BmPoint:
    """Append one column along the negative eigenvector of the slack matrix.

    The column for layer ``k`` is ``eps * (xi_k - xi_0 u_k)``: the eigenvector
    with its component along the first column of ``U`` removed, which keeps
    the full ``xi^T S xi`` decrease while ``u_0`` stays fixed.
    """
    xi = np.asarray(report.xi, dtype=float)
    nxi = np.linalg.norm(xi)
    if not nxi > 0 or not np.all(np.isfinite(xi)):
        raise NumericalFailure("escape direction is zero or non-finite")
    xi = xi / nxi
    u_all = np.concatenate(point.u)
    if xi.size != u_all.size + 1:
        raise InvalidInputError("eigenvector does not match the point")
    col = xi[1:] - xi[0] * u_all
    V = []
    at = 0
    for uk, Vk in zip(point.u, point.V):
        m = uk.size
        V.append(np.hstack([Vk, eps * col[at : at + m, None]]))
        at += m
    return rx.BmPoint([a.copy() for a in point.u], V)


def default_escape_step(point: rx.BmPoint) -> float:
    return 1e-3 * max(1.0, float(np.linalg.norm(np.concatenate(point.u))))


def _certificate_from_round(prob, point, mult, w_0, tighten):
    sm = rx.sanitize_multipliers(mult)
    plain = rx.assemble_slack(prob, point, sm)
    best_lb, best = rx.dual_lower_bound(plain, prob.R, w_0), plain
    if tighten:
        lb2, rep2 = rx.tighten_bound(prob, point, sm, w_0)
        if lb2 > best_lb:
            best_lb, best = lb2, rep2
    return best_lb, best, plain


def certify_class(
    net: MlpNetwork,
    spec: AttackSpec,
    cfg: StaircaseConfig | None = None,
    variant: str = "plain",
    bounds: PreactivationBounds | None = None,
    pgd: PgdResult | None = None,
) -> ClassCertificate:
    """Lower and upper bounds on the margin against ``spec.target_class``.

    Every round's dual bound is sound on its own; the best one is returned.
    A solver blow-up yields ``phi_lb = -inf`` with ``error`` set.
    """
    cfg = cfg or StaircaseConfig()
    mobj = margin_objective(net, spec.true_class, spec.target_class)
    if bounds is None:
        bounds = interval_bounds(net, spec)
    if pgd is None:
        pgd = pgd_upper_bound(net, spec, mobj, cfg.pgd)
    cert = ClassCertificate(
        target_class=spec.target_class,
        phi_lb=-np.inf,
        phi_ub=float(pgd.phi_ub),
        r_final=cfg.r_init,
        eps_feas=np.inf,
        kkt=None,
        npcq_ok=False,
        x_adv=pgd.x_adv,
    )
    prob = rx.build(net, spec, mobj, bounds, variant, cfg.r_init, cfg.R)
    acts, _ = forward(net, pgd.x_adv)
    point = rx.initialize(prob, acts, seed=cfg.seed)
    mult = prob.zero_multipliers()
    r = cfg.r_init
    while True:
        try:
            start = point
            point, mult, rep = solve(prob, start, mult, cfg.solver)
            for _ in range(_RADIUS_RETRIES):
                if rep.inside_trace:
                    break
                # the trace ball must not be active at the solution
                prob = prob.with_radius(2.0 * prob.R)
                point, mult, rep = solve(prob, start, mult, cfg.solver)
            f = prob.evaluate(point)[0] + mobj.w_0
            lb, report, plain = _certificate_from_round(prob, point, mult, mobj.w_0, cfg.tighten)
        except NumericalFailure:
            cert.error = "numerical_failure"
            cert.phi_lb = -np.inf
            cert.r_final = r
            return cert
        npcq = rx.npcq_check(prob, point).ok
        cert.rounds.append(
            RoundRecord(r, float(f), report.eps_feas, float(lb), rep.stationarity, rep.primal_feas, rep.complementarity, rep.converged, npcq, plain.eps_feas)
        )
        cert.r_final = r
        cert.kkt = rep
        cert.npcq_ok = npcq
        if lb > cert.phi_lb:
            cert.phi_lb = float(lb)
            cert.eps_feas = report.eps_feas
            cert.multipliers = report.multipliers
            cert.z0 = report.z0
            cert.problem = prob
            cert.slack = report
        if cfg.strict_alg1 and not rep.converged:
            cert.error = "not_converged"
            cert.phi_lb = -np.inf
            return cert
        closed = lb >= f - cfg.eps_feas_tol * (1.0 + abs(f))
        if plain.eps_feas <= cfg.eps_feas_tol or closed or r >= cfg.r_max:
            return cert
        eps = cfg.escape_step if cfg.escape_step is not None else default_escape_step(point)
        try:
            point = escape(point, plain, eps)
        except NumericalFailure:
            return cert
        r += 1
        prob = prob.with_rank(r)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CERTILAX_THREADS", "1")))
    except ValueError:
        return 1


def _status(certs: list[ClassCertificate]) -> str:
    if any(c.phi_ub < 0 for c in certs):
        return "not_robust"
    if certs and all(c.phi_lb > 0 for c in certs):
        return "robust"
    return "unknown"


def certify_input(
    net: MlpNetwork,
    x_hat,
    true_class: int,
    radius: float,
    norm: str = "l2",
    variant: str = "plain",
    cfg: StaircaseConfig | None = None,
    workers: int | None = None,
) -> CertificateResult:
    """Certify ``x_hat`` against every incorrect class.

    PGD runs first for all classes; any negative upper bound ends the run
    with ``not_robust``. The remaining classes are certified independently,
    on up to ``workers`` threads (default: ``CERTILAX_THREADS`` or 1).
    """
    cfg = cfg or StaircaseConfig()
    x_hat = np.asarray(x_hat, dtype=float)
    q = net.num_classes
    if not 0 <= true_class < q:
        raise InvalidInputError("true_class out of range")
    targets = [c for c in range(q) if c != true_class]
    AttackSpec(x_hat, true_class, targets[0], radius, norm)  # validates the inputs
    logits = forward(net, x_hat)[1]
    worst = float(min(logits[true_class] - logits[c] for c in targets))
    if worst <= 0:
        # ties count as misclassified
        status = "not_robust" if worst < 0 else "unknown"
        return CertificateResult(true_class, [], -np.inf, worst, status, misclassified=True)
    specs = [AttackSpec(x_hat, true_class, c, radius, norm) for c in targets]
    bounds = interval_bounds(net, specs[0])
    pgds = [pgd_upper_bound(net, s, margin_objective(net, true_class, s.target_class), cfg.pgd) for s in specs]
    if any(p.phi_ub < 0 for p in pgds):
        certs = [
            ClassCertificate(s.target_class, -np.inf, float(p.phi_ub), 0, np.inf, None, False, x_adv=p.x_adv)
            for s, p in zip(specs, pgds)
        ]
        return _result(true_class, certs)

    def job(i):
        return certify_class(net, specs[i], cfg, variant, bounds, pgds[i])

    n_workers = workers if workers is not None else _threads()
    if n_workers > 1 and len(specs) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            certs = list(pool.map(job, range(len(specs))))
    else:
        certs = [job(i) for i in range(len(specs))]
    return _result(true_class, certs)


def _result(true_class, certs) -> CertificateResult:
    lb = min(c.phi_lb for c in certs)
    ub = min(c.phi_ub for c in certs)
    return CertificateResult(true_class, certs, float(lb), float(ub), _status(certs))
