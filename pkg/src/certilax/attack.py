"""Attack specifications and projected gradient descent upper bounds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError
from .model import MarginObjective, MlpNetwork, forward

NORMS = ("l2", "linf")


@dataclass(frozen=True)
class AttackSpec:
    """Semi-targeted attack on ``x_hat``: push ``target_class`` above ``true_class``.

    The feasible region is the norm ball of ``radius`` around ``x_hat``
    intersected with the valid input box ``[0, 1]``.
    """

    x_hat: np.ndarray
    true_class: int
    target_class: int
    radius: float
    norm: str = "l2"

    def __post_init__(self):
        x = np.array(self.x_hat, dtype=float, copy=True).reshape(-1)
        if not np.all(np.isfinite(x)) or np.any(x < 0) or np.any(x > 1):
            raise InvalidInputError("x_hat entries must lie in [0, 1]")
        x.setflags(write=False)
        object.__setattr__(self, "x_hat", x)
        norm = str(self.norm).lower()
        if norm not in NORMS:
            raise InvalidInputError(f"norm must be one of {NORMS}, got {self.norm!r}")
        object.__setattr__(self, "norm", norm)
        if not np.isfinite(self.radius) or self.radius < 0:
            raise InvalidInputError("radius must be a finite non-negative number")
        object.__setattr__(self, "radius", float(self.radius))
        if self.true_class == self.target_class:
            raise InvalidInputError("true and target class must differ")

    def input_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Enclosing box of the feasible region."""
        lo = np.maximum(0.0, self.x_hat - self.radius)
        hi = np.minimum(1.0, self.x_hat + self.radius)
        return lo, hi

    def with_target(self, target_class: int) -> "AttackSpec":
        return AttackSpec(self.x_hat, self.true_class, target_class, self.radius, self.norm)

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float)
        if np.any(x < -tol) or np.any(x > 1 + tol):
            return False
        d = x - self.x_hat
        if self.norm == "l2":
            return float(np.linalg.norm(d)) <= self.radius + tol
        return float(np.max(np.abs(d), initial=0.0)) <= self.radius + tol


@dataclass(frozen=True)
class PgdConfig:
    step_size: float | None = None  # defaults to radius / 10
    iterations: int = 200
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.step_size is not None and not self.step_size > 0:
            raise InvalidInputError("step_size must be positive")
        if self.iterations < 1 or self.restarts < 1:
            raise InvalidInputError("iterations and restarts must be >= 1")


@dataclass
class PgdResult:
    x_adv: np.ndarray
    phi_ub: float
    iterations_used: int
    history: list[float] = field(default_factory=list)


def feasible_project(spec: AttackSpec, x) -> np.ndarray:
    """Map ``x`` into the feasible region of ``spec``.

    For ``l2`` this is radial scaling onto the ball followed by clipping to the
    box; clipping towards ``[0, 1]`` never moves a coordinate away from
    ``x_hat``, so the result stays inside the ball.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != spec.x_hat.shape:
        raise InvalidInputError(f"point must have shape {spec.x_hat.shape}")
    if spec.norm == "l2":
        d = x - spec.x_hat
        nd = np.linalg.norm(d)
        if nd > spec.radius:
            d = d * (spec.radius / nd)
        return np.clip(spec.x_hat + d, 0.0, 1.0)
    lo, hi = spec.input_box()
    return np.clip(x, lo, hi)


def margin_and_grad(net: MlpNetwork, mobj: MarginObjective, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Margin at ``x`` and its gradient (ReLU derivative taken as 0 at the kink)."""
    acts, _ = forward(net, x)
    value = float(mobj.w_ell @ acts[-1] + mobj.w_0)
    g = mobj.w_ell.copy()
    for k in range(net.num_layers - 2, -1, -1):
        g = (g * (acts[k + 1] > 0)) @ net.weights[k]
    return value, g


def _random_feasible(spec: AttackSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.x_hat.size
    if spec.norm == "l2":
        d = rng.standard_normal(n)
        d *= spec.radius * rng.uniform() ** (1.0 / n) / max(np.linalg.norm(d), 1e-300)
        return feasible_project(spec, spec.x_hat + d)
    lo, hi = spec.input_box()
    return rng.uniform(lo, hi)


def pgd_upper_bound(net: MlpNetwork, spec: AttackSpec, mobj: MarginObjective, cfg: PgdConfig | None = None) -> PgdResult:
    """Minimise the margin over the feasible region by projected gradient descent.

    The first restart starts at ``x_hat``, the rest at seeded random feasible
    points. Steps are normalised (``l2``) or signed (``linf``). The returned
    ``phi_ub`` is the best margin seen and ``history`` the incumbent after
    every step.
    """
    cfg = cfg or PgdConfig()
    rng = np.random.default_rng(cfg.seed)
    best_x = spec.x_hat.copy()
    best, _ = margin_and_grad(net, mobj, best_x)
    history = [best]
    if spec.radius == 0:
        return PgdResult(best_x, best, 0, history)
    step = cfg.step_size if cfg.step_size is not None else spec.radius / 10.0
    used = 0
    for restart in range(cfg.restarts):
        x = spec.x_hat.copy() if restart == 0 else _random_feasible(spec, rng)
        for it in range(cfg.iterations):
            val, g = margin_and_grad(net, mobj, x)
            if val < best:
                best, best_x = val, x.copy()
            history.append(best)
            used += 1
            if spec.norm == "l2":
                gn = np.linalg.norm(g)
                if gn == 0:
                    break
                direction = g / gn
            else:
                direction = np.sign(g)
                if not np.any(direction):
                    break
            # mild decay lets the iterate settle onto boundary optima
            alpha = step / (1.0 + it / 50.0)
            x = feasible_project(spec, x - alpha * direction)
        val, _ = margin_and_grad(net, mobj, x)
        if val < best:
            best, best_x = val, x.copy()
        history.append(best)
    return PgdResult(best_x, best, used, history)
