"""Low-rank (Burer-Monteiro) relaxations of the margin-minimisation problem.

A point stores ``u_k`` and ``V_k`` for every layer ``k = 1..l`` (input and
hidden layers); ``u_0`` is fixed to 1 so that the implied matrix is
``X = U U^T`` with ``U = [[1, 0], [u, V]]``.

Four variants are supported, selected by ``variant`` (``"plain"`` or
``"full"``) and the attack norm:

* plain/l2: ball on the input, input box, ``u >= 0`` and ``u >= W u + b``
  sign blocks, diagonal ReLU equalities;
* full/l2: as plain/l2 with ``u >= 0`` replaced by elementwise ball
  constraints built from preactivation bounds;
* plain/linf and full/linf: the input ball and box are replaced by one
  elementwise ball on the input box.

A trace constraint ``tr(X) <= R^2`` is appended to every variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh

from .attack import AttackSpec
from .exceptions import ConfigurationError, InvalidInputError, PreconditionError
from .model import MarginObjective, MlpNetwork, PreactivationBounds, interval_bounds, margin_objective

VARIANTS = ("plain", "full")

# slack of the eigenvalue safeguard; scaled by ||S|| for round-off
EIG_CUSHION = 1e-9
_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class Block:
    """One stacked block of constraints.

    ``kind`` is one of ``ball`` (scalar l2 ball on the input), ``box_lo``,
    ``box_hi``, ``elem`` (elementwise ball on ``layer``), ``sign``
    (``-u <= 0``), ``relu`` (``W u_k + b - u_{k+1} <= 0``), ``quad`` (ReLU
    equality) and ``trace``.
    """

    name: str
    kind: str
    layer: int
    size: int
    center: np.ndarray | None = None
    radius: np.ndarray | None = None


@dataclass
class BmPoint:
    u: list[np.ndarray]
    V: list[np.ndarray]

    @property
    def rank(self) -> int:
        return self.V[0].shape[1] + 1

    def flatten(self) -> np.ndarray:
        return np.concatenate([*self.u, *(v.ravel() for v in self.V)])

    def trace(self) -> float:
        return 1.0 + float(sum(a @ a for a in self.u) + sum(np.sum(v * v) for v in self.V))

    def factor(self) -> np.ndarray:
        """The factor ``U = [[1, 0], [u, V]]`` of shape ``(n + 1, r)``."""
        r = self.rank
        top = np.zeros((1, r))
        top[0, 0] = 1.0
        body = np.hstack([np.concatenate(self.u)[:, None], np.vstack(self.V)])
        return np.vstack([top, body])

    def copy(self) -> "BmPoint":
        return BmPoint([a.copy() for a in self.u], [v.copy() for v in self.V])


@dataclass
class Multipliers:
    """Dual variables of one relaxation instance.

    ``y0`` is a length-1 array for l2 variants and a vector for linf; ``y01``
    and ``y02`` belong to the l2 input box; ``yk1`` (plain) and ``yk`` (full)
    are the per-layer sign or bound blocks, ``yk2`` the ``u >= W u + b``
    blocks and ``zk`` the ReLU equalities. ``mu <= 0`` belongs to the trace
    bound.
    """

    y0: np.ndarray
    yk2: list[np.ndarray]
    zk: list[np.ndarray]
    y01: np.ndarray | None = None
    y02: np.ndarray | None = None
    yk1: list[np.ndarray] | None = None
    yk: list[np.ndarray] | None = None
    mu: float = 0.0

    def inequality_arrays(self) -> Iterator[np.ndarray]:
        yield self.y0
        for a in (self.y01, self.y02):
            if a is not None:
                yield a
        for group in (self.yk1, self.yk, self.yk2):
            if group is not None:
                yield from group

    def copy(self) -> "Multipliers":
        cp = lambda xs: None if xs is None else [a.copy() for a in xs]  # noqa: E731
        return Multipliers(
            y0=self.y0.copy(),
            yk2=cp(self.yk2),
            zk=cp(self.zk),
            y01=None if self.y01 is None else self.y01.copy(),
            y02=None if self.y02 is None else self.y02.copy(),
            yk1=cp(self.yk1),
            yk=cp(self.yk),
            mu=float(self.mu),
        )


@dataclass
class SlackReport:
    S: np.ndarray
    z0: float
    lambda_min: float
    xi: np.ndarray
    cushion: float = EIG_CUSHION
    multipliers: Multipliers | None = None
    # basis of the reduced matrix T^T S T when pinned units are eliminated
    T: np.ndarray | None = None

    @property
    def eps_feas(self) -> float:
        return max(0.0, -self.lambda_min)


@dataclass
class NpcqReport:
    ok: bool
    worst_preact: float
    worst_vw: float
    offending: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class BmProblem:
    net: MlpNetwork
    spec: AttackSpec
    mobj: MarginObjective
    bounds: PreactivationBounds
    variant: str
    rank: int
    R: float
    g_blocks: list[Block] = field(default_factory=list)
    h_blocks: list[Block] = field(default_factory=list)

    # ----- layout -------------------------------------------------------
    @property
    def norm(self) -> str:
        return self.spec.norm

    @property
    def dims(self) -> list[int]:
        return self.net.layer_dims

    @property
    def n(self) -> int:
        return int(sum(self.dims))

    @property
    def num_vars(self) -> int:
        return self.n * self.rank

    @property
    def num_ineq(self) -> int:
        return sum(b.size for b in self.g_blocks)

    @property
    def num_eq(self) -> int:
        return sum(b.size for b in self.h_blocks)

    @property
    def offsets(self) -> list[int]:
        return list(np.cumsum([0, *self.dims[:-1]]))

    def with_rank(self, rank: int) -> "BmProblem":
        return replace(self, rank=rank)

    def with_radius(self, R: float) -> "BmProblem":
        blocks = [replace(b, radius=np.array([R])) if b.kind == "trace" else b for b in self.g_blocks]
        return replace(self, R=R, g_blocks=blocks)

    def g_block_ids(self) -> np.ndarray:
        return np.concatenate([np.full(b.size, i) for i, b in enumerate(self.g_blocks)])

    def h_block_ids(self) -> np.ndarray:
        if not self.h_blocks:
            return np.zeros(0, dtype=int)
        return np.concatenate([np.full(b.size, i) for i, b in enumerate(self.h_blocks)])

    def unflatten(self, x: np.ndarray) -> BmPoint:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.num_vars,):
            raise InvalidInputError(f"flat point must have length {self.num_vars}")
        u, V, pos = [], [], 0
        for nk in self.dims:
            u.append(x[pos : pos + nk])
            pos += nk
        for nk in self.dims:
            V.append(x[pos : pos + nk * (self.rank - 1)].reshape(nk, self.rank - 1))
            pos += nk * (self.rank - 1)
        return BmPoint(u, V)

    def _check_point(self, point: BmPoint) -> None:
        if len(point.u) != len(self.dims) or len(point.V) != len(self.dims):
            raise InvalidInputError("point has the wrong number of layers")
        for nk, a, v in zip(self.dims, point.u, point.V):
            if a.shape != (nk,) or v.shape != (nk, self.rank - 1):
                raise InvalidInputError(f"point shapes do not match layer width {nk} and rank {self.rank}")

    # ----- values -------------------------------------------------------
    def evaluate(self, point: BmPoint) -> tuple[float, np.ndarray, np.ndarray]:
        """Objective ``w_ell . u_l`` and the stacked ``g <= 0``, ``h = 0`` values."""
        self._check_point(point)
        u, V = point.u, point.V
        Ws, bs = self.net.weights, self.net.biases
        f = float(self.mobj.w_ell @ u[-1])
        g = []
        for blk in self.g_blocks:
            j = blk.layer
            if blk.kind == "ball":
                d = u[0] - self.spec.x_hat
                g.append(np.array([d @ d + np.sum(V[0] ** 2) - self.spec.radius**2]))
            elif blk.kind == "box_lo":
                g.append(-u[0])
            elif blk.kind == "box_hi":
                g.append(u[0] - 1.0)
            elif blk.kind == "elem":
                d = u[j] - blk.center
                g.append(d * d + np.sum(V[j] ** 2, axis=1) - blk.radius**2)
            elif blk.kind == "sign":
                g.append(-u[j + 1])
            elif blk.kind == "relu":
                g.append(Ws[j] @ u[j] + bs[j] - u[j + 1])
            elif blk.kind == "trace":
                g.append(np.array([point.trace() - self.R**2]))
        h = []
        for blk in self.h_blocks:
            k = blk.layer
            pre = Ws[k] @ u[k] + bs[k]
            h.append((u[k + 1] - pre) * u[k + 1] + np.sum((V[k + 1] - Ws[k] @ V[k]) * V[k + 1], axis=1))
        return f, np.concatenate(g), (np.concatenate(h) if h else np.zeros(0))

    def evaluate_flat(self, x: np.ndarray):
        return self.evaluate(self.unflatten(x))

    def lagrangian_grad(self, point: BmPoint, y: np.ndarray, z: np.ndarray) -> BmPoint:
        """``grad f + J_g^T y + J_h^T z`` as a point-shaped object."""
        self._check_point(point)
        u, V = point.u, point.V
        Ws, bs = self.net.weights, self.net.biases
        gu = [np.zeros_like(a) for a in u]
        gV = [np.zeros_like(v) for v in V]
        gu[-1] += self.mobj.w_ell
        pos = 0
        for blk in self.g_blocks:
            yb = y[pos : pos + blk.size]
            pos += blk.size
            j = blk.layer
            if blk.kind == "ball":
                gu[0] += 2.0 * yb[0] * (u[0] - self.spec.x_hat)
                gV[0] += 2.0 * yb[0] * V[0]
            elif blk.kind == "box_lo":
                gu[0] -= yb
            elif blk.kind == "box_hi":
                gu[0] += yb
            elif blk.kind == "elem":
                gu[j] += 2.0 * yb * (u[j] - blk.center)
                gV[j] += 2.0 * yb[:, None] * V[j]
            elif blk.kind == "sign":
                gu[j + 1] -= yb
            elif blk.kind == "relu":
                gu[j] += Ws[j].T @ yb
                gu[j + 1] -= yb
            elif blk.kind == "trace":
                for a, ga in zip(u, gu):
                    ga += 2.0 * yb[0] * a
                for v, gv in zip(V, gV):
                    gv += 2.0 * yb[0] * v
        pos = 0
        for blk in self.h_blocks:
            zb = z[pos : pos + blk.size]
            pos += blk.size
            k = blk.layer
            pre = Ws[k] @ u[k] + bs[k]
            gu[k + 1] += zb * (2.0 * u[k + 1] - pre)
            gu[k] -= Ws[k].T @ (zb * u[k + 1])
            WV = Ws[k] @ V[k]
            gV[k + 1] += zb[:, None] * (2.0 * V[k + 1] - WV)
            gV[k] -= Ws[k].T @ (zb[:, None] * V[k + 1])
        return BmPoint(gu, gV)

    def lagrangian_grad_flat(self, x, y, z) -> np.ndarray:
        return self.lagrangian_grad(self.unflatten(x), y, z).flatten()

    def _column_index(self, c: int) -> np.ndarray:
        """Flat positions of factor column ``c`` (0 is ``u``) for every row."""
        g = np.arange(self.n)
        if c == 0:
            return g
        return self.n + (self.rank - 1) * g + (c - 1)

    def jacobians_flat(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Dense ``(grad_f, J_g, J_h)`` assembled blockwise."""
        point = self.unflatten(x)
        u, V = point.u, point.V
        Ws, bs = self.net.weights, self.net.biases
        N, n, rm = self.num_vars, self.n, self.rank - 1
        off = self.offsets
        cols = [self._column_index(c) for c in range(self.rank)]

        def ucol(j):
            return np.arange(off[j], off[j] + self.dims[j])

        def vcols(j):
            # (rows of layer j) x (r - 1) flat positions
            g = ucol(j)
            return n + rm * g[:, None] + np.arange(rm)[None, :]

        grad_f = np.zeros(N)
        grad_f[ucol(len(self.dims) - 1)] = self.mobj.w_ell
        Jg = np.zeros((self.num_ineq, N))
        row = 0
        for blk in self.g_blocks:
            j = blk.layer
            rows = np.arange(row, row + blk.size)
            if blk.kind == "ball":
                Jg[row, ucol(0)] = 2.0 * (u[0] - self.spec.x_hat)
                Jg[row, vcols(0).ravel()] = 2.0 * V[0].ravel()
            elif blk.kind == "box_lo":
                Jg[rows, ucol(0)] = -1.0
            elif blk.kind == "box_hi":
                Jg[rows, ucol(0)] = 1.0
            elif blk.kind == "elem":
                Jg[rows, ucol(j)] = 2.0 * (u[j] - blk.center)
                Jg[rows[:, None], vcols(j)] = 2.0 * V[j]
            elif blk.kind == "sign":
                Jg[rows, ucol(j + 1)] = -1.0
            elif blk.kind == "relu":
                Jg[np.ix_(rows, ucol(j))] = Ws[j]
                Jg[rows, ucol(j + 1)] = -1.0
            elif blk.kind == "trace":
                Jg[row] = 2.0 * x
            row += blk.size
        Jh = np.zeros((self.num_eq, N))
        row = 0
        for blk in self.h_blocks:
            k = blk.layer
            rows = np.arange(row, row + blk.size)
            pre = Ws[k] @ u[k] + bs[k]
            Jh[rows, ucol(k + 1)] = 2.0 * u[k + 1] - pre
            Jh[np.ix_(rows, ucol(k))] = -u[k + 1][:, None] * Ws[k]
            Jh[rows[:, None], vcols(k + 1)] = 2.0 * V[k + 1] - Ws[k] @ V[k]
            for c in range(rm):
                Jh[np.ix_(rows, vcols(k)[:, c])] = -Ws[k] * V[k + 1][:, c][:, None]
            row += blk.size
        del cols
        return grad_f, Jg, Jh

    def lagrangian_hessian_flat(self, x, y, z) -> np.ndarray:
        """Hessian of ``f + y.g + z.h``; every function is quadratic so it does not depend on ``x``."""
        n = self.n
        Ws = self.net.weights
        off = self.offsets
        Q = np.zeros((n, n))
        pos = 0
        diag = np.zeros(n)
        for blk in self.g_blocks:
            yb = y[pos : pos + blk.size]
            pos += blk.size
            j = blk.layer
            if blk.kind == "ball":
                diag[off[0] : off[0] + self.dims[0]] += yb[0]
            elif blk.kind == "elem":
                diag[off[j] : off[j] + self.dims[j]] += yb
            elif blk.kind == "trace":
                diag += yb[0]
        pos = 0
        for blk in self.h_blocks:
            zb = z[pos : pos + blk.size]
            pos += blk.size
            k = blk.layer
            a = slice(off[k + 1], off[k + 1] + self.dims[k + 1])
            b = slice(off[k], off[k] + self.dims[k])
            diag[a] += zb
            Q[a, b] -= 0.5 * zb[:, None] * Ws[k]
            Q[b, a] -= 0.5 * (zb[:, None] * Ws[k]).T
        Q[np.diag_indices(n)] += diag
        H = np.zeros((self.num_vars, self.num_vars))
        for c in range(self.rank):
            idx = self._column_index(c)
            H[np.ix_(idx, idx)] = 2.0 * Q
        return H

    def pinned(self, tol: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Variables fixed by zero-radius ball rows.

        A row ``(u_i - c_i)^2 + ||V_i||^2 <= 0`` forces ``u_i = c_i`` and
        ``V_i = 0`` while its gradient vanishes there, so its multiplier is
        unbounded. Returns ``(flat indices, values, g rows)`` for every such
        row; the values are the forced ones. The reduced certificate relies
        on the default ``tol = 0`` (only exact zeros) for soundness.
        """
        idx, vals, rows = [], [], []
        off = self.offsets
        row = 0
        for blk in self.g_blocks:
            if blk.kind == "ball" and self.spec.radius <= tol:
                units = [(off[0] + i, self.spec.x_hat[i]) for i in range(self.dims[0])]
                rows.append(row)
            elif blk.kind == "elem":
                units = []
                for i in np.flatnonzero(blk.radius <= tol * (1.0 + np.abs(blk.center))):
                    units.append((off[blk.layer] + int(i), blk.center[i]))
                    rows.append(row + int(i))
            else:
                units = []
            for gpos, value in units:
                idx.append(gpos)
                vals.append(value)
                for c in range(1, self.rank):
                    idx.append(self.n + (self.rank - 1) * gpos + c - 1)
                    vals.append(0.0)
            row += blk.size
        return np.array(idx, dtype=int), np.array(vals, dtype=float), np.array(rows, dtype=int)

    def trace_index(self) -> int:
        return self.num_ineq - 1

    # ----- multiplier packing ---------------------------------------------
    def pack(self, mult: Multipliers) -> tuple[np.ndarray, np.ndarray]:
        ys = []
        for blk in self.g_blocks:
            ys.append(np.atleast_1d(self._block_mult(mult, blk)).astype(float))
        y = np.concatenate(ys)
        z = np.concatenate(mult.zk) if mult.zk else np.zeros(0)
        return y, z

    def _block_mult(self, mult: Multipliers, blk: Block):
        if blk.kind in ("ball",) or (blk.kind == "elem" and blk.name == "input"):
            return mult.y0
        if blk.kind == "box_lo":
            return mult.y01
        if blk.kind == "box_hi":
            return mult.y02
        if blk.kind == "sign":
            return mult.yk1[blk.layer]
        if blk.kind == "elem":
            return mult.yk[blk.layer - 1]
        if blk.kind == "relu":
            return mult.yk2[blk.layer]
        if blk.kind == "trace":
            return np.array([-mult.mu])
        raise AssertionError(blk.kind)

    def unpack(self, y: np.ndarray, z: np.ndarray) -> Multipliers:
        """Inverse of :meth:`pack`."""
        m = self.zero_multipliers()
        pos = 0
        for blk in self.g_blocks:
            part = np.array(y[pos : pos + blk.size], dtype=float)
            pos += blk.size
            if blk.kind == "ball" or (blk.kind == "elem" and blk.name == "input"):
                m.y0 = part
            elif blk.kind == "box_lo":
                m.y01 = part
            elif blk.kind == "box_hi":
                m.y02 = part
            elif blk.kind == "sign":
                m.yk1[blk.layer] = part
            elif blk.kind == "elem":
                m.yk[blk.layer - 1] = part
            elif blk.kind == "relu":
                m.yk2[blk.layer] = part
            elif blk.kind == "trace":
                m.mu = -float(part[0])
        pos = 0
        for k, blk in enumerate(self.h_blocks):
            m.zk[k] = np.array(z[pos : pos + blk.size], dtype=float)
            pos += blk.size
        return m

    def zero_multipliers(self) -> Multipliers:
        hidden = self.dims[1:]
        l2 = self.norm == "l2"
        full = self.variant == "full"
        return Multipliers(
            y0=np.zeros(1 if l2 else self.dims[0]),
            y01=np.zeros(self.dims[0]) if l2 else None,
            y02=np.zeros(self.dims[0]) if l2 else None,
            yk1=None if full else [np.zeros(m) for m in hidden],
            yk=[np.zeros(m) for m in hidden] if full else None,
            yk2=[np.zeros(m) for m in hidden],
            zk=[np.zeros(m) for m in hidden],
            mu=0.0,
        )

    def random_multipliers(self, rng: np.random.Generator, scale: float = 1.0) -> Multipliers:
        """Random sanitized multipliers (``y >= 0``, free ``z``, ``mu <= 0``)."""
        y, z = self.pack(self.zero_multipliers())
        y = rng.exponential(scale, size=y.shape)
        z = rng.normal(0.0, scale, size=z.shape)
        return self.unpack(y, z)


def default_trace_radius(spec: AttackSpec, bounds: PreactivationBounds) -> float:
    """A trace radius strictly above ``tr(X)`` for every feasible rank-one point."""
    if spec.norm == "l2":
        inp = float(spec.x_hat @ spec.x_hat) + spec.radius**2
    else:
        inp = float(bounds.input_hi @ bounds.input_hi)
    hidden = sum(float(np.sum(np.maximum(lb**2, ub**2))) for lb, ub in zip(bounds.lbs, bounds.ubs))
    return float(np.sqrt(2.0 * (1.0 + inp + hidden)))


def build(
    net: MlpNetwork,
    spec: AttackSpec,
    mobj: MarginObjective | None = None,
    bounds: PreactivationBounds | None = None,
    variant: str = "plain",
    r: int = 2,
    R: float | None = None,
) -> BmProblem:
    """Assemble one relaxation instance.

    ``bounds`` are required for full variants and for linf input centres; when
    omitted for plain/l2 they are computed by interval propagation (they still
    feed the automatic trace radius).
    """
    variant = str(variant).lower()
    if variant not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {VARIANTS}")
    if r < 2:
        raise ConfigurationError("rank must be at least 2")
    if bounds is None:
        if variant == "full" or spec.norm == "linf":
            raise ConfigurationError("preactivation bounds are required for full and linf variants")
        bounds = interval_bounds(net, spec)
    if len(bounds.lbs) != net.num_layers - 1:
        raise ConfigurationError("bounds must cover every hidden layer")
    if mobj is None:
        mobj = margin_objective(net, spec.true_class, spec.target_class)
    if R is None:
        R = default_trace_radius(spec, bounds)
    if not R > 0:
        raise ConfigurationError("trace radius must be positive")
    dims = net.layer_dims
    n1 = dims[0]
    g_blocks: list[Block] = []
    if spec.norm == "l2":
        g_blocks += [
            Block("ball", "ball", 0, 1),
            Block("box_lo", "box_lo", 0, n1),
            Block("box_hi", "box_hi", 0, n1),
        ]
    else:
        g_blocks.append(Block("input", "elem", 0, n1, bounds.input_center, bounds.input_radius))
    centers, radii = bounds.centers, bounds.radii
    h_blocks = []
    for k in range(net.num_layers - 1):
        m = dims[k + 1]
        if variant == "full":
            g_blocks.append(Block(f"bound{k}", "elem", k + 1, m, centers[k], radii[k]))
        else:
            g_blocks.append(Block(f"sign{k}", "sign", k, m))
        g_blocks.append(Block(f"relu{k}", "relu", k, m))
        h_blocks.append(Block(f"quad{k}", "quad", k, m))
    g_blocks.append(Block("trace", "trace", 0, 1, radius=np.array([R])))
    return BmProblem(net, spec, mobj, bounds, variant, r, float(R), g_blocks, h_blocks)


def objective_and_constraints(prob: BmProblem, point: BmPoint) -> tuple[float, np.ndarray, np.ndarray]:
    return prob.evaluate(point)


def gradients(prob: BmProblem, point: BmPoint) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense ``(grad_f, jac_g, jac_h)`` with respect to the flattened point."""
    prob._check_point(point)
    return prob.jacobians_flat(point.flatten())


def initialize(prob: BmProblem, activations, seed: int = 0, delta: float = 1e-3) -> BmPoint:
    """Primal start: ``u_k`` from a forward trace, ``V_k`` uniform in ``[-delta, delta]``."""
    if len(activations) != len(prob.dims):
        raise InvalidInputError("need one activation vector per layer")
    rng = np.random.default_rng(seed)
    u = [np.array(a, dtype=float).copy() for a in activations]
    V = [rng.uniform(-delta, delta, size=(nk, prob.rank - 1)) for nk in prob.dims]
    return BmPoint(u, V)


def npcq_check(prob: BmProblem, point: BmPoint) -> NpcqReport:
    """Nonzero-preactivation test on every hidden unit."""
    worst_pre, worst_vw = np.inf, np.inf
    offending = []
    for k, (W, b) in enumerate(prob.net.hidden_layers):
        tau = 1e-7 * (1.0 + np.max(np.sum(np.abs(W), axis=1)))
        pre = np.abs(W @ point.u[k] + b)
        vw = np.linalg.norm(W @ point.V[k], axis=1)
        worst_pre = min(worst_pre, float(pre.min()))
        worst_vw = min(worst_vw, float(vw.min()))
        for i in np.flatnonzero((pre <= tau) | (vw <= tau)):
            offending.append((k, int(i)))
    return NpcqReport(ok=not offending, worst_preact=worst_pre, worst_vw=worst_vw, offending=offending)


def sanitize_multipliers(mult: Multipliers) -> Multipliers:
    out = mult.copy()
    out.y0 = np.maximum(out.y0, 0.0)
    if out.y01 is not None:
        out.y01 = np.maximum(out.y01, 0.0)
        out.y02 = np.maximum(out.y02, 0.0)
    for name in ("yk1", "yk", "yk2"):
        group = getattr(out, name)
        if group is not None:
            setattr(out, name, [np.maximum(a, 0.0) for a in group])
    out.mu = min(out.mu, 0.0)
    return out


def _linear_slack(prob: BmProblem, mult: Multipliers) -> tuple[float, np.ndarray, np.ndarray]:
    """Constant, linear and quadratic coefficients of the Lagrangian in ``X``.

    Returns ``(c0, s, M)`` with ``f + y.g + z.h = c0 + s.x + <M, X_uu>``
    evaluated at any ``X`` (trace term excluded). ``M`` is symmetric.
    """
    n = prob.n
    off = prob.offsets
    dims = prob.dims
    sl = [slice(o, o + d) for o, d in zip(off, dims)]
    Ws, bs = prob.net.weights, prob.net.biases
    spec = prob.spec
    c0 = 0.0
    s = np.zeros(n)
    M = np.zeros((n, n))
    s[sl[-1]] += prob.mobj.w_ell
    for blk in prob.g_blocks:
        y = np.atleast_1d(prob._block_mult(mult, blk)).astype(float)
        j = blk.layer
        if blk.kind == "ball":
            M[sl[0], sl[0]] += y[0] * np.eye(dims[0])
            s[sl[0]] -= 2.0 * y[0] * spec.x_hat
            c0 += y[0] * (spec.x_hat @ spec.x_hat - spec.radius**2)
        elif blk.kind == "box_lo":
            s[sl[0]] -= y
        elif blk.kind == "box_hi":
            s[sl[0]] += y
            c0 -= y.sum()
        elif blk.kind == "elem":
            idx = np.arange(off[j], off[j] + dims[j])
            M[idx, idx] += y
            s[sl[j]] -= 2.0 * y * blk.center
            c0 += y @ (blk.center**2 - blk.radius**2)
        elif blk.kind == "sign":
            s[sl[j + 1]] -= y
        elif blk.kind == "relu":
            s[sl[j]] += Ws[j].T @ y
            s[sl[j + 1]] -= y
            c0 += y @ bs[j]
    for k, blk in enumerate(prob.h_blocks):
        z = mult.zk[k]
        idx = np.arange(off[k + 1], off[k + 1] + dims[k + 1])
        M[idx, idx] += z
        cross = -0.5 * Ws[k].T * z[None, :]
        M[sl[k], sl[k + 1]] += cross
        M[sl[k + 1], sl[k]] += cross.T
        s[sl[k + 1]] -= z * bs[k]
    return c0, s, M


def _eig_cushion(S: np.ndarray) -> float:
    if S.shape[0] == 1:
        # the eigenvalue is the entry itself, no decomposition error to absorb
        return 0.0
    return EIG_CUSHION + 10.0 * S.shape[0] * _EPS * float(np.linalg.norm(S))


def _check_sanitized(mult: Multipliers) -> None:
    for a in mult.inequality_arrays():
        if np.any(np.asarray(a) < 0):
            raise PreconditionError("inequality multipliers must be sanitized (non-negative) first")
    if mult.mu > 0:
        raise PreconditionError("trace multiplier mu must be <= 0")


def assemble_slack(prob: BmProblem, point: BmPoint, mult: Multipliers) -> SlackReport:
    """Slack matrix ``S(y, z)`` and ``z0`` chosen so that row 0 of ``S U`` vanishes."""
    _check_sanitized(mult)
    prob._check_point(point)
    c0, s, M = _linear_slack(prob, mult)
    u = np.concatenate(point.u)
    n = prob.n
    S = np.empty((n + 1, n + 1))
    S[1:, 1:] = M
    S[0, 1:] = S[1:, 0] = 0.5 * s
    s0 = -s @ u
    S[0, 0] = 0.5 * s0
    z0 = c0 - 0.5 * s0
    w, vecs = eigh(S)
    return SlackReport(S=S, z0=float(z0), lambda_min=float(w[0]), xi=vecs[:, 0], cushion=_eig_cushion(S), multipliers=mult)


def reduction_basis(prob: BmProblem) -> np.ndarray | None:
    """Basis ``T`` with ``X = T Y T^T`` on the feasible set, or None.

    A unit pinned to ``c`` has ``x_i = c`` and ``X_i,: = c X_0,:`` at every
    PSD point meeting its zero-radius constraint, so its row is a multiple
    of row 0. ``Y`` is the principal submatrix of ``X`` on row 0 and the free
    units, hence ``tr Y <= tr X``.
    """
    fixed_idx, vals, _ = prob.pinned()
    mask = fixed_idx < prob.n
    units, centers = fixed_idx[mask], vals[mask]
    if not units.size:
        return None
    free = np.setdiff1d(np.arange(prob.n), units)
    T = np.zeros((prob.n + 1, free.size + 1))
    T[0, 0] = 1.0
    T[units + 1, 0] = centers
    T[free + 1, np.arange(1, free.size + 1)] = 1.0
    return T


def _slack_base(prob: BmProblem, mult: Multipliers) -> np.ndarray:
    """``S`` for ``z0 = 0``."""
    c0, s, M = _linear_slack(prob, mult)
    n = prob.n
    A = np.empty((n + 1, n + 1))
    A[1:, 1:] = M
    A[0, 1:] = A[1:, 0] = 0.5 * s
    A[0, 0] = c0
    return A


def slack_with_z0(prob: BmProblem, mult: Multipliers, z0: float, T: np.ndarray | None = None) -> SlackReport:
    """Slack report for stored multipliers and an explicit ``z0``.

    Only the multipliers enter, so a stored certificate can be re-checked
    without the primal point. With ``T`` the reduced matrix ``T^T S T`` is
    reported.
    """
    _check_sanitized(mult)
    S = _slack_base(prob, mult)
    S[0, 0] -= z0
    if T is not None:
        S = T.T @ S @ T
    w, vecs = eigh(S)
    return SlackReport(S=S, z0=float(z0), lambda_min=float(w[0]), xi=vecs[:, 0], cushion=_eig_cushion(S), multipliers=mult, T=T)


def slack_residual(prob: BmProblem, point: BmPoint, S: np.ndarray) -> float:
    """``||S U||_F`` over the rows of ``S`` whose variables are free.

    Rows of units pinned by a zero-radius constraint are skipped: their
    stationarity condition would need an unbounded multiplier.
    """
    fixed_idx, _, _ = prob.pinned()
    pinned_units = fixed_idx[fixed_idx < prob.n]
    keep = np.setdiff1d(np.arange(prob.n + 1), pinned_units + 1)
    return float(np.linalg.norm((S @ point.factor())[keep]))


def dual_lower_bound(report: SlackReport, R: float, w_0: float = 0.0) -> float:
    """Sound lower bound ``w_0 + z0 + R^2 min(0, lambda_min - cushion)``."""
    return float(w_0 + report.z0 + R**2 * min(0.0, report.lambda_min - report.cushion))


def lagrangian_value(prob: BmProblem, point: BmPoint, mult: Multipliers) -> float:
    """Componentwise ``f + y.g + z.h - mu (tr X - R^2)``."""
    f, g, h = prob.evaluate(point)
    y, z = prob.pack(mult)
    # the trace entry of y carries -mu, which matches the -mu (tr X - R^2) term
    return float(f + y @ g + z @ h)


def slack_lagrangian(prob: BmProblem, point: BmPoint, mult: Multipliers, z0: float = 0.0) -> float:
    """The Lagrangian written through the slack matrix.

    ``z0 + mu R^2 + <S - mu I, U U^T>`` with ``S`` built for the given
    ``z0``; equal to :func:`lagrangian_value` for every ``z0``.
    """
    rep = slack_with_z0(prob, mult, z0)
    U = point.factor()
    X = U @ U.T
    mu = float(mult.mu)
    return float(z0 + mu * prob.R**2 + np.sum((rep.S - mu * np.eye(X.shape[0])) * X))


def _best_z0(A: np.ndarray, R2: float, cushion_fn) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Maximise ``z0 + R2 min(0, lambda_min(A - z0 e0 e0^T) - cushion)`` over ``z0``.

    The objective is concave in ``z0``; its slope is 1 while the eigenvalue
    stays above the cushion and ``1 - R2 xi_0^2`` afterwards.
    """

    def at(z0):
        S = A.copy()
        S[0, 0] -= z0
        w, vecs = eigh(S)
        c = cushion_fn(S)
        val = z0 + R2 * min(0.0, w[0] - c)
        slope = 1.0 if w[0] > c else 1.0 - R2 * vecs[0, 0] ** 2
        return val, slope, S, w, vecs

    B = A[1:, 1:]
    c_guess = cushion_fn(A)
    start = None
    try:
        cf = cho_factor(B - c_guess * np.eye(B.shape[0]))
        start = A[0, 0] - c_guess - A[1:, 0] @ cho_solve(cf, A[1:, 0])
    except np.linalg.LinAlgError:
        start = A[0, 0] - np.abs(A[1:, 0]).sum()
    val, slope, S, w, vecs = at(start)
    if abs(slope) < 1e-12:
        return val, start, S, (w, vecs)
    # bracket the sign change of the (non-increasing) slope
    step = max(1.0, abs(start)) * 1e-6
    lo = hi = start
    if slope > 0:
        for _ in range(80):
            hi = lo + step
            if at(hi)[1] <= 0:
                break
            lo, step = hi, step * 2.0
    else:
        for _ in range(80):
            lo = hi - step
            if at(lo)[1] >= 0:
                break
            hi, step = lo, step * 2.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if at(mid)[1] > 0:
            lo = mid
        else:
            hi = mid
    cands = [(at(z)[0], z) for z in (lo, hi, start)]
    val, z0 = max(cands)
    _, _, S, w, vecs = at(z0)
    return val, z0, S, (w, vecs)


def _shift_direction(prob: BmProblem, point: BmPoint) -> tuple[np.ndarray, np.ndarray]:
    """Unit shift of every active, non-pinned ball-type multiplier, as packed ``(y, z)``.

    Shifting an active ball row costs nothing to first order; pinned rows drop
    out of the reduced slack matrix and need no shift.
    """
    _, _, pinned_rows = prob.pinned()
    _, g, _ = prob.evaluate(point)
    dy = np.zeros(prob.num_ineq)
    row = 0
    for blk in prob.g_blocks:
        sl = slice(row, row + blk.size)
        if blk.kind == "ball":
            dy[sl] = g[sl] >= -1e-6 * (1.0 + prob.spec.radius**2)
        elif blk.kind == "elem":
            dy[sl] = g[sl] >= -1e-6 * (1.0 + blk.radius**2)
        row += blk.size
    dy[pinned_rows] = 0.0
    return dy, np.zeros(prob.num_eq)


def tighten_bound(prob: BmProblem, point: BmPoint, mult: Multipliers, w_0: float = 0.0) -> tuple[float, SlackReport]:
    """Improve the dual bound over a two-parameter family of multipliers.

    Starting from sanitized ``mult``, every active ball-type multiplier is
    shifted by ``t >= 0`` and ``z0`` is chosen optimally for each shift; units
    pinned by zero-radius rows are eliminated through :func:`reduction_basis`.
    The bound is concave in ``t`` and sound for every ``t``.
    Returns the best bound and its slack report.
    """
    _check_sanitized(mult)
    R2 = prob.R**2
    T = reduction_basis(prob)
    dy, _ = _shift_direction(prob, point)
    y_base, z_base = prob.pack(mult)

    def evaluate(t):
        m = prob.unpack(y_base + t * dy, z_base)
        A = _slack_base(prob, m)
        if T is not None:
            A = T.T @ A @ T
        val, z0, S, (w, vecs) = _best_z0(A, R2, _eig_cushion)
        return val, m, z0, S, w, vecs

    best = evaluate(0.0)
    if np.any(dy):
        # golden-section search on log10(t); the bound is unimodal in t
        a, b = -8.0, 12.0
        gr = (np.sqrt(5.0) - 1.0) / 2.0
        c, d = b - gr * (b - a), a + gr * (b - a)
        fc, fd = evaluate(10.0**c), evaluate(10.0**d)
        for _ in range(40):
            if fc[0] >= fd[0]:
                b, d, fd = d, c, fc
                c = b - gr * (b - a)
                fc = evaluate(10.0**c)
            else:
                a, c, fc = c, d, fd
                d = a + gr * (b - a)
                fd = evaluate(10.0**d)
        for cand in (fc, fd):
            if cand[0] > best[0]:
                best = cand
    val, m, z0, S, w, vecs = best
    report = SlackReport(S=S, z0=float(z0), lambda_min=float(w[0]), xi=vecs[:, 0], cushion=_eig_cushion(S), multipliers=m, T=T)
    return dual_lower_bound(report, prob.R, w_0), report
