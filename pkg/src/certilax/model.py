"""Feedforward ReLU networks, margin objectives and preactivation bounds."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .exceptions import InvalidInputError

if TYPE_CHECKING:
    from .attack import AttackSpec


@dataclass(frozen=True)
class MlpNetwork:
    """A dense ReLU network ``f(x) = W_l x_l + b_l`` with ``x_{k+1} = relu(W_k x_k + b_k)``.

    ``weights`` and ``biases`` hold every layer in order; the last pair is the
    (linear) output layer. A single layer is a plain linear classifier.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise InvalidInputError("need one bias per weight matrix and at least one layer")
        ws, bs = [], []
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            W = np.array(W, dtype=float, copy=True)
            b = np.array(b, dtype=float, copy=True).reshape(-1)
            if W.ndim != 2:
                raise InvalidInputError(f"layer {k}: weight matrix must be 2-D")
            if W.shape[0] != b.shape[0]:
                raise InvalidInputError(f"layer {k}: {W.shape[0]} rows but bias of length {b.shape[0]}")
            if k > 0 and W.shape[1] != ws[-1].shape[0]:
                raise InvalidInputError(
                    f"layer {k}: expects {W.shape[1]} inputs, previous layer emits {ws[-1].shape[0]}"
                )
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise InvalidInputError(f"layer {k}: non-finite entries")
            W.setflags(write=False)
            b.setflags(write=False)
            ws.append(W)
            bs.append(b)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @classmethod
    def from_layers(cls, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> "MlpNetwork":
        return cls(tuple(W for W, _ in layers), tuple(b for _, b in layers))

    @property
    def num_layers(self) -> int:
        """Number of layers ``l`` (hidden layers plus the output layer)."""
        return len(self.weights)

    @property
    def hidden_layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.weights[:-1], self.biases[:-1]))

    @property
    def output_layer(self) -> tuple[np.ndarray, np.ndarray]:
        return self.weights[-1], self.biases[-1]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_dims(self) -> list[int]:
        """Sizes ``n_1, ..., n_l`` of the input and hidden layers."""
        return [W.shape[1] for W in self.weights]

    @property
    def num_hidden(self) -> int:
        return int(sum(self.layer_dims[1:]))


@dataclass(frozen=True)
class MarginObjective:
    """Margin ``logits[true] - logits[target] = w_ell . x_l + w_0``."""

    w_ell: np.ndarray
    w_0: float


@dataclass
class PreactivationBounds:
    """Elementwise input box and hidden preactivation bounds.

    ``lbs[k]``/``ubs[k]`` bound the preactivation ``W_{k+1} x_{k+1} + b_{k+1}``
    feeding hidden layer ``k + 2`` (0-based list over hidden layers).
    """

    input_lo: np.ndarray
    input_hi: np.ndarray
    lbs: list[np.ndarray] = field(default_factory=list)
    ubs: list[np.ndarray] = field(default_factory=list)

    @property
    def input_center(self) -> np.ndarray:
        return 0.5 * (self.input_hi + self.input_lo)

    @property
    def input_radius(self) -> np.ndarray:
        return 0.5 * (self.input_hi - self.input_lo)

    @property
    def post_lo(self) -> list[np.ndarray]:
        return [np.maximum(lb, 0.0) for lb in self.lbs]

    @property
    def post_hi(self) -> list[np.ndarray]:
        return [np.maximum(ub, 0.0) for ub in self.ubs]

    @property
    def centers(self) -> list[np.ndarray]:
        """Centers of the post-activation intervals of each hidden layer."""
        return [0.5 * (hi + lo) for lo, hi in zip(self.post_lo, self.post_hi)]

    @property
    def radii(self) -> list[np.ndarray]:
        return [0.5 * (hi - lo) for lo, hi in zip(self.post_lo, self.post_hi)]


def forward(net: MlpNetwork, x) -> tuple[list[np.ndarray], np.ndarray]:
    """Evaluate ``net`` at ``x``.

    Returns the activations ``[x_1, ..., x_l]`` (input first) and the logits.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (net.input_dim,):
        raise InvalidInputError(f"input must have shape ({net.input_dim},), got {x.shape}")
    acts = [x]
    for W, b in net.hidden_layers:
        acts.append(np.maximum(W @ acts[-1] + b, 0.0))
    W, b = net.output_layer
    return acts, W @ acts[-1] + b


def predict(net: MlpNetwork, x) -> int:
    return int(np.argmax(forward(net, x)[1]))


def margin_objective(net: MlpNetwork, true_class: int, target_class: int) -> MarginObjective:
    q = net.num_classes
    if true_class == target_class:
        raise InvalidInputError("true and target class must differ")
    if not (0 <= true_class < q and 0 <= target_class < q):
        raise InvalidInputError(f"class indices must lie in [0, {q})")
    W, b = net.output_layer
    return MarginObjective(w_ell=W[true_class] - W[target_class], w_0=float(b[true_class] - b[target_class]))


def margin_at(net: MlpNetwork, mobj: MarginObjective, x) -> float:
    acts, _ = forward(net, x)
    return float(mobj.w_ell @ acts[-1] + mobj.w_0)


def _bound_linear(A: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Ap, An = np.maximum(A, 0.0), np.minimum(A, 0.0)
    return Ap @ lo + An @ hi, Ap @ hi + An @ lo


def _concretize_lower(A, c, spec, lo, hi):
    """Lower bound of ``A x + c`` over the feasible input region (rows of ``A``)."""
    box = np.maximum(A, 0.0) @ lo + np.minimum(A, 0.0) @ hi
    if spec.norm == "l2":
        ball = A @ spec.x_hat - spec.radius * np.linalg.norm(A, axis=1)
        box = np.maximum(box, ball)
    return box + c


def _backward_lower(net, spec, bounds_lo, bounds_hi, layer, C):
    """Backward-linear lower bound of ``C @ preact[layer]``.

    ``layer`` indexes ``net.weights``; ``bounds_lo/hi[j]`` bound the
    preactivation of layer ``j`` for every ``j < layer``.
    """
    W, b = net.weights[layer], net.biases[layer]
    const = C @ b
    A = C @ W
    for j in range(layer - 1, -1, -1):
        l, u = bounds_lo[j], bounds_hi[j]
        active = l >= 0
        unstable = (l < 0) & (u > 0)
        slope_up = np.where(active, 1.0, 0.0)
        icpt_up = np.zeros_like(l)
        denom = np.where(unstable, u - l, 1.0)
        slope_up = np.where(unstable, u / denom, slope_up)
        icpt_up = np.where(unstable, -u * l / denom, icpt_up)
        slope_lo = np.where(active, 1.0, 0.0)
        slope_lo = np.where(unstable & (u > -l), 1.0, slope_lo)
        Ap, An = np.maximum(A, 0.0), np.minimum(A, 0.0)
        const = const + An @ icpt_up
        A = Ap * slope_lo + An * slope_up
        const = const + A @ net.biases[j]
        A = A @ net.weights[j]
    lo, hi = spec.input_box()
    return _concretize_lower(A, const, spec, lo, hi)


def interval_bounds(net: MlpNetwork, spec: "AttackSpec", linear: bool = False) -> PreactivationBounds:
    """Sound preactivation bounds over the input region of ``spec``.

    Interval arithmetic over the enclosing input box; with ``linear=True`` each
    layer is additionally tightened by a backward-linear pass and the tighter
    of the two bounds is kept.
    """
    if spec.x_hat.shape != (net.input_dim,):
        raise InvalidInputError(f"x_hat must have shape ({net.input_dim},)")
    lo, hi = spec.input_box()
    lbs, ubs = [], []
    post_lo, post_hi = lo, hi
    for k, (W, b) in enumerate(net.hidden_layers):
        lb, ub = _bound_linear(W, post_lo, post_hi)
        lb, ub = lb + b, ub + b
        if linear:
            n = W.shape[0]
            eye = np.eye(n)
            lb = np.maximum(lb, _backward_lower(net, spec, lbs, ubs, k, eye))
            ub = np.minimum(ub, -_backward_lower(net, spec, lbs, ubs, k, -eye))
            ub = np.maximum(ub, lb)
        lbs.append(lb)
        ubs.append(ub)
        post_lo, post_hi = np.maximum(lb, 0.0), np.maximum(ub, 0.0)
    return PreactivationBounds(input_lo=lo.copy(), input_hi=hi.copy(), lbs=lbs, ubs=ubs)


def baseline_margin_bound(
    net: MlpNetwork, spec: "AttackSpec", bounds: PreactivationBounds, linear: bool = False
) -> float:
    """Cheap sound lower bound on the attack margin from propagated bounds."""
    mobj = margin_objective(net, spec.true_class, spec.target_class)
    if net.num_layers == 1:
        lo, hi = bounds.input_lo, bounds.input_hi
    else:
        lo, hi = bounds.post_lo[-1], bounds.post_hi[-1]
    best = float(_bound_linear(mobj.w_ell[None, :], lo, hi)[0][0]) + mobj.w_0
    if linear or net.num_layers == 1:
        W, b = net.output_layer
        row = (W[spec.true_class] - W[spec.target_class])[None, :]
        if net.num_layers == 1:
            lin = _concretize_lower(row, np.zeros(1), spec, *spec.input_box())[0]
        else:
            # treat the margin row as an extra layer on top of the last hidden one
            ext = MlpNetwork(net.weights[:-1] + (row,), net.biases[:-1] + (np.zeros(1),))
            lin = _backward_lower(ext, spec, bounds.lbs, bounds.ubs, net.num_layers - 1, np.eye(1))[0]
        best = max(best, float(lin) + mobj.w_0)
    return best


def random_network(dims: Sequence[int], seed: int) -> MlpNetwork:
    """Seeded dense network with entries drawn from ``N(0, 1/fan_in)``.

    ``dims`` lists every layer width including input and output.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise InvalidInputError("dims must list at least an input and an output width, all positive")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        ws.append(rng.standard_normal((fan_out, fan_in)) * scale)
        bs.append(rng.standard_normal(fan_out) * scale)
    return MlpNetwork(tuple(ws), tuple(bs))


def network_to_dict(net: MlpNetwork) -> dict:
    return {
        "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in zip(net.weights, net.biases)],
        "meta": {"input_dim": net.input_dim, "classes": net.num_classes},
    }


def network_from_dict(doc: dict) -> MlpNetwork:
    try:
        layers = doc["layers"]
        ws = tuple(np.asarray(layer["W"], dtype=float) for layer in layers)
        bs = tuple(np.asarray(layer["b"], dtype=float) for layer in layers)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed model document: {exc}") from exc
    net = MlpNetwork(ws, bs)
    meta = doc.get("meta", {})
    if "input_dim" in meta and int(meta["input_dim"]) != net.input_dim:
        raise InvalidInputError(f"meta.input_dim={meta['input_dim']} but first layer takes {net.input_dim}")
    if "classes" in meta and int(meta["classes"]) != net.num_classes:
        raise InvalidInputError(f"meta.classes={meta['classes']} but output layer has {net.num_classes} rows")
    return net


def load_network(path: str | Path) -> MlpNetwork:
    with open(path) as fh:
        return network_from_dict(json.load(fh))


def save_network(net: MlpNetwork, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n")
