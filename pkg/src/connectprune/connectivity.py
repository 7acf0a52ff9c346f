"""Path connectivity of layered networks.

The network is viewed as a chain of *edge sets*: every weight matrix is one
edge set, and every scaling layer is a diagonal edge set between a node layer
and its scaled copy. Node vectors between edge sets are called *stages*; stage
0 is the input layer and the last stage is the output layer.

Total connectivity is the sum over all input-to-output paths of the product of
(normalized) edge weights along the path, evaluated as one linear forward
sweep from an all-ones input.
"""

from __future__ import annotations

import enum
import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape, backward, forward
from .network import LayeredNetwork

__all__ = [
    "Mode",
    "LOG_EPS",
    "CollapseWarning",
    "PathLimitError",
    "EdgeSet",
    "NormalizedView",
    "ConnectivityProfile",
    "LayerMass",
    "CollapseReport",
    "RegularizerValue",
    "normalize",
    "phi_total",
    "total_connectivity",
    "phi_total_oracle",
    "node_connectivity",
    "theta_gradient",
    "connectivity_on_tape",
    "connect_regularizer",
    "detect_collapse",
]

LOG_EPS = 1e-12


class Mode(str, enum.Enum):
    NORMALIZED = "normalized"
    SIGNAL_FLOW = "signal-flow"


class CollapseWarning(RuntimeWarning):
    """Total connectivity fell to (or below) the log guard."""


class PathLimitError(RuntimeError):
    """Path enumeration refused because the network has too many paths."""


@dataclass(frozen=True)
class EdgeSet:
    kind: str  # "dense" or "scale"
    layer: int  # weight-layer index the edge set belongs to
    theta: np.ndarray  # (out, in) for dense, (n,) for scale
    mass: float  # L1 mass of the raw parameters
    collapsed: bool


@dataclass(frozen=True)
class NormalizedView:
    mode: Mode
    sizes: tuple[int, ...]
    edges: tuple[EdgeSet, ...]

    @property
    def collapsed(self) -> bool:
        return any(e.collapsed for e in self.edges)

    def stage_widths(self) -> list[int]:
        widths = [self.sizes[0]]
        for e in self.edges:
            widths.append(e.theta.shape[0])
        return widths

    def node_stage(self, layer: int) -> int:
        """Stage index of node layer ``layer`` (pre-scaling side)."""
        return sum(
            1 for e in self.edges
            if (e.layer + 1 <= layer if e.kind == "dense" else e.layer + 1 < layer)
        )


def _theta(raw: np.ndarray, mode: Mode) -> tuple[np.ndarray, float, bool]:
    mag = np.abs(raw)
    mass = float(mag.sum())
    if mode is Mode.SIGNAL_FLOW:
        return mag, mass, mass == 0.0
    if mass == 0.0:
        return np.zeros_like(mag), 0.0, True
    return mag / mass, mass, False


def normalize(net: LayeredNetwork, mode: Mode | str = Mode.NORMALIZED) -> NormalizedView:
    """Per-edge-set L1 normalization of |W| and |delta| (or raw magnitudes in signal-flow mode)."""
    mode = Mode(mode)
    edges = []
    for k, w in enumerate(net.weights):
        theta, mass, dead = _theta(w, mode)
        edges.append(EdgeSet("dense", k, theta, mass, dead))
        if k in net.scaling:
            theta, mass, dead = _theta(net.scaling[k], mode)
            edges.append(EdgeSet("scale", k, theta, mass, dead))
    return NormalizedView(mode, net.sizes, tuple(edges))


def _sweep_forward(view: NormalizedView) -> list[np.ndarray]:
    a = np.ones(view.sizes[0])
    stages = [a]
    for e in view.edges:
        a = e.theta @ a if e.kind == "dense" else e.theta * a
        stages.append(a)
    return stages


def _sweep_backward(view: NormalizedView) -> list[np.ndarray]:
    a = np.ones(view.edges[-1].theta.shape[0]) if view.edges else np.ones(view.sizes[0])
    stages = [a]
    for e in reversed(view.edges):
        a = a @ e.theta if e.kind == "dense" else e.theta * a
        stages.append(a)
    return stages[::-1]


def phi_total(view: NormalizedView) -> float:
    """Total input-to-output connectivity via one forward pass of ones."""
    return float(_sweep_forward(view)[-1].sum())


def total_connectivity(net: LayeredNetwork, mode: Mode | str = Mode.NORMALIZED) -> float:
    return phi_total(normalize(net, mode))


def phi_total_oracle(net: LayeredNetwork, mode: Mode | str = Mode.NORMALIZED, *, max_paths: int = 10**7) -> float:
    """Explicitly enumerate every input-to-output path and sum the path weights.

    Normalization is recomputed here entry by entry so the result does not
    depend on :func:`normalize` or the sweep code.
    """
    mode = Mode(mode)
    n_paths = math.prod(net.sizes)
    if n_paths > max_paths:
        raise PathLimitError(f"{n_paths} paths exceeds the enumeration limit {max_paths}; use phi_total")

    def norm_table(values):
        flat = [abs(float(v)) for v in np.asarray(values).ravel()]
        if mode is Mode.SIGNAL_FLOW:
            return flat
        total = math.fsum(flat)
        return [0.0] * len(flat) if total == 0.0 else [v / total for v in flat]

    dense = []
    for w in net.weights:
        rows, cols = w.shape
        flat = norm_table(w)
        dense.append([[flat[r * cols + c] for c in range(cols)] for r in range(rows)])
    scale = {k: norm_table(d) for k, d in net.scaling.items()}

    total = 0.0
    for path in itertools.product(*(range(s) for s in net.sizes)):
        weight = 1.0
        for k in range(len(dense)):
            weight *= dense[k][path[k + 1]][path[k]]
            if k in scale:
                weight *= scale[k][path[k + 1]]
            if weight == 0.0:
                break
        total += weight
    return total


@dataclass(frozen=True)
class ConnectivityProfile:
    """Per-stage input-side (``a_in``) and output-side (``a_out``) connectivity."""

    phi_total: float
    a_in: tuple[np.ndarray, ...]
    a_out: tuple[np.ndarray, ...]
    view: NormalizedView

    def node_in(self, layer: int) -> np.ndarray:
        return self.a_in[self.view.node_stage(layer)]

    def node_out(self, layer: int) -> np.ndarray:
        return self.a_out[self.view.node_stage(layer)]

    def edge_flow(self, index: int) -> np.ndarray:
        """Connectivity carried by each edge of edge set ``index``."""
        e = self.view.edges[index]
        if e.kind == "dense":
            return self.a_out[index + 1][:, None] * e.theta * self.a_in[index][None, :]
        return self.a_in[index] * e.theta * self.a_out[index + 1]

    def to_dict(self) -> dict:
        return {
            "phi_total": self.phi_total,
            "mode": self.view.mode.value,
            "layers": [
                {
                    "layer": k,
                    "a_in": self.node_in(k).tolist(),
                    "a_out": self.node_out(k).tolist(),
                }
                for k in range(len(self.view.sizes))
            ],
        }


def node_connectivity(view: NormalizedView) -> ConnectivityProfile:
    a_in = _sweep_forward(view)
    a_out = _sweep_backward(view)
    return ConnectivityProfile(float(a_in[-1].sum()), tuple(a_in), tuple(a_out), view)


def theta_gradient(view: NormalizedView) -> list[np.ndarray]:
    """d(phi_total)/d(theta) for every edge set, by reverse-mode differentiation."""
    tape = Tape()
    a = tape.constant("ones", np.ones((1, view.sizes[0])))
    for i, e in enumerate(view.edges):
        theta = tape.leaf(f"theta{i}", e.theta if e.kind == "dense" else e.theta.reshape(1, -1))
        a = tape.matmul(a, tape.transpose(theta)) if e.kind == "dense" else tape.mul(a, theta)
    tape.set_exit(tape.sum(a))
    forward(tape)
    grads = backward(tape)
    return [
        grads[f"theta{i}"] if e.kind == "dense" else grads[f"theta{i}"].ravel()
        for i, e in enumerate(view.edges)
    ]


def connectivity_on_tape(
    tape: Tape,
    net: LayeredNetwork,
    leaves: dict[str, Node],
    mode: Mode | str = Mode.NORMALIZED,
    *,
    with_biases: bool = False,
    inputs: np.ndarray | None = None,
    prefix: str = "conn",
) -> Node:
    """Record the connectivity forward pass on ``tape`` and return the total.

    Args:
        leaves: parameter leaves keyed as in ``LayeredNetwork.parameters()``.
        with_biases: add |b| at every layer (signal-flow scoring only).
        inputs: rows of connectivity inputs; defaults to a single row of ones.
            With several rows the total is averaged over rows.
    """
    mode = Mode(mode)
    if inputs is None:
        inputs = np.ones((1, net.sizes[0]))
    a = tape.constant(f"{prefix}:input", inputs)

    def edge_weights(leaf):
        mag = tape.abs(leaf)
        if mode is Mode.SIGNAL_FLOW:
            return mag
        return tape.div(mag, tape.sum(mag), zero_safe=True)

    for k in range(len(net.weights)):
        a = tape.matmul(a, tape.transpose(edge_weights(leaves[f"W{k}"])))
        if with_biases:
            a = tape.add(a, tape.abs(leaves[f"b{k}"]))
        if k in net.scaling:
            a = tape.mul(a, edge_weights(leaves[f"delta{k}"]))
    total = tape.sum(a)
    if inputs.shape[0] > 1:
        total = tape.scale(total, 1.0 / inputs.shape[0])
    return total


@dataclass(frozen=True)
class RegularizerValue:
    value: float  # -log(max(phi, eps)) or -phi
    phi_total: float
    grads: dict[str, np.ndarray]


def connect_regularizer(net: LayeredNetwork, *, log: bool = True, mode: Mode | str = Mode.NORMALIZED) -> RegularizerValue:
    """The connectivity regularizer and its gradient with respect to every parameter.

    With ``log`` (the default) returns -log(max(phi, 1e-12)); otherwise -phi.
    """
    tape = Tape()
    leaves = {name: tape.leaf(name, v.reshape(1, -1) if v.ndim == 1 else v) for name, v in net.parameters().items()}
    phi = connectivity_on_tape(tape, net, leaves, mode)
    exit_node = tape.scale(tape.log(phi, floor=LOG_EPS), -1.0) if log else tape.scale(phi, -1.0)
    tape.set_exit(exit_node)
    value = forward(tape)
    phi_value = float(phi.value[0, 0])
    if log and phi_value <= LOG_EPS:
        warnings.warn(f"total connectivity {phi_value:.3g} is at the log guard; network has collapsed", CollapseWarning)
    grads = backward(tape)
    shaped = {name: g.reshape(net.parameters()[name].shape) for name, g in grads.items()}
    return RegularizerValue(value, phi_value, shaped)


@dataclass(frozen=True)
class LayerMass:
    kind: str
    layer: int
    l1_mass: float
    surviving: int
    size: int
    collapsed: bool


@dataclass(frozen=True)
class CollapseReport:
    collapsed: bool
    phi_total: float
    layers: tuple[LayerMass, ...]

    def to_dict(self) -> dict:
        return {
            "collapsed": self.collapsed,
            "phi_total": self.phi_total,
            "layers": [vars(m) for m in self.layers],
        }


def detect_collapse(net: LayeredNetwork) -> CollapseReport:
    """Report whether any input-to-output path survives, plus per-edge-set mass."""
    view = normalize(net)
    phi = phi_total(view)
    layers = []
    raw = []
    for k, w in enumerate(net.weights):
        raw.append(("dense", k, w))
        if k in net.scaling:
            raw.append(("scale", k, net.scaling[k]))
    for (kind, k, values), e in zip(raw, view.edges):
        layers.append(LayerMass(kind, k, e.mass, int(np.count_nonzero(values)), int(values.size), e.collapsed))
    return CollapseReport(phi == 0.0, phi, tuple(layers))
