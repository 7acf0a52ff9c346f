"""Importance scores and mask construction.

Score tables hold one entry per *unmasked* parameter (or parameter group) in a
fixed key order, so pruning rounds compose: entries removed by an earlier mask
never reappear. Masks are built by dropping the lowest scores; ties are broken
by key order, lower key dropped first.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward, forward
from .connectivity import (
    CollapseWarning,
    LOG_EPS,
    Mode,
    connectivity_on_tape,
    node_connectivity,
    normalize,
)
from .network import LayeredNetwork, PruneMask, add_to_tape

__all__ = [
    "PruneError",
    "NumericError",
    "ImportanceTable",
    "PruneSpec",
    "score_magnitude",
    "score_synflow",
    "score_channels",
    "score_loss_aware",
    "objective_saliency",
    "group_by_node",
    "build_mask",
    "score",
    "METHODS",
]

GRANULARITIES = ("weight", "node", "scaling")


class PruneError(ValueError):
    """A prune request that cannot be honoured."""


class NumericError(FloatingPointError):
    """Non-finite gradient during scoring."""


@dataclass
class ImportanceTable:
    """Scores keyed by ``(layer, row, col)`` (weights) or ``(layer, index)`` (nodes, scaling entries).

    For ``node`` granularity ``layer`` is the hidden node layer; for ``scaling``
    it is the weight-layer index the scaling vector follows.
    """

    granularity: str
    method: str
    keys: list[tuple[int, ...]]
    scores: np.ndarray
    base_mask: PruneMask
    layers: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.keys) != self.scores.size:
            raise ValueError("keys and scores differ in length")

    def __len__(self):
        return len(self.keys)

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return {k: float(s) for k, s in zip(self.keys, self.scores)}

    def layer_scores(self, layer: int) -> np.ndarray:
        return np.array([s for k, s in zip(self.keys, self.scores) if k[0] == layer])

    def to_records(self) -> list[dict]:
        return [{"key": list(k), "score": float(s)} for k, s in zip(self.keys, self.scores)]

    def to_dict(self) -> dict:
        return {
            "granularity": self.granularity,
            "method": self.method,
            "entries": self.to_records(),
        }


@dataclass(frozen=True)
class PruneSpec:
    fraction: float
    scope: str = "local"

    def __post_init__(self):
        if not 0.0 <= self.fraction < 1.0:
            raise ValueError(f"prune fraction must be in [0, 1), got {self.fraction}")
        if self.scope not in ("local", "global"):
            raise ValueError(f"scope must be 'local' or 'global', got {self.scope!r}")


def _full_mask(net: LayeredNetwork) -> PruneMask:
    base = PruneMask.ones_like(net)
    return base if net.mask is None else base & net.mask


def _weight_table(net: LayeredNetwork, per_layer: list[np.ndarray], method: str) -> ImportanceTable:
    mask = _full_mask(net)
    keys, scores = [], []
    for k, (s, m) in enumerate(zip(per_layer, mask.weights)):
        rows, cols = np.nonzero(m)  # row-major order
        keys.extend((k, int(r), int(c)) for r, c in zip(rows, cols))
        scores.append(s[rows, cols])
    return ImportanceTable("weight", method, keys, np.concatenate(scores), mask, tuple(range(len(net.weights))))


def score_magnitude(net: LayeredNetwork) -> ImportanceTable:
    return _weight_table(net, [np.abs(w) for w in net.weights], "magnitude")


def score_synflow(net: LayeredNetwork, mode: Mode | str = Mode.NORMALIZED) -> ImportanceTable:
    """Per-weight share of total connectivity, a_in * theta * a_out."""
    profile = node_connectivity(normalize(net, mode))
    if profile.phi_total == 0.0:
        warnings.warn("network is collapsed; every synflow score is zero", CollapseWarning)
    flows = [profile.edge_flow(i) for i, e in enumerate(profile.view.edges) if e.kind == "dense"]
    return _weight_table(net, flows, "synflow")


def score_channels(net: LayeredNetwork) -> ImportanceTable:
    """Connectivity flowing through each scaling entry (normalized |delta|)."""
    if not net.scaling:
        raise PruneError("network has no scaling layers to score")
    profile = node_connectivity(normalize(net, Mode.NORMALIZED))
    if profile.phi_total == 0.0:
        warnings.warn("network is collapsed; every channel score is zero", CollapseWarning)
    mask = _full_mask(net)
    keys, scores = [], []
    for i, e in enumerate(profile.view.edges):
        if e.kind != "scale":
            continue
        flow = profile.edge_flow(i)
        for c in np.flatnonzero(mask.scaling[e.layer]):
            keys.append((e.layer, int(c)))
            scores.append(flow[c])
    return ImportanceTable("scaling", "channel", keys, np.array(scores), mask, tuple(sorted(net.scaling)))


def objective_saliency(tape: Tape) -> dict[str, np.ndarray]:
    """|dJ/dp * p| for every parameter leaf of a tape whose exit is the objective J."""
    forward(tape)
    grads = backward(tape)
    out = {}
    for node in tape.params:
        g = grads[node.name]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {node.name}")
        out[node.name] = np.abs(g * node.value)
    return out


def group_by_node(net: LayeredNetwork, table: ImportanceTable, method: str | None = None) -> ImportanceTable:
    """Sum weight scores into hidden-node groups (incoming row plus outgoing column)."""
    if table.granularity != "weight":
        raise ValueError("can only group a per-weight table")
    per_layer = [np.zeros(w.shape) for w in net.weights]
    for (k, r, c), s in zip(table.keys, table.scores):
        per_layer[k][r, c] = s
    mask = table.base_mask
    keys, scores = [], []
    for layer in range(1, len(net.sizes) - 1):
        w_in, w_out = mask.weights[layer - 1], mask.weights[layer]
        for j in range(net.sizes[layer]):
            if not (w_in[j, :].any() or w_out[:, j].any()):
                continue
            keys.append((layer, j))
            scores.append(per_layer[layer - 1][j, :].sum() + per_layer[layer][:, j].sum())
    return ImportanceTable("node", method or table.method, keys, np.array(scores), mask,
                           tuple(range(1, len(net.sizes) - 1)))


def score_loss_aware(
    net: LayeredNetwork,
    x: np.ndarray,
    y: np.ndarray,
    lam: float,
    *,
    granularity: str = "weight",
    conn_samples: int = 1,
    seed: int = 0,
    mode: Mode | str = Mode.SIGNAL_FLOW,
) -> ImportanceTable:
    """One-shot importance |dJ/dW * W| with J = BCE - lam * log(connectivity).

    In the default signal-flow mode the connectivity term uses raw magnitudes
    |W| and adds |b| at every layer; normalized mode drops the biases.
    ``conn_samples`` > 1 replaces the all-ones connectivity input with that
    many uniform(0, 1) rows.
    """
    mode = Mode(mode)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1, net.sizes[-1])
    if x.shape[0] == 0:
        raise ValueError("loss-aware scoring needs a nonempty batch")
    tape = Tape()
    xn = tape.constant("x", x)
    yn = tape.constant("y", y)
    logits = add_to_tape(net, tape, xn)
    leaves = tape.leaves
    objective = tape.bce_logits(logits, yn)
    if lam != 0.0:
        inputs = None
        if conn_samples > 1:
            inputs = np.random.default_rng(seed).uniform(0.0, 1.0, size=(conn_samples, net.sizes[0]))
        phi = connectivity_on_tape(tape, net, leaves, mode, with_biases=mode is Mode.SIGNAL_FLOW, inputs=inputs)
        objective = tape.add(objective, tape.scale(tape.log(phi, floor=LOG_EPS), -lam))
    tape.set_exit(objective)
    try:
        sal = objective_saliency(tape)
    except NumericError as exc:
        raise NumericError(f"loss-aware scoring: {exc}") from None
    table = _weight_table(net, [sal[f"W{k}"] for k in range(len(net.weights))], "loss-aware")
    if granularity == "node":
        return group_by_node(net, table)
    if granularity != "weight":
        raise ValueError(f"loss-aware scoring supports weight or node granularity, not {granularity!r}")
    return table


def _n_drop(fraction: float, n: int) -> int:
    # tolerance absorbs binary representation error, e.g. 0.29 * 100
    return int(math.floor(fraction * n + 1e-9))


def build_mask(table: ImportanceTable, spec: PruneSpec) -> PruneMask:
    """Drop the lowest-scored entries, per layer (local) or over the whole table (global)."""
    order = sorted(range(len(table.keys)), key=lambda i: (table.scores[i], table.keys[i]))
    if spec.scope == "global":
        dropped = order[:_n_drop(spec.fraction, len(order))]
    else:
        by_layer: dict[int, list[int]] = {layer: [] for layer in table.layers}
        for i in order:
            by_layer.setdefault(table.keys[i][0], []).append(i)
        dropped = []
        for layer, members in by_layer.items():
            n = _n_drop(spec.fraction, len(members))
            if n >= len(members):
                raise PruneError(f"pruning would leave layer {layer} ({table.granularity}) empty")
            dropped.extend(members[:n])

    mask = table.base_mask.copy()
    for i in dropped:
        key = table.keys[i]
        if table.granularity == "weight":
            mask.weights[key[0]][key[1], key[2]] = False
        elif table.granularity == "scaling":
            mask.scaling[key[0]][key[1]] = False
        else:
            layer, j = key
            mask.weights[layer - 1][j, :] = False
            mask.weights[layer][:, j] = False
    return mask


METHODS = ("magnitude", "synflow", "channel", "loss-aware")


def score(net: LayeredNetwork, method: str, **kwargs) -> ImportanceTable:
    """Dispatch by method name; ``loss-aware`` needs ``x``, ``y`` and ``lam``."""
    if method == "magnitude":
        return score_magnitude(net)
    if method == "synflow":
        return score_synflow(net, kwargs.get("mode", Mode.NORMALIZED))
    if method == "channel":
        return score_channels(net)
    if method == "loss-aware":
        return score_loss_aware(net, kwargs["x"], kwargs["y"], kwargs.get("lam", 0.0),
                                granularity=kwargs.get("granularity", "weight"),
                                conn_samples=kwargs.get("conn_samples", 1),
                                seed=kwargs.get("seed", 0),
                                mode=kwargs.get("mode", Mode.SIGNAL_FLOW))
    raise ValueError(f"unknown pruning method {method!r}; expected one of {METHODS}")
