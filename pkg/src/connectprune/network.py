"""Layered feed-forward networks, prune masks and the binary model format.

Weight matrix ``weights[k]`` maps layer ``k`` to layer ``k + 1`` and has shape
``(sizes[k + 1], sizes[k])``. Layers are indexed from 0 here; a scaling layer
keyed ``k`` multiplies the activations produced by ``weights[k]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Tape

__all__ = [
    "FormatError",
    "PruneMask",
    "LayeredNetwork",
    "init_random",
    "predict",
    "apply_mask",
    "serialize",
    "deserialize",
    "save",
    "load",
    "add_to_tape",
]

ACTIVATIONS = ("relu", "sigmoid", "linear")
MAGIC = b"CNPR"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed model payload."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return _sigmoid(z)
    return z


@dataclass
class PruneMask:
    """Keep (True) / drop (False) flags aligned with weights and scaling vectors."""

    weights: list[np.ndarray]
    scaling: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def ones_like(cls, net: "LayeredNetwork") -> "PruneMask":
        return cls(
            [np.ones(w.shape, dtype=bool) for w in net.weights],
            {k: np.ones(d.shape, dtype=bool) for k, d in net.scaling.items()},
        )

    def __and__(self, other: "PruneMask") -> "PruneMask":
        scaling = {k: v.copy() for k, v in self.scaling.items()}
        for k, v in other.scaling.items():
            scaling[k] = scaling[k] & v if k in scaling else v.copy()
        return PruneMask([a & b for a, b in zip(self.weights, other.weights)], scaling)

    def copy(self) -> "PruneMask":
        return PruneMask([m.copy() for m in self.weights], {k: v.copy() for k, v in self.scaling.items()})

    def kept(self) -> int:
        return int(sum(m.sum() for m in self.weights) + sum(v.sum() for v in self.scaling.values()))

    def __eq__(self, other):
        if not isinstance(other, PruneMask):
            return NotImplemented
        return (
            len(self.weights) == len(other.weights)
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and self.scaling.keys() == other.scaling.keys()
            and all(np.array_equal(v, other.scaling[k]) for k, v in self.scaling.items())
        )


@dataclass
class LayeredNetwork:
    """The (W, b) tuple of a layered DAG plus optional per-node scaling factors."""

    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    scaling: dict[int, np.ndarray] = field(default_factory=dict)
    mask: PruneMask | None = None

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.validate()

    @property
    def depth(self) -> int:
        """Number of node layers K."""
        return len(self.sizes)

    def validate(self) -> None:
        K = len(self.sizes)
        if K < 2:
            raise ValueError(f"a network needs at least 2 layers, got {K}")
        if any(s < 1 for s in self.sizes):
            raise ValueError(f"layer sizes must be >= 1, got {self.sizes}")
        if len(self.weights) != K - 1 or len(self.biases) != K - 1 or len(self.activations) != K - 1:
            raise ValueError("need exactly K-1 weight matrices, bias vectors and activations")
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            expect = (self.sizes[k + 1], self.sizes[k])
            if w.shape != expect:
                raise ValueError(f"weights[{k}] has shape {w.shape}, expected {expect}")
            if b.shape != (self.sizes[k + 1],):
                raise ValueError(f"biases[{k}] has shape {b.shape}, expected ({self.sizes[k + 1]},)")
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {k} has non-finite entries")
        for k, d in self.scaling.items():
            if not 0 <= k < K - 1:
                raise ValueError(f"scaling layer index {k} out of range")
            if d.shape != (self.sizes[k + 1],):
                raise ValueError(f"scaling[{k}] has length {d.shape}, expected {self.sizes[k + 1]}")
            if not np.isfinite(d).all():
                raise ValueError(f"scaling[{k}] has non-finite entries")
        if self.mask is not None:
            for k, (m, w) in enumerate(zip(self.mask.weights, self.weights)):
                if m.shape != w.shape:
                    raise ValueError(f"mask for weights[{k}] has shape {m.shape}, expected {w.shape}")
            for k, m in self.mask.scaling.items():
                if k not in self.scaling or m.shape != self.scaling[k].shape:
                    raise ValueError(f"mask for scaling[{k}] does not match the network")

    def copy(self) -> "LayeredNetwork":
        return LayeredNetwork(
            self.sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
            {k: d.copy() for k, d in self.scaling.items()},
            None if self.mask is None else self.mask.copy(),
        )

    def parameters(self) -> dict[str, np.ndarray]:
        """Named views of every trainable array (``W{k}``, ``b{k}``, ``delta{k}``)."""
        params = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"W{k}"] = w
            params[f"b{k}"] = b
        for k in sorted(self.scaling):
            params[f"delta{k}"] = self.scaling[k]
        return params

    def parameter_masks(self) -> dict[str, np.ndarray]:
        """Masks keyed like :meth:`parameters`; unmasked arrays are omitted."""
        if self.mask is None:
            return {}
        out = {f"W{k}": m for k, m in enumerate(self.mask.weights)}
        out.update({f"delta{k}": m for k, m in self.mask.scaling.items()})
        return out

    def enforce_mask(self) -> None:
        """Zero every masked entry in place."""
        if self.mask is None:
            return
        for w, m in zip(self.weights, self.mask.weights):
            w[~m] = 0.0
        for k, m in self.mask.scaling.items():
            self.scaling[k][~m] = 0.0

    def __eq__(self, other):
        if not isinstance(other, LayeredNetwork):
            return NotImplemented
        same = (
            self.sizes == other.sizes
            and self.activations == other.activations
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
            and self.scaling.keys() == other.scaling.keys()
            and all(np.array_equal(d, other.scaling[k]) for k, d in self.scaling.items())
        )
        return same and self.mask == other.mask


def init_random(
    sizes,
    seed: int,
    *,
    scaling=None,
    output_activation: str = "sigmoid",
    hidden_activation: str = "relu",
) -> LayeredNetwork:
    """Glorot-uniform weights, zero biases, unit scaling factors.

    Args:
        sizes: node counts per layer, input first.
        seed: seed for ``numpy.random.default_rng``.
        scaling: ``"hidden"`` to attach a scaling layer after every hidden
            layer, or an iterable of weight-layer indices.
    """
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError(f"invalid layer sizes {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    activations = [hidden_activation] * (len(sizes) - 2) + [output_activation]
    if scaling == "hidden":
        scaling = range(len(sizes) - 2)
    deltas = {int(k): np.ones(sizes[int(k) + 1]) for k in (scaling or ())}
    return LayeredNetwork(sizes, weights, biases, activations, deltas)


def predict(net: LayeredNetwork, x) -> np.ndarray:
    """Forward pass; ``x`` has one sample per row and ``sizes[0]`` columns."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim == 1:
        h = h.reshape(1, -1)
    if h.ndim != 2 or h.shape[1] != net.sizes[0]:
        got = h.shape[-1] if h.ndim else 0
        raise ValueError(f"input width mismatch: expected {net.sizes[0]} features, got {got}")
    for k, (w, b, act) in enumerate(zip(net.weights, net.biases, net.activations)):
        h = _activate(act, h @ w.T + b)
        if k in net.scaling:
            h = h * net.scaling[k]
    return h


def apply_mask(net: LayeredNetwork, mask: PruneMask) -> LayeredNetwork:
    """Return a copy with masked entries zeroed and the mask attached."""
    if len(mask.weights) != len(net.weights):
        raise ValueError(f"mask has {len(mask.weights)} weight layers, network has {len(net.weights)}")
    for k, (m, w) in enumerate(zip(mask.weights, net.weights)):
        if m.shape != w.shape:
            raise ValueError(f"mask for weights[{k}] has shape {m.shape}, expected {w.shape}")
    for k, m in mask.scaling.items():
        if k not in net.scaling or m.shape != net.scaling[k].shape:
            raise ValueError(f"mask for scaling[{k}] does not match the network")
    out = net.copy()
    full = PruneMask.ones_like(net) & mask
    out.mask = full if out.mask is None else out.mask & full
    out.enforce_mask()
    return out


def add_to_tape(net: LayeredNetwork, tape: Tape, x: Node) -> Node:
    """Record the forward pass on ``tape``; returns the output pre-activation.

    Creates parameter leaves named as in :meth:`LayeredNetwork.parameters`.
    The output activation is left to the caller (the loss works on logits).
    """
    leaves = {name: tape.leaf(name, value.reshape(1, -1) if value.ndim == 1 else value)
              for name, value in net.parameters().items()}
    h = x
    last = len(net.weights) - 1
    for k in range(len(net.weights)):
        z = tape.add(tape.matmul(h, tape.transpose(leaves[f"W{k}"])), leaves[f"b{k}"])
        if k == last:
            if k in net.scaling:
                raise ValueError("a scaling layer on the output logits is not supported on the tape")
            return z
        act = net.activations[k]
        h = tape.relu(z) if act == "relu" else tape.sigmoid(z) if act == "sigmoid" else z
        if k in net.scaling:
            h = tape.mul(h, leaves[f"delta{k}"])
    raise AssertionError("unreachable")


# -- serialization -----------------------------------------------------------
#
# Layout (all integers and floats little-endian):
#   4 bytes  magic "CNPR"
#   u16      format version
#   u32      header length n
#   n bytes  UTF-8 JSON header: sizes, activations, scaling (sorted indices), has_mask
#   f64[]    W0..W{K-2} row-major, b0..b{K-2}, delta{k} for k in scaling order,
#            then, if has_mask, weight masks and scaling masks as 0.0/1.0 in the same order

def _arrays_for(net: LayeredNetwork) -> list[np.ndarray]:
    arrays = list(net.weights) + list(net.biases) + [net.scaling[k] for k in sorted(net.scaling)]
    if net.mask is not None:
        full = PruneMask.ones_like(net) & net.mask
        arrays += [m.astype(np.float64) for m in full.weights]
        arrays += [full.scaling[k].astype(np.float64) for k in sorted(net.scaling)]
    return arrays


def serialize(net: LayeredNetwork) -> bytes:
    header = json.dumps(
        {
            "sizes": list(net.sizes),
            "activations": list(net.activations),
            "scaling": sorted(net.scaling),
            "has_mask": net.mask is not None,
        },
        sort_keys=True,
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(header)), header]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in _arrays_for(net)]
    return b"".join(parts)


def deserialize(payload: bytes) -> LayeredNetwork:
    if len(payload) < 10:
        raise FormatError("payload shorter than the fixed preamble", len(payload))
    if payload[:4] != MAGIC:
        raise FormatError("bad magic", 0)
    version, hlen = struct.unpack_from("<HI", payload, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    pos = 10
    if pos + hlen > len(payload):
        raise FormatError("truncated header", len(payload))
    try:
        header = json.loads(payload[pos:pos + hlen].decode("utf-8"))
        sizes = [int(s) for s in header["sizes"]]
        activations = [str(a) for a in header["activations"]]
        scaling_idx = [int(k) for k in header["scaling"]]
        has_mask = bool(header["has_mask"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid header: {exc}", pos) from None
    pos += hlen

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape)) * 8
        if pos + n > len(payload):
            raise FormatError(f"truncated array data: need {n} bytes", len(payload))
        arr = np.frombuffer(payload, dtype="<f8", count=n // 8, offset=pos).astype(np.float64)
        pos += n
        return arr.reshape(shape)

    wshapes = [(o, i) for i, o in zip(sizes[:-1], sizes[1:])]
    weights = [take(s) for s in wshapes]
    biases = [take((o,)) for o in sizes[1:]]
    scaling = {k: take((sizes[k + 1],)) for k in scaling_idx}
    mask = None
    if has_mask:
        mw = [take(s) != 0.0 for s in wshapes]
        ms = {k: take((sizes[k + 1],)) != 0.0 for k in scaling_idx}
        mask = PruneMask(mw, ms)
    if pos != len(payload):
        raise FormatError(f"{len(payload) - pos} trailing bytes", pos)
    try:
        return LayeredNetwork(tuple(sizes), weights, biases, activations, scaling, mask)
    except ValueError as exc:
        raise FormatError(f"inconsistent model: {exc}", 10) from None


def save(net: LayeredNetwork, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(net))


def load(path) -> LayeredNetwork:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
