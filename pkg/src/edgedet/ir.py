"""Graph IR for the detector: tensor specs, nodes, shape inference, accounting.

The graph is a topologically ordered node list over integer tensor ids.
Transforms never mutate in place; they return new Graph instances, so a
graph can be shared read-only across threads.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

F32 = "f32"
I8 = "i8"
I32 = "i32"

DTYPE_BYTES = {F32: 4, I8: 1, I32: 4}
DTYPE_NUMPY = {F32: np.float32, I8: np.int8, I32: np.int32}

# Ops whose output channel layout is a copy of their (single) input's.
CHANNEL_PRESERVING = {"BatchNorm", "SiLU", "Sigmoid", "MaxPool2d", "UpsampleNearest2x"}

NODE_KINDS = CHANNEL_PRESERVING | {"Conv2d", "ConcatChannels", "Add", "Detect"}


class GraphError(ValueError):
    """Raised when a graph violates a structural invariant."""


@dataclass(frozen=True)
class QuantParams:
    """Quantization record for one tensor or one weight set.

    scale is a float for per-tensor schemes and a 1-D array (one entry per
    channel) for per-channel symmetric weights.  zero_point is always 0 for
    symmetric schemes.
    """

    scheme: str  # "per_tensor_affine" | "per_channel_symmetric"
    scale: object
    zero_point: int = 0

    def scale_array(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.scale, dtype=np.float64))


@dataclass
class TensorSpec:
    id: int
    dtype: str = F32
    shape: tuple | None = None  # (N, C, H, W)
    quant: QuantParams | None = None

    def numel(self) -> int:
        if self.shape is None:
            raise GraphError(f"tensor {self.id} has no shape")
        return int(np.prod(self.shape))

    def size_bytes(self, alignment: int = 16) -> int:
        raw = self.numel() * DTYPE_BYTES[self.dtype]
        return ((raw + alignment - 1) // alignment) * alignment


@dataclass
class Node:
    kind: str
    inputs: list[int]
    outputs: list[int]
    attrs: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)  # name -> np.ndarray
    region: str | None = None  # backbone | neck | head
    name: str = ""


@dataclass
class Graph:
    nodes: list[Node]
    tensors: dict[int, TensorSpec]
    input_id: int
    output_ids: list[int]
    metadata: dict = field(default_factory=dict)

    def producer_of(self, tid: int) -> int | None:
        """Index of the node producing tensor tid, None for the graph input."""
        for i, n in enumerate(self.nodes):
            if tid in n.outputs:
                return i
        return None

    def consumers_of(self, tid: int) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if tid in n.inputs]

    def copy(self) -> "Graph":
        return Graph(
            nodes=[
                Node(
                    kind=n.kind,
                    inputs=list(n.inputs),
                    outputs=list(n.outputs),
                    attrs=copy.deepcopy(n.attrs),
                    weights={k: v.copy() for k, v in n.weights.items()},
                    region=n.region,
                    name=n.name,
                )
                for n in self.nodes
            ],
            tensors={
                t.id: TensorSpec(t.id, t.dtype, t.shape, t.quant)
                for t in self.tensors.values()
            },
            input_id=self.input_id,
            output_ids=list(self.output_ids),
            metadata=copy.deepcopy(self.metadata),
        )


def validate(g: Graph) -> None:
    """Check topological ordering and basic structural invariants."""
    available = {g.input_id}
    for n in g.nodes:
        if n.kind not in NODE_KINDS:
            raise GraphError(f"unknown node kind {n.kind!r} ({n.name})")
        for tid in n.inputs:
            if tid not in available:
                raise GraphError(
                    f"node {n.name!r} reads tensor {tid} before it is produced"
                )
        for tid in n.outputs:
            if tid in available:
                raise GraphError(f"tensor {tid} produced twice (node {n.name!r})")
            if tid not in g.tensors:
                raise GraphError(f"node {n.name!r} writes unknown tensor {tid}")
            available.add(tid)
    for tid in g.output_ids:
        if tid not in available:
            raise GraphError(f"graph output {tid} is never produced")
    if len(g.output_ids) != 3:
        raise GraphError(f"expected 3 head outputs, got {len(g.output_ids)}")


def conv_out_hw(h: int, w: int, k: int, s: int, p: int) -> tuple[int, int]:
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def infer_shapes(g: Graph) -> Graph:
    """Return a graph with every tensor's shape filled in.

    Idempotent: existing shapes are recomputed from the input shape.
    """
    g = g.copy()
    shapes: dict[int, tuple] = {g.input_id: tuple(g.tensors[g.input_id].shape)}
    for n in g.nodes:
        ins = []
        for tid in n.inputs:
            if tid not in shapes:
                raise GraphError(f"node {n.name!r}: input tensor {tid} has no shape")
            ins.append(shapes[tid])
        if n.kind == "Conv2d":
            (N, C, H, W) = ins[0]
            kern = n.weights["kernel"]
            c_out, c_in = kern.shape[0], kern.shape[1]
            if c_in != C:
                raise GraphError(
                    f"node {n.name!r}: kernel expects {c_in} input channels, got {C}"
                )
            ho, wo = conv_out_hw(H, W, n.attrs["k"], n.attrs["s"], n.attrs["p"])
            outs = [(N, c_out, ho, wo)]
        elif n.kind == "MaxPool2d":
            (N, C, H, W) = ins[0]
            ho, wo = conv_out_hw(H, W, n.attrs["k"], n.attrs["s"], n.attrs["p"])
            outs = [(N, C, ho, wo)]
        elif n.kind == "UpsampleNearest2x":
            (N, C, H, W) = ins[0]
            outs = [(N, C, 2 * H, 2 * W)]
        elif n.kind in ("BatchNorm", "SiLU", "Sigmoid"):
            outs = [ins[0]]
        elif n.kind == "ConcatChannels":
            base = ins[0]
            for s_ in ins[1:]:
                if (s_[0], s_[2], s_[3]) != (base[0], base[2], base[3]):
                    raise GraphError(
                        f"node {n.name!r}: concat inputs disagree on N/H/W: {ins}"
                    )
            outs = [(base[0], sum(s_[1] for s_ in ins), base[2], base[3])]
        elif n.kind == "Add":
            if ins[0] != ins[1]:
                raise GraphError(f"node {n.name!r}: add inputs differ: {ins}")
            outs = [ins[0]]
        elif n.kind == "Detect":
            outs = list(ins)
        else:  # pragma: no cover
            raise GraphError(f"unhandled kind {n.kind}")
        for tid, shp in zip(n.outputs, outs):
            if any(d <= 0 for d in shp):
                raise GraphError(f"node {n.name!r}: non-positive output shape {shp}")
            shapes[tid] = shp
            g.tensors[tid].shape = shp
    return g


def count_params(g: Graph) -> int:
    return int(sum(w.size for n in g.nodes for w in n.weights.values()))


def count_macs(g: Graph) -> int:
    """Multiply-accumulates of all Conv2d nodes; other kinds contribute 0."""
    total = 0
    for n in g.nodes:
        if n.kind != "Conv2d":
            continue
        out = g.tensors[n.outputs[0]]
        if out.shape is None:
            raise GraphError(f"node {n.name!r}: shapes not inferred")
        _, c_out, ho, wo = out.shape
        c_in = n.weights["kernel"].shape[1]
        k = n.attrs["k"]
        total += c_out * ho * wo * c_in * k * k
    return int(total)


def fold_batchnorm(g: Graph) -> Graph:
    """Absorb every BatchNorm into its preceding Conv2d.

    The folded conv gets w' = w * gamma / sqrt(var + eps) and
    b' = (b - mean) * gamma / sqrt(var + eps) + beta; the BN node disappears
    and its consumers are rewired to the conv output.
    """
    g = g.copy()
    produced_by = {tid: i for i, n in enumerate(g.nodes) for tid in n.outputs}
    remap: dict[int, int] = {}  # BN output id -> conv output id
    keep: list[Node] = []
    dropped: set[int] = set()
    for n in g.nodes:
        if n.kind != "BatchNorm":
            continue
        src = n.inputs[0]
        src = remap.get(src, src)
        pidx = produced_by.get(src)
        if pidx is None or g.nodes[pidx].kind != "Conv2d":
            raise GraphError(f"BatchNorm {n.name!r} does not follow a Conv2d")
        conv = g.nodes[pidx]
        gamma = n.weights["gamma"].astype(np.float64)
        beta = n.weights["beta"].astype(np.float64)
        mean = n.weights["mean"].astype(np.float64)
        var = n.weights["var"].astype(np.float64)
        inv = gamma / np.sqrt(var + n.attrs.get("eps", 1e-3))
        kern = conv.weights["kernel"].astype(np.float64)
        bias = conv.weights.get("bias")
        bias = np.zeros(kern.shape[0]) if bias is None else bias.astype(np.float64)
        conv.weights["kernel"] = (kern * inv[:, None, None, None]).astype(np.float32)
        conv.weights["bias"] = ((bias - mean) * inv + beta).astype(np.float32)
        remap[n.outputs[0]] = conv.outputs[0]
        dropped.add(n.outputs[0])
    for i, n in enumerate(g.nodes):
        if n.kind == "BatchNorm":
            continue
        n.inputs = [remap.get(t, t) for t in n.inputs]
        keep.append(n)
    g.nodes = keep
    g.tensors = {t.id: t for t in g.tensors.values() if t.id not in dropped}
    g.output_ids = [remap.get(t, t) for t in g.output_ids]
    return g
