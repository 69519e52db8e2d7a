"""Float32 reference execution of a graph, plus the individual kernels.

Kernels are pure functions over NCHW numpy arrays.  Convolution uses
im2col + matmul; accumulation is float32, which fixes the oracle the int8
path is compared against.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .ir import Graph, GraphError


def sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def silu(x):
    return np.asarray(x, dtype=np.float64) * sigmoid(x)


def im2col(x: np.ndarray, k: int, s: int, p: int, pad_value=0.0) -> np.ndarray:
    """Patches of shape (Ho*Wo, C*k*k), patch order (c, u, v)."""
    n, c, h, w = x.shape
    if h + 2 * p < k or w + 2 * p < k:
        raise GraphError(f"kernel {k} larger than padded input {h + 2 * p}x{w + 2 * p}")
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=pad_value)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::s, ::s, :, :]  # (1, C, Ho, Wo, k, k)
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(ho * wo, c * k * k), ho, wo


def conv2d_ref(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None,
               stride: int, padding: int) -> np.ndarray:
    c_out = kernel.shape[0]
    cols, ho, wo = im2col(np.asarray(x, dtype=np.float32), kernel.shape[2],
                          stride, padding)
    out = cols @ kernel.reshape(c_out, -1).T.astype(np.float32)
    if bias is not None:
        out += bias.astype(np.float32)
    return out.T.reshape(1, c_out, ho, wo)


def maxpool2d_ref(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2),
                constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    return win.max(axis=(4, 5)).astype(x.dtype)


def upsample_nearest2x(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def concat_channels(inputs: list[np.ndarray]) -> np.ndarray:
    base = inputs[0].shape
    for a in inputs[1:]:
        if (a.shape[0], a.shape[2], a.shape[3]) != (base[0], base[2], base[3]):
            raise GraphError(f"concat inputs disagree on N/H/W: "
                             f"{[a.shape for a in inputs]}")
    return np.concatenate(inputs, axis=1)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise GraphError(f"add inputs differ in shape: {a.shape} vs {b.shape}")
    return a + b


def batchnorm_ref(x, gamma, beta, mean, var, eps) -> np.ndarray:
    inv = (gamma / np.sqrt(var + eps)).astype(np.float32)
    return (x - mean.astype(np.float32)[None, :, None, None]) \
        * inv[None, :, None, None] + beta.astype(np.float32)[None, :, None, None]


@dataclass
class ExecTrace:
    node_names: list[str] = field(default_factory=list)
    micros: list[float] = field(default_factory=list)

    def to_dict(self):
        return {"nodes": self.node_names, "micros": self.micros}


def execute_float(g: Graph, x: np.ndarray, want_trace: bool = False,
                  keep_all: bool = False):
    """Run the graph on one NCHW float32 image tensor.

    Returns (outputs, trace) where outputs maps output tensor id -> array.
    With keep_all=True the outputs dict holds every intermediate tensor
    (used by calibration).
    """
    x = np.asarray(x, dtype=np.float32)
    spec = g.tensors[g.input_id]
    if tuple(x.shape) != tuple(spec.shape):
        raise GraphError(
            f"input tensor {g.input_id}: expected shape {spec.shape}, got {x.shape}")
    env: dict[int, np.ndarray] = {g.input_id: x}
    trace = ExecTrace() if want_trace else None
    for n in g.nodes:
        t0 = time.perf_counter()
        ins = [env[t] for t in n.inputs]
        if n.kind == "Conv2d":
            out = [conv2d_ref(ins[0], n.weights["kernel"], n.weights.get("bias"),
                              n.attrs["s"], n.attrs["p"])]
        elif n.kind == "BatchNorm":
            w = n.weights
            out = [batchnorm_ref(ins[0], w["gamma"], w["beta"], w["mean"],
                                 w["var"], n.attrs.get("eps", 1e-3))]
        elif n.kind == "SiLU":
            out = [silu(ins[0]).astype(np.float32)]
        elif n.kind == "Sigmoid":
            out = [sigmoid(ins[0]).astype(np.float32)]
        elif n.kind == "MaxPool2d":
            out = [maxpool2d_ref(ins[0], n.attrs["k"], n.attrs["s"], n.attrs["p"])]
        elif n.kind == "UpsampleNearest2x":
            out = [upsample_nearest2x(ins[0])]
        elif n.kind == "ConcatChannels":
            out = [concat_channels(ins)]
        elif n.kind == "Add":
            out = [add(ins[0], ins[1])]
        elif n.kind == "Detect":
            out = [a.copy() for a in ins]
        else:  # pragma: no cover
            raise GraphError(f"unhandled kind {n.kind}")
        for tid, a in zip(n.outputs, out):
            env[tid] = a
        if trace is not None:
            trace.node_names.append(n.name)
            trace.micros.append((time.perf_counter() - t0) * 1e6)
    if keep_all:
        return env, trace
    return {tid: env[tid] for tid in g.output_ids}, trace
