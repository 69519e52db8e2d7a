"""Post-training int8 quantization: calibration, graph conversion, fixed-point
requantization, and the int8 reference executor.

Conventions: activations are per-tensor affine (min/max calibration), weights
per-output-channel symmetric, biases int32 at scale s_in * s_w.  Requantization
multiplies the int32 accumulator by an integer mantissa in [2^30, 2^31) and
right-shifts, rounding half away from zero, so results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ir import F32, I8, I32, Graph, GraphError, QuantParams
from .engine import execute_float, im2col, maxpool2d_ref, sigmoid, silu, \
    upsample_nearest2x

MIN_SCALE = 1e-8

# Ops whose int8 output reuses the input's quantization parameters verbatim.
_COPY_QP = {"MaxPool2d", "UpsampleNearest2x", "Detect"}


@dataclass(frozen=True)
class RequantMultiplier:
    mantissa: int
    right_shift: int

    @property
    def value(self) -> float:
        return self.mantissa * 2.0 ** (-self.right_shift)


def quantize_multiplier(r: float) -> RequantMultiplier:
    """Fixed-point form of a real multiplier in (0, 1).

    Returns (m, s) with m in [2^30, 2^31) and |m * 2^-s - r| <= r * 2^-30.
    """
    if not (0.0 < r < 1.0):
        raise ValueError(f"multiplier {r} outside (0, 1)")
    return _normalize_multiplier(r)


def _normalize_multiplier(r: float) -> RequantMultiplier:
    # General form for any positive r below 2^31; used internally where
    # scale ratios can reach or exceed 1 (e.g. residual adds).
    if r <= 0:
        raise ValueError(f"multiplier {r} must be positive")
    s = 30 - int(np.floor(np.log2(r)))
    if s < 0:
        raise ValueError(f"multiplier {r} too large to represent")
    m = int(round(r * (1 << s)))
    if m == (1 << 31):  # rounding crossed the power of two
        m >>= 1
        s -= 1
    return RequantMultiplier(m, s)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))


def requantize(acc: np.ndarray, mult: RequantMultiplier) -> np.ndarray:
    """Integer rescale of an int32/int64 accumulator: round(acc * m * 2^-s)."""
    acc = acc.astype(np.int64)
    prod = acc * mult.mantissa
    s = mult.right_shift
    if s == 0:
        return prod
    half = np.int64(1) << (s - 1)
    mag = (np.abs(prod) + half) >> s
    return np.sign(prod) * mag


@dataclass
class CalibrationResult:
    """Per-tensor activation params plus per-conv weight params."""

    activations: dict[int, QuantParams]
    weights: dict[str, QuantParams]  # conv node name -> per-channel params


def _affine_params(lo: float, hi: float) -> QuantParams:
    lo, hi = float(min(lo, 0.0)), float(max(hi, 0.0))
    scale = max((hi - lo) / 255.0, MIN_SCALE)
    zp = int(np.clip(round(-128 - lo / scale), -128, 127))
    return QuantParams("per_tensor_affine", scale, zp)


def weight_channel_params(kernel: np.ndarray) -> QuantParams:
    maxabs = np.abs(kernel.reshape(kernel.shape[0], -1)).max(axis=1)
    scale = np.maximum(maxabs / 127.0, MIN_SCALE)
    return QuantParams("per_channel_symmetric", scale.astype(np.float64), 0)


def calibrate(g: Graph, calibration_inputs) -> CalibrationResult:
    """Observe activation ranges on the float graph and derive QuantParams.

    Tensors tied together by copy ops (maxpool, upsample, detect) or joined
    at a concat share one parameter set, so the int8 executor can move the
    raw bytes without rescaling.
    """
    inputs = list(calibration_inputs)
    if not inputs:
        raise GraphError("calibration set is empty")

    lo: dict[int, float] = {}
    hi: dict[int, float] = {}
    for x in inputs:
        env, _ = execute_float(g, x, keep_all=True)
        for tid, a in env.items():
            lo[tid] = min(lo.get(tid, np.inf), float(a.min()))
            hi[tid] = max(hi.get(tid, -np.inf), float(a.max()))

    # Union tensors that must share quantization parameters.
    parent: dict[int, int] = {tid: tid for tid in lo}

    def find(t):
        while parent[t] != t:
            parent[t] = parent[parent[t]]
            t = parent[t]
        return t

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    for n in g.nodes:
        if n.kind in _COPY_QP:
            for a, b in zip(n.inputs, n.outputs):
                union(a, b)
        elif n.kind == "ConcatChannels":
            for t in n.inputs:
                union(n.outputs[0], t)

    groups: dict[int, list[int]] = {}
    for tid in lo:
        groups.setdefault(find(tid), []).append(tid)
    acts: dict[int, QuantParams] = {}
    for members in groups.values():
        qp = _affine_params(min(lo[t] for t in members),
                            max(hi[t] for t in members))
        for t in members:
            acts[t] = qp

    weights = {n.name: weight_channel_params(n.weights["kernel"])
               for n in g.nodes if n.kind == "Conv2d"}
    return CalibrationResult(activations=acts, weights=weights)


def quantize_weight(kernel: np.ndarray, qp: QuantParams) -> np.ndarray:
    scale = qp.scale_array()[:, None, None, None]
    q = _round_half_away(kernel.astype(np.float64) / scale)
    return np.clip(q, -127, 127).astype(np.int8)


def dequantize_weight(q: np.ndarray, qp: QuantParams) -> np.ndarray:
    return q.astype(np.float64) * qp.scale_array()[:, None, None, None]


def quantize_tensor(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    q = _round_half_away(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, -128, 127).astype(np.int8)


def dequantize_tensor(q: np.ndarray, qp: QuantParams) -> np.ndarray:
    return (q.astype(np.float64) - qp.zero_point) * qp.scale


def quantize_graph(g: Graph, calib: CalibrationResult) -> Graph:
    """Convert a BN-folded float graph to int8 weights/activations.

    Conv nodes gain int32 biases and per-channel requantization multipliers;
    activation tensor specs carry their affine QuantParams.
    """
    if any(n.kind == "BatchNorm" for n in g.nodes):
        raise GraphError("fold batchnorm before quantizing")
    g = g.copy()
    for t in g.tensors.values():
        if t.id not in calib.activations:
            raise GraphError(f"no calibration QuantParams for tensor {t.id}")
        t.quant = calib.activations[t.id]
        t.dtype = I8
    for n in g.nodes:
        if n.kind != "Conv2d":
            continue
        if n.name not in calib.weights:
            raise GraphError(f"no weight QuantParams for conv {n.name!r}")
        wqp = calib.weights[n.name]
        in_qp = g.tensors[n.inputs[0]].quant
        out_qp = g.tensors[n.outputs[0]].quant
        kernel = n.weights["kernel"]
        n.weights["kernel"] = quantize_weight(kernel, wqp)
        bias = n.weights.get("bias")
        bias_scale = in_qp.scale * wqp.scale_array()
        if bias is None:
            bias = np.zeros(kernel.shape[0], dtype=np.float64)
        qb = _round_half_away(bias.astype(np.float64) / bias_scale)
        n.weights["bias"] = np.clip(qb, -(2 ** 31), 2 ** 31 - 1).astype(np.int32)
        n.attrs["weight_scale"] = wqp.scale_array()
        mults = [_normalize_multiplier(r)
                 for r in bias_scale / out_qp.scale]
        n.attrs["requant"] = [(m.mantissa, m.right_shift) for m in mults]
    return g


def _lut(fn, in_qp: QuantParams, out_qp: QuantParams) -> np.ndarray:
    q = np.arange(-128, 128)
    x = (q - in_qp.zero_point) * in_qp.scale
    y = fn(x)
    out = _round_half_away(y / out_qp.scale) + out_qp.zero_point
    return np.clip(out, -128, 127).astype(np.int8)


def _conv_int8(x_q: np.ndarray, n, in_qp, out_qp) -> np.ndarray:
    kernel = n.weights["kernel"]
    c_out, c_in, k, _ = kernel.shape
    # Center the input so zero padding contributes nothing, then accumulate.
    # float64 matmul on integer values is exact here (|acc| << 2^53) and far
    # faster than numpy's integer matmul.
    centered = x_q.astype(np.int32) - in_qp.zero_point
    cols, ho, wo = im2col(centered.astype(np.float64), k, n.attrs["s"],
                          n.attrs["p"], pad_value=0.0)
    acc = cols @ kernel.reshape(c_out, -1).T.astype(np.float64)
    acc = acc.astype(np.int64) + n.weights["bias"].astype(np.int64)
    m = np.array([mm for mm, _ in n.attrs["requant"]], dtype=np.int64)
    s = np.array([ss for _, ss in n.attrs["requant"]], dtype=np.int64)
    prod = acc * m[None, :]
    half = np.where(s > 0, np.int64(1) << np.maximum(s - 1, 0), 0)
    out = np.sign(prod) * ((np.abs(prod) + half[None, :]) >> s[None, :])
    out = out + out_qp.zero_point
    return np.clip(out, -128, 127).astype(np.int8).T.reshape(1, c_out, ho, wo)


def _add_int8(a_q, b_q, qa, qb, q_out) -> np.ndarray:
    ra = _normalize_multiplier(qa.scale / q_out.scale)
    rb = _normalize_multiplier(qb.scale / q_out.scale)
    acc = requantize((a_q.astype(np.int64) - qa.zero_point), ra) \
        + requantize((b_q.astype(np.int64) - qb.zero_point), rb) \
        + q_out.zero_point
    return np.clip(acc, -128, 127).astype(np.int8)


def execute_int8(g: Graph, x_q: np.ndarray, want_trace: bool = False):
    """Run a quantized graph on an int8 input tensor.

    The input must already be quantized with the graph input's QuantParams.
    Returns (outputs, trace) keyed by output tensor id.
    """
    import time
    from .engine import ExecTrace

    spec = g.tensors[g.input_id]
    if x_q.dtype != np.int8:
        raise GraphError("int8 executor expects an int8 input tensor")
    if tuple(x_q.shape) != tuple(spec.shape):
        raise GraphError(
            f"input tensor {g.input_id}: expected shape {spec.shape}, got {x_q.shape}")
    env: dict[int, np.ndarray] = {g.input_id: x_q}
    trace = ExecTrace() if want_trace else None
    for n in g.nodes:
        t0 = time.perf_counter()
        ins = [env[t] for t in n.inputs]
        in_qps = [g.tensors[t].quant for t in n.inputs]
        out_qps = [g.tensors[t].quant for t in n.outputs]
        if n.kind == "Conv2d":
            if "requant" not in n.attrs:
                raise GraphError(f"conv {n.name!r} has no requant multipliers")
            out = [_conv_int8(ins[0], n, in_qps[0], out_qps[0])]
        elif n.kind == "SiLU":
            out = [_lut(silu, in_qps[0], out_qps[0])[ins[0].astype(np.int32) + 128]]
        elif n.kind == "Sigmoid":
            out = [_lut(sigmoid, in_qps[0], out_qps[0])[ins[0].astype(np.int32) + 128]]
        elif n.kind == "MaxPool2d":
            # exact on int8 values; -inf padding semantics carry over
            out = [maxpool2d_ref(ins[0].astype(np.float64), n.attrs["k"],
                                 n.attrs["s"], n.attrs["p"]).astype(np.int8)]
        elif n.kind == "UpsampleNearest2x":
            out = [upsample_nearest2x(ins[0])]
        elif n.kind == "ConcatChannels":
            out = [np.concatenate(ins, axis=1)]
        elif n.kind == "Add":
            out = [_add_int8(ins[0], ins[1], in_qps[0], in_qps[1], out_qps[0])]
        elif n.kind == "Detect":
            out = [a.copy() for a in ins]
        else:  # pragma: no cover
            raise GraphError(f"unhandled kind {n.kind}")
        for tid, a in zip(n.outputs, out):
            env[tid] = a
        if trace is not None:
            trace.node_names.append(n.name)
            trace.micros.append((time.perf_counter() - t0) * 1e6)
    return {tid: env[tid] for tid in g.output_ids}, trace
