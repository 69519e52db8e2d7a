"""Static footprint planning: tensor lifetimes, greedy arena layout (RAM),
FLASH estimation, and the analyze report with budget verdicts.

Defaults mirror the MCU target: 640KB of usable RAM and 2MB of FLASH.
Activation tensors are placed in one arena; tensors whose lifetimes overlap
never share bytes, and freed regions are reused by later tensors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .ir import DTYPE_BYTES, Graph, GraphError, count_macs, count_params

DEFAULT_RAM_BUDGET = 640 * 1024
DEFAULT_FLASH_BUDGET = 2 * 1024 * 1024
ALIGN = 16


@dataclass
class Lifetime:
    tensor_id: int
    first_use: int  # producing node index (-1 for the graph input)
    last_use: int   # last consuming node index
    size_bytes: int


@dataclass
class ArenaPlan:
    offsets: dict[int, int]
    total_bytes: int
    peak_node: int


def tensor_lifetimes(g: Graph) -> list[Lifetime]:
    """Live ranges over node indices; the graph input is live from node 0 and
    the head outputs stay live through the final node."""
    last_node = len(g.nodes) - 1
    first: dict[int, int] = {g.input_id: 0}
    last: dict[int, int] = {g.input_id: 0}
    for i, n in enumerate(g.nodes):
        for tid in n.inputs:
            last[tid] = i
        for tid in n.outputs:
            first[tid] = i
            last.setdefault(tid, i)  # unused tensor: collapses to producer
    for tid in g.output_ids:
        last[tid] = last_node
    out = []
    for tid in sorted(first):
        spec = g.tensors[tid]
        if spec.shape is None:
            raise GraphError(f"tensor {tid} has no shape; run infer_shapes")
        out.append(Lifetime(tensor_id=tid, first_use=first[tid],
                            last_use=last[tid],
                            size_bytes=spec.size_bytes(ALIGN)))
    return out


def max_live_bytes(lifetimes: list[Lifetime]) -> tuple[int, int]:
    """Lower bound for any placement: (peak simultaneous live bytes, node)."""
    if not lifetimes:
        return 0, 0
    hi = max(l.last_use for l in lifetimes)
    best, best_node = 0, 0
    for i in range(hi + 1):
        live = sum(l.size_bytes for l in lifetimes
                   if l.first_use <= i <= l.last_use)
        if live > best:
            best, best_node = live, i
    return best, best_node


def plan_arena(lifetimes: list[Lifetime], alignment: int = ALIGN) -> ArenaPlan:
    """Greedy best-fit: decreasing size, each tensor at the lowest aligned
    offset that avoids every lifetime-overlapping placed tensor."""
    order = sorted(lifetimes, key=lambda l: (-l.size_bytes, l.tensor_id))
    placed: list[tuple[Lifetime, int]] = []
    offsets: dict[int, int] = {}
    for lt in order:
        conflicts = sorted(
            (off, off + p.size_bytes) for p, off in placed
            if not (p.last_use < lt.first_use or lt.last_use < p.first_use))
        off = 0
        for lo, hi in conflicts:
            if off + lt.size_bytes <= lo:
                break
            off = max(off, ((hi + alignment - 1) // alignment) * alignment)
        offsets[lt.tensor_id] = off
        placed.append((lt, off))
    total = max((off + l.size_bytes for l, off in placed), default=0)
    _, peak_node = max_live_bytes(lifetimes)
    return ArenaPlan(offsets=offsets, total_bytes=total, peak_node=peak_node)


def estimate_flash(g: Graph) -> int:
    """Model storage: weight blobs at native width plus per-channel scale
    vectors (4 bytes each) plus the container header."""
    from .container import header_size

    total = header_size(g)
    for n in g.nodes:
        for w in n.weights.values():
            total += w.nbytes
        if n.kind == "Conv2d" and "weight_scale" in n.attrs:
            total += 4 * len(n.attrs["weight_scale"])
    return total


@dataclass
class AnalyzeReport:
    params: int
    macs: int
    flash_bytes: int
    ram_bytes: int
    ram_budget: int
    flash_budget: int
    peak_node: int
    rows: list[dict] = field(default_factory=list)

    @property
    def fits_ram(self) -> bool:
        return self.ram_bytes <= self.ram_budget

    @property
    def fits_flash(self) -> bool:
        return self.flash_bytes <= self.flash_budget

    def to_dict(self) -> dict:
        return {
            "params": self.params, "macs": self.macs,
            "flash_bytes": self.flash_bytes, "ram_bytes": self.ram_bytes,
            "ram_budget": self.ram_budget, "flash_budget": self.flash_budget,
            "fits_ram": self.fits_ram, "fits_flash": self.fits_flash,
            "peak_node": self.peak_node, "nodes": self.rows,
        }

    def to_text(self) -> str:
        lines = []
        hdr = f"{'node':<14} {'kind':<18} {'out shape':<20} {'params':>10} {'macs':>12} {'live':>9}"
        lines.append(hdr)
        lines.append("-" * len(hdr))
        for r in self.rows:
            shape = "x".join(str(d) for d in r["out_shape"])
            lines.append(f"{r['name']:<14} {r['kind']:<18} {shape:<20} "
                         f"{r['params']:>10} {r['macs']:>12} "
                         f"[{r['first_use']},{r['last_use']}]")
        lines.append("-" * len(hdr))
        lines.append(f"params : {self.params}")
        lines.append(f"macs   : {self.macs}")
        lines.append(f"flash  : {self.flash_bytes} B "
                     f"({self.flash_bytes / 1024:.1f} KB) "
                     f"budget {self.flash_budget} B -> "
                     f"fits: {'yes' if self.fits_flash else 'no'}")
        lines.append(f"ram    : {self.ram_bytes} B "
                     f"({self.ram_bytes / 1024:.1f} KB) "
                     f"budget {self.ram_budget} B -> "
                     f"fits: {'yes' if self.fits_ram else 'no'}")
        return "\n".join(lines)


def analyze_report(g: Graph, ram_budget: int = DEFAULT_RAM_BUDGET,
                   flash_budget: int = DEFAULT_FLASH_BUDGET) -> AnalyzeReport:
    lifetimes = tensor_lifetimes(g)
    plan = plan_arena(lifetimes)
    by_tid = {l.tensor_id: l for l in lifetimes}
    rows = []
    for n in g.nodes:
        out = g.tensors[n.outputs[0]]
        lt = by_tid[n.outputs[0]]
        k = n.attrs.get("k", 0)
        node_macs = 0
        if n.kind == "Conv2d":
            node_macs = (out.shape[1] * out.shape[2] * out.shape[3]
                         * n.weights["kernel"].shape[1] * k * k)
        rows.append({
            "name": n.name, "kind": n.kind, "out_shape": list(out.shape),
            "params": int(sum(w.size for w in n.weights.values())),
            "macs": int(node_macs),
            "first_use": lt.first_use, "last_use": lt.last_use,
        })
    return AnalyzeReport(
        params=count_params(g), macs=count_macs(g),
        flash_bytes=estimate_flash(g), ram_bytes=plan.total_bytes,
        ram_budget=ram_budget, flash_budget=flash_budget,
        peak_node=plan.peak_node, rows=rows)
