"""Structured channel pruning of backbone convolutions.

Importance is the L1 norm of each output-channel kernel slice (a stand-in
for sparsity-trained saliency).  Channel removal is propagated forward as a
per-tensor keep-mask: channel-preserving ops copy the mask, concats chain
masks, and downstream convs drop the matching input channels.  Convs whose
output reaches an Add shortcut or a neck-consumed concat are left alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ir import CHANNEL_PRESERVING, Graph, GraphError, infer_shapes, \
    count_params, validate


def channel_importance(node) -> np.ndarray:
    """L1 norm per output channel of a Conv2d kernel (bias excluded)."""
    if node.kind != "Conv2d":
        raise GraphError(f"channel_importance needs a Conv2d, got {node.kind}")
    k = node.weights["kernel"]
    return np.abs(k.reshape(k.shape[0], -1)).sum(axis=1)


@dataclass
class PruneReport:
    ratio: float
    pruned: dict[str, int] = field(default_factory=dict)  # node name -> removed
    skipped: list[str] = field(default_factory=list)
    params_before: int = 0
    params_after: int = 0
    flash_before: int = 0
    flash_after: int = 0

    def to_dict(self):
        return {
            "ratio": self.ratio,
            "pruned_channels": dict(sorted(self.pruned.items())),
            "skipped": sorted(self.skipped),
            "params_before": self.params_before,
            "params_after": self.params_after,
            "flash_before": self.flash_before,
            "flash_after": self.flash_after,
        }


def _eligible(g: Graph, idx: int, scope: str) -> bool:
    """A conv is prunable if no channel-preserving path from its output hits
    an Add, a concat consumed outside the scope region, or a Detect head."""
    node = g.nodes[idx]
    if node.kind != "Conv2d" or node.region != scope:
        return False
    frontier = list(node.outputs)
    seen = set()
    while frontier:
        tid = frontier.pop()
        if tid in seen:
            continue
        seen.add(tid)
        for ci in g.consumers_of(tid):
            c = g.nodes[ci]
            if c.kind == "Add" or c.kind == "Detect":
                return False
            if c.kind == "ConcatChannels":
                if c.region != scope:
                    return False
                frontier.extend(c.outputs)
            elif c.kind in CHANNEL_PRESERVING:
                frontier.extend(c.outputs)
            # Conv2d consumers absorb the mask; stop there.
    return True


def kept_channel_count(c_out: int, ratio: float) -> int:
    """Channels surviving pruning: floor(ratio*C) removed, floor of 8 kept,
    kept count rounded up to a multiple of 4."""
    keep = c_out - int(np.floor(ratio * c_out))
    keep = ((keep + 3) // 4) * 4
    return min(c_out, max(8, keep))


def prune_channels(g: Graph, ratio: float, scope: str = "backbone"):
    """Remove low-importance output channels of in-scope convolutions.

    Returns (pruned graph, PruneReport).  The pruned graph passes shape
    inference and executes; tensor H/W never change, only channel counts.
    """
    from .planner import estimate_flash

    if not (0.0 <= ratio < 1.0):
        raise GraphError(f"prune ratio {ratio} outside [0, 1)")
    report = PruneReport(ratio=ratio, params_before=count_params(g),
                         flash_before=estimate_flash(g))
    g = g.copy()

    masks: dict[int, np.ndarray] = {
        g.input_id: np.ones(g.tensors[g.input_id].shape[1], dtype=bool)}
    for idx, n in enumerate(g.nodes):
        if n.kind == "Conv2d":
            c_out = n.weights["kernel"].shape[0]
            mask = np.ones(c_out, dtype=bool)
            if ratio > 0 and _eligible(g, idx, scope):
                keep = kept_channel_count(c_out, ratio)
                if keep < c_out:
                    order = np.argsort(channel_importance(n), kind="stable")
                    mask[order[: c_out - keep]] = False
                    report.pruned[n.name] = c_out - keep
                else:
                    report.skipped.append(n.name)
            masks[n.outputs[0]] = mask
        elif n.kind in CHANNEL_PRESERVING:
            masks[n.outputs[0]] = masks[n.inputs[0]]
        elif n.kind == "ConcatChannels":
            masks[n.outputs[0]] = np.concatenate([masks[t] for t in n.inputs])
        elif n.kind == "Add":
            ma, mb = masks[n.inputs[0]], masks[n.inputs[1]]
            if not (ma.all() and mb.all()):
                raise GraphError(f"pruned channels reached Add {n.name!r}")
            masks[n.outputs[0]] = ma
        elif n.kind == "Detect":
            for a, b in zip(n.inputs, n.outputs):
                masks[b] = masks[a]

    # Rebuild weights against the masks.
    for n in g.nodes:
        if n.kind == "Conv2d":
            in_mask, out_mask = masks[n.inputs[0]], masks[n.outputs[0]]
            n.weights["kernel"] = n.weights["kernel"][out_mask][:, in_mask]
            if "bias" in n.weights:
                n.weights["bias"] = n.weights["bias"][out_mask]
        elif n.kind == "BatchNorm":
            m = masks[n.outputs[0]]
            for k in ("gamma", "beta", "mean", "var"):
                n.weights[k] = n.weights[k][m]

    g = infer_shapes(g)
    validate(g)
    report.params_after = count_params(g)
    report.flash_after = estimate_flash(g)
    return g, report
