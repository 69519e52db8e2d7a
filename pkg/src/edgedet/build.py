"""Construct the small detector graph (backbone / FPN+PAN neck / three heads).

Channel and depth multipliers follow the public YOLOv5 "n" sizing convention
(width 0.25, depth 0.33, channels rounded up to multiples of 8); the target
is ~1.9M parameters at 80 classes.  Weights are seeded pseudo-random so the
whole toolchain runs without trained checkpoints.
"""

from __future__ import annotations

import math

import numpy as np

from .ir import F32, Graph, GraphError, Node, TensorSpec, infer_shapes, validate

# (width, height) anchor priors per stride, defined at a 640-pixel base and
# scaled linearly with the chosen input size.
BASE_ANCHORS = [
    [(10, 13), (16, 30), (33, 23)],       # stride 8
    [(30, 61), (62, 45), (59, 119)],      # stride 16
    [(116, 90), (156, 198), (373, 326)],  # stride 32
]
STRIDES = [8, 16, 32]
BN_EPS = 1e-3


def make_divisible(x: float, divisor: int = 8) -> int:
    return max(divisor, int(math.ceil(x / divisor) * divisor))


def scaled_anchors(input_size: int) -> list[list[tuple[float, float]]]:
    f = input_size / 640.0
    return [[(w * f, h * f) for (w, h) in level] for level in BASE_ANCHORS]


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.nodes: list[Node] = []
        self.tensors: dict[int, TensorSpec] = {}
        self.next_id = 0

    def tensor(self) -> int:
        tid = self.next_id
        self.next_id += 1
        self.tensors[tid] = TensorSpec(id=tid, dtype=F32)
        return tid

    def add_node(self, kind, inputs, n_out=1, attrs=None, weights=None,
                 region=None, name="") -> list[int]:
        outs = [self.tensor() for _ in range(n_out)]
        self.nodes.append(Node(kind=kind, inputs=list(inputs), outputs=outs,
                               attrs=attrs or {}, weights=weights or {},
                               region=region, name=name))
        return outs

    def conv_weights(self, c_in, c_out, k, bias=False):
        std = math.sqrt(2.0 / (c_in * k * k))
        w = {"kernel": self.rng.normal(0.0, std, (c_out, c_in, k, k)).astype(np.float32)}
        if bias:
            w["bias"] = self.rng.normal(0.0, 0.05, c_out).astype(np.float32)
        return w

    def bn_weights(self, c):
        return {
            "gamma": self.rng.uniform(0.9, 1.1, c).astype(np.float32),
            "beta": self.rng.normal(0.0, 0.05, c).astype(np.float32),
            "mean": self.rng.normal(0.0, 0.05, c).astype(np.float32),
            "var": self.rng.uniform(0.8, 1.2, c).astype(np.float32),
        }

    def conv(self, x, c_in, c_out, k, s, region, name, p=None):
        """Conv + BN + SiLU composite (the CBS block)."""
        p = k // 2 if p is None else p
        y = self.add_node("Conv2d", [x], attrs={"k": k, "s": s, "p": p},
                          weights=self.conv_weights(c_in, c_out, k),
                          region=region, name=f"{name}.conv")[0]
        y = self.add_node("BatchNorm", [y], attrs={"eps": BN_EPS},
                          weights=self.bn_weights(c_out),
                          region=region, name=f"{name}.bn")[0]
        y = self.add_node("SiLU", [y], region=region, name=f"{name}.act")[0]
        return y

    def bottleneck(self, x, c, shortcut, region, name):
        y = self.conv(x, c, c, 1, 1, region, f"{name}.cv1")
        y = self.conv(y, c, c, 3, 1, region, f"{name}.cv2")
        if shortcut:
            y = self.add_node("Add", [x, y], region=region, name=f"{name}.add")[0]
        return y

    def c3(self, x, c_in, c_out, n, shortcut, region, name):
        c_ = c_out // 2
        a = self.conv(x, c_in, c_, 1, 1, region, f"{name}.cv1")
        b = self.conv(x, c_in, c_, 1, 1, region, f"{name}.cv2")
        for i in range(n):
            a = self.bottleneck(a, c_, shortcut, region, f"{name}.m{i}")
        y = self.add_node("ConcatChannels", [a, b], region=region,
                          name=f"{name}.cat")[0]
        return self.conv(y, 2 * c_, c_out, 1, 1, region, f"{name}.cv3")

    def sppf(self, x, c_in, c_out, region, name):
        c_ = c_in // 2
        y = self.conv(x, c_in, c_, 1, 1, region, f"{name}.cv1")
        pools = [y]
        for i in range(3):
            pools.append(self.add_node(
                "MaxPool2d", [pools[-1]], attrs={"k": 5, "s": 1, "p": 2},
                region=region, name=f"{name}.pool{i}")[0])
        y = self.add_node("ConcatChannels", pools, region=region,
                          name=f"{name}.cat")[0]
        return self.conv(y, 4 * c_, c_out, 1, 1, region, f"{name}.cv2")


def build_yolov5n(num_classes: int, input_size: int,
                  width_mult: float = 0.25, depth_mult: float = 0.33,
                  seed: int = 0) -> Graph:
    """Build the full detector graph with seeded random weights.

    Raises GraphError if input_size is not divisible by 32 (the deepest
    stride), since the grid sizes would not be integral.
    """
    if num_classes < 1:
        raise GraphError("num_classes must be >= 1")
    if input_size % 32 != 0:
        raise GraphError(
            f"input_size {input_size} is not divisible by 32; the three "
            f"detection grids at strides 8/16/32 require it")

    rng = np.random.default_rng(seed)
    b = _Builder(rng)

    def cw(c):  # width-scaled channel count
        return make_divisible(c * width_mult)

    def dn(n):  # depth-scaled repeat count
        return max(1, round(n * depth_mult))

    c1, c2, c3_, c4, c5 = cw(64), cw(128), cw(256), cw(512), cw(1024)

    inp = b.tensor()
    b.tensors[inp].shape = (1, 3, input_size, input_size)

    # backbone
    x = b.conv(inp, 3, c1, 6, 2, "backbone", "b0", p=2)           # P1
    x = b.conv(x, c1, c2, 3, 2, "backbone", "b1")                 # P2
    x = b.c3(x, c2, c2, dn(3), True, "backbone", "b2")
    x = b.conv(x, c2, c3_, 3, 2, "backbone", "b3")                # P3
    p3 = b.c3(x, c3_, c3_, dn(6), True, "backbone", "b4")
    x = b.conv(p3, c3_, c4, 3, 2, "backbone", "b5")               # P4
    p4 = b.c3(x, c4, c4, dn(9), True, "backbone", "b6")
    x = b.conv(p4, c4, c5, 3, 2, "backbone", "b7")                # P5
    x = b.c3(x, c5, c5, dn(3), True, "backbone", "b8")
    p5 = b.sppf(x, c5, c5, "backbone", "b9")

    # neck: FPN (top-down) then PAN (bottom-up)
    t1 = b.conv(p5, c5, c4, 1, 1, "neck", "n10")
    u = b.add_node("UpsampleNearest2x", [t1], region="neck", name="n11.up")[0]
    x = b.add_node("ConcatChannels", [u, p4], region="neck", name="n12.cat")[0]
    x = b.c3(x, c4 + c4, c4, dn(3), False, "neck", "n13")
    t2 = b.conv(x, c4, c3_, 1, 1, "neck", "n14")
    u = b.add_node("UpsampleNearest2x", [t2], region="neck", name="n15.up")[0]
    x = b.add_node("ConcatChannels", [u, p3], region="neck", name="n16.cat")[0]
    h_small = b.c3(x, c3_ + c3_, c3_, dn(3), False, "neck", "n17")    # stride 8
    x = b.conv(h_small, c3_, c3_, 3, 2, "neck", "n18")
    x = b.add_node("ConcatChannels", [x, t2], region="neck", name="n19.cat")[0]
    h_mid = b.c3(x, c3_ + c3_, c4, dn(3), False, "neck", "n20")       # stride 16
    x = b.conv(h_mid, c4, c4, 3, 2, "neck", "n21")
    x = b.add_node("ConcatChannels", [x, t1], region="neck", name="n22.cat")[0]
    h_large = b.c3(x, c4 + c4, c5, dn(3), False, "neck", "n23")       # stride 32

    # heads: plain 1x1 convs (with bias, no BN/activation) to raw predictions
    c_head = 3 * (5 + num_classes)
    raws = []
    for i, (feat, c_in) in enumerate([(h_small, c3_), (h_mid, c4), (h_large, c5)]):
        raws.append(b.add_node(
            "Conv2d", [feat], attrs={"k": 1, "s": 1, "p": 0},
            weights=b.conv_weights(c_in, c_head, 1, bias=True),
            region="head", name=f"head{i}.conv")[0])
    outs = b.add_node(
        "Detect", raws, n_out=3,
        attrs={"anchors": scaled_anchors(input_size), "strides": list(STRIDES),
               "num_classes": num_classes},
        region="head", name="detect")

    g = Graph(nodes=b.nodes, tensors=b.tensors, input_id=inp, output_ids=outs,
              metadata={"num_classes": num_classes, "input_size": input_size,
                        "width_mult": width_mult, "depth_mult": depth_mult,
                        "seed": seed})
    validate(g)
    return infer_shapes(g)
