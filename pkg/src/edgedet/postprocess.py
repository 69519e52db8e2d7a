"""Raw head tensors -> final detections: sigmoid grid decode with anchor
priors, confidence filtering, IoU, and class-wise greedy NMS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import sigmoid

DEFAULT_CONF_THRESH = 0.25
DEFAULT_NMS_IOU = 0.45


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def area(self) -> float:
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    confidence: float

    def to_dict(self, image: str | None = None) -> dict:
        d = {"class_id": self.class_id,
             "confidence": round(float(self.confidence), 6),
             "x1": round(float(self.box.x1), 2), "y1": round(float(self.box.y1), 2),
             "x2": round(float(self.box.x2), 2), "y2": round(float(self.box.y2), 2)}
        if image is not None:
            d = {"image": image, **d}
        return d


def iou(a: Box, b: Box) -> float:
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def decode_predictions(head_outputs, anchors, strides, conf_thresh: float,
                       num_classes: int, input_size: int) -> list[Detection]:
    """Decode the three raw head tensors into pixel-space detections.

    Per cell (i, j), anchor (aw, ah) at stride s:
      bx = (2*sig(tx) - 0.5 + j) * s       bw = (2*sig(tw))^2 * aw
      by = (2*sig(ty) - 0.5 + i) * s       bh = (2*sig(th))^2 * ah
    confidence = sig(t_obj) * max_c sig(t_cls); class = argmax.
    Boxes are clipped to the image bounds.
    """
    dets: list[Detection] = []
    for raw, level_anchors, s in zip(head_outputs, anchors, strides):
        _, c, h, w = raw.shape
        if c != 3 * (5 + num_classes):
            raise ValueError(
                f"head tensor has {c} channels, expected {3 * (5 + num_classes)}")
        p = sigmoid(raw.reshape(3, 5 + num_classes, h, w))
        jj = np.arange(w)[None, None, :]
        ii = np.arange(h)[None, :, None]
        aw = np.array([a[0] for a in level_anchors])[:, None, None]
        ah = np.array([a[1] for a in level_anchors])[:, None, None]
        bx = (2 * p[:, 0] - 0.5 + jj) * s
        by = (2 * p[:, 1] - 0.5 + ii) * s
        bw = (2 * p[:, 2]) ** 2 * aw
        bh = (2 * p[:, 3]) ** 2 * ah
        cls_p = p[:, 5:]
        best = cls_p.max(axis=1)
        cls_id = cls_p.argmax(axis=1)
        conf = p[:, 4] * best
        keep = np.argwhere(conf >= conf_thresh)
        for a, i, j in keep:
            x1 = float(np.clip(bx[a, i, j] - bw[a, i, j] / 2, 0, input_size))
            y1 = float(np.clip(by[a, i, j] - bh[a, i, j] / 2, 0, input_size))
            x2 = float(np.clip(bx[a, i, j] + bw[a, i, j] / 2, 0, input_size))
            y2 = float(np.clip(by[a, i, j] + bh[a, i, j] / 2, 0, input_size))
            dets.append(Detection(Box(x1, y1, x2, y2),
                                  int(cls_id[a, i, j]),
                                  float(conf[a, i, j])))
    dets.sort(key=lambda d: (-d.confidence, d.class_id, d.box.x1, d.box.y1))
    return dets


def nms(dets: list[Detection], iou_thresh: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Class-wise greedy suppression; output ordered by confidence descending,
    ties broken by (class_id, x1, y1)."""
    ordered = sorted(dets, key=lambda d: (-d.confidence, d.class_id,
                                          d.box.x1, d.box.y1))
    kept: list[Detection] = []
    for d in ordered:
        if all(iou(d.box, k.box) < iou_thresh for k in kept
               if k.class_id == d.class_id):
            kept.append(d)
    return kept
