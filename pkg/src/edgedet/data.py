"""Image and dataset handling: PNG/PPM loading, letterbox preprocessing, and
the images/ + labels/ dataset layout with YOLO-format label files."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .metrics import GroundTruth
from .postprocess import Box

SUPPORTED_FORMATS = (".png", ".ppm")
LETTERBOX_PAD = 114


class DataError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    """RGB HWC uint8 array from a PNG or PPM (P6) file."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in SUPPORTED_FORMATS:
        raise DataError(
            f"unsupported image format {ext!r}; supported: "
            + ", ".join(SUPPORTED_FORMATS))
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


@dataclass(frozen=True)
class LetterboxInfo:
    scale: float
    pad_x: int
    pad_y: int


def letterbox(img: np.ndarray, size: int,
              pad_value: int = LETTERBOX_PAD) -> tuple[np.ndarray, LetterboxInfo]:
    """Aspect-preserving bilinear resize onto a size x size canvas padded with
    gray (114).  Returns the canvas and the geometry for unmapping boxes."""
    h, w = img.shape[:2]
    scale = min(size / h, size / w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    resized = np.asarray(
        Image.fromarray(img).resize((nw, nh), Image.Resampling.BILINEAR))
    canvas = np.full((size, size, 3), pad_value, dtype=np.uint8)
    py, px = (size - nh) // 2, (size - nw) // 2
    canvas[py:py + nh, px:px + nw] = resized
    return canvas, LetterboxInfo(scale=scale, pad_x=px, pad_y=py)


def to_input_tensor(canvas: np.ndarray) -> np.ndarray:
    """HWC uint8 -> NCHW float32 in [0, 1]."""
    return (canvas.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]


def parse_label_file(path, image: str, img_w: int, img_h: int) -> list[GroundTruth]:
    """YOLO label lines ``class cx cy w h`` (normalized) -> pixel-space truths."""
    out = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise DataError(f"{path}:{ln}: expected 5 fields, got {len(parts)}")
            cid = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
            out.append(GroundTruth(
                image=image,
                box=Box((cx - w / 2) * img_w, (cy - h / 2) * img_h,
                        (cx + w / 2) * img_w, (cy + h / 2) * img_h),
                class_id=cid))
    return out


def load_dataset(root) -> tuple[list[str], dict[str, str], dict[str, str]]:
    """Return (image stems sorted, stem->image path, stem->label path).

    Raises DataError listing orphan images/labels when the two sides do not
    pair up one-to-one.
    """
    img_dir = os.path.join(root, "images")
    lbl_dir = os.path.join(root, "labels")
    if not os.path.isdir(img_dir) or not os.path.isdir(lbl_dir):
        raise DataError(f"dataset root {root} needs images/ and labels/")
    images = {os.path.splitext(f)[0]: os.path.join(img_dir, f)
              for f in sorted(os.listdir(img_dir))
              if os.path.splitext(f)[1].lower() in SUPPORTED_FORMATS}
    labels = {os.path.splitext(f)[0]: os.path.join(lbl_dir, f)
              for f in sorted(os.listdir(lbl_dir))
              if f.endswith(".txt")}
    orphan_imgs = sorted(set(images) - set(labels))
    orphan_lbls = sorted(set(labels) - set(images))
    if orphan_imgs or orphan_lbls:
        raise DataError(
            "image/label mismatch; images without labels: "
            f"{orphan_imgs}; labels without images: {orphan_lbls}")
    return sorted(images), images, labels


def load_manifest(root) -> dict[str, int] | None:
    """Optional manifest.json with split sizes or file lists per split."""
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        return None
    with open(path) as f:
        m = json.load(f)
    out = {}
    for split in ("train", "val", "test"):
        if split in m:
            v = m[split]
            out[split] = len(v) if isinstance(v, list) else int(v)
    return out


def image_to_model_boxes(gts: list[GroundTruth], info: LetterboxInfo) -> list[GroundTruth]:
    """Map ground truths from original image pixels into letterboxed
    model-input pixels."""
    return [GroundTruth(
        image=gt.image,
        box=Box(gt.box.x1 * info.scale + info.pad_x,
                gt.box.y1 * info.scale + info.pad_y,
                gt.box.x2 * info.scale + info.pad_x,
                gt.box.y2 * info.scale + info.pad_y),
        class_id=gt.class_id) for gt in gts]
