"""Command-line surface: build, analyze, quantize, prune, infer, eval, bench.

Exit codes: 0 success / fits, 1 usage error, 2 budget no-fit, 3 data error.
Reports print as text by default and as JSON with --json.
"""

from __future__ import annotations

import base64
import json
import os
import platform
import sys
import time

import click
import numpy as np

from . import container, data
from .build import build_yolov5n
from .container import ContainerError, load_graph, save_graph
from .data import DataError
from .engine import execute_float
from .ir import F32, I8, GraphError, fold_batchnorm
from .metrics import evaluate, pr_curve_csv, pr_curve_svg
from .planner import DEFAULT_FLASH_BUDGET, DEFAULT_RAM_BUDGET, analyze_report
from .postprocess import DEFAULT_CONF_THRESH, DEFAULT_NMS_IOU, Box, Detection, \
    decode_predictions, nms
from .prune import prune_channels
from .quant import calibrate, dequantize_tensor, execute_int8, quantize_graph, \
    quantize_tensor

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NOFIT = 2
EXIT_DATA = 3

click.UsageError.exit_code = EXIT_USAGE


def _fail_data(msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(EXIT_DATA)


def _load_model(path):
    try:
        return load_graph(path)
    except (ContainerError, OSError, json.JSONDecodeError) as e:
        _fail_data(f"cannot load model {path}: {e}")


def read_config(path) -> dict:
    """Flat key=value config file; '#' starts a comment."""
    cfg = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{ln}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            cfg[k.replace("-", "_")] = v.strip("\"'")
    return cfg


class ConfigGroup(click.Group):
    """Lets a --config file supply defaults for any option of any command."""

    def invoke(self, ctx):
        cfg_path = ctx.params.get("config")
        if cfg_path:
            try:
                ctx.default_map = {cmd: read_config(cfg_path)
                                   for cmd in self.commands}
            except DataError as e:
                _fail_data(str(e))
        return super().invoke(ctx)


@click.group(cls=ConfigGroup)
@click.option("--config", type=click.Path(exists=True), default=None,
              help="key=value file supplying option defaults")
def main(config):
    """Toolchain for compressing and footprint-planning a small detector."""


@main.command()
@click.argument("out", type=click.Path())
@click.option("--classes", type=int, default=2, show_default=True)
@click.option("--size", type=int, default=192, show_default=True,
              help="square input size, divisible by 32")
@click.option("--random-weights", "seed", type=int, default=0, show_default=True,
              help="seed for the deterministic weight generator")
def build(out, classes, size, seed):
    """Build a float detector model with seeded random weights."""
    try:
        g = build_yolov5n(classes, size, seed=seed)
    except GraphError as e:
        raise click.UsageError(str(e))
    save_graph(g, out)
    click.echo(f"wrote {out}: {classes} classes, input {size}, seed {seed}")


@main.command()
@click.argument("model", type=click.Path(exists=True))
@click.option("--ram", type=int, default=DEFAULT_RAM_BUDGET, show_default=True,
              help="RAM budget in bytes")
@click.option("--flash", type=int, default=DEFAULT_FLASH_BUDGET,
              show_default=True, help="FLASH budget in bytes")
@click.option("--json", "as_json", is_flag=True)
def analyze(model, ram, flash, as_json):
    """Static RAM/FLASH footprint report; exit 2 if a budget is exceeded."""
    g = _load_model(model)
    rep = analyze_report(g, ram_budget=ram, flash_budget=flash)
    if as_json:
        click.echo(json.dumps(rep.to_dict(), sort_keys=True))
    else:
        click.echo(rep.to_text())
    if not (rep.fits_ram and rep.fits_flash):
        sys.exit(EXIT_NOFIT)


@main.command()
@click.argument("model", type=click.Path(exists=True))
@click.argument("calibration_dir", type=click.Path(exists=True))
@click.argument("out", type=click.Path())
@click.option("--json", "as_json", is_flag=True)
def quantize(model, calibration_dir, out, as_json):
    """Fold BN, calibrate on the images in CALIBRATION_DIR, emit int8 model."""
    g = _load_model(model)
    size = g.metadata["input_size"]
    paths = [os.path.join(calibration_dir, f)
             for f in sorted(os.listdir(calibration_dir))
             if os.path.splitext(f)[1].lower() in data.SUPPORTED_FORMATS]
    if not paths:
        _fail_data(f"no calibration images in {calibration_dir}")
    inputs = []
    for p in paths:
        canvas, _ = data.letterbox(data.load_image(p), size)
        inputs.append(data.to_input_tensor(canvas))
    gf = fold_batchnorm(g)
    qg = quantize_graph(gf, calibrate(gf, inputs))
    save_graph(qg, out)
    summary = {"calibration_images": len(paths),
               "params": int(sum(w.size for n in qg.nodes
                                 for w in n.weights.values())),
               "out": str(out)}
    if as_json:
        click.echo(json.dumps(summary, sort_keys=True))
    else:
        click.echo(f"quantized with {len(paths)} calibration images -> {out}")


@main.command()
@click.argument("model", type=click.Path(exists=True))
@click.argument("out", type=click.Path())
@click.option("--ratio", type=float, default=0.10, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def prune(model, out, ratio, as_json):
    """Channel-prune backbone convolutions and write the smaller model."""
    g = _load_model(model)
    try:
        pg, rep = prune_channels(g, ratio)
    except GraphError as e:
        raise click.UsageError(str(e))
    save_graph(pg, out)
    d = rep.to_dict()
    if as_json:
        click.echo(json.dumps(d, sort_keys=True))
    else:
        drop = 1 - d["flash_after"] / d["flash_before"]
        click.echo(f"pruned {sum(d['pruned_channels'].values())} channels "
                   f"in {len(d['pruned_channels'])} convs")
        click.echo(f"params: {d['params_before']} -> {d['params_after']}")
        click.echo(f"flash : {d['flash_before']} -> {d['flash_after']} "
                   f"({100 * drop:.1f}% smaller)")


def run_pipeline(g, img: np.ndarray, conf: float, iou_thresh: float):
    """letterbox -> execute -> decode -> NMS; boxes mapped back to original
    image pixels.  Returns (detections, letterbox info)."""
    size = g.metadata["input_size"]
    canvas, info = data.letterbox(img, size)
    x = data.to_input_tensor(canvas)
    detect = next(n for n in g.nodes if n.kind == "Detect")
    if g.tensors[g.input_id].dtype == I8:
        xq = quantize_tensor(x, g.tensors[g.input_id].quant)
        outs, _ = execute_int8(g, xq)
        heads = [dequantize_tensor(outs[t], g.tensors[t].quant)
                 for t in g.output_ids]
    else:
        outs, _ = execute_float(g, x)
        heads = [outs[t] for t in g.output_ids]
    dets = decode_predictions(heads, detect.attrs["anchors"],
                              detect.attrs["strides"], conf,
                              detect.attrs["num_classes"], size)
    dets = nms(dets, iou_thresh)
    h, w = img.shape[:2]
    mapped = []
    for d in dets:
        b = Box(
            min(max((d.box.x1 - info.pad_x) / info.scale, 0), w),
            min(max((d.box.y1 - info.pad_y) / info.scale, 0), h),
            min(max((d.box.x2 - info.pad_x) / info.scale, 0), w),
            min(max((d.box.y2 - info.pad_y) / info.scale, 0), h))
        mapped.append(Detection(b, d.class_id, d.confidence))
    return mapped, info


def _annotated_svg(image_path, dets: list[Detection]) -> str:
    img = data.load_image(image_path)
    h, w = img.shape[:2]
    with open(image_path, "rb") as f:
        payload = base64.b64encode(f.read()).decode()
    mime = "image/png" if str(image_path).lower().endswith(".png") else "image/x-portable-pixmap"
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
             f'viewBox="0 0 {w} {h}">',
             f'<image width="{w}" height="{h}" '
             f'href="data:{mime};base64,{payload}"/>']
    for d in dets:
        parts.append(
            f'<rect x="{d.box.x1:.1f}" y="{d.box.y1:.1f}" '
            f'width="{d.box.x2 - d.box.x1:.1f}" '
            f'height="{d.box.y2 - d.box.y1:.1f}" fill="none" '
            f'stroke="#d62728" stroke-width="2"/>')
        parts.append(
            f'<text x="{d.box.x1:.1f}" y="{max(d.box.y1 - 4, 10):.1f}" '
            f'font-size="12" fill="#d62728">{d.class_id}:'
            f'{d.confidence:.2f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


@main.command()
@click.argument("model", type=click.Path(exists=True))
@click.argument("image", type=click.Path(exists=True))
@click.option("--conf", type=float, default=DEFAULT_CONF_THRESH, show_default=True)
@click.option("--nms-iou", type=float, default=DEFAULT_NMS_IOU, show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="write JSON-lines here instead of stdout")
@click.option("--svg", type=click.Path(), default=None,
              help="also write an annotated SVG")
def infer(model, image, conf, nms_iou, out, svg):
    """Detect objects in one image; emits one JSON line per detection."""
    g = _load_model(model)
    try:
        img = data.load_image(image)
    except DataError as e:
        _fail_data(str(e))
    dets, _ = run_pipeline(g, img, conf, nms_iou)
    name = os.path.splitext(os.path.basename(image))[0]
    lines = [json.dumps(d.to_dict(image=name), sort_keys=True) for d in dets]
    text = "\n".join(lines) + ("\n" if lines else "")
    if out:
        with open(out, "w") as f:
            f.write(text)
    else:
        click.echo(text, nl=False)
    if svg:
        with open(svg, "w") as f:
            f.write(_annotated_svg(image, dets))


def _load_predictions(path) -> dict[str, list[Detection]]:
    preds: dict[str, list[Detection]] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            preds.setdefault(d["image"], []).append(Detection(
                Box(d["x1"], d["y1"], d["x2"], d["y2"]),
                int(d["class_id"]), float(d["confidence"])))
    return preds


@main.command(name="eval")
@click.argument("dataset", type=click.Path(exists=True))
@click.option("--model", "model_path", type=click.Path(exists=True), default=None)
@click.option("--predictions", type=click.Path(exists=True), default=None,
              help="precomputed JSON-lines detections instead of a model")
@click.option("--classes", default="person,vehicle", show_default=True,
              help="comma-separated class names")
@click.option("--conf", type=float, default=0.001, show_default=True,
              help="decode threshold for evaluation")
@click.option("--nms-iou", type=float, default=DEFAULT_NMS_IOU, show_default=True)
@click.option("--out-dir", type=click.Path(), default=None,
              help="write report.json, pr_curves.csv and pr_curves.svg here")
@click.option("--json", "as_json", is_flag=True)
def eval_cmd(dataset, model_path, predictions, classes, conf, nms_iou,
             out_dir, as_json):
    """Evaluate detections against a dataset (images/ + labels/)."""
    if (model_path is None) == (predictions is None):
        raise click.UsageError("provide exactly one of --model / --predictions")
    class_names = [c.strip() for c in classes.split(",") if c.strip()]
    try:
        stems, images, labels = data.load_dataset(dataset)
    except DataError as e:
        _fail_data(str(e))
    manifest = data.load_manifest(dataset)
    gts = {}
    sizes = {}
    for stem in stems:
        img = data.load_image(images[stem])
        sizes[stem] = img.shape[:2]
        gts[stem] = data.parse_label_file(labels[stem], stem,
                                          img.shape[1], img.shape[0])
    if predictions:
        preds = _load_predictions(predictions)
    else:
        g = _load_model(model_path)
        preds = {}
        for stem in stems:
            img = data.load_image(images[stem])
            preds[stem], _ = run_pipeline(g, img, conf, nms_iou)
    try:
        report = evaluate(preds, gts, class_names)
    except ValueError as e:
        _fail_data(str(e))
    payload = report.to_dict()
    if manifest:
        payload["splits"] = manifest
    if as_json:
        click.echo(json.dumps(payload, sort_keys=True))
    else:
        if manifest:
            click.echo("splits: " + " ".join(
                f"{k}={v}" for k, v in sorted(manifest.items())))
        click.echo(report.to_text())
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as f:
            json.dump(payload, f, sort_keys=True, indent=2)
        with open(os.path.join(out_dir, "pr_curves.csv"), "w") as f:
            f.write(pr_curve_csv(report, class_names))
        with open(os.path.join(out_dir, "pr_curves.svg"), "w") as f:
            f.write(pr_curve_svg(report, class_names))


@main.command()
@click.argument("model", type=click.Path(exists=True))
@click.option("--image", type=click.Path(exists=True), default=None,
              help="input image; defaults to a blank gray frame")
@click.option("--runs", type=int, default=10, show_default=True)
@click.option("--conf", type=float, default=DEFAULT_CONF_THRESH, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def bench(model, image, runs, conf, as_json):
    """Time the full pipeline (preprocess + inference + postprocess)."""
    g = _load_model(model)
    size = g.metadata["input_size"]
    if image:
        img = data.load_image(image)
    else:
        img = np.full((size, size, 3), data.LETTERBOX_PAD, dtype=np.uint8)
    run_pipeline(g, img, conf, DEFAULT_NMS_IOU)  # warm-up
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        run_pipeline(g, img, conf, DEFAULT_NMS_IOU)
        times.append((time.perf_counter() - t0) * 1000.0)
    result = {"model": os.path.basename(model),
              "runs_ms": [round(t, 3) for t in times],
              "mean_ms": round(sum(times) / len(times), 3),
              "host": platform.platform(),
              "input_size": size}
    if as_json:
        click.echo(json.dumps(result, sort_keys=True))
    else:
        click.echo(f"{result['model']}: mean {result['mean_ms']:.1f} ms "
                   f"over {runs} runs "
                   f"({', '.join(f'{t:.1f}' for t in times)})")


if __name__ == "__main__":
    main()
