"""Metrics, held-out evaluation reports and the nearest-view reprojection baseline."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .dataset import Dataset
from .field import config_digest
from .geometry import CameraPose, generate_rays, project, rotation_geodesic
from .properties import Kind
from .renderer import PropertyImage, render_image
from .scene import annotation_rotation

__all__ = [
    "psnr",
    "miou",
    "l1_metric",
    "nearest_view",
    "heuristic_baseline",
    "EvalReport",
    "evaluate_predictions",
    "evaluate_model",
    "evaluate",
    "write_report",
    "baseline_report",
    "render_views",
    "property_metric",
]

TABLE_ORDER = (Kind.SL, Kind.SN, Kind.SH, Kind.KP, Kind.ED)
METRIC_NAMES = {Kind.RGB: "psnr", Kind.SL: "miou", Kind.SN: "l1", Kind.SH: "l1", Kind.KP: "l1", Kind.ED: "l1"}


def _data(x):
    return x.data if isinstance(x, PropertyImage) else np.asarray(x)


def psnr(pred, truth) -> float:
    """``10 log10(1 / MSE)`` for values in [0, 1]; an exact match gives ``inf``."""
    p, t = _data(pred).astype(np.float64), _data(truth).astype(np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    mse = float(np.mean((p - t) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def miou(pred_labels, truth_labels, n_classes: int) -> float:
    """Mean IoU over classes that occur in the prediction or the truth."""
    p = np.asarray(pred_labels).ravel().astype(np.int64)
    t = np.asarray(truth_labels).ravel().astype(np.int64)
    if p.shape != t.shape:
        raise ValueError("label maps differ in size")
    if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    conf = np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - tp
    present = union > 0
    if not present.any():
        return 1.0
    return float(np.mean(tp[present] / union[present]))


def l1_metric(pred, truth) -> float:
    p, t = _data(pred).astype(np.float64), _data(truth).astype(np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return float(np.mean(np.abs(p - t)))


def property_metric(kind: Kind, pred, truth, n_classes: int | None = None) -> float:
    """The headline metric of one property; SL inputs are per-class probabilities."""
    if kind is Kind.RGB:
        return psnr(pred, truth)
    if kind is Kind.SL:
        p, t = _data(pred), _data(truth)
        return miou(np.argmax(p, axis=-1), np.argmax(t, axis=-1), n_classes or p.shape[-1])
    return l1_metric(pred, truth)


# -- baseline ------------------------------------------------------------------

def nearest_view(poses: Sequence[CameraPose], target: CameraPose, candidates: Sequence[int],
                 translation_weight: float = 1.0) -> int:
    """Candidate minimizing rotation geodesic (radians) + weight * camera-centre distance."""
    def dist(i):
        p = poses[i]
        return (rotation_geodesic(p.rotation, target.rotation)
                + translation_weight * float(np.linalg.norm(p.translation - target.translation)))
    return min(candidates, key=dist)


def heuristic_baseline(dataset: Dataset, test_pose: CameraPose, views: Sequence[int] | None = None) -> dict:
    """Label a novel view by reprojecting the nearest training view's annotations through its depth.

    Foreground pixels are back-projected with the stored depth and splatted
    into the target camera with a z-buffer; background pixels are treated as
    points at infinity and only fill what no surface covers.  Normals are
    rotated into the target's annotation frame.  Remaining holes take the
    value of the nearest filled pixel.
    """
    views = list(dataset.train_views if views is None else views)
    src_i = nearest_view(dataset.poses, test_pose, views)
    src = dataset.poses[src_i]
    origins, dirs = generate_rays(src)
    depth = dataset.depth[src_i].reshape(-1).astype(np.float64)
    fg = depth > 0
    H, W = test_pose.height, test_pose.width

    pts = np.where(fg[:, None], origins + depth[:, None] * dirs, test_pose.translation + 1e6 * dirs)
    r, c, z = project(test_pose, pts)
    ok = (z > 0) & np.isfinite(r) & np.isfinite(c)
    r, c = np.rint(np.where(ok, r, -1)), np.rint(np.where(ok, c, -1))
    ok &= (r >= 0) & (r < H) & (c >= 0) & (c < W)
    rows, cols = r.astype(np.int64), c.astype(np.int64)
    # background pixels are points at infinity and lose every depth test
    zkey = np.where(fg, z, np.inf)

    # z-buffer: for each target pixel keep the source pixel with the smallest depth
    src_idx = np.flatnonzero(ok)
    tgt = rows[src_idx] * W + cols[src_idx]
    order = np.lexsort((zkey[src_idx], tgt))
    tgt_sorted = tgt[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = tgt_sorted[1:] != tgt_sorted[:-1]
    winner = np.full(H * W, -1, dtype=np.int64)
    winner[tgt_sorted[first]] = src_idx[order][first]

    filled = winner >= 0
    if not filled.any():
        winner[:] = 0
        filled[:] = True
    _, (ir, ic) = ndimage.distance_transform_edt(~filled.reshape(H, W), return_indices=True)
    winner = winner.reshape(H, W)[ir, ic].reshape(-1)

    rot = annotation_rotation(test_pose) @ annotation_rotation(src).T
    out = {}
    for kind, imgs in dataset.images.items():
        data = imgs[src_i].reshape(H * W, -1)[winner].astype(np.float64)
        if kind is Kind.SN:
            data = data @ rot.T
            data /= np.linalg.norm(data, axis=-1, keepdims=True)
        out[kind] = PropertyImage(kind, data.reshape(H, W, -1))
    return out


# -- reports -------------------------------------------------------------------

@dataclass
class EvalReport:
    per_property: dict  # kind -> aggregate metric (mean over views)
    per_view: list  # [{"view": i, kind.value: metric, ...}]
    config_digest: str = ""
    label: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def psnr(self) -> float:
        return self.per_property.get(Kind.RGB, math.nan)

    def summary(self) -> dict:
        return {k.value: v for k, v in self.per_property.items()}

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "config_digest": self.config_digest,
            "metrics": {k.value: {"metric": METRIC_NAMES[k], "value": _json_num(v)}
                        for k, v in self.per_property.items()},
            "per_view": [{k: _json_num(v) for k, v in row.items()} for row in self.per_view],
            **self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self, others: Sequence["EvalReport"] = ()) -> str:
        """Aligned text table: one row per report, columns SL, SN, SH, KP, ED, then PSNR."""
        reports = [self, *others]
        cols = [k for k in (*TABLE_ORDER, Kind.RGB) if any(k in r.per_property for r in reports)]
        head = ["method"] + [f"{k.value.upper()}({'psnr' if k is Kind.RGB else METRIC_NAMES[k]})" for k in cols]
        rows = [[r.label or "model"] + [_fmt(r.per_property.get(k)) for k in cols] for r in reports]
        widths = [max(len(x[i]) for x in [head] + rows) for i in range(len(head))]
        line = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        return "\n".join([line(head), line(["-" * w for w in widths])] + [line(r) for r in rows]) + "\n"


def _json_num(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def _fmt(v) -> str:
    if v is None:
        return "-"
    if math.isinf(v):
        return "inf"
    return f"{v:.4f}"


def evaluate_predictions(predictions: dict, dataset: Dataset, views: Sequence[int], kinds=None,
                         label: str = "") -> EvalReport:
    """Score ``predictions[view][kind]`` (PropertyImage or array) against the dataset ground truth."""
    kinds = [k for k in (kinds or Kind) if k in dataset.images]
    per_view = []
    for v in views:
        row = {"view": int(v)}
        for k in kinds:
            if k not in predictions[v]:
                continue
            row[k.value] = property_metric(k, predictions[v][k], dataset.images[k][v], dataset.n_classes)
        per_view.append(row)
    agg = {}
    for k in kinds:
        vals = [row[k.value] for row in per_view if k.value in row]
        if vals:
            agg[k] = math.inf if any(math.isinf(x) for x in vals) else float(np.mean(vals))
    return EvalReport(agg, per_view, label=label)


def render_views(model, dataset: Dataset, views: Sequence[int], workers: int = 1) -> dict:
    """Fine-pass property images of ``views`` rendered without jitter."""
    sampling = model.sampling(dataset.near, dataset.far)
    out = {}
    for v in views:
        res = render_image(model.coarse, model.fine, dataset.poses[v], model.specs, sampling, workers)
        out[v] = res.fine
    return out


def evaluate_model(model, dataset: Dataset, views: Sequence[int], workers: int = 1, label: str = "",
                   predictions: dict | None = None) -> EvalReport:
    preds = predictions if predictions is not None else render_views(model, dataset, views, workers)
    report = evaluate_predictions(preds, dataset, views, [s.kind for s in model.specs], label)
    report.config_digest = config_digest(model.checkpoint_config()).hex()
    return report


def evaluate(checkpoint, dataset: Dataset, split: str = "test", workers: int = 1) -> tuple[EvalReport, dict]:
    """Load a checkpoint, render the split and score it; returns the report and the rendered images."""
    from .trainer import model_from_checkpoint

    model = model_from_checkpoint(checkpoint)
    views = dataset.test_views if split == "test" else dataset.train_views
    preds = render_views(model, dataset, views, workers)
    return evaluate_model(model, dataset, views, label=Path(checkpoint).stem, predictions=preds), preds


def baseline_report(dataset: Dataset, views: Sequence[int], kinds=None) -> tuple[EvalReport, dict]:
    preds = {v: heuristic_baseline(dataset, dataset.poses[v]) for v in views}
    return evaluate_predictions(preds, dataset, views, kinds, label="nearest-view warp"), preds


def write_report(report: EvalReport, out_dir, others: Sequence[EvalReport] = (), predictions: dict | None = None,
                 dataset: Dataset | None = None, figures: bool = True) -> list[Path]:
    """Write ``report.json``, ``report.txt`` (aligned table), ``per_view.csv`` and optional figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "report.json", out / "report.txt", out / "per_view.csv"]
    doc = report.to_dict()
    if others:
        doc["compared"] = [o.to_dict() for o in others]
    written[0].write_text(json.dumps(doc, indent=2))
    written[1].write_text(report.table(others))
    keys = ["view"] + [k.value for k in (*TABLE_ORDER, Kind.RGB) if k in report.per_property]
    with written[2].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in report.per_view:
            w.writerow([_json_num(row.get(k, "")) for k in keys])
    if figures and predictions is not None and dataset is not None:
        from .plotting import metric_bars, view_grid
        for v, pred in predictions.items():
            written.append(view_grid(dataset, v, pred, out / f"view_{v:04d}.png"))
        if others:
            written.append(metric_bars([report, *others], out / "metrics.png"))
    return written
