"""Segmentation metrics, scene-level evaluation and the density sweep."""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np

from .errors import ShapeError, SizeError, ValidationError
from .scene import IGNORE_LABEL


@dataclass(eq=False)
class ConfusionMatrix:
    """Counts with rows = ground truth and columns = prediction."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @classmethod
    def from_labels(cls, gt, pred, num_classes: int, ignore_label: int = IGNORE_LABEL):
        cm = cls.empty(num_classes)
        cm.update(gt, pred, ignore_label)
        return cm

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, gt, pred, ignore_label: int = IGNORE_LABEL):
        gt = np.asarray(gt, dtype=np.int64).ravel()
        pred = np.asarray(pred, dtype=np.int64).ravel()
        if gt.shape != pred.shape:
            raise ShapeError(f"gt {gt.shape} and pred {pred.shape} differ")
        keep = gt != ignore_label
        gt, pred = gt[keep], pred[keep]
        c = self.num_classes
        if gt.size and (gt.min() < 0 or gt.max() >= c or pred.min() < 0 or pred.max() >= c):
            raise ValidationError("label outside [0, num_classes)")
        self.counts += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def miou(cm: ConfusionMatrix):
    """Per-class IoU (NaN where a class is absent from both gt and pred) and
    their mean over the remaining classes."""
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - tp
    ious = np.full(cm.num_classes, np.nan)
    ok = denom > 0
    ious[ok] = tp[ok] / denom[ok]
    mean = float(np.mean(ious[ok])) if np.any(ok) else float("nan")
    return ious, mean


def overall_accuracy(cm: ConfusionMatrix) -> float:
    return float(np.trace(cm.counts) / cm.total) if cm.total else float("nan")


@dataclass(eq=False)
class EvalResult:
    cm: ConfusionMatrix
    ious: np.ndarray
    miou: float
    accuracy: float
    labels: list


def evaluate_scenes(model, scenes, num_classes: int, views_m: int = 3, n_rgb: int = 737,
                    stride: float = 0.5, size: float = 1.5, n_chunk: int = 2048, seed: int = 0,
                    cache=None, workers: int = 1) -> EvalResult:
    """Sliding-window inference on every scene, pooled into one confusion matrix.

    With ``workers > 1`` scenes are labelled in separate processes; the result
    does not depend on the worker count.
    """
    from .pipeline import infer_scene

    run = partial(infer_scene, model=model, stride=stride, seed=seed, views_m=views_m,
                  n_rgb=n_rgb, size=size, n_chunk=n_chunk, cache=cache)
    if workers > 1 and len(scenes) > 1:
        with ProcessPoolExecutor(min(workers, len(scenes))) as pool:
            results = list(pool.map(run, scenes))
    else:
        results = [run(scene) for scene in scenes]
    cm = ConfusionMatrix.empty(num_classes)
    preds = []
    for scene, res in zip(scenes, results):
        cm.update(scene.points.labels, res.labels)
        preds.append(res.labels)
    ious, m = miou(cm)
    return EvalResult(cm, ious, m, overall_accuracy(cm), preds)


def subsample_indices(n: int, ratio: float, rng) -> np.ndarray:
    """``round(ratio * n)`` indices drawn uniformly without replacement, ascending.
    Ratio 1 keeps every point in its original order."""
    if ratio >= 1.0:
        return np.arange(n)
    keep = int(round(ratio * n))
    return np.sort(rng.choice(n, keep, replace=False))


def density_robustness(model, scenes, num_classes: int,
                       keep_ratios=(1.0, 0.5, 0.25, 0.125, 0.0625), seed: int = 0,
                       min_points: int = 3, **eval_kwargs) -> list:
    """mIoU after uniformly thinning each scene cloud; images stay untouched.

    Returns rows ``{"ratio", "miou", "ious", "points", "evaluable"}``. A ratio
    that is not positive, or leaves some scene with fewer than ``min_points``
    points, gives an unevaluable row.
    """
    rows = []
    for ratio in keep_ratios:
        row = {"ratio": float(ratio), "miou": None, "ious": None, "points": 0, "evaluable": False}
        if ratio <= 0:
            rows.append(row)
            continue
        rng = np.random.default_rng([seed, 31])
        thinned = []
        for scene in scenes:
            idx = subsample_indices(scene.points.n, min(ratio, 1.0), rng)
            thinned.append(scene if len(idx) == scene.points.n else scene.with_points(idx))
        row["points"] = int(sum(s.points.n for s in thinned))
        if min(s.points.n for s in thinned) < min_points:
            rows.append(row)
            continue
        try:
            res = evaluate_scenes(model, thinned, num_classes, seed=seed, **eval_kwargs)
        except SizeError:
            rows.append(row)
            continue
        row.update(miou=res.miou, ious=list(res.ious), evaluable=True)
        rows.append(row)
    return rows


# ---------------------------------------------------------------- output

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if np.isnan(v) else repr(v)
    return str(v)


def write_metrics_csv(path, rows, class_names, key: str = "epoch"):
    """CSV with a fixed header; ``key`` is ``epoch`` for training logs and
    ``ratio`` for the density sweep."""
    path = Path(path)
    header = [key, "split", "loss", "miou"] + [f"iou_{c}" for c in class_names]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            ious = r.get("ious") or [None] * len(class_names)
            w.writerow([_fmt(r.get(key)), r.get("split", ""), _fmt(r.get("loss")),
                        _fmt(r.get("miou"))] + [_fmt(None if v is None else float(v)) for v in ious])


def read_metrics_csv(path) -> list:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


def robustness_svg(series: dict, path=None, width: int = 480, height: int = 320) -> str:
    """Static line chart of mIoU against keep ratio (log2 x axis), one polyline
    per model. ``series`` maps a label to ``[(ratio, miou), ...]``; missing
    values are skipped."""
    left, right, top, bottom = 56, 16, 24, 44
    pw, ph = width - left - right, height - top - bottom
    pts_all = [(r, m) for s in series.values() for r, m in s if m is not None and r > 0]
    if not pts_all:
        raise ValidationError("nothing to plot")
    lx = [np.log2(r) for r, _ in pts_all]
    x0, x1 = min(lx), max(lx)
    if x1 - x0 < 1e-9:
        x0, x1 = x0 - 1, x1 + 1

    def sx(r):
        return left + (np.log2(r) - x0) / (x1 - x0) * pw

    def sy(m):
        return top + (1 - m) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for t in np.linspace(0, 1, 6):
        y = sy(t)
        out.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{t:.1f}</text>')
    ticks = sorted({r for r, _ in pts_all})
    for r in ticks:
        x = sx(r)
        out.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 4}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{top + ph + 16}" text-anchor="middle">{r:g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">'
               f'kept fraction of points</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">mIoU</text>')
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    for i, (name, pts) in enumerate(series.items()):
        pts = sorted((r, m) for r, m in pts if m is not None and r > 0)
        color = palette[i % len(palette)]
        coords = " ".join(f"{sx(r):.1f},{sy(m):.1f}" for r, m in pts)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + 8}" y="{top + 14 * (i + 1)}" fill="{color}">{name}</text>')
    out.append("</svg>")
    svg = "\n".join(out) + "\n"
    if path is not None:
        Path(path).write_text(svg)
    return svg
