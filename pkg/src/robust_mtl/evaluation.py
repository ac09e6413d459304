"""Segmentation scoring and the perturbation sweep."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .losses import IGNORE_LABEL
from .network import Model
from .perturb import PerturbationSpec, measure_epsilon, perturb_batch
from .tensor import ContractError, DimensionError

DEFAULT_GRID = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
SWEEP_HEADER = ["family", "eps_requested", "eps_measured", "snr", "miou_clean", "miou_adv", "q"]


def argmax_mask(probs, axis: int = -1) -> np.ndarray:
    """Per-pixel class index; ties resolve to the lowest index."""
    return np.argmax(np.asarray(probs), axis=axis)


class ConfusionMatrix:
    """Pooled (truth, prediction) counts; label 255 in the truth is ignored."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, truth) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise DimensionError(f"prediction {pred.shape} vs truth {truth.shape}")
        keep = truth != IGNORE_LABEL
        t = truth[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        s = self.num_classes
        if t.size and (t.min() < 0 or t.max() >= s or p.min() < 0 or p.max() >= s):
            raise ContractError(f"labels outside 0..{s - 1}")
        self.counts += np.bincount(t * s + p, minlength=s * s).reshape(s, s)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, truth) -> ConfusionMatrix:
    return cm.accumulate(pred, truth)


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes seen in either prediction or truth."""
    if cm.total == 0:
        raise ContractError("mIoU of an empty confusion matrix")
    denom = cm.tp + cm.fp + cm.fn
    present = denom > 0
    return float(np.mean(cm.tp[present] / denom[present]))


def q_ratio(miou_adv: float, miou_clean: float) -> float:
    if not miou_clean > 0:
        raise ContractError(f"Q needs a positive clean mIoU, got {miou_clean}")
    return miou_adv / miou_clean


def majority_miou(labels, num_classes: int) -> float:
    """mIoU of a predictor that outputs the most frequent class everywhere."""
    labels = np.asarray(labels)
    keep = labels[labels != IGNORE_LABEL]
    guess = np.full_like(labels, np.bincount(keep.ravel(), minlength=num_classes).argmax())
    return miou(ConfusionMatrix(num_classes).accumulate(guess, labels))


def predict_masks(model: Model, images, batch: int = 16) -> np.ndarray:
    model.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            probs = model.forward_seg(np.asarray(images[i:i + batch], dtype=np.float64))
            out.append(argmax_mask(probs.data, axis=1))
    return np.concatenate(out) if out else np.zeros((0,), dtype=np.int64)


def evaluate(model: Model, images, labels, batch: int = 16) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.config.num_classes)
    return cm.accumulate(predict_masks(model, images, batch), labels)


@dataclass
class SweepRow:
    family: str
    eps_requested: float
    eps_measured: float
    snr: float
    miou_clean: float
    miou_adv: float
    q: float

    def values(self) -> list[str]:
        return [self.family] + [repr(float(getattr(self, k))) for k in SWEEP_HEADER[1:]]


@dataclass
class SweepResult:
    family: str
    rows: list[SweepRow] = field(default_factory=list)

    def q_at(self, eps: float) -> float:
        for r in self.rows:
            if r.eps_requested == eps:
                return r.q
        raise KeyError(eps)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for r in self.rows:
            writer.writerow(r.values())
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path


def read_sweep_csv(path) -> SweepResult:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SWEEP_HEADER:
            raise ContractError(f"{path}: not a sweep CSV (header {header})")
        rows = [SweepRow(r[0], *(float(v) for v in r[1:])) for r in reader if r]
    if not rows:
        raise ContractError(f"{path}: sweep CSV has no rows")
    return SweepResult(rows[0].family, rows)


def _attack_chunk(args):
    model, images, labels, spec, first = args
    x_adv = perturb_batch(images, spec, model, labels, first_index=first)
    preds = predict_masks(model, x_adv)
    cm = ConfusionMatrix(model.config.num_classes).accumulate(preds, labels)
    x = np.asarray(images, dtype=np.float64)
    r = x_adv - x
    axes = tuple(range(1, x.ndim))
    return cm, np.sum(r * r, axis=axes).tolist(), np.sum(x * x, axis=axes).tolist()


def run_sweep(model: Model, images, labels, family: str, grid=DEFAULT_GRID, seed: int = 0,
              chunk: int = 8, jobs: int = 1, **spec_options) -> SweepResult:
    """Clean pass, then one pooled confusion matrix per strength in ``grid``.

    Work is split into fixed chunks of images; chunk results are merged in
    index order, so the output does not depend on ``jobs``.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ContractError("run_sweep needs at least one image")
    m_clean = miou(evaluate(model, images, labels))
    result = SweepResult(family, [SweepRow(family, 0.0, 0.0, math.inf, m_clean, m_clean, 1.0)])
    starts = list(range(0, len(images), chunk))
    pool = ProcessPoolExecutor(jobs) if jobs > 1 else None
    try:
        for eps in grid:
            spec = PerturbationSpec(family, float(eps), seed=seed, **spec_options)
            work = [(model, images[s:s + chunk], labels[s:s + chunk], spec, s) for s in starts]
            parts = list(pool.map(_attack_chunk, work)) if pool else [_attack_chunk(w) for w in work]
            cm = ConfusionMatrix(model.config.num_classes)
            noise_terms, signal_terms = [], []
            for part_cm, part_noise, part_signal in parts:
                cm.merge(part_cm)
                noise_terms += part_noise
                signal_terms += part_signal
            # per-image sums combined exactly, so chunking cannot change the last bit
            noise, signal = math.fsum(noise_terms), math.fsum(signal_terms)
            eps_hat = math.sqrt(noise / images.size)
            snr = signal / noise if noise > 0 else math.inf
            m_adv = miou(cm)
            result.rows.append(SweepRow(family, float(eps), eps_hat, snr, m_clean, m_adv, q_ratio(m_adv, m_clean)))
    finally:
        if pool:
            pool.shutdown()
    return result


# -- SVG report --------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


def render_svg(curves: list[tuple[str, SweepResult]], width: int = 640, height: int = 420) -> str:
    """Q (percent) against eps on a log axis, one polyline per curve."""
    left, right, top, bottom = 70, 170, 30, 60
    pw, ph = width - left - right, height - top - bottom
    eps_all = sorted({r.eps_requested for _, c in curves for r in c.rows if r.eps_requested > 0})
    if not eps_all:
        raise ContractError("report needs at least one row with eps > 0")
    lo, hi = math.log2(eps_all[0]), math.log2(eps_all[-1])
    span = hi - lo or 1.0

    def px(eps):
        return left + (math.log2(eps) - lo) / span * pw

    def py(q):
        return top + (1.0 - min(max(q, 0.0), 1.05) / 1.05) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for q in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0):
        y = py(q)
        out.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="#dddddd"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end">{q * 100:.0f}</text>')
    for e in eps_all:
        x = px(e)
        out.append(f'<line x1="{x:.2f}" y1="{top}" x2="{x:.2f}" y2="{top + ph}" stroke="#eeeeee"/>')
        out.append(f'<text x="{x:.2f}" y="{top + ph + 18}" text-anchor="middle">{e:g}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 15}" text-anchor="middle">epsilon (log scale)</text>')
    out.append(f'<text x="18" y="{top + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {top + ph / 2:.2f})">Q = mIoU_adv / mIoU_clean [%]</text>')
    for i, (name, curve) in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        pts = [(px(r.eps_requested), py(r.q)) for r in curve.rows if r.eps_requested > 0]
        path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
        for x, y in pts:
            out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{color}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        label = _escape(f"{name} ({curve.family})")
        out.append(f'<text x="{left + pw + 38}" y="{ly}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
