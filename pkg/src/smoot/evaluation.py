"""Modification-based evaluation: accuracy-drop curves, AUC, per-image masking profiles."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset
from .saliency import mask_batch, rank_batch, saliency_pass
from .tensor import Tensor, softmax_np

DEFAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(9))  # 0.0 .. 0.8
MAX_FRACTION = 0.8


def count_for_fraction(fraction: float, n_features: int) -> int:
    """floor(fraction * P), exact for decimal fractions."""
    return math.floor(Fraction(repr(float(fraction))) * n_features)


def predict_logits(model, images: np.ndarray) -> np.ndarray:
    with model.frozen():
        return model.forward(Tensor(np.asarray(images, dtype=model.dtype)), training=False).data


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def top_n_hits(logits: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    """True where the label is among the n highest outputs (ties: lower class index ranks first)."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :n]
    return (order == np.asarray(labels)[:, None]).any(axis=1)


def top_n_accuracy(model, ds: Dataset, n: int = 1, batch_size: int = 500) -> float:
    """Percentage of samples whose label is among the n highest softmax outputs."""
    if ds is None or len(ds) == 0:
        raise ValueError("top_n_accuracy needs a non-empty dataset")
    if not 1 <= n <= model.n_classes:
        raise ValueError(f"n must lie in [1, {model.n_classes}], got {n}")
    hits = 0
    for sl in _batches(len(ds), batch_size):
        hits += int(top_n_hits(predict_logits(model, ds.images[sl]), ds.labels[sl], n).sum())
    return 100.0 * hits / len(ds)


def auc(points: Sequence[Tuple[float, float]]) -> float:
    """Trapezoidal mean of accuracy over the fraction axis (units of accuracy)."""
    pts = [(float(f), float(a)) for f, a in points]
    if len(pts) < 2:
        raise ValueError("AUC needs at least two points")
    fr = [f for f, _ in pts]
    if any(b <= a for a, b in zip(fr, fr[1:])):
        raise ValueError(f"fractions must be strictly increasing, got {fr}")
    area = sum((f1 - f0) * (a0 + a1) / 2.0 for (f0, a0), (f1, a1) in zip(pts, pts[1:]))
    return area / (fr[-1] - fr[0])


@dataclass
class DropCurve:
    fractions: List[float]
    accuracy: List[float]

    @property
    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.fractions, self.accuracy))

    @property
    def auc(self) -> float:
        return auc(self.points)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fraction", "accuracy_percent"])
        for f, a in self.points:
            w.writerow([repr(float(f)), repr(float(a))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DropCurve":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([float(r["fraction"]) for r in rows], [float(r["accuracy_percent"]) for r in rows])


def _check_fractions(fractions: Sequence[float]) -> List[float]:
    fr = [float(f) for f in fractions]
    if not fr or fr[0] != 0.0:
        raise ValueError("fractions must start at 0")
    if any(b <= a for a, b in zip(fr, fr[1:])):
        raise ValueError(f"fractions must be strictly increasing, got {fr}")
    if fr[-1] > MAX_FRACTION:
        raise ValueError(f"fractions must not exceed {MAX_FRACTION}, got {fr[-1]}")
    return fr


def accuracy_drop_curve(model, ds: Dataset, fractions: Sequence[float] = DEFAULT_FRACTIONS,
                        direction: str = "top", seed: int = 0, batch_size: int = 500,
                        rank_by: str = "value", target: str = "predicted") -> DropCurve:
    """Top-1 accuracy after masking a growing share of each image's most salient features.

    Saliency is computed once per image on the unmasked input with the model fixed.
    """
    fr = _check_fractions(fractions)
    if len(ds) == 0:
        raise ValueError("accuracy_drop_curve needs a non-empty dataset")
    p = ds.n_features
    ks = [count_for_fraction(f, p) for f in fr]
    hits = np.zeros(len(fr), dtype=np.int64)
    for b, sl in enumerate(_batches(len(ds), batch_size)):
        images, labels = ds.images[sl], ds.labels[sl]
        grads, _ = saliency_pass(model, images, target, labels)
        order = rank_batch(grads, rank_by)
        for j, k in enumerate(ks):
            rng = np.random.default_rng([seed, b, j])
            masked = images if k == 0 else mask_batch(images, order, k, direction, rng)
            hits[j] += int(top_n_hits(predict_logits(model, masked), labels, 1).sum())
    return DropCurve(fr, [100.0 * h / len(ds) for h in hits])


# ---------------------------------------------------------------------------
# class I / class II diagnosis
# ---------------------------------------------------------------------------

def sweep_fractions(step_fraction: float) -> List[float]:
    """0, step, 2*step, ... up to 0.8; at least 5 steps are required."""
    if step_fraction <= 0:
        raise ValueError(f"step fraction must be > 0, got {step_fraction}")
    n_steps = math.floor(Fraction(repr(MAX_FRACTION)) / Fraction(repr(float(step_fraction))))
    if n_steps < 5:
        raise ValueError(f"step {step_fraction} gives {n_steps} steps over [0, {MAX_FRACTION}]; need >= 5")
    return [float(Fraction(repr(float(step_fraction))) * i) for i in range(n_steps + 1)]


@dataclass
class ImageMaskProfile:
    sample_id: int
    fractions: List[float]
    probabilities: List[float]

    @property
    def peak_index(self) -> int:
        return int(np.argmax(self.probabilities))  # first maximum wins ties

    @property
    def peak_fraction(self) -> float:
        return self.fractions[self.peak_index]

    @property
    def image_class(self) -> str:
        return "I" if self.peak_index == 0 else "II"


def profile_from_curve(sample_id: int, fractions: Sequence[float], probabilities: Sequence[float]) -> ImageMaskProfile:
    return ImageMaskProfile(int(sample_id), list(fractions), [float(p) for p in probabilities])


def diagnose_batch(model, images: np.ndarray, labels: np.ndarray, ids, step_fraction: float,
                   seed: int = 0, rank_by: str = "value", target: str = "predicted") -> List[ImageMaskProfile]:
    """Label-class probability while masking the highest-gradient features in growing shares."""
    fr = sweep_fractions(step_fraction)
    p = int(np.prod(images.shape[1:]))
    grads, _ = saliency_pass(model, images, target, labels)
    order = rank_batch(grads, rank_by)
    probs = np.zeros((len(labels), len(fr)))
    rows = np.arange(len(labels))
    for j, f in enumerate(fr):
        k = count_for_fraction(f, p)
        rng = np.random.default_rng([seed, int(ids[0]) if len(ids) else 0, j])
        masked = images if k == 0 else mask_batch(images, order, k, "top", rng)
        sm = softmax_np(predict_logits(model, masked).astype(np.float64))
        probs[:, j] = sm[rows, labels]
    return [profile_from_curve(i, fr, probs[r]) for r, i in enumerate(ids)]


def diagnose_image(model, x, y: int, step_fraction: float = 0.1, seed: int = 0, sample_id: int = 0,
                   rank_by: str = "value", target: str = "predicted") -> ImageMaskProfile:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim == 3:
        data = data[None]
    return diagnose_batch(model, data, np.array([int(y)]), [sample_id], step_fraction, seed, rank_by, target)[0]


def diagnose_dataset(model, ds: Dataset, step_fraction: float = 0.1, seed: int = 0, batch_size: int = 500,
                     rank_by: str = "value", target: str = "predicted") -> List[ImageMaskProfile]:
    out: List[ImageMaskProfile] = []
    for sl in _batches(len(ds), batch_size):
        out.extend(diagnose_batch(model, ds.images[sl], ds.labels[sl], ds.ids[sl], step_fraction, seed,
                                  rank_by, target))
    return out


def class2_fraction(model, ds: Dataset, step_fraction: float = 0.1, seed: int = 0, **kw) -> float:
    """Percentage of images whose masking profile peaks after some masking (class II)."""
    profiles = diagnose_dataset(model, ds, step_fraction, seed, **kw)
    return class2_percent(profiles)


def class2_percent(profiles: Sequence[ImageMaskProfile]) -> float:
    if not profiles:
        raise ValueError("no profiles")
    return 100.0 * sum(p.image_class == "II" for p in profiles) / len(profiles)


# ---------------------------------------------------------------------------
# planted-feature saliency quality
# ---------------------------------------------------------------------------

def top_mass_share(grads: np.ndarray, masks: np.ndarray, top_frac: float = 0.2) -> np.ndarray:
    """Per image: share of |gradient| mass of the top ``top_frac`` features that lies inside ``masks``."""
    s = np.abs(np.asarray(grads, dtype=np.float64)).reshape(len(grads), -1)
    m = np.asarray(masks, dtype=bool).reshape(len(grads), -1)
    k = max(1, count_for_fraction(top_frac, s.shape[1]))
    top = np.argsort(-s, axis=1, kind="stable")[:, :k]
    vals = np.take_along_axis(s, top, axis=1)
    inside = np.take_along_axis(m, top, axis=1)
    total = vals.sum(axis=1)
    return np.where(total > 0, (vals * inside).sum(axis=1) / np.where(total > 0, total, 1.0), 0.0)
