"""Input-gradient saliency, feature ranking and the masking function.

Masking replaces the selected features of an image with i.i.d. uniform
draws from ``[min, max]`` of that image's *unmasked* feature values.  The
batched masker always draws one uniform per feature, whatever ``k`` is, so
RNG consumption does not depend on the mask counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import NumericError, Tensor

TARGET_MODES = ("predicted", "label", "loss", "score")
DIRECTIONS = ("bottom", "top")


class MaskError(ValueError):
    """Invalid mask count for the number of features."""


def saliency_pass(model, images, mode: str = "predicted", labels=None) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of a per-image scalar w.r.t. each input feature, in eval mode.

    Returns ``(grads [N, P], logits [N, C])``.  Modes:

    * ``predicted``: log-probability of the arg-max class (default)
    * ``label``: log-probability of ``labels``
    * ``loss``: cross-entropy of ``labels``
    * ``score``: raw logit of the arg-max class

    Images in a batch do not interact, so one backward pass over the summed
    scalars yields every per-image gradient.
    """
    if mode not in TARGET_MODES:
        raise ValueError(f"unknown saliency target {mode!r}; choose from {TARGET_MODES}")
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    x = Tensor(data.astype(model.dtype, copy=True), requires_grad=True)
    model.check_input(x)
    n = x.shape[0]
    with model.frozen():
        logits = model.forward(x, training=False)
        if mode in ("label", "loss"):
            if labels is None:
                raise ValueError(f"saliency target {mode!r} needs labels")
            target = np.asarray(labels, dtype=np.int64).reshape(n)
        else:
            target = logits.data.argmax(axis=1)
        if mode == "score":
            scalar = T.pick(logits, target).sum()
        elif mode == "loss":
            scalar = T.cross_entropy(logits, target) * float(n)
        else:
            scalar = T.pick(T.log_softmax(logits), target).sum()
        scalar.backward()
    return x.grad.reshape(n, -1), logits.data


def input_gradient(model, x, target_mode: str = "predicted", label=None) -> np.ndarray:
    """Flattened input gradient of one image [1, C, H, W] -> [P]."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim != 4 or data.shape[0] != 1:
        raise T.ShapeError(f"input_gradient expects one image [1, C, H, W], got {data.shape}")
    labels = None if label is None else [int(np.asarray(label).reshape(-1)[0])]
    grads, _ = saliency_pass(model, data, target_mode, labels)
    return grads[0]


@dataclass
class SaliencyRanking:
    """Feature indices in ascending order of their score, plus the raw gradients."""

    indices: np.ndarray
    gradients: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def _scores(grads: np.ndarray, by: str) -> np.ndarray:
    if by == "value":
        return grads
    if by == "magnitude":
        return np.abs(grads)
    raise ValueError(f"rank_by must be 'value' or 'magnitude', got {by!r}")


def rank_features(grad, by: str = "value") -> SaliencyRanking:
    """Stable ascending sort of the features by gradient (ties: lower index first)."""
    g = np.asarray(grad.data if isinstance(grad, Tensor) else grad).reshape(-1)
    if g.size < 1:
        raise ValueError("cannot rank an empty gradient")
    if np.isnan(g).any():
        raise NumericError("NaN in saliency gradient")
    return SaliencyRanking(np.argsort(_scores(g, by), kind="stable"), g)


def rank_batch(grads: np.ndarray, by: str = "value") -> np.ndarray:
    """Row-wise stable ascending argsort of [N, P] gradients."""
    if np.isnan(grads).any():
        raise NumericError("NaN in saliency gradient")
    return np.argsort(_scores(grads, by), axis=1, kind="stable")


@dataclass
class MaskSpec:
    k: int
    direction: str = "bottom"
    fill_policy: str = "uniform-remaining-range"
    seed: Optional[int] = None

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.fill_policy != "uniform-remaining-range":
            raise ValueError(f"unsupported fill policy {self.fill_policy!r}")
        if self.k < 0:
            raise MaskError(f"mask count must be >= 0, got {self.k}")


def mask_batch(images: np.ndarray, order: np.ndarray, ks, direction: str = "bottom",
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Mask ``ks[i]`` features of image i, chosen from its ascending ``order`` row.

    ``bottom`` masks the first ``k`` entries of the order, ``top`` the last
    ``k``.  Unmasked features are returned bit-identical.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    n = images.shape[0]
    flat = images.reshape(n, -1)
    p = flat.shape[1]
    ks = np.broadcast_to(np.asarray(ks, dtype=np.int64), (n,))
    if (ks < 0).any() or (ks > p).any():
        raise MaskError(f"mask counts must lie in [0, {p}], got range [{ks.min()}, {ks.max()}]")
    if (ks == p).any():
        raise MaskError(f"masking all {p} features leaves no range to sample fill values from")
    if order.shape != (n, p):
        raise T.ShapeError(f"order has shape {order.shape}, expected {(n, p)}")
    rng = rng if rng is not None else np.random.default_rng()
    u = rng.random((n, p))
    position = np.empty_like(order)
    np.put_along_axis(position, order, np.arange(p)[None, :].repeat(n, axis=0), axis=1)
    if direction == "bottom":
        masked = position < ks[:, None]
    else:
        masked = position >= (p - ks)[:, None]
    lo = np.where(masked, np.inf, flat).min(axis=1, keepdims=True)
    hi = np.where(masked, -np.inf, flat).max(axis=1, keepdims=True)
    fill = (lo.astype(np.float64) + (hi - lo).astype(np.float64) * u).astype(flat.dtype)
    fill = np.clip(fill, lo, hi)
    return np.where(masked, fill, flat).reshape(images.shape)


def mask_features(x, ranking: SaliencyRanking, spec: MaskSpec, rng: Optional[np.random.Generator] = None):
    """Mask one image according to ``ranking`` and ``spec``; returns the same type as ``x``."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    p = len(ranking)
    if data.size != p:
        raise T.ShapeError(f"image has {data.size} features but the ranking covers {p}")
    if spec.k > p:
        raise MaskError(f"cannot mask {spec.k} of {p} features")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    out = mask_batch(data.reshape(1, -1), np.asarray(ranking.indices)[None, :], [spec.k], spec.direction, rng)
    out = out.reshape(data.shape)
    return Tensor(out) if isinstance(x, Tensor) else out


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

MID_GRAY = 32768


def saliency_map_export(grad, shape) -> np.ndarray:
    """Min-max normalised |gradient| as a 16-bit grayscale image of ``shape`` (H, W)."""
    g = np.abs(np.asarray(grad.data if isinstance(grad, Tensor) else grad, dtype=np.float64).reshape(-1))
    if g.size != int(np.prod(shape)):
        raise T.ShapeError(f"{g.size} gradient values cannot fill an image of shape {tuple(shape)}")
    lo, hi = g.min(), g.max()
    if hi == lo:
        img = np.full(g.shape, MID_GRAY, dtype=np.uint16)
    else:
        img = np.rint((g - lo) / (hi - lo) * 65535.0).astype(np.uint16)
    return img.reshape(shape)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 PGM, maxval 65535, big-endian samples."""
    img = np.asarray(image, dtype=np.uint16)
    if img.ndim != 2:
        raise T.ShapeError(f"PGM needs a 2-D image, got shape {img.shape}")
    h, w = img.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + img.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a 16-bit binary PGM written by ``write_pgm`` (comments not supported)."""
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos].decode("ascii"))
    pos += 1  # single whitespace byte after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != "P5" or maxval != 65535:
        raise ValueError(f"{path}: expected 16-bit P5 PGM, got {magic} maxval {maxval}")
    return np.frombuffer(raw, dtype=">u2", count=w * h, offset=pos).reshape(h, w).astype(np.uint16)
