"""Traditional, SGT and SMOOT training loops.

SGT masks a fixed number ``k`` of lowest-saliency features per image and adds
``lambda * KL(f(X) || f(X_masked))`` to the cross-entropy.  SMOOT keeps one
mask count per training sample and moves it after every step by
``floor(mu * delta)``, where ``delta`` weighs how the top-1 and the next
``n - 1`` softmax outputs changed under masking; the count is clamped to
``[K_min, K_max]``.

Randomness is split into independent per-step streams (dropout, masking) so
that switching the saliency machinery on or off never shifts the dropout
masks of the clean forward pass.  The clean and the masked forward passes
of a step share one dropout stream, hence identical dropout masks.
"""

from __future__ import annotations

import logging
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import Dataset, batch_iter
from .models import MnistCNN, Model
from .saliency import TARGET_MODES, mask_batch, rank_batch, saliency_pass
from .tensor import NumericError, Tensor, softmax_np

log = logging.getLogger(__name__)

METHODS = ("traditional", "sgt", "smoot")
OPTIMIZERS = ("sgd", "adadelta")


class ConfigError(ValueError):
    """A hyperparameter violates its documented range."""


class StateError(KeyError):
    """A sample id has no mask count."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    method: str = "smoot"
    tau: float = 1.0
    lam: float = 1.0
    alpha: float = 0.95
    mu: float = 10.0
    n: int = 5
    k_init: Optional[int] = None  # None -> 50% of the features
    k_min_frac: float = 0.2
    k_max_frac: float = 0.8
    epochs: int = 1
    batch_size: int = 256
    optimizer: str = "adadelta"
    seed: int = 0
    rank_by: str = "value"
    saliency_target: str = "predicted"

    def bounds(self, n_features: int) -> Tuple[int, int]:
        """(K_min, K_max) as floor(fraction * P), computed exactly."""
        kmin = math.floor(Fraction(repr(float(self.k_min_frac))) * n_features)
        kmax = math.floor(Fraction(repr(float(self.k_max_frac))) * n_features)
        return kmin, kmax

    def initial_k(self, n_features: int) -> int:
        return n_features // 2 if self.k_init is None else int(self.k_init)

    def validate(self, n_features: Optional[int] = None, n_classes: Optional[int] = None) -> None:
        errors = []
        if self.method not in METHODS:
            errors.append(f"method: must be one of {METHODS}, got {self.method!r}")
        if self.optimizer not in OPTIMIZERS:
            errors.append(f"optimizer: must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.rank_by not in ("value", "magnitude"):
            errors.append(f"rank_by: must be 'value' or 'magnitude', got {self.rank_by!r}")
        if self.saliency_target not in TARGET_MODES:
            errors.append(f"saliency_target: must be one of {TARGET_MODES}, got {self.saliency_target!r}")
        if not (isinstance(self.tau, (int, float)) and self.tau > 0):
            errors.append(f"tau: must be > 0, got {self.tau!r}")
        if not (isinstance(self.lam, (int, float)) and self.lam >= 0):
            errors.append(f"lambda: must be >= 0, got {self.lam!r}")
        if not (isinstance(self.alpha, (int, float)) and 0 <= self.alpha <= 1):
            errors.append(f"alpha: must lie in [0, 1], got {self.alpha!r}")
        if not (isinstance(self.mu, (int, float)) and self.mu >= 0):
            errors.append(f"mu: must be >= 0, got {self.mu!r}")
        if not (isinstance(self.n, int) and self.n >= 2 and (n_classes is None or self.n <= n_classes)):
            errors.append(f"n: must be an integer in [2, {n_classes or 'C'}], got {self.n!r}")
        if not (isinstance(self.k_min_frac, (int, float)) and isinstance(self.k_max_frac, (int, float))
                and 0 <= self.k_min_frac < self.k_max_frac <= 1):
            errors.append(f"k_min_frac/k_max_frac: need 0 <= min < max <= 1, got "
                          f"{self.k_min_frac!r}, {self.k_max_frac!r}")
        for name in ("epochs", "batch_size"):
            v = getattr(self, name)
            if not (isinstance(v, int) and not isinstance(v, bool) and v >= 1):
                errors.append(f"{name}: must be an integer >= 1, got {v!r}")
        if not (isinstance(self.seed, int) and not isinstance(self.seed, bool) and self.seed >= 0):
            errors.append(f"seed: must be a non-negative integer, got {self.seed!r}")
        if self.k_init is not None and not (isinstance(self.k_init, int) and not isinstance(self.k_init, bool)):
            errors.append(f"k_init: must be an integer pixel count, got {self.k_init!r}")
        elif n_features is not None and not errors and self.method != "traditional":
            kmin, kmax = self.bounds(n_features)
            k0 = self.initial_k(n_features)
            if self.method == "smoot" and not kmin <= k0 <= kmax:
                errors.append(f"k_init: {k0} outside [K_min, K_max] = [{kmin}, {kmax}]")
            if not 0 <= k0 < n_features:
                errors.append(f"k_init: {k0} must lie in [0, {n_features})")
            if kmax >= n_features and self.method == "smoot":
                errors.append(f"k_max_frac: K_max = {kmax} would mask every feature")
        if errors:
            raise ConfigError("; ".join(errors))


# ---------------------------------------------------------------------------
# formulas
# ---------------------------------------------------------------------------

def _check_probs(p: np.ndarray, what: str) -> None:
    if np.isnan(p).any():
        raise NumericError(f"NaN in {what}")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        raise ValueError(f"{what} is not a probability vector (sum {sums})")


def delta_batch(sm_masked: np.ndarray, sm_orig: np.ndarray, alpha: float, n: int):
    """Row-wise (delta1, delta2, delta) for [N, C] softmax outputs.

    Classes are ranked by the original image's softmax (descending, ties to
    the lower class index); masked and original probabilities are compared
    at the same class for every rank.
    """
    pm = np.asarray(sm_masked, dtype=np.float64)
    po = np.asarray(sm_orig, dtype=np.float64)
    if pm.shape != po.shape or pm.ndim != 2:
        raise T.ShapeError(f"softmax shapes differ: {pm.shape} vs {po.shape}")
    c = po.shape[1]
    if not 2 <= n <= c:
        raise ValueError(f"n must lie in [2, {c}], got {n}")
    _check_probs(pm, "masked softmax")
    _check_probs(po, "original softmax")
    order = np.argsort(-po, axis=1, kind="stable")[:, :n]
    diff = np.take_along_axis(pm, order, axis=1) - np.take_along_axis(po, order, axis=1)
    d1 = diff[:, 0]
    d2 = diff[:, 1:].mean(axis=1)
    return d1, d2, alpha * d1 + (1.0 - alpha) * d2


def delta_scores(sm_masked, sm_orig, alpha: float, n: int) -> Tuple[float, float, float]:
    """(delta1, delta2, delta) for one image's softmax vectors."""
    d1, d2, d = delta_batch(np.atleast_2d(sm_masked), np.atleast_2d(sm_orig), alpha, n)
    return float(d1[0]), float(d2[0]), float(d[0])


# mu * delta is rounded to this many decimals before the floor, so that
# float noise such as 0.7 - 0.5 = 0.19999999999999996 cannot drop a whole step
_FLOOR_DECIMALS = 9


def update_mask_count(k: int, delta: float, mu: float, k_min: int, k_max: int) -> int:
    """max(k_min, min(k_max, k + floor(mu * delta)))."""
    return max(k_min, min(k_max, int(k) + math.floor(round(mu * delta, _FLOOR_DECIMALS))))


def update_mask_counts(ks: np.ndarray, deltas: np.ndarray, mu: float, k_min: int, k_max: int) -> np.ndarray:
    step = np.floor(np.round(mu * np.asarray(deltas, dtype=np.float64), _FLOOR_DECIMALS)).astype(np.int64)
    return np.clip(np.asarray(ks, dtype=np.int64) + step, k_min, k_max)


def kl_divergence(p, q) -> float:
    """sum p * ln(p / q), both operands clamped below at 1e-12.

    For the differentiable version (gradient w.r.t. the logits behind q)
    see ``tensor.kl_div``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.isnan(p).any() or np.isnan(q).any():
        raise NumericError("NaN in KL divergence operands")
    if p.shape != q.shape:
        raise T.ShapeError(f"KL operands differ in shape: {p.shape} vs {q.shape}")
    c = T.LOG_CLAMP
    return float((p * (np.log(np.maximum(p, c)) - np.log(np.maximum(q, c)))).sum())


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def _check_grad(name: str, g: np.ndarray) -> None:
    if not np.isfinite(g).all():
        bad = int((~np.isfinite(g)).sum())
        raise NumericError(f"non-finite gradient in {name} ({bad} of {g.size} entries)")


class SGD:
    """theta <- theta - tau * grad."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: Dict[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is None:
                continue
            _check_grad(name, p.grad)
            p.data = p.data - p.dtype.type(self.lr) * p.grad


class Adadelta:
    """Accumulator form: E[g^2], E[dx^2] with decay rho; the step is scaled by lr."""

    def __init__(self, lr: float = 1.0, rho: float = 0.9, eps: float = 1e-6):
        self.lr, self.rho, self.eps = lr, rho, eps
        self.sq_grad: Dict[str, np.ndarray] = {}
        self.sq_delta: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, Tensor]) -> None:
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            _check_grad(name, g)
            dt = p.dtype.type
            rho, eps = dt(self.rho), dt(self.eps)
            eg = self.sq_grad.get(name)
            ed = self.sq_delta.get(name)
            if eg is None:
                eg = np.zeros_like(p.data)
                ed = np.zeros_like(p.data)
            eg = rho * eg + (dt(1) - rho) * g * g
            delta = np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
            ed = rho * ed + (dt(1) - rho) * delta * delta
            self.sq_grad[name], self.sq_delta[name] = eg, ed
            p.data = p.data - dt(self.lr) * delta


def make_optimizer(cfg: TrainConfig):
    return SGD(cfg.tau) if cfg.optimizer == "sgd" else Adadelta(lr=cfg.tau)


def optimizer_step(params: Dict[str, Tensor], optimizer) -> None:
    """Apply one update from the grads already stored on ``params``."""
    optimizer.step(params)


# ---------------------------------------------------------------------------
# per-sample mask state
# ---------------------------------------------------------------------------

class SampleMaskState:
    """Mask count per stable sample id, clamped to [k_min, k_max]."""

    def __init__(self, k_init: int, k_min: int, k_max: int):
        self.k_init, self.k_min, self.k_max = int(k_init), int(k_min), int(k_max)
        self.k: Dict[int, int] = {}

    def register(self, ids: Iterable[int]) -> None:
        """Unseen ids start at ``k_init``."""
        for i in ids:
            self.k.setdefault(int(i), self.k_init)

    def get(self, ids) -> np.ndarray:
        try:
            return np.array([self.k[int(i)] for i in ids], dtype=np.int64)
        except KeyError as e:
            raise StateError(f"no mask count for sample id {e.args[0]}") from None

    def set(self, ids, values) -> None:
        for i, v in zip(ids, values):
            self.k[int(i)] = int(v)

    def values(self) -> np.ndarray:
        return np.array([self.k[i] for i in sorted(self.k)], dtype=np.int64)

    def summary(self) -> Tuple[int, int, int]:
        """(min, median, max); the median is the lower median so it stays an integer."""
        v = self.values()
        if v.size == 0:
            return 0, 0, 0
        return int(v.min()), int(statistics.median_low(v.tolist())), int(v.max())

    def __len__(self) -> int:
        return len(self.k)

    def items(self):
        return sorted(self.k.items())


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    loss: float
    ce: float
    kl: float
    correct: int
    deltas: Optional[np.ndarray] = None


def _streams(seed: int, epoch: int, step: int):
    dropout_seed = np.random.SeedSequence([seed, epoch, step, 0])
    mask_rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, step, 1]))
    return dropout_seed, mask_rng


def _masked_step(model: Model, optimizer, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                 ks: Optional[np.ndarray], dropout_seed, mask_rng, want_delta: bool) -> StepResult:
    masked = None
    deltas = None
    if ks is not None:
        grads, eval_logits = saliency_pass(model, images, cfg.saliency_target, labels)
        order = rank_batch(grads, cfg.rank_by)
        masked = mask_batch(images, order, ks, "bottom", mask_rng)
        if want_delta:
            # read-only: eval-mode outputs at the current weights
            with model.frozen():
                masked_eval = model.forward(Tensor(masked), training=False).data
            deltas = delta_batch(softmax_np(masked_eval.astype(np.float64)),
                                 softmax_np(eval_logits.astype(np.float64)), cfg.alpha, cfg.n)[2]

    model.zero_grad()
    logits = model.forward(Tensor(images), training=True, rng=np.random.default_rng(dropout_seed))
    ce = T.cross_entropy(logits, labels)
    loss = ce
    kl_value = 0.0
    if masked is not None and cfg.lam != 0:
        logits_m = model.forward(Tensor(masked), training=True, rng=np.random.default_rng(dropout_seed))
        kl = T.kl_div(logits.data, logits_m, target_is_logits=True)
        kl_value = float(kl.data)
        loss = ce + kl * cfg.lam
    loss_value = float(loss.data)
    if not math.isfinite(loss_value):
        raise NumericError(f"training loss became {loss_value}")
    loss.backward()
    optimizer.step(model.params)
    correct = int((logits.data.argmax(axis=1) == labels).sum())
    return StepResult(loss_value, float(ce.data), kl_value, correct, deltas)


def traditional_step(batch, model: Model, optimizer, cfg: TrainConfig, epoch: int = 0, step: int = 0) -> StepResult:
    """Plain cross-entropy update (no masking)."""
    _, images, labels = batch
    dropout_seed, _ = _streams(cfg.seed, epoch, step)
    return _masked_step(model, optimizer, images, labels, cfg, None, dropout_seed, None, False)


def sgt_step(batch, model: Model, optimizer, cfg: TrainConfig, epoch: int = 0, step: int = 0,
             k: Optional[int] = None) -> StepResult:
    """One SGT update: mask the bottom ``k`` features of every image (default ``cfg.k_init``)."""
    _, images, labels = batch
    p = int(np.prod(images.shape[1:]))
    k = cfg.initial_k(p) if k is None else k
    dropout_seed, mask_rng = _streams(cfg.seed, epoch, step)
    ks = np.full(len(labels), k, dtype=np.int64)
    return _masked_step(model, optimizer, images, labels, cfg, ks, dropout_seed, mask_rng, False)


def smoot_step(batch, model: Model, optimizer, cfg: TrainConfig, mask_state: SampleMaskState,
               epoch: int = 0, step: int = 0) -> StepResult:
    """One SMOOT update; every image's mask count moves by floor(mu * delta) after the step."""
    ids, images, labels = batch
    ks = mask_state.get(ids)
    dropout_seed, mask_rng = _streams(cfg.seed, epoch, step)
    res = _masked_step(model, optimizer, images, labels, cfg, ks, dropout_seed, mask_rng, True)
    mask_state.set(ids, update_mask_counts(ks, res.deltas, cfg.mu, mask_state.k_min, mask_state.k_max))
    return res


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    train_acc: float
    test_acc: Optional[float]
    ce_loss: float
    kl_loss: float
    k_min: int
    k_median: int
    k_max: int

    def row(self) -> List[str]:
        test = "" if self.test_acc is None else repr(self.test_acc)
        return [str(self.epoch), repr(self.train_acc), test, repr(self.ce_loss), repr(self.kl_loss),
                str(self.k_min), str(self.k_median), str(self.k_max)]


METRIC_COLUMNS = ["epoch", "train_acc", "test_acc", "ce_loss", "kl_loss", "k_min", "k_median", "k_max"]


@dataclass
class TrainResult:
    model: Model
    mask_state: SampleMaskState
    history: List[EpochMetrics]
    k_history: List[np.ndarray] = field(default_factory=list)


def build_mask_state(ds: Dataset, cfg: TrainConfig) -> SampleMaskState:
    p = ds.n_features
    if cfg.method == "traditional":
        state = SampleMaskState(0, 0, 0)
    elif cfg.method == "sgt":
        k = cfg.initial_k(p)
        state = SampleMaskState(k, k, k)
    else:
        kmin, kmax = cfg.bounds(p)
        state = SampleMaskState(cfg.initial_k(p), kmin, kmax)
    state.register(ds.ids)
    return state


def train(ds: Dataset, cfg: TrainConfig, test: Optional[Dataset] = None, model: Optional[Model] = None,
          step_callback: Optional[Callable] = None, eval_batch: int = 500) -> TrainResult:
    """Run ``cfg.epochs`` epochs of ``cfg.method`` over shuffled minibatches.

    ``step_callback(epoch, step, mask_state, result)`` runs after every
    optimizer step.  Per-epoch metrics include the (min, median, max) of the
    mask counts: all 0 for traditional training, ``k_init`` for SGT.
    """
    from .evaluation import top_n_accuracy

    cfg.validate(ds.n_features, ds.n_classes)
    if model is None:
        model = MnistCNN(in_channels=ds.images.shape[1], image_size=ds.images.shape[2],
                         n_classes=ds.n_classes, seed=cfg.seed)
    optimizer = make_optimizer(cfg)
    state = build_mask_state(ds, cfg)
    history: List[EpochMetrics] = []
    k_history: List[np.ndarray] = []
    for epoch in range(cfg.epochs):
        ce_sum = kl_sum = 0.0
        correct = seen = 0
        shuffle_seed = np.random.SeedSequence([cfg.seed, epoch, 2**31 - 1])
        for step, batch in enumerate(batch_iter(ds, cfg.batch_size, shuffle=True, seed=shuffle_seed)):
            if cfg.method == "traditional":
                res = traditional_step(batch, model, optimizer, cfg, epoch, step)
            elif cfg.method == "sgt":
                res = sgt_step(batch, model, optimizer, cfg, epoch, step)
            else:
                res = smoot_step(batch, model, optimizer, cfg, state, epoch, step)
            nb = len(batch[2])
            ce_sum += res.ce * nb
            kl_sum += res.kl * nb
            correct += res.correct
            seen += nb
            if step_callback is not None:
                step_callback(epoch, step, state, res)
        test_acc = top_n_accuracy(model, test, 1, batch_size=eval_batch) if test is not None else None
        kmin, kmed, kmax = state.summary()
        m = EpochMetrics(epoch + 1, 100.0 * correct / seen, test_acc, ce_sum / seen, kl_sum / seen, kmin, kmed, kmax)
        history.append(m)
        k_history.append(state.values())
        log.info("epoch %d: train_acc=%.2f test_acc=%s ce=%.4f kl=%.4f K=(%d, %d, %d)", m.epoch, m.train_acc,
                 "-" if test_acc is None else f"{test_acc:.2f}", m.ce_loss, m.kl_loss, kmin, kmed, kmax)
    return TrainResult(model, state, history, k_history)
