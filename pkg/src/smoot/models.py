"""Models built from the tensor ops: the MNIST CNN and a linear baseline."""

from __future__ import annotations

import contextlib
import math
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    # U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for conv/linear layers
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Model:
    """Base class: an ordered dict of named parameters plus ``forward``."""

    input_shape: tuple = ()
    n_classes: int = 0

    def __init__(self):
        self.params: Dict[str, Tensor] = {}

    def forward(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        raise NotImplementedError

    __call__ = forward

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily stop recording gradients for the parameters."""
        saved = {k: p.requires_grad for k, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for k, p in self.params.items():
                p.requires_grad = saved[k]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype)

    def check_input(self, x: Tensor) -> None:
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise T.ShapeError(f"model expects inputs [N, {', '.join(map(str, self.input_shape))}], got {x.shape}")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


class MnistCNN(Model):
    """conv3x3 -> relu -> conv3x3 -> relu -> [maxpool] -> dropout -> fc -> relu -> dropout -> fc.

    Defaults are the MNIST configuration (1x28x28 input, 32/64 filters,
    128 hidden units, 10 classes, no pooling).  ``pool > 1`` inserts a max-pool
    after the second conv.  Smaller widths are used by the gradient
    checks and the planted-feature experiments.
    """

    def __init__(self, in_channels: int = 1, image_size: int = 28, n_classes: int = 10,
                 conv1: int = 32, conv2: int = 64, hidden: int = 128, pool: int = 1,
                 drop1: float = 0.25, drop2: float = 0.5, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.input_shape = (in_channels, image_size, image_size)
        self.n_classes = n_classes
        self.pool = pool
        self.drop1, self.drop2 = drop1, drop2
        side = image_size - 4
        if pool > 1:
            side //= pool
        if side < 1:
            raise ValueError(f"image_size {image_size} too small for two 3x3 convs and pool {pool}")
        flat = conv2 * side * side
        rng = np.random.default_rng(seed)
        self.params = {
            "conv1.weight": _uniform(rng, (conv1, in_channels, 3, 3), in_channels * 9, dtype),
            "conv1.bias": _uniform(rng, (conv1,), in_channels * 9, dtype),
            "conv2.weight": _uniform(rng, (conv2, conv1, 3, 3), conv1 * 9, dtype),
            "conv2.bias": _uniform(rng, (conv2,), conv1 * 9, dtype),
            "fc1.weight": _uniform(rng, (flat, hidden), flat, dtype),
            "fc1.bias": _uniform(rng, (hidden,), flat, dtype),
            "fc2.weight": _uniform(rng, (hidden, n_classes), hidden, dtype),
            "fc2.bias": _uniform(rng, (n_classes,), hidden, dtype),
        }

    @classmethod
    def from_state(cls, state: Dict[str, np.ndarray], image_size: Optional[int] = None, **kw) -> "MnistCNN":
        """Rebuild the architecture from parameter shapes (e.g. a loaded checkpoint).

        The fc1 width fixes the spatial side after the convs; with
        ``image_size`` known the pooling factor follows from it, otherwise
        ``pool`` is taken from ``kw`` (default 1).
        """
        c1, cin = state["conv1.weight"].shape[:2]
        c2 = state["conv2.weight"].shape[0]
        flat, hidden = state["fc1.weight"].shape
        n_classes = state["fc2.weight"].shape[1]
        side = math.isqrt(flat // c2)
        if side * side * c2 != flat:
            raise ValueError(f"fc1 input width {flat} is not {c2} square feature maps")
        if image_size is not None:
            pool = max(1, (image_size - 4) // side)
            if (image_size - 4) // pool != side:
                raise ValueError(f"checkpoint feature side {side} does not fit image size {image_size}")
            kw.pop("pool", None)
        else:
            pool = kw.pop("pool", 1)
            image_size = side * pool + 4
        dtype = kw.pop("dtype", state["conv1.weight"].dtype)
        model = cls(in_channels=cin, image_size=image_size, n_classes=n_classes, conv1=c1, conv2=c2,
                    hidden=hidden, pool=pool, dtype=dtype, **kw)
        model.load_state_dict(state)
        return model

    def forward(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        self.check_input(x)
        p = self.params
        h = T.relu(T.add_bias(T.conv2d(x, p["conv1.weight"]), p["conv1.bias"]))
        h = T.relu(T.add_bias(T.conv2d(h, p["conv2.weight"]), p["conv2.bias"]))
        if self.pool > 1:
            h = T.max_pool2d(h, self.pool)
        h = T.dropout(h, self.drop1, training, rng)
        h = T.flatten(h)
        h = T.relu(T.add_bias(T.matmul(h, p["fc1.weight"]), p["fc1.bias"]))
        h = T.dropout(h, self.drop2, training, rng)
        return T.add_bias(T.matmul(h, p["fc2.weight"]), p["fc2.bias"])


class LinearModel(Model):
    """Flatten then a single affine map to class scores."""

    def __init__(self, input_shape=(1, 28, 28), n_classes: int = 10, seed: int = 0, dtype=np.float64,
                 zero_init: bool = False):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        d = int(np.prod(self.input_shape))
        rng = np.random.default_rng(seed)
        w = _uniform(rng, (d, n_classes), d, dtype)
        b = _uniform(rng, (n_classes,), d, dtype)
        if zero_init:
            w.data[...] = 0
            b.data[...] = 0
        self.params = {"fc.weight": w, "fc.bias": b}

    def forward(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        self.check_input(x)
        return T.add_bias(T.matmul(T.flatten(x), self.params["fc.weight"]), self.params["fc.bias"])
