"""
NN Module: Minimal Reverse-Mode Engine with Tap Points
===============================================================
ALGORITHM: Layer-wise tape + reverse accumulation
===============================================================

PROBLEM: The attacks need input gradients of two objectives, the
cross-entropy loss and the projection (g(x) - h0)^T w of a mid-layer
feature onto a guide vector, through VGG-like and skip-connected
models, in double precision.

APPROACH: A forward pass records one cache per layer (the tape).
The backward pass walks the tape in reverse, accumulating the
gradient flowing into every layer output. Residual-add layers fan
the incoming gradient out to their branch input and to the earlier
layer they re-use.

SUPPORTED LAYERS:
- Dense, Conv2d (stride 1, 'same' or 'valid'), ReLU,
  MaxPool2 (2x2, stride 2), Flatten, ResidualAdd(source)

CONVENTIONS:
- Every tensor is a float64 numpy array; batches lead with axis N.
- Tap features are flattened in C order (channel, row, column).
- Max-pool ties route the gradient to the first maximum in the window.
- Models are never mutated; training returns a new Model.
"""

from __future__ import annotations

import logging
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from tqdm import tqdm

# Add parent directory for config import
sys.path.insert(0, str(Path(__file__).parent.parent.parent))
from config import EngineConfig

from app.modules.errors import (
    RejectedInputError,
    TrainingFailureError,
    UnderTrainedError,
    WeightFormatError,
)
from app.modules.tensor_io import TensorReader, encode_tensor

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Shape = Tuple[int, ...]
Params = Dict[str, Tensor]


def _glorot(rng: np.random.Generator, shape: Shape, fan_in: int, fan_out: int) -> Tensor:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


# ==========================================
# Layer definitions
# ==========================================
@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    def output_shape(self, in_shape: Shape) -> Shape:
        if in_shape != (self.in_features,):
            raise RejectedInputError(f"Dense expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def init_params(self, rng: np.random.Generator) -> Params:
        W = _glorot(rng, (self.out_features, self.in_features), self.in_features, self.out_features)
        return {"W": W, "b": np.zeros(self.out_features)}

    def forward(self, params: Params, x: Tensor):
        return x @ params["W"].T + params["b"], x

    def backward(self, params: Params, cache, g: Tensor, want_params: bool):
        grads = {"W": g.T @ cache, "b": g.sum(axis=0)} if want_params else {}
        return g @ params["W"], grads


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int = 3
    padding: str = "same"

    def __post_init__(self):
        if self.padding not in ("same", "valid"):
            raise RejectedInputError(f"Unknown padding {self.padding!r}")
        if self.padding == "same" and self.kernel % 2 == 0:
            raise RejectedInputError("'same' padding needs an odd kernel")

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding == "same" else 0

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise RejectedInputError(f"Conv2d expects ({self.in_channels}, H, W), got {in_shape}")
        _, h, w = in_shape
        ho, wo = h + 2 * self.pad - self.kernel + 1, w + 2 * self.pad - self.kernel + 1
        if ho < 1 or wo < 1:
            raise RejectedInputError(f"Conv2d kernel {self.kernel} larger than input {in_shape}")
        return (self.out_channels, ho, wo)

    def init_params(self, rng: np.random.Generator) -> Params:
        k2 = self.kernel * self.kernel
        W = _glorot(
            rng,
            (self.out_channels, self.in_channels, self.kernel, self.kernel),
            self.in_channels * k2,
            self.out_channels * k2,
        )
        return {"W": W, "b": np.zeros(self.out_channels)}

    def forward(self, params: Params, x: Tensor):
        n, c, _, _ = x.shape
        p, k = self.pad, self.kernel
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C, Ho, Wo, k, k)
        ho, wo = windows.shape[2], windows.shape[3]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        Wm = params["W"].reshape(self.out_channels, -1)
        out = (cols @ Wm.T + params["b"]).reshape(n, ho, wo, self.out_channels)
        return out.transpose(0, 3, 1, 2), (x.shape, cols)

    def backward(self, params: Params, cache, g: Tensor, want_params: bool):
        x_shape, cols = cache
        n, c, h, w = x_shape
        p, k = self.pad, self.kernel
        ho, wo = g.shape[2], g.shape[3]
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        Wm = params["W"].reshape(self.out_channels, -1)
        grads = {}
        if want_params:
            grads = {"W": (g2.T @ cols).reshape(params["W"].shape), "b": g2.sum(axis=0)}
        dcols = (g2 @ Wm).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return dx, grads


@dataclass(frozen=True)
class ReLU:
    def output_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def init_params(self, rng: np.random.Generator) -> Params:
        return {}

    def forward(self, params: Params, x: Tensor):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, params: Params, cache, g: Tensor, want_params: bool):
        return np.where(cache, g, 0.0), {}


@dataclass(frozen=True)
class MaxPool2:
    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
            raise RejectedInputError(f"MaxPool2 needs (C, even H, even W), got {in_shape}")
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def init_params(self, rng: np.random.Generator) -> Params:
        return {}

    def forward(self, params: Params, x: Tensor):
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        # argmax returns the first maximum; window order is row-major so ties go to the lowest flat index
        idx = np.argmax(win, axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, params: Params, cache, g: Tensor, want_params: bool):
        (n, c, h, w), idx = cache
        win = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
        dx = win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return dx, {}


@dataclass(frozen=True)
class Flatten:
    def output_shape(self, in_shape: Shape) -> Shape:
        return (int(np.prod(in_shape)),)

    def init_params(self, rng: np.random.Generator) -> Params:
        return {}

    def forward(self, params: Params, x: Tensor):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params: Params, cache, g: Tensor, want_params: bool):
        return g.reshape(cache), {}


@dataclass(frozen=True)
class ResidualAdd:
    """output = previous layer output + output of layer ``source``."""

    source: int

    def output_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def init_params(self, rng: np.random.Generator) -> Params:
        return {}


Layer = Union[Dense, Conv2d, ReLU, MaxPool2, Flatten, ResidualAdd]


# ==========================================
# Model
# ==========================================
@dataclass
class Model:
    """Layered feed-forward graph with named tap points.

    ``taps`` maps a layer index to the name of its output. Parameters are
    stored per layer; layers without parameters hold an empty dict.
    """

    arch: str
    input_shape: Shape
    layers: List[Layer]
    taps: Dict[int, str]
    params: List[Params]
    train_accuracy: Optional[float] = None
    holdout_accuracy: Optional[float] = None
    shapes: List[Shape] = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.params) != len(self.layers):
            raise RejectedInputError("one parameter dict per layer is required")
        shapes: List[Shape] = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ResidualAdd):
                if not 0 <= layer.source < i:
                    raise RejectedInputError(f"layer {i}: residual source {layer.source} must precede it")
                if shapes[layer.source] != shape:
                    raise RejectedInputError(
                        f"layer {i}: residual source shape {shapes[layer.source]} != branch shape {shape}"
                    )
            shape = layer.output_shape(shape)
            shapes.append(shape)
        for index in self.taps:
            if not 0 <= index < len(self.layers):
                raise RejectedInputError(f"tap index {index} does not refer to a layer output")
        self.shapes = shapes

    @property
    def classes(self) -> int:
        return self.shapes[-1][0]

    def tap_index(self, tap: str) -> int:
        for index, name in self.taps.items():
            if name == tap:
                return index
        raise RejectedInputError(f"unknown tap {tap!r} for {self.arch}; known: {sorted(self.taps.values())}")

    def feature_dim(self, tap: str) -> int:
        return int(np.prod(self.shapes[self.tap_index(tap)]))

    def tap_names(self) -> List[str]:
        return [self.taps[i] for i in sorted(self.taps)]

    def parameter_tensors(self) -> List[Tensor]:
        return [p[name] for p in self.params for name in sorted(p)]


def _as_batch(model: Model, x: Tensor) -> Tuple[Tensor, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.input_shape:
        return x[None], True
    if x.ndim == len(model.input_shape) + 1 and x.shape[1:] == model.input_shape:
        return x, False
    raise RejectedInputError(f"input shape {x.shape} does not match model input {model.input_shape}")


def _forward(model: Model, xb: Tensor, upto: Optional[int] = None):
    """Run layers 0..upto on a batch; returns (outputs, caches)."""
    last = len(model.layers) - 1 if upto is None else upto
    outputs: List[Tensor] = []
    caches: list = []
    h = xb
    for i in range(last + 1):
        layer = model.layers[i]
        if isinstance(layer, ResidualAdd):
            h, cache = h + outputs[layer.source], None
        else:
            h, cache = layer.forward(model.params[i], h)
        outputs.append(h)
        caches.append(cache)
    return outputs, caches


def _backward(model: Model, caches: list, start: int, seed: Tensor, want_params: bool = False):
    """Reverse accumulation from the output of layer ``start``.

    Returns (gradient w.r.t. the input batch, per-layer parameter gradients).
    """
    grads: Dict[int, Tensor] = {start: seed}
    param_grads: List[Params] = [{} for _ in model.layers]

    def accumulate(index: int, g: Tensor):
        if index in grads:
            grads[index] = grads[index] + g
        else:
            grads[index] = g

    for i in range(start, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        layer = model.layers[i]
        if isinstance(layer, ResidualAdd):
            accumulate(i - 1, g)
            accumulate(layer.source, g)
        else:
            g_in, pg = layer.backward(model.params[i], caches[i], g, want_params)
            param_grads[i] = pg
            accumulate(i - 1, g_in)
    return grads.get(-1), param_grads


def _check_finite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t)):
        raise RejectedInputError(f"{what} contains non-finite values")
    return t


# ==========================================
# Forward / loss / gradients
# ==========================================
def forward_batch(model: Model, x: Tensor) -> Tensor:
    """Logits for a batch (or a single example, returned with a batch axis)."""
    xb, _ = _as_batch(model, x)
    outputs, _ = _forward(model, xb)
    return outputs[-1]


def tap_features(model: Model, x: Tensor, tap: str) -> Tensor:
    """Flattened tap features, shape (N, m)."""
    index = model.tap_index(tap)
    xb, _ = _as_batch(model, x)
    outputs, _ = _forward(model, xb, upto=index)
    return outputs[index].reshape(xb.shape[0], -1)


def forward_with_tap(model: Model, x: Tensor, tap: str) -> Tuple[Tensor, Tensor]:
    """Logits and flattened tap feature for a single example."""
    index = model.tap_index(tap)
    xb, single = _as_batch(model, x)
    if not single:
        raise RejectedInputError("forward_with_tap takes a single example")
    outputs, _ = _forward(model, xb)
    return outputs[-1][0], outputs[index][0].reshape(-1)


def predict(model: Model, x: Tensor, chunk: int = 512) -> np.ndarray:
    """Argmax class per example; ties resolve to the lowest class index."""
    xb, _ = _as_batch(model, x)
    preds = [np.argmax(forward_batch(model, xb[i:i + chunk]), axis=1) for i in range(0, len(xb), chunk)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, images: Tensor, labels: np.ndarray) -> float:
    return float(np.mean(predict(model, images) == np.asarray(labels)))


def softmax(logits: Tensor) -> Tensor:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_sum_exp(logits: Tensor) -> Tensor:
    m = np.max(logits, axis=-1)
    return m + np.log(np.sum(np.exp(logits - m[..., None]), axis=-1))


def cross_entropy(logits: Tensor, y: int) -> float:
    """-log softmax(logits)[y] in nats, stabilized by max-subtraction."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = int(y)
    if not 0 <= y < logits.shape[0]:
        raise RejectedInputError(f"label {y} out of range for {logits.shape[0]} classes")
    value = float(_log_sum_exp(logits) - logits[y])
    return max(value, 0.0)


def _ce_seed(logits: Tensor, ys: np.ndarray) -> Tensor:
    seed = softmax(logits)
    seed[np.arange(len(ys)), ys] -= 1.0
    return seed


def loss_grad_feature(model: Model, x: Tensor, y: int, tap: str) -> Tuple[float, Tensor, Tensor]:
    """One pass giving (cross-entropy, input gradient, tap feature) at a single example."""
    index = model.tap_index(tap)
    xb, single = _as_batch(model, x)
    if not single:
        raise RejectedInputError("loss_grad_feature takes a single example")
    outputs, caches = _forward(model, xb)
    logits = outputs[-1]
    loss = cross_entropy(logits[0], y)
    g, _ = _backward(model, caches, len(model.layers) - 1, _ce_seed(logits, np.array([int(y)])))
    return loss, g[0], outputs[index][0].reshape(-1).copy()


def grad_input_loss(model: Model, x: Tensor, y: int) -> Tensor:
    """Gradient of cross_entropy(model(x), y) with respect to x."""
    xb, single = _as_batch(model, x)
    if not single:
        raise RejectedInputError("grad_input_loss takes a single example")
    y = int(y)
    if not 0 <= y < model.classes:
        raise RejectedInputError(f"label {y} out of range for {model.classes} classes")
    outputs, caches = _forward(model, xb)
    g, _ = _backward(model, caches, len(model.layers) - 1, _ce_seed(outputs[-1], np.array([y])))
    return g[0]


def grad_input_projection(model: Model, x: Tensor, tap: str, w: Tensor, h0: Tensor) -> Tensor:
    """Gradient of (g(x) - h0)^T w with respect to x; h0 is a constant."""
    index = model.tap_index(tap)
    m = model.feature_dim(tap)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    h0 = np.asarray(h0, dtype=np.float64).reshape(-1)
    if w.shape != (m,) or h0.shape != (m,):
        raise RejectedInputError(f"guide and anchor must have dimension {m}, got {w.shape} and {h0.shape}")
    xb, single = _as_batch(model, x)
    if not single:
        raise RejectedInputError("grad_input_projection takes a single example")
    _, caches = _forward(model, xb, upto=index)
    seed = w.reshape((1,) + model.shapes[index])
    g, _ = _backward(model, caches, index, seed)
    return g[0]


# ==========================================
# Model zoo
# ==========================================
def build_model(arch: str, input_shape: Shape = (1, 16, 16), classes: int = 10, seed: int = 0) -> Model:
    """Construct a freshly initialized model of a known architecture."""
    c, h, w = input_shape
    d = c * h * w
    if arch == "logistic":
        layers: List[Layer] = [Flatten(), Dense(d, classes)]
        taps = {0: "flat", 1: "logits"}
    elif arch == "mlp":
        layers = [Flatten(), Dense(d, 64), ReLU(), Dense(64, 64), ReLU(), Dense(64, classes)]
        taps = {0: "flat", 1: "fc1", 2: "relu1", 3: "fc2", 4: "relu2", 5: "logits"}
    elif arch == "vgg":
        layers = [
            Conv2d(c, 8), ReLU(), Conv2d(8, 8), ReLU(), MaxPool2(),
            Conv2d(8, 16), ReLU(), MaxPool2(),
            Flatten(), Dense(16 * (h // 4) * (w // 4), 64), ReLU(), Dense(64, classes),
        ]
        taps = {0: "conv1", 1: "relu1", 3: "relu2", 4: "pool1", 6: "relu3", 7: "pool2", 10: "fc1", 11: "logits"}
    elif arch == "resnet":
        layers = [
            Conv2d(c, 8), ReLU(),
            Conv2d(8, 8), ReLU(), Conv2d(8, 8), ResidualAdd(source=1), ReLU(), MaxPool2(),
            Conv2d(8, 16), ReLU(), Conv2d(16, 16), ResidualAdd(source=9), ReLU(), MaxPool2(),
            Flatten(), Dense(16 * (h // 4) * (w // 4), classes),
        ]
        taps = {1: "stem", 5: "block1", 7: "pool1", 9: "block2a", 11: "block2", 13: "pool2", 15: "logits"}
    else:
        raise RejectedInputError(f"unknown architecture {arch!r}; options: {EngineConfig.ARCHITECTURES}")
    rng = np.random.default_rng(seed)
    params = [layer.init_params(rng) for layer in layers]
    return Model(arch=arch, input_shape=tuple(input_shape), layers=layers, taps=taps, params=params)


# ==========================================
# Training
# ==========================================
def train_sgd(
    model: Model,
    dataset,
    epochs: int = EngineConfig.EPOCHS,
    lr: float = EngineConfig.LEARNING_RATE,
    batch: int = EngineConfig.BATCH_SIZE,
    seed: int = 0,
    momentum: float = EngineConfig.MOMENTUM,
    holdout=None,
    accuracy_floor: Optional[float] = None,
    progress: bool = False,
) -> Model:
    """Mini-batch SGD with momentum on mean cross-entropy.

    ``dataset`` and ``holdout`` need ``images`` (N, C, H, W) and ``labels``.
    Raises TrainingFailureError on a non-finite loss and UnderTrainedError when
    the held-out accuracy does not exceed ``accuracy_floor``.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if labels.size and labels.max() >= model.classes:
        raise RejectedInputError(f"dataset labels exceed model output width {model.classes}")
    _as_batch(model, images[:1])

    rng = np.random.default_rng(seed)
    params = [{k: v.copy() for k, v in p.items()} for p in model.params]
    velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
    trained = replace(model, params=params)
    n = len(labels)

    for epoch in tqdm(range(epochs), desc=f"train {model.arch}", disable=not progress):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xb, yb = images[idx], labels[idx]
            outputs, caches = _forward(trained, xb)
            logits = outputs[-1]
            losses = _log_sum_exp(logits) - logits[np.arange(len(yb)), yb]
            loss = float(np.mean(losses))
            if not math.isfinite(loss):
                raise TrainingFailureError(f"{model.arch}: loss diverged at epoch {epoch}, batch {start // batch}")
            total += loss * len(yb)
            seed_grad = _ce_seed(logits, yb) / len(yb)
            _, pgrads = _backward(trained, caches, len(trained.layers) - 1, seed_grad, want_params=True)
            for p, v, g in zip(params, velocity, pgrads):
                for name in p:
                    v[name] = momentum * v[name] - lr * g[name]
                    p[name] += v[name]
        logger.debug("%s epoch %d mean loss %.4f", model.arch, epoch, total / max(n, 1))

    for p in params:
        for name, value in p.items():
            if not np.all(np.isfinite(value)):
                raise TrainingFailureError(f"{model.arch}: parameter {name} became non-finite")

    trained.train_accuracy = accuracy(trained, images, labels)
    if holdout is not None:
        trained.holdout_accuracy = accuracy(trained, holdout.images, holdout.labels)
        logger.info("%s: train acc %.4f, held-out acc %.4f", model.arch, trained.train_accuracy, trained.holdout_accuracy)
        if accuracy_floor is not None and trained.holdout_accuracy <= accuracy_floor:
            raise UnderTrainedError(
                f"{model.arch}: held-out accuracy {trained.holdout_accuracy:.4f} <= floor {accuracy_floor}",
                accuracy=trained.holdout_accuracy,
                floor=accuracy_floor,
            )
    return trained


# ==========================================
# Weight persistence
# ==========================================
def save_weights(model: Model, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(EngineConfig.WEIGHT_MAGIC)
        for tensor in model.parameter_tensors():
            fh.write(encode_tensor(tensor))


def load_weights(path, template: Model) -> Model:
    """Load parameters saved by save_weights into a copy of ``template``.

    The file carries no architecture, so the declared architecture comes from
    ``template`` and every tensor shape is checked against it.
    """
    reader = TensorReader(Path(path).read_bytes(), source=str(path))
    reader.expect_magic(EngineConfig.WEIGHT_MAGIC)
    params: List[Params] = []
    for i, p in enumerate(template.params):
        loaded = {}
        for name in sorted(p):
            start = reader.position
            tensor = reader.read_tensor()
            if tensor.shape != p[name].shape:
                raise WeightFormatError(
                    f"{path}: layer {i} {name} has shape {tensor.shape}, architecture declares {p[name].shape}",
                    position=start,
                )
            loaded[name] = _check_finite(tensor, f"layer {i} {name}")
        params.append(loaded)
    reader.expect_end()
    return replace(template, params=params, train_accuracy=None, holdout_accuracy=None)


def equal_parameters(a: Model, b: Model) -> bool:
    ta, tb = a.parameter_tensors(), b.parameter_tensors()
    return len(ta) == len(tb) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(ta, tb))
