"""Residual 1-D CNN classifier in plain numpy with hand-written backprop.

Layout: conv(2->16, k=7)+ReLU, residual block [conv(16->16, k=5)+ReLU,
conv(16->16, k=5), add skip, ReLU], global average pool, dense(16->11),
softmax. All convolutions use "same" padding and stride 1.

Internally activations are channels-last, ``(batch, time, channels)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._binio import Reader, Writer, atomic_write
from .errors import ConfigurationError, DomainError, FormatError, NumericError, ShapeError
from .signal import NUM_CLASSES, Dataset, IQFrame, split_code

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
IN_CHANNELS = 2
WIDTH = 16
STEM_KERNEL = 7
RES_KERNEL = 5

MODEL_MAGIC = b"CSMD"
MODEL_VERSION = 1
# layer kind codes in the MODEL file, in network order
KIND_STEM, KIND_RES_A, KIND_RES_B, KIND_DENSE = 1, 2, 3, 4


@dataclass
class NetworkParams:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    res_a_w: np.ndarray
    res_a_b: np.ndarray
    res_b_w: np.ndarray
    res_b_b: np.ndarray
    dense_w: np.ndarray
    dense_b: np.ndarray

    def __post_init__(self) -> None:
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        self.check()

    @property
    def n_classes(self) -> int:
        return self.dense_w.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    def copy(self) -> "NetworkParams":
        return NetworkParams(*[a.copy() for a in self.arrays()])

    def check(self) -> None:
        w = self.conv1_w.shape[0]
        expected = {
            "conv1_w": (w, IN_CHANNELS, self.conv1_w.shape[2]),
            "conv1_b": (w,),
            "res_a_w": (w, w, self.res_a_w.shape[2]),
            "res_a_b": (w,),
            "res_b_w": (w, w, self.res_b_w.shape[2]),
            "res_b_b": (w,),
            "dense_w": (self.dense_w.shape[0], w),
            "dense_b": (self.dense_w.shape[0],),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name} contains non-finite values")
        for name in ("conv1_w", "res_a_w", "res_b_w"):
            if getattr(self, name).shape[2] % 2 == 0:
                raise ShapeError(f"{name} needs an odd kernel for 'same' padding")

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def __eq__(self, other) -> bool:
        if not isinstance(other, NetworkParams):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    precision: str = "float64"
    cosine_decay: bool = True  # anneal the step size to zero over the run

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.precision not in ("float64", "float32"):
            raise ConfigurationError(f"unknown precision {self.precision!r}")


def _glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(seed: int = 0, n_classes: int = NUM_CLASSES, width: int = WIDTH) -> NetworkParams:
    rng = np.random.default_rng(seed)
    k1, k2 = STEM_KERNEL, RES_KERNEL
    return NetworkParams(
        _glorot(rng, (width, IN_CHANNELS, k1), IN_CHANNELS * k1, width * k1),
        np.zeros(width),
        _glorot(rng, (width, width, k2), width * k2, width * k2),
        np.zeros(width),
        _glorot(rng, (width, width, k2), width * k2, width * k2),
        np.zeros(width),
        _glorot(rng, (n_classes, width), width, n_classes),
        np.zeros(n_classes),
    )


# --- layers -----------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, L, C) -> (B*L, C*k) windows for a stride-1 'same' convolution."""
    B, L, C = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (0, 0)))
    cols = sliding_window_view(xp, k, axis=1)  # (B, L, C, k)
    return cols.reshape(B * L, C * k)


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    B, L, _ = x.shape
    out_c, _, k = w.shape
    cols = _im2col(x, k)
    out = cols @ w.reshape(out_c, -1).T + b
    return out.reshape(B, L, out_c), cols


def _conv_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, need_dx: bool = True):
    B, L, out_c = dout.shape
    _, C, k = w.shape
    d2 = dout.reshape(B * L, out_c)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return dw, db, None
    dcols = (d2 @ w.reshape(out_c, -1)).reshape(B, L, C, k)
    p = k // 2
    dxp = np.zeros((B, L + k - 1, C), dtype=dout.dtype)
    for j in range(k):
        dxp[:, j:j + L, :] += dcols[:, :, :, j]
    return dw, db, dxp[:, p:p + L, :]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _as_batch(x) -> np.ndarray:
    if isinstance(x, IQFrame):
        x = x.samples[None]
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != IN_CHANNELS:
        raise ShapeError(f"expected frames shaped (batch, 2, L), got {x.shape}")
    if x.shape[2] < 1:
        raise ShapeError("frames must have at least one time sample")
    return x


def _forward(params: NetworkParams, x: np.ndarray, dtype=np.float64):
    """Forward pass on a (B, 2, L) batch; returns (probs, cache)."""
    P = [a.astype(dtype, copy=False) for a in params.arrays()]
    w1, b1, wa, ba, wb, bb, wd, bd = P
    X = np.ascontiguousarray(x.transpose(0, 2, 1), dtype=dtype)
    z1, c1 = _conv(X, w1, b1)
    h1 = np.maximum(z1, 0)
    z2, c2 = _conv(h1, wa, ba)
    a = np.maximum(z2, 0)
    z3, c3 = _conv(a, wb, bb)
    s = h1 + z3
    h2 = np.maximum(s, 0)
    g = h2.mean(axis=1)
    logits = g @ wd.T + bd
    probs = softmax(logits)
    if not np.all(np.isfinite(probs)):
        raise NumericError("non-finite activations in forward pass")
    cache = (P, X.shape, z1, c1, z2, c2, c3, s, g)
    return probs, cache


def _backward(cache, dlogits: np.ndarray, need_params: bool = True, need_input: bool = False):
    P, shape, z1, c1, z2, c2, c3, s, g = cache
    w1, b1, wa, ba, wb, bb, wd, bd = P
    B, L, _ = shape
    dwd = dlogits.T @ g
    dbd = dlogits.sum(axis=0)
    dg = dlogits @ wd
    ds = np.broadcast_to(dg[:, None, :] / L, s.shape) * (s > 0)
    dwb, dbb, da = _conv_backward(ds, c3, wb)
    dz2 = da * (z2 > 0)
    dwa, dba, dh1 = _conv_backward(dz2, c2, wa)
    dz1 = (ds + dh1) * (z1 > 0)
    dw1, db1, dX = _conv_backward(dz1, c1, w1, need_dx=need_input)
    grads = NetworkParams.__new__(NetworkParams)
    if need_params:
        for name, val in zip(
            ("conv1_w", "conv1_b", "res_a_w", "res_a_b", "res_b_w", "res_b_b", "dense_w", "dense_b"),
            (dw1, db1, dwa, dba, dwb, dbb, dwd, dbd),
        ):
            setattr(grads, name, val)
    dx = dX.transpose(0, 2, 1) if need_input else None
    return (grads if need_params else None), dx


def _dlogits(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(-ln max(p_y, floor))/dlogits per row; zero where the clamp is active."""
    d = probs.copy()
    rows = np.arange(len(labels))
    d[rows, labels] -= 1.0
    d[probs[rows, labels] <= PROB_FLOOR] = 0.0
    return d


# --- public API -------------------------------------------------------------

def predict_proba(params: NetworkParams, frames, batch_size: int = 512, dtype=np.float64) -> np.ndarray:
    """Class probabilities for a batch of frames, shape (B, n_classes)."""
    x = _as_batch(frames)
    out = [
        _forward(params, x[i:i + batch_size], dtype)[0].astype(np.float64)
        for i in range(0, len(x), batch_size)
    ]
    if not out:
        return np.zeros((0, params.n_classes))
    return np.concatenate(out)


def forward(params: NetworkParams, frame) -> np.ndarray:
    """Probability vector for a single frame."""
    return predict_proba(params, frame)[0]


def loss(probs: np.ndarray, label: int) -> float:
    return float(-np.log(max(float(probs[int(label)]), PROB_FLOOR)))


def batch_loss(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    p = probs[np.arange(len(labels)), labels]
    return -np.log(np.maximum(p, PROB_FLOOR))


def loss_and_input_gradient(params: NetworkParams, frames, labels):
    """Per-frame losses and d loss_i / d x_i for a batch, shapes (B,), (B, 2, L)."""
    x = _as_batch(frames).astype(np.float64)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    probs, cache = _forward(params, x)
    _, dx = _backward(cache, _dlogits(probs, labels), need_params=False, need_input=True)
    if not np.all(np.isfinite(dx)):
        raise NumericError("non-finite input gradient")
    return batch_loss(probs, labels), dx


def input_gradient(params: NetworkParams, frame, label: int) -> np.ndarray:
    """Exact gradient of the cross-entropy loss w.r.t. every input sample (2 x L)."""
    return loss_and_input_gradient(params, frame, [label])[1][0]


def param_gradient(params: NetworkParams, frames, labels) -> tuple[float, NetworkParams]:
    """Mean batch loss and its gradient with respect to every parameter."""
    x = _as_batch(frames).astype(np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    probs, cache = _forward(params, x)
    grads, _ = _backward(cache, _dlogits(probs, labels) / len(labels))
    return float(batch_loss(probs, labels).mean()), grads


def mean_loss(params: NetworkParams, frames, labels, batch_size: int = 512) -> float:
    probs = predict_proba(params, frames, batch_size)
    return float(batch_loss(probs, labels).mean())


def train(dataset: Dataset, cfg: TrainConfig, tag: "str | int" = "train",
          init: NetworkParams | None = None) -> NetworkParams:
    """Mini-batch momentum SGD on the mean cross-entropy of the tagged frames."""
    cfg.validate()
    part = dataset.tagged(tag) if tag is not None else dataset
    return train_arrays(part.samples, part.labels, cfg, init=init)


def train_arrays(x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                 init: NetworkParams | None = None) -> NetworkParams:
    cfg.validate()
    keep = y >= 0
    x, y = x[keep], y[keep]
    if len(y) == 0:
        raise ConfigurationError("no labeled training frames")
    params = init.copy() if init is not None else init_params(cfg.seed)
    names = [f.name for f in fields(NetworkParams)]
    velocity = {n: np.zeros_like(getattr(params, n)) for n in names}
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    n_steps = cfg.epochs * (-(-len(y) // cfg.batch_size))
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            probs, cache = _forward(params, x[idx], dtype)
            grads, _ = _backward(cache, _dlogits(probs, y[idx]).astype(dtype) / len(idx))
            total += float(batch_loss(probs, y[idx]).sum())
            lr = cfg.learning_rate
            if cfg.cosine_decay:
                lr *= 0.5 * (1.0 + np.cos(np.pi * step / n_steps))
            step += 1
            for n in names:
                v = velocity[n]
                v *= cfg.momentum
                v -= lr * getattr(grads, n).astype(np.float64)
                getattr(params, n)[...] += v
        log.debug("epoch %d mean loss %.4f", epoch, total / len(y))
    params.check()
    return params


def predict_labels(params: NetworkParams, frames) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class code
    return np.argmax(predict_proba(params, frames), axis=1)


def accuracy(params: NetworkParams, dataset: Dataset, tag: "str | int | None" = "test") -> float:
    part = dataset if tag is None else dataset.tagged(split_code(tag))
    mask = part.labels >= 0
    if not np.any(mask):
        raise DomainError("no labeled frames under the requested tag")
    pred = predict_labels(params, part.samples[mask])
    return float(np.mean(pred == part.labels[mask]))


# --- MODEL file format ------------------------------------------------------

_LAYERS = (
    (KIND_STEM, "conv1_w", "conv1_b"),
    (KIND_RES_A, "res_a_w", "res_a_b"),
    (KIND_RES_B, "res_b_w", "res_b_b"),
    (KIND_DENSE, "dense_w", "dense_b"),
)


def write_model(w: Writer, params: NetworkParams) -> None:
    w.raw(MODEL_MAGIC)
    w.pack("HH", MODEL_VERSION, len(_LAYERS))
    for kind, wname, bname in _LAYERS:
        weight = getattr(params, wname)
        w.pack("BB", kind, weight.ndim)
        w.pack("H" * weight.ndim, *weight.shape)
        w.raw(weight.astype("<f8").tobytes())
        w.raw(getattr(params, bname).astype("<f8").tobytes())


def read_model(r: Reader) -> NetworkParams:
    r.expect_header(MODEL_MAGIC, MODEL_VERSION)
    n_layers = r.unpack("H")
    if n_layers != len(_LAYERS):
        raise FormatError(f"MODEL: expected {len(_LAYERS)} layers, found {n_layers}")
    values = {}
    for kind, wname, bname in _LAYERS:
        got_kind, ndim = r.unpack("BB")
        if got_kind != kind:
            raise FormatError(f"MODEL: unexpected layer kind {got_kind}")
        shape = r.unpack("H" * ndim)
        shape = (shape,) if ndim == 1 else tuple(shape)
        size = int(np.prod(shape))
        values[wname] = np.frombuffer(r.take(8 * size), "<f8").reshape(shape).astype(np.float64)
        values[bname] = np.frombuffer(r.take(8 * shape[0]), "<f8").astype(np.float64)
    return NetworkParams(**values)


def model_bytes(params: NetworkParams) -> bytes:
    w = Writer()
    write_model(w, params)
    return w.getvalue()


def parse_model(data: bytes) -> NetworkParams:
    r = Reader(data, "MODEL")
    params = read_model(r)
    if r.remaining:
        raise FormatError("trailing bytes after MODEL payload")
    return params


def save_model(params: NetworkParams, path: "str | Path") -> None:
    atomic_write(path, model_bytes(params))


def load_model(path: "str | Path") -> NetworkParams:
    return parse_model(Path(path).read_bytes())
