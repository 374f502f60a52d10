"""Desk-scale workloads: a tiny dense classifier and a plain GEMM chain.

The classifier is trained in numpy on Gaussian blobs and then lowered to the
accelerator's types: INT8 with power-of-two scales (so requantisation is an
arithmetic right shift) or float weights rounded to the datapath type.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DType, round_to, wrap_int32


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def make_blobs(n_train: int = 2000, n_test: int = 512, features: int = 64, classes: int = 10,
               spread: float = 1.0, separation: float = 0.55, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, separation, size=(classes, features))

    def draw(n):
        y = rng.integers(classes, size=n)
        return centres[y] + rng.normal(0.0, spread, size=(n, features)), y

    x_tr, y_tr = draw(n_train)
    x_te, y_te = draw(n_test)
    return Dataset(x_tr, y_tr, x_te, y_te)


def train_mlp(data: Dataset, dims=(64, 32, 10), steps: int = 400, lr: float = 0.01,
              seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Full-batch Adam on softmax cross-entropy; returns ``[(W, b), ...]``."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        params.append([rng.normal(0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)), np.zeros(fan_out)])
    m = [[np.zeros_like(p) for p in layer] for layer in params]
    v = [[np.zeros_like(p) for p in layer] for layer in params]
    x, y = data.x_train, data.y_train
    onehot = np.eye(dims[-1])[y]
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, steps + 1):
        acts = [x]
        for li, (w, b) in enumerate(params):
            z = acts[-1] @ w + b
            acts.append(np.maximum(z, 0) if li < len(params) - 1 else z)
        logits = acts[-1]
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        grad = (p - onehot) / len(x)
        for li in range(len(params) - 1, -1, -1):
            w, _ = params[li]
            grads = [acts[li].T @ grad, grad.sum(axis=0)]
            if li:
                grad = (grad @ w.T) * (acts[li] > 0)
            for pi, g in enumerate(grads):
                m[li][pi] = b1 * m[li][pi] + (1 - b1) * g
                v[li][pi] = b2 * v[li][pi] + (1 - b2) * g * g
                mh, vh = m[li][pi] / (1 - b1 ** t), v[li][pi] / (1 - b2 ** t)
                params[li][pi] = params[li][pi] - lr * mh / (np.sqrt(vh) + eps)
    return [(w, b) for w, b in params]


def float_forward(params, x) -> np.ndarray:
    for li, (w, b) in enumerate(params):
        x = x @ w + b
        if li < len(params) - 1:
            x = np.maximum(x, 0)
    return x


def _pow2_exponent(max_abs: float, limit: float = 127.0) -> int:
    """Smallest e with max_abs <= limit * 2**e."""
    if max_abs <= 0:
        return 0
    return int(np.ceil(np.log2(max_abs / limit)))


@dataclass
class Layer:
    """One dense layer lowered to the accelerator.

    ``weights`` is (in, out); ``bias`` is added through the D operand.
    ``shift`` is the requantisation right shift (integer models only).
    """

    weights: np.ndarray
    bias: np.ndarray
    shift: int = 0
    relu: bool = True


@dataclass
class Model:
    dtype: DType
    layers: list
    input_exponent: int = 0
    classes: int = 10
    meta: dict = field(default_factory=dict)

    def quantise_input(self, x) -> np.ndarray:
        if self.dtype is DType.INT8:
            return np.clip(np.rint(np.asarray(x) / 2.0 ** self.input_exponent), -128, 127).astype(np.int64)
        return round_to(x, self.dtype)

    def reference(self, xq) -> np.ndarray:
        """Fault-free forward pass on quantised inputs; returns final accumulators."""
        x = xq
        for li, layer in enumerate(self.layers):
            acc = reference_gemm(x, layer.weights, layer.bias, self.dtype)
            if li == len(self.layers) - 1:
                return acc
            x = requantise(acc, layer.shift, self.dtype)
            if layer.relu:
                x = np.maximum(x, 0)
        return x

    def predict(self, xq) -> np.ndarray:
        return self.reference(xq)[:, : self.classes].argmax(axis=1)


def reference_gemm(x, w, bias, dtype: DType) -> np.ndarray:
    if dtype is DType.INT8:
        return wrap_int32(np.asarray(x, np.int64) @ np.asarray(w, np.int64) + np.asarray(bias, np.int64))
    return (np.asarray(x, np.float64) @ np.asarray(w, np.float64) + bias).astype(np.float32)


def requantise(acc, shift: int, dtype: DType) -> np.ndarray:
    """Accumulator -> next-layer operand: rounding right shift and clip for INT8."""
    if dtype is DType.INT8:
        acc = np.asarray(acc, np.int64)
        if shift > 0:
            acc = (acc + (1 << (shift - 1))) >> shift
        elif shift < 0:
            acc = acc << -shift
        return np.clip(acc, -128, 127)
    return round_to(acc, dtype)


def lower(params, dtype: DType, calibration) -> Model:
    """Quantise trained float parameters for ``dtype``."""
    if dtype is not DType.INT8:
        layers = [Layer(round_to(w, dtype), np.asarray(b, np.float32), 0, li < len(params) - 1)
                  for li, (w, b) in enumerate(params)]
        return Model(dtype, layers, 0, params[-1][0].shape[1])
    in_exp = _pow2_exponent(float(np.abs(calibration).max()))
    act_exp = in_exp
    act = calibration
    layers = []
    for li, (w, b) in enumerate(params):
        w_exp = _pow2_exponent(float(np.abs(w).max()))
        wq = np.clip(np.rint(w / 2.0 ** w_exp), -127, 127).astype(np.int64)
        acc_exp = act_exp + w_exp
        bq = np.rint(b / 2.0 ** acc_exp).astype(np.int64)
        act = np.maximum(act @ w + b, 0) if li < len(params) - 1 else act @ w + b
        out_exp = _pow2_exponent(float(np.percentile(np.abs(act), 99.9)))
        layers.append(Layer(wq, bq, out_exp - acc_exp, li < len(params) - 1))
        act_exp = out_exp
    return Model(dtype, layers, in_exp, params[-1][0].shape[1])


def tiny_mlp(dtype: DType = DType.INT8, dims=(64, 32, 10), seed: int = 0,
             n_train: int = 2000, n_test: int = 512) -> tuple[Model, Dataset]:
    data = make_blobs(n_train, n_test, dims[0], dims[-1], seed=seed)
    params = train_mlp(data, dims, seed=seed)
    model = lower(params, dtype, data.x_train)
    model.meta["float_accuracy"] = float((float_forward(params, data.x_test).argmax(1) == data.y_test).mean())
    return model, data


def gemm_chain(n: int, groups: int, dtype: DType = DType.INT8, seed: int = 0,
               rows: int | None = None) -> tuple[Model, np.ndarray]:
    """``groups`` square layers with no nonlinearity, plus a random input batch."""
    rng = np.random.default_rng(seed)
    rows = rows or n
    layers = []
    for _ in range(groups):
        if dtype is DType.INT8:
            w = rng.integers(-64, 64, size=(n, n))
            b = rng.integers(-512, 512, size=n)
            layers.append(Layer(w, b, shift=int(np.ceil(np.log2(64 * 64 * n / 128))), relu=False))
        else:
            layers.append(Layer(round_to(rng.normal(0, 1 / np.sqrt(n), (n, n)), dtype),
                                rng.normal(0, 0.1, n).astype(np.float32), 0, relu=False))
    x = rng.integers(-128, 128, size=(rows, n)) if dtype is DType.INT8 else \
        round_to(rng.normal(size=(rows, n)), dtype)
    return Model(dtype, layers, 0, n), x
