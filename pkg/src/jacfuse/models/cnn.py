"""Lightweight 3D CNN with hand-written backpropagation.

Layout: [conv3 -> batchnorm -> relu -> maxpool2 -> dropout] x 2 -> flatten
-> fully connected -> softmax. Tensors are ``(batch, channels, d, h, w)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch

log = logging.getLogger(__name__)

N_CLASSES = 4
BN_EPS = 1e-5
LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 4
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate, batch_size must be positive and epochs non-negative")


TRAINABLE = ("conv1_w", "conv1_b", "bn1_gamma", "bn1_beta", "conv2_w", "conv2_b", "bn2_gamma", "bn2_beta", "fc_w", "fc_b")


@dataclass
class Cnn3dModel:
    input_shape: tuple[int, int, int]
    filters: tuple[int, int] = (8, 16)
    dropout: float = 0.2
    bn_momentum: float = 0.9
    seed: int = 0
    params: dict[str, np.ndarray] = field(default_factory=dict)
    training: bool = False

    def __post_init__(self):
        d, h, w = self.input_shape
        if d % 4 or h % 4 or w % 4:
            raise ShapeMismatch(f"input dims must be divisible by 4, got {self.input_shape}")
        if not self.params:
            self.params = self._init_params()

    @property
    def flat_size(self) -> int:
        d, h, w = self.input_shape
        return self.filters[1] * (d // 4) * (h // 4) * (w // 4)

    def _init_params(self) -> dict[str, np.ndarray]:
        # He initialisation, fan-in scaled
        rng = np.random.default_rng(self.seed)
        f1, f2 = self.filters
        p = {
            "conv1_w": rng.normal(0.0, np.sqrt(2.0 / 27), (f1, 1, 3, 3, 3)),
            "conv1_b": np.zeros(f1),
            "bn1_gamma": np.ones(f1),
            "bn1_beta": np.zeros(f1),
            "bn1_mean": np.zeros(f1),
            "bn1_var": np.ones(f1),
            "conv2_w": rng.normal(0.0, np.sqrt(2.0 / (27 * f1)), (f2, f1, 3, 3, 3)),
            "conv2_b": np.zeros(f2),
            "bn2_gamma": np.ones(f2),
            "bn2_beta": np.zeros(f2),
            "bn2_mean": np.zeros(f2),
            "bn2_var": np.ones(f2),
            "fc_w": rng.normal(0.0, np.sqrt(2.0 / self.flat_size), (N_CLASSES, self.flat_size)),
            "fc_b": np.zeros(N_CLASSES),
        }
        return p

    def copy(self) -> "Cnn3dModel":
        return Cnn3dModel(
            self.input_shape,
            self.filters,
            self.dropout,
            self.bn_momentum,
            self.seed,
            {k: v.copy() for k, v in self.params.items()},
            self.training,
        )


# ------------------------------------------------------------------ layers


def conv3d_forward(x, w, b):
    """Same-padded stride-1 3x3x3 convolution (cross-correlation).

    Returns the output and the im2col matrix (B*D*H*W, C*27), which the
    backward pass reuses for the weight gradient.
    """
    bsz, c, d, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))  # (B, C, D, H, W, 3, 3, 3)
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(bsz * d * h * wd, c * 27)
    out = (cols @ w.reshape(len(w), -1).T).reshape(bsz, d, h, wd, len(w))
    out = np.moveaxis(out, 4, 1) + b.reshape(1, -1, 1, 1, 1)
    return out, (cols, x.shape)


def conv3d_backward(dout, cache, w, need_dx: bool = True):
    cols, (bsz, c, d, h, wd) = cache
    n_f = len(w)
    dflat = np.moveaxis(dout, 1, 4).reshape(-1, n_f)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # col2im: scatter each of the 27 tap contributions back onto the padded input
    dcols = (dflat @ w.reshape(n_f, -1)).reshape(bsz, d, h, wd, c, 3, 3, 3)
    dcols = dcols.transpose(5, 6, 7, 0, 4, 1, 2, 3)  # (3, 3, 3, B, C, D, H, W)
    dxp = np.zeros((bsz, c, d + 2, h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                dxp[:, :, i : i + d, j : j + h, k : k + wd] += dcols[i, j, k]
    return dxp[:, :, 1:-1, 1:-1, 1:-1], dw, db


def bn_forward(x, gamma, beta, mean, var, training):
    if training:
        mu = x.mean(axis=(0, 2, 3, 4))
        v = x.var(axis=(0, 2, 3, 4))
    else:
        mu, v = mean, var
    inv = 1.0 / np.sqrt(v + BN_EPS)
    xhat = (x - mu.reshape(1, -1, 1, 1, 1)) * inv.reshape(1, -1, 1, 1, 1)
    out = xhat * gamma.reshape(1, -1, 1, 1, 1) + beta.reshape(1, -1, 1, 1, 1)
    return out, (xhat, inv, training, mu, v)


def bn_backward(dout, cache, gamma):
    xhat, inv, training, _, _ = cache
    axes = (0, 2, 3, 4)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma.reshape(1, -1, 1, 1, 1)
    inv_b = inv.reshape(1, -1, 1, 1, 1)
    if not training:
        return dxhat * inv_b, dgamma, dbeta
    m = dout.size / dout.shape[1]
    dx = (inv_b / m) * (
        m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
    )
    return dx, dgamma, dbeta


def maxpool_forward(x):
    b, c, d, h, w = x.shape
    blocks = x.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(b, c, d // 2, h // 2, w // 2, 8)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool_backward(dout, cache):
    idx, shape = cache
    b, c, d, h, w = shape
    grad = np.zeros(dout.shape + (8,))
    np.put_along_axis(grad, idx[..., None], dout[..., None], axis=-1)
    grad = grad.reshape(b, c, d // 2, h // 2, w // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return grad.reshape(shape)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ------------------------------------------------------------ full network


def _check_input(model: Cnn3dModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        x = x[:, None]
    if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != tuple(model.input_shape):
        raise ShapeMismatch(f"expected (batch, {model.input_shape}) input, got {x.shape}")
    return x


def forward(model: Cnn3dModel, x, training: bool = False, rng=None, masks=None):
    """Logits and backprop cache.

    In training mode batch statistics are used and running statistics are
    updated; dropout masks come from ``masks`` if given, else from ``rng``.
    """
    p = model.params
    x = _check_input(model, x)
    cache = {}
    h = x
    for i, key in ((1, "1"), (2, "2")):
        z, cache[f"conv{key}"] = conv3d_forward(h, p[f"conv{key}_w"], p[f"conv{key}_b"])
        bn, cache[f"bn{key}"] = bn_forward(z, p[f"bn{key}_gamma"], p[f"bn{key}_beta"], p[f"bn{key}_mean"], p[f"bn{key}_var"], training)
        if training:
            mom = model.bn_momentum
            mu, v = cache[f"bn{key}"][3], cache[f"bn{key}"][4]
            p[f"bn{key}_mean"] = mom * p[f"bn{key}_mean"] + (1 - mom) * mu
            p[f"bn{key}_var"] = mom * p[f"bn{key}_var"] + (1 - mom) * v
        act = np.maximum(bn, 0.0)
        cache[f"relu{key}"] = bn > 0
        pooled, cache[f"pool{key}"] = maxpool_forward(act)
        mask = None
        if masks is not None:
            mask = masks[i - 1]
        elif training and model.dropout > 0:
            keep = 1.0 - model.dropout
            mask = (rng.random(pooled.shape) < keep) / keep
        if mask is not None:
            pooled = pooled * mask
        cache[f"drop{key}"] = mask
        h = pooled
    cache["flat_shape"] = h.shape
    flat = h.reshape(h.shape[0], -1)
    cache["flat"] = flat
    logits = flat @ p["fc_w"].T + p["fc_b"]
    return logits, cache


def backward(model: Cnn3dModel, cache, dlogits) -> dict[str, np.ndarray]:
    p = model.params
    grads = {}
    grads["fc_w"] = dlogits.T @ cache["flat"]
    grads["fc_b"] = dlogits.sum(axis=0)
    dh = (dlogits @ p["fc_w"]).reshape(cache["flat_shape"])
    for key in ("2", "1"):
        if cache[f"drop{key}"] is not None:
            dh = dh * cache[f"drop{key}"]
        dh = maxpool_backward(dh, cache[f"pool{key}"])
        dh = dh * cache[f"relu{key}"]
        dh, grads[f"bn{key}_gamma"], grads[f"bn{key}_beta"] = bn_backward(dh, cache[f"bn{key}"], p[f"bn{key}_gamma"])
        # the network input needs no gradient
        dh, grads[f"conv{key}_w"], grads[f"conv{key}_b"] = conv3d_backward(
            dh, cache[f"conv{key}"], p[f"conv{key}_w"], need_dx=key != "1"
        )
    return grads


def cnn_forward(model: Cnn3dModel, x, mode: str = "eval", rng=None) -> np.ndarray:
    """Class probabilities, shape ``(batch, 4)``; ``mode`` is "train" or "eval"."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if training and rng is None:
        rng = np.random.default_rng(model.seed)
    logits, _ = forward(model, x, training=training, rng=rng)
    return softmax(logits)


def cnn_loss(probs, labels, weights) -> float:
    """Class-weighted cross-entropy: -(1/B) sum_b w[y_b] log p_b[y_b]."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(w[labels] * np.log(np.maximum(picked, LOG_CLAMP))))


def loss_and_grads(model: Cnn3dModel, x, labels, weights, training=False, rng=None, masks=None):
    logits, cache = forward(model, x, training=training, rng=rng, masks=masks)
    probs = softmax(logits)
    labels = np.asarray(labels, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    loss = cnn_loss(probs, labels, w)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    dlogits = w[labels][:, None] * (probs - onehot) / len(labels)
    return loss, probs, backward(model, cache, dlogits)


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for k in TRAINABLE:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / (1 - self.beta1**self.t)
            vhat = self.v[k] / (1 - self.beta2**self.t)
            params[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def cnn_train(
    model: Cnn3dModel,
    x: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
    weights: np.ndarray | None = None,
    x_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
) -> tuple[Cnn3dModel, list[dict]]:
    """Mini-batch Adam training. Returns the trained model and a per-epoch curve.

    Curve rows hold the mean training-mode batch loss and accuracy, plus
    eval-mode validation loss/accuracy when validation data is supplied.
    """
    x = _check_input(model, x)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) != len(labels) or len(x) == 0:
        raise ValueError("need one label per sample and at least one sample")
    if weights is None:
        weights = np.full(N_CLASSES, 1.0 / N_CLASSES)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    curve = []
    n = len(x)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses, correct = [], 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            # batchnorm needs more than one sample per batch
            if len(idx) < 2 and n >= 2:
                continue
            loss, probs, grads = loss_and_grads(model, x[idx], labels[idx], weights, training=True, rng=rng)
            opt.step(model.params, grads)
            losses.append(loss * len(idx))
            correct += int((probs.argmax(axis=1) == labels[idx]).sum())
        seen = sum(len(order[s : s + cfg.batch_size]) for s in range(0, n, cfg.batch_size) if len(order[s : s + cfg.batch_size]) >= 2 or n < 2)
        row = {"epoch": epoch, "loss": float(sum(losses) / max(seen, 1)), "accuracy": correct / max(seen, 1)}
        if x_val is not None and len(x_val):
            pv = cnn_forward(model, x_val, "eval")
            row["val_loss"] = cnn_loss(pv, y_val, weights)
            row["val_accuracy"] = float(np.mean(pv.argmax(axis=1) == np.asarray(y_val)))
        curve.append(row)
    model.training = False
    return model, curve


# --------------------------------------------------------------- gradcheck


def cnn_gradcheck(model: Cnn3dModel, x, labels, weights=None, n_params: int = 200, h: float = 1e-5, seed: int = 0, training: bool = False, masks=None) -> float:
    """Max relative error between backprop and central finite differences.

    With ``training`` False the network runs in eval mode (frozen batchnorm
    statistics, no dropout). With ``training`` True, batch statistics are
    used and the dropout ``masks`` are held fixed; running statistics are
    restored after every evaluation so the function stays pure.
    """
    if weights is None:
        weights = np.full(N_CLASSES, 1.0 / N_CLASSES)
    running = {k: model.params[k].copy() for k in ("bn1_mean", "bn1_var", "bn2_mean", "bn2_var")}

    def restore():
        for k, v in running.items():
            model.params[k] = v.copy()

    _, _, grads = loss_and_grads(model, x, labels, weights, training=training, masks=masks)
    restore()
    rng = np.random.default_rng(seed)
    sizes = np.array([model.params[k].size for k in TRAINABLE])
    picks = rng.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat_idx in picks:
        which = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        key = TRAINABLE[which]
        local = np.unravel_index(flat_idx - offsets[which], model.params[key].shape)
        orig = model.params[key][local]
        model.params[key][local] = orig + h
        lp, _, _ = loss_and_grads(model, x, labels, weights, training=training, masks=masks)
        restore()
        model.params[key][local] = orig - h
        lm, _, _ = loss_and_grads(model, x, labels, weights, training=training, masks=masks)
        restore()
        model.params[key][local] = orig
        numeric = (lp - lm) / (2 * h)
        analytic = grads[key][local]
        # central-difference roundoff is ~eps*|L|/h ~ 1e-11; gradients below the
        # floor (e.g. conv biases ahead of batch-stat BN, exactly 0) are compared absolutely
        denom = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
