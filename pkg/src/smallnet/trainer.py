"""Training smallNet in float64: backprop, Adam, categorical crossentropy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import netcore as nc
from .dataio import LabeledImageSet, normalize

CLIP_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    holdout: int = 5000
    # divide the sigmoid scores by their sum before the log, as Keras'
    # categorical_crossentropy does for non-logit outputs
    normalize_scores: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.holdout < 0:
            raise ValueError("holdout must be >= 0")


@dataclass
class AdamState:
    """Moment accumulators, flattened in ``NetworkParams.to_vector`` order."""

    m: np.ndarray = field(default_factory=lambda: np.zeros(nc.PARAM_COUNT))
    v: np.ndarray = field(default_factory=lambda: np.zeros(nc.PARAM_COUNT))
    t: int = 0


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_accuracy: float


def init_params(seed: int) -> nc.NetworkParams:
    """Glorot-uniform kernels, zero biases."""
    rng = np.random.default_rng(seed)
    conv_bound = math.sqrt(6.0 / (4 + 4))
    dense_bound = math.sqrt(6.0 / (nc.FLAT + nc.CLASSES))
    return nc.NetworkParams(
        nc.ConvParams(rng.uniform(-conv_bound, conv_bound, (2, 2)), np.float64(0.0)),
        nc.ConvParams(rng.uniform(-conv_bound, conv_bound, (2, 2)), np.float64(0.0)),
        nc.DenseParams(rng.uniform(-dense_bound, dense_bound, (nc.CLASSES, nc.FLAT)),
                       np.zeros(nc.CLASSES)),
    )


def cross_entropy_loss(scores, target, normalize: bool = False):
    """Categorical crossentropy, -sum(target * log(clip(scores))).

    With ``normalize`` the scores are first divided by their sum. Works on a
    single 10-vector or a batch (returns one loss per row).
    """
    scores = np.asarray(scores, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if normalize:
        scores = scores / scores.sum(axis=-1, keepdims=True)
    clipped = np.clip(scores, CLIP_EPS, 1.0 - CLIP_EPS)
    loss = -(target * np.log(clipped)).sum(axis=-1)
    return float(loss) if loss.ndim == 0 else loss


def _conv_backward(x, dz, kernel):
    """Gradients of conv2d_same w.r.t. kernel, bias and input, summed over the batch."""
    pad = [(0, 0)] * (x.ndim - 2) + [(0, 1), (0, 1)]
    xp = np.pad(x, pad)
    h, w = dz.shape[-2:]
    dk = np.empty((2, 2))
    for a in range(2):
        for b in range(2):
            dk[a, b] = np.sum(dz * xp[..., a:a + h, b:b + w])
    db = np.sum(dz)
    dzp = np.pad(dz, [(0, 0)] * (dz.ndim - 2) + [(1, 0), (1, 0)])
    dx = (dzp[..., 1:, 1:] * kernel[0, 0] + dzp[..., 1:, :-1] * kernel[0, 1]
          + dzp[..., :-1, 1:] * kernel[1, 0] + dzp[..., :-1, :-1] * kernel[1, 1])
    return dk, db, dx


def batch_gradient(images, labels, params: nc.NetworkParams,
                   normalize: bool = True) -> tuple[float, nc.NetworkParams]:
    """Mean loss and mean gradient over a batch of normalized images."""
    x = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(x)
    z1 = nc.conv2d_same(x, params.conv1)
    a1 = nc.sigmoid_map(z1)
    p1, i1 = nc.maxpool2_argmax(a1)
    z2 = nc.conv2d_same(p1, params.conv2)
    a2 = nc.sigmoid_map(z2)
    p2, i2 = nc.maxpool2_argmax(a2)
    f = nc.flatten(p2)
    s = nc.REAL.sigmoid(nc.dense_preactivation(f, params.dense))

    target = np.zeros((n, nc.CLASSES))
    target[np.arange(n), labels] = 1.0
    losses = cross_entropy_loss(s, target, normalize)
    sy = s[np.arange(n), labels]
    dsig = s * (1.0 - s)
    if normalize:
        total = s.sum(axis=1)
        q = sy / total
        live = (q > CLIP_EPS) & (q < 1.0 - CLIP_EPS)
        # dL/ds_j = -[j=y]/s_y + 1/S, folded with ds/dz to avoid dividing by s_y
        dz3 = dsig / total[:, None]
        dz3[np.arange(n), labels] -= 1.0 - sy
    else:
        live = (sy > CLIP_EPS) & (sy < 1.0 - CLIP_EPS)
        dz3 = np.zeros_like(s)
        dz3[np.arange(n), labels] = -(1.0 - sy)
    dz3 *= live[:, None] / n

    d_dense_w = dz3.T @ f
    d_dense_b = dz3.sum(axis=0)
    dp2 = (dz3 @ params.dense.weights).reshape(n, nc.POOLED_SIDE, nc.POOLED_SIDE)
    dz2 = nc.unpool2(dp2, i2) * a2 * (1.0 - a2)
    dk2, db2, dp1 = _conv_backward(p1, dz2, params.conv2.kernel)
    dz1 = nc.unpool2(dp1, i1) * a1 * (1.0 - a1)
    dk1, db1, _ = _conv_backward(x, dz1, params.conv1.kernel)

    grads = nc.NetworkParams(
        nc.ConvParams(dk1, np.float64(db1)),
        nc.ConvParams(dk2, np.float64(db2)),
        nc.DenseParams(d_dense_w, d_dense_b),
    )
    return float(np.mean(losses)), grads


def backward(image, target, params: nc.NetworkParams,
             normalize: bool = True) -> tuple[float, nc.NetworkParams]:
    """Loss and gradient for one normalized 28x28 image and its one-hot target."""
    label = int(np.argmax(target))
    return batch_gradient(np.asarray(image)[None], [label], params, normalize)


def adam_step(params: nc.NetworkParams, grads: nc.NetworkParams, state: AdamState,
              config: TrainConfig) -> tuple[nc.NetworkParams, AdamState]:
    g = grads.to_vector()
    t = state.t + 1
    m = config.adam_beta1 * state.m + (1.0 - config.adam_beta1) * g
    v = config.adam_beta2 * state.v + (1.0 - config.adam_beta2) * g * g
    m_hat = m / (1.0 - config.adam_beta1 ** t)
    v_hat = v / (1.0 - config.adam_beta2 ** t)
    theta = params.to_vector() - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)
    return nc.NetworkParams.from_vector(theta), AdamState(m, v, t)


def predict(params, images, batch: int = 2048) -> np.ndarray:
    """Class predictions for normalized images, in either number domain."""
    out = []
    for start in range(0, len(images), batch):
        out.append(nc.forward_batch(images[start:start + batch], params)[1])
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def evaluate(params, data: LabeledImageSet) -> float:
    if data.count == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(params, data.normalized())
    return float(np.mean(pred == data.labels))


def _mean_loss(params, images, labels, normalize, batch=4096) -> float:
    total = 0.0
    for start in range(0, len(images), batch):
        x = images[start:start + batch]
        y = labels[start:start + batch]
        s, _ = nc.forward_batch(x, params)
        target = np.eye(nc.CLASSES)[y]
        total += float(np.sum(cross_entropy_loss(s, target, normalize)))
    return total / len(images)


def train(data: LabeledImageSet, config: TrainConfig = TrainConfig(),
          progress=None) -> tuple[nc.NetworkParams, list[EpochRecord]]:
    """Train from scratch; returns final params and one record per epoch.

    The last ``config.holdout`` images are kept out of training and used for
    the per-epoch validation accuracy. Record 0 holds the loss before any
    update.
    """
    if data.count == 0:
        raise ValueError("cannot train on an empty dataset")
    if config.holdout >= data.count:
        raise ValueError(f"holdout {config.holdout} leaves no training images out of {data.count}")
    images = normalize(data.images)
    labels = data.labels.astype(np.int64)
    split = data.count - config.holdout
    x_train, y_train = images[:split], labels[:split]
    x_val, y_val = images[split:], labels[split:]

    init_seq, shuffle_seq = np.random.SeedSequence(config.seed).spawn(2)
    params = init_params(int(init_seq.generate_state(1)[0]))
    rng = np.random.default_rng(shuffle_seq)
    state = AdamState()

    def val_acc():
        if not len(x_val):
            return float("nan")
        return float(np.mean(predict(params, x_val) == y_val))

    history = [EpochRecord(0, _mean_loss(params, x_train, y_train, config.normalize_scores), val_acc())]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(split)
        running, seen = 0.0, 0
        for start in range(0, split, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = batch_gradient(x_train[idx], y_train[idx], params, config.normalize_scores)
            params, state = adam_step(params, grads, state, config)
            running += loss * len(idx)
            seen += len(idx)
        history.append(EpochRecord(epoch, running / seen, val_acc()))
        if progress:
            progress(history[-1])
    return params, history
