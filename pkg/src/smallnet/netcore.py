"""smallNet layer functions, generic over the number domain.

Feature maps are numpy arrays whose last two axes are (height, width); any
leading axes are treated as a batch. In the real domain values are float64.
In the fixed domain they are int64 arrays holding raw Q16.16 words, and every
multiply and add goes through the saturating helpers in ``fixedpoint``.

Network: conv(2x2) -> sigmoid -> maxpool -> conv(2x2) -> sigmoid -> maxpool
-> flatten(49) -> dense(10) -> sigmoid -> max finder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fixedpoint as fxp

KERNEL = 2
INPUT_SIDE = 28
POOLED_SIDE = 7
FLAT = POOLED_SIDE * POOLED_SIDE
CLASSES = 10


class ShapeError(ValueError):
    pass


class RealDomain:
    name = "real"
    dtype = np.float64

    def mul(self, a, b):
        return np.multiply(a, b)

    def add(self, a, b):
        return np.add(a, b)

    def sigmoid(self, x):
        x = np.asarray(x, dtype=np.float64)
        # split by sign to keep exp from overflowing
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def prepare_input(self, image):
        return np.asarray(image, dtype=np.float64)


class FixedDomain:
    name = "fixed"
    dtype = np.int64

    def __init__(self, lut: fxp.SigmoidLut = fxp.DEFAULT_LUT):
        self.lut = lut

    def mul(self, a, b):
        return fxp.vmul(a, b)

    def add(self, a, b):
        return fxp.vadd(a, b)

    def sigmoid(self, x):
        return fxp.vsigmoid(x, self.lut)

    def prepare_input(self, image):
        """Quantize a normalized float image; int64 input is taken as raw words."""
        image = np.asarray(image)
        if image.dtype == np.int64:
            return image
        if not np.issubdtype(image.dtype, np.floating):
            raise TypeError(
                f"fixed-domain input must be normalized floats or int64 raw words, got {image.dtype}")
        return fxp.vfrom_real(image)


REAL = RealDomain()
FIXED = FixedDomain()


@dataclass
class ConvParams:
    kernel: np.ndarray  # (2, 2)
    bias: np.ndarray    # 0-d

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel)
        self.bias = np.asarray(self.bias)
        if self.kernel.shape != (KERNEL, KERNEL):
            raise ShapeError(f"conv kernel must be 2x2, got {self.kernel.shape}")
        if self.bias.shape != ():
            raise ShapeError(f"conv bias must be a scalar, got shape {self.bias.shape}")

    @property
    def size(self) -> int:
        return self.kernel.size + 1


@dataclass
class DenseParams:
    weights: np.ndarray  # (10, 49), output-major
    biases: np.ndarray   # (10,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.biases = np.asarray(self.biases)
        if self.weights.shape != (CLASSES, FLAT):
            raise ShapeError(f"dense weights must be 10x49, got {self.weights.shape}")
        if self.biases.shape != (CLASSES,):
            raise ShapeError(f"dense biases must have 10 entries, got {self.biases.shape}")

    @property
    def size(self) -> int:
        return self.weights.size + self.biases.size


@dataclass
class NetworkParams:
    """The 510 trainable scalars. Also used to hold gradients and Adam moments."""

    conv1: ConvParams
    conv2: ConvParams
    dense: DenseParams

    domain = REAL

    def to_vector(self) -> np.ndarray:
        """Flatten as conv1 kernel, conv1 bias, conv2 kernel, conv2 bias, dense W, dense b."""
        return np.concatenate([
            self.conv1.kernel.ravel(), self.conv1.bias.ravel(),
            self.conv2.kernel.ravel(), self.conv2.bias.ravel(),
            self.dense.weights.ravel(), self.dense.biases.ravel(),
        ])

    @classmethod
    def from_vector(cls, vec) -> "NetworkParams":
        vec = np.asarray(vec)
        if vec.shape != (PARAM_COUNT,):
            raise ShapeError(f"expected {PARAM_COUNT} values, got shape {vec.shape}")
        return cls(
            ConvParams(vec[0:4].reshape(2, 2).copy(), vec[4].copy()),
            ConvParams(vec[5:9].reshape(2, 2).copy(), vec[9].copy()),
            DenseParams(vec[10:500].reshape(CLASSES, FLAT).copy(), vec[500:510].copy()),
        )

    @classmethod
    def zeros(cls) -> "NetworkParams":
        return cls.from_vector(np.zeros(PARAM_COUNT))


GradientSet = NetworkParams

PARAM_COUNT = 2 * (KERNEL * KERNEL + 1) + CLASSES * FLAT + CLASSES


def param_count(params) -> int:
    if isinstance(params, (ConvParams, DenseParams)):
        return params.size
    return params.conv1.size + params.conv2.size + params.dense.size


def conv2d_same(x, p: ConvParams, domain=REAL) -> np.ndarray:
    """2x2 stride-1 convolution with one zero row/column padded at the bottom/right.

    The four taps are summed as ((m00 + m01) + (m10 + m11)) and the bias is
    added last. The hardware adder tree uses the same order, and with
    saturating arithmetic the order changes results.
    """
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"conv input needs at least 1x1 spatial dims, got {x.shape}")
    pad = [(0, 0)] * (x.ndim - 2) + [(0, 1), (0, 1)]
    xp = np.pad(x, pad)
    k = p.kernel
    m0 = domain.mul(xp[..., :-1, :-1], k[0, 0])
    m1 = domain.mul(xp[..., :-1, 1:], k[0, 1])
    m2 = domain.mul(xp[..., 1:, :-1], k[1, 0])
    m3 = domain.mul(xp[..., 1:, 1:], k[1, 1])
    return domain.add(domain.add(domain.add(m0, m1), domain.add(m2, m3)), p.bias)


def sigmoid_map(x, domain=REAL) -> np.ndarray:
    return domain.sigmoid(x)


def _blocks(x: np.ndarray) -> np.ndarray:
    """View (..., 2h, 2w) as (..., h, w, 4) with each 2x2 block in row-major order."""
    *lead, h2, w2 = x.shape
    h, w = h2 // 2, w2 // 2
    b = x.reshape(*lead, h, 2, w, 2)
    b = np.moveaxis(b, -3, -2)  # (..., h, w, 2, 2)
    return b.reshape(*lead, h, w, 4)


def maxpool2(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f"maxpool2 needs even height and width, got {x.shape}")
    return _blocks(x).max(axis=-1)


def maxpool2_argmax(x) -> tuple[np.ndarray, np.ndarray]:
    """Pooled values and the row-major index (0..3) of the first maximum in each block."""
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f"maxpool2 needs even height and width, got {x.shape}")
    b = _blocks(x)
    idx = b.argmax(axis=-1)
    return np.take_along_axis(b, idx[..., None], axis=-1)[..., 0], idx


def unpool2(grad, idx) -> np.ndarray:
    """Scatter pooled gradients back to the argmax position of each block."""
    *lead, h, w = grad.shape
    b = np.zeros((*lead, h, w, 4), dtype=grad.dtype)
    np.put_along_axis(b, idx[..., None], grad[..., None], axis=-1)
    b = b.reshape(*lead, h, w, 2, 2)
    b = np.moveaxis(b, -2, -3)
    return b.reshape(*lead, 2 * h, 2 * w)


def flatten(x) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-2:] != (POOLED_SIDE, POOLED_SIDE):
        raise ShapeError(f"flatten expects a 7x7 map, got {x.shape}")
    return x.reshape(*x.shape[:-2], FLAT)


def dense_preactivation(x, p: DenseParams, domain=REAL) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != FLAT:
        raise ShapeError(f"dense input must have 49 entries, got {x.shape}")
    if domain is REAL:
        return x @ p.weights.T + p.biases
    # sequential saturating accumulation, input index ascending, bias last;
    # this is the order the dense MAC unit walks its ROM
    acc = np.zeros((*x.shape[:-1], CLASSES), dtype=np.int64)
    for i in range(FLAT):
        acc = domain.add(acc, domain.mul(x[..., i:i + 1], p.weights[:, i]))
    return domain.add(acc, p.biases)


def dense_forward(x, p: DenseParams, domain=REAL) -> np.ndarray:
    return domain.sigmoid(dense_preactivation(x, p, domain))


def max_finder(scores) -> np.ndarray | int:
    """Index of the largest score; ties go to the lowest index."""
    scores = np.asarray(scores)
    if scores.shape[-1] != CLASSES:
        raise ShapeError(f"max finder needs 10 scores, got {scores.shape}")
    out = np.argmax(scores, axis=-1)
    return int(out) if out.ndim == 0 else out


def layer_outputs(images, params: NetworkParams) -> dict[str, np.ndarray]:
    """Run the stack and keep every intermediate, keyed by stage name."""
    dom = params.domain
    x = dom.prepare_input(images)
    if x.shape[-2:] != (INPUT_SIDE, INPUT_SIDE):
        raise ShapeError(f"expected 28x28 input, got {x.shape}")
    out = {"input": x}
    out["conv1"] = conv2d_same(x, params.conv1, dom)
    out["act1"] = sigmoid_map(out["conv1"], dom)
    out["pool1"] = maxpool2(out["act1"])
    out["conv2"] = conv2d_same(out["pool1"], params.conv2, dom)
    out["act2"] = sigmoid_map(out["conv2"], dom)
    out["pool2"] = maxpool2(out["act2"])
    out["flat"] = flatten(out["pool2"])
    out["scores"] = dense_forward(out["flat"], params.dense, dom)
    out["class"] = max_finder(out["scores"])
    return out


def forward_batch(images, params: NetworkParams) -> tuple[np.ndarray, np.ndarray]:
    out = layer_outputs(images, params)
    return out["scores"], np.atleast_1d(out["class"])


def forward(image, params: NetworkParams) -> tuple[np.ndarray, int]:
    """Scores and predicted class for a single 28x28 image."""
    image = np.asarray(image)
    if image.shape != (INPUT_SIDE, INPUT_SIDE):
        raise ShapeError(f"expected one 28x28 image, got {image.shape}")
    out = layer_outputs(image, params)
    return out["scores"], int(out["class"])
