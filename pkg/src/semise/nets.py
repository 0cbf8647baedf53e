"""Small networks with hand-derived backward passes.

A three-stage stride-2 CNN encoder (widths 8/16/32) with global average
pooling stands in for a large pretrained backbone at desk scale; projection
and preference heads are single dense layers with row normalization; the
classifier probe is a dropout MLP; the segmentation decoder mirrors the
encoder with transposed convolutions and additive skip connections.

Layers cache their last forward inputs, so a forward must be paired with its
backward before the next forward on the same instance. Parameter gradients
accumulate until :meth:`zero_grads`.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ContractError, DegenerateInputError, DimensionError
from .ndcore import Rng, softmax


def _xavier(rng: Rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    def __init__(self, d_in: int, d_out: int, rng: Rng):
        self.w = _xavier(rng, (d_in, d_out), d_in, d_out)
        self.b = np.zeros(d_out)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.w.shape[0]:
            raise DimensionError(
                f"dense layer expects [B, {self.w.shape[0]}], got {x.shape}"
            )
        self._x = x
        return x @ self.w + self.b

    def backward(self, dy):
        self.dw += self._x.T @ dy
        self.db += dy.sum(axis=0)
        return dy @ self.w.T

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class L2NormalizeRows:
    """Row-wise unit normalization with backward through the projection."""

    def __init__(self):
        self._xn = None
        self._norms = None

    def forward(self, x):
        norms = np.linalg.norm(x, axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise DegenerateInputError(
                f"row {int(zero[0])} has zero norm before normalization"
            )
        self._norms = norms
        self._xn = x / norms[:, None]
        return self._xn

    def backward(self, dy):
        xn = self._xn
        return (dy - np.sum(dy * xn, axis=1, keepdims=True) * xn) / self._norms[:, None]


class GlobalAvgPool:
    def __init__(self):
        self._spatial = None

    def forward(self, x):  # [B,C,H,W] -> [B,C]
        self._spatial = x.shape[2:]
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        h, w = self._spatial
        return np.broadcast_to(dy[:, :, None, None], dy.shape + (h, w)) / (h * w)


class Dropout:
    """Inverted dropout: kept activations are scaled by 1/keep at train time
    so evaluation needs no rescaling."""

    def __init__(self, keep_prob: float):
        self.keep_prob = keep_prob
        self._mask = None

    def forward(self, x, train: bool, rng: Rng | None):
        if not train:
            self._mask = None
            return x
        if rng is None:
            raise ContractError("training-mode dropout needs an Rng")
        self._mask = (rng.uniform(size=x.shape) < self.keep_prob) / self.keep_prob
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask


class Conv2d:
    """3x3, stride 2, zero padding 1; halves H and W."""

    def __init__(self, c_in: int, c_out: int, rng: Rng):
        fan = 9 * c_in, 9 * c_out
        self.w = _xavier(rng, (c_out, c_in, 3, 3), *fan)
        self.b = np.zeros(c_out)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.w.shape[1]:
            raise DimensionError(
                f"conv expects [B, {self.w.shape[1]}, H, W], got {x.shape}"
            )
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise DimensionError(f"conv input H, W must be even, got {x.shape}")
        self._x = np.ascontiguousarray(x)
        return kernels.conv2d_forward(self._x, self.w, self.b)

    def backward(self, dy):
        dx, dw, db = kernels.conv2d_backward(self._x, self.w, np.ascontiguousarray(dy))
        self.dw += dw
        self.db += db
        return dx

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}


class ConvTranspose2d:
    """3x3, stride 2, padding 1, output padding 1; doubles H and W."""

    def __init__(self, c_in: int, c_out: int, rng: Rng):
        fan = 9 * c_in, 9 * c_out
        self.w = _xavier(rng, (c_in, c_out, 3, 3), *fan)
        self.b = np.zeros(c_out)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.w.shape[0]:
            raise DimensionError(
                f"transposed conv expects [B, {self.w.shape[0]}, h, w], got {x.shape}"
            )
        self._x = np.ascontiguousarray(x)
        return kernels.convt2d_forward(self._x, self.w, self.b)

    def backward(self, dy):
        dx, dw, db = kernels.convt2d_backward(
            self._x, self.w, np.ascontiguousarray(dy)
        )
        self.dw += dw
        self.db += db
        return dx

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}


def _collect(prefix, layers):
    out = {}
    for name, layer in layers:
        for k, v in layer.items():
            out[f"{prefix}{name}.{k}"] = v
    return out


class ConvEncoder:
    """Feature extractor: three stride-2 conv+ReLU stages (1->8->16->32
    channels) and global average pooling to a 32-dim embedding.

    Inputs are [B, 1, H, W] with H and W divisible by 8. ``freeze()`` marks
    the instance read-only for downstream probes; the training pipelines
    never update a frozen encoder.
    """

    EMBED_DIM = 32
    WIDTHS = (8, 16, 32)

    def __init__(self, rng: Rng, in_channels: int = 1):
        self.conv1 = Conv2d(in_channels, 8, rng)
        self.conv2 = Conv2d(8, 16, rng)
        self.conv3 = Conv2d(16, 32, rng)
        self.relu1, self.relu2, self.relu3 = ReLU(), ReLU(), ReLU()
        self.pool = GlobalAvgPool()
        self.frozen = False
        self._stages = None

    def freeze(self):
        self.frozen = True
        return self

    def unfreeze(self):
        self.frozen = False
        return self

    def forward(self, images, keep_stages: bool = False):
        x = np.asarray(images, dtype=np.float64)
        if x.ndim != 4:
            raise DimensionError(f"expected [B, C, H, W] images, got {x.shape}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise DimensionError(
                f"image H and W must be divisible by 8, got {x.shape[2]}x{x.shape[3]}"
            )
        a1 = self.relu1.forward(self.conv1.forward(x))
        a2 = self.relu2.forward(self.conv2.forward(a1))
        a3 = self.relu3.forward(self.conv3.forward(a2))
        emb = self.pool.forward(a3)
        self._stages = (a1, a2, a3)
        if keep_stages:
            return emb, self._stages
        return emb

    def backward(self, demb):
        da3 = self.pool.backward(demb)
        da2 = self.conv3.backward(self.relu3.backward(da3))
        da1 = self.conv2.backward(self.relu2.backward(da2))
        return self.conv1.backward(self.relu1.backward(da1))

    def named_params(self):
        return _collect(
            "encoder.",
            [
                ("conv1", self.conv1.params()),
                ("conv2", self.conv2.params()),
                ("conv3", self.conv3.params()),
            ],
        )

    def named_grads(self):
        return _collect(
            "encoder.",
            [
                ("conv1", self.conv1.grads()),
                ("conv2", self.conv2.grads()),
                ("conv3", self.conv3.grads()),
            ],
        )

    def zero_grads(self):
        for g in self.named_grads().values():
            g[...] = 0.0


class NormalizedHead:
    """One dense layer followed by row normalization; outputs are unit-norm.

    Used both for the view-contrast projection and for the preference
    embedding (identical structure, separate weights).
    """

    def __init__(self, rng: Rng, name: str, d_in: int = 32, d_out: int = 16):
        self.name = name
        self.dense = Dense(d_in, d_out, rng)
        self.norm = L2NormalizeRows()

    def forward(self, emb):
        return self.norm.forward(self.dense.forward(emb))

    def backward(self, dz):
        return self.dense.backward(self.norm.backward(dz))

    def named_params(self):
        return {f"{self.name}.{k}": v for k, v in self.dense.params().items()}

    def named_grads(self):
        return {f"{self.name}.{k}": v for k, v in self.dense.grads().items()}

    def zero_grads(self):
        self.dense.dw[...] = 0.0
        self.dense.db[...] = 0.0


class ClassifierProbe:
    """Severity classifier over frozen embeddings: two ReLU dense layers,
    dropout (keep probability 0.7), and a softmax output layer."""

    def __init__(self, n_classes: int, rng: Rng, d_in: int = 32, keep_prob: float = 0.7):
        self.fc1 = Dense(d_in, 32, rng)
        self.fc2 = Dense(32, 32, rng)
        self.out = Dense(32, n_classes, rng)
        self.relu1, self.relu2 = ReLU(), ReLU()
        self.drop = Dropout(keep_prob)
        self.n_classes = n_classes

    def forward(self, emb, train: bool = False, rng: Rng | None = None):
        h = self.relu1.forward(self.fc1.forward(emb))
        h = self.relu2.forward(self.fc2.forward(h))
        h = self.drop.forward(h, train, rng)
        return softmax(self.out.forward(h))

    def backward_from_logits(self, dlogits):
        dh = self.out.backward(dlogits)
        dh = self.drop.backward(dh)
        dh = self.fc2.backward(self.relu2.backward(dh))
        return self.fc1.backward(self.relu1.backward(dh))

    def named_params(self):
        return _collect(
            "probe.",
            [
                ("fc1", self.fc1.params()),
                ("fc2", self.fc2.params()),
                ("out", self.out.params()),
            ],
        )

    def named_grads(self):
        return _collect(
            "probe.",
            [
                ("fc1", self.fc1.grads()),
                ("fc2", self.fc2.grads()),
                ("out", self.out.grads()),
            ],
        )

    def zero_grads(self):
        for g in self.named_grads().values():
            g[...] = 0.0


def cross_entropy_grad(probs, labels):
    """Mean cross-entropy of softmax probabilities against integer labels,
    plus the gradient w.r.t. the pre-softmax logits."""
    n = probs.shape[0]
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


class SegDecoder:
    """Mask decoder mirroring the encoder: three stride-2 transposed convs
    (32->16->8->1) with additive skip connections from the encoder stages,
    ReLU between stages and a sigmoid output map.

    ``forward`` consumes the encoder's stage activations; ``backward`` takes
    the gradient w.r.t. the pre-sigmoid logits (pair it with
    :func:`pixel_bce_grad`) and updates only decoder parameters.
    """

    def __init__(self, rng: Rng):
        self.up1 = ConvTranspose2d(32, 16, rng)
        self.up2 = ConvTranspose2d(16, 8, rng)
        self.up3 = ConvTranspose2d(8, 1, rng)
        self.relu1, self.relu2 = ReLU(), ReLU()
        self._probs = None

    def forward(self, stages):
        a1, a2, a3 = stages
        d1 = self.relu1.forward(self.up1.forward(a3) + a2)
        d2 = self.relu2.forward(self.up2.forward(d1) + a1)
        logits = self.up3.forward(d2)
        # direct sigmoid is fine here: logits stay moderate and the paired
        # BCE gradient is computed from probs, not log(probs)
        self._probs = 1.0 / (1.0 + np.exp(-logits))
        return self._probs

    def backward(self, dlogits):
        dd2 = self.relu2.backward(self.up3.backward(dlogits))
        dd1 = self.relu1.backward(self.up2.backward(dd2))
        da3 = self.up1.backward(dd1)
        return da3, dd1, dd2  # grads w.r.t. a3 and the skip inputs a2, a1

    def named_params(self):
        return _collect(
            "decoder.",
            [
                ("up1", self.up1.params()),
                ("up2", self.up2.params()),
                ("up3", self.up3.params()),
            ],
        )

    def named_grads(self):
        return _collect(
            "decoder.",
            [
                ("up1", self.up1.grads()),
                ("up2", self.up2.grads()),
                ("up3", self.up3.grads()),
            ],
        )

    def zero_grads(self):
        for g in self.named_grads().values():
            g[...] = 0.0


def pixel_bce_grad(probs, targets):
    """Mean per-pixel binary cross-entropy and its gradient w.r.t. the
    pre-sigmoid logits."""
    p = np.clip(probs, 1e-12, 1.0 - 1e-12)
    t = targets
    loss = float(-np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))
    return loss, (probs - t) / probs.size


def segment(encoder: ConvEncoder, decoder: SegDecoder, images):
    """Frozen-encoder mask prediction: per-pixel probabilities in (0, 1)."""
    if not encoder.frozen:
        raise ContractError("segment() requires a frozen encoder")
    _, stages = encoder.forward(images, keep_stages=True)
    return decoder.forward(stages)


class SgdMomentum:
    """Classic momentum SGD over named parameter groups with per-group
    learning rates: v <- momentum * v + g; p <- p - lr * v.

    Momentum 0 reduces exactly to vanilla gradient descent. Updates are
    in-place on the registered parameter arrays, in registration order.
    """

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self._groups = []  # (params dict, grads dict, lr)
        self.velocities: dict[str, np.ndarray] = {}

    def add_group(self, params: dict, grads: dict, lr: float):
        if set(params) != set(grads):
            raise DimensionError("parameter and gradient names differ")
        for name, p in params.items():
            if grads[name].shape != p.shape:
                raise DimensionError(
                    f"gradient shape {grads[name].shape} does not match "
                    f"parameter {name} shape {p.shape}"
                )
            self.velocities[name] = np.zeros_like(p)
        self._groups.append((params, grads, lr))

    def step(self):
        for params, grads, lr in self._groups:
            for name, p in params.items():
                g = grads[name]
                if g.shape != p.shape:
                    raise DimensionError(
                        f"gradient shape {g.shape} does not match "
                        f"parameter {name} shape {p.shape}"
                    )
                v = self.velocities[name]
                v *= self.momentum
                v += g
                p -= lr * v
