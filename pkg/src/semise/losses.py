"""The four training objectives, each returning analytic gradients for every
embedding input.

* margin (siamese) loss over labeled pairs, cosine distance;
* temperature-scaled view contrast over paired augmented views;
* preference loss ranking two anomalous embeddings by distance from a
  reference vector, reduced with binary cross-entropy;
* their convex combination with a single mixing weight.

All inputs are row matrices of embeddings; rows with zero norm raise
:class:`~semise.errors.DegenerateInputError` (the caller must see collapse,
not have it smoothed away).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError
from .ndcore import sigmoid

_CLAMP = 1e-12  # probability clamp before log; perturbs gradients below 1e-4 test tolerance


def _normalized_rows(x: np.ndarray, what: str):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateInputError(f"{what} row {int(zero[0])} has zero norm")
    return x / norms[:, None], norms


def _cosine_pair_grads(ah, bh, cos, norms_a, dloss_dD):
    """Per-row gradient of D = 1 - cos(a, b) w.r.t. a, given unit rows and
    the chain factor dloss/dD."""
    return dloss_dD[:, None] * -(bh - cos[:, None] * ah) / norms_a[:, None]


# -- batch containers ----------------------------------------------------------


@dataclass
class LabeledPairBatch:
    """Rows of paired embeddings with similar/dissimilar flags and a margin."""

    left: np.ndarray
    right: np.ndarray
    labels: np.ndarray  # 1 = similar, 0 = dissimilar
    margin: float

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64).ravel()
        if self.left.shape != self.right.shape or self.left.ndim != 2:
            raise DimensionError(
                f"pair batch sides differ: {self.left.shape} vs {self.right.shape}"
            )
        if self.labels.shape[0] != self.left.shape[0]:
            raise DimensionError("one label per pair required")
        if not np.all((self.labels == 0.0) | (self.labels == 1.0)):
            raise ConfigError("pair labels must be 0 or 1")
        if not self.margin > 0:
            raise ConfigError(f"margin must be positive (got {self.margin})")


@dataclass
class ViewBatch:
    """2N rows of embeddings; rows 2k and 2k+1 are two views of sample k."""

    views: np.ndarray
    temperature: float

    def __post_init__(self):
        self.views = np.asarray(self.views, dtype=np.float64)
        if self.views.ndim != 2 or self.views.shape[0] % 2 != 0:
            raise DimensionError(
                f"view batch needs an even number of rows (got {self.views.shape})"
            )
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive (got {self.temperature})")


@dataclass
class PreferenceBatch:
    """Paired anomalous embeddings compared by distance from a reference.

    ``labels[k] = 1`` means ``first[k]`` is the more severe member and should
    sit farther from the reference than ``second[k]``.
    """

    first: np.ndarray
    second: np.ndarray
    reference: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.first = np.asarray(self.first, dtype=np.float64)
        self.second = np.asarray(self.second, dtype=np.float64)
        self.reference = np.asarray(self.reference, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels, dtype=np.float64).ravel()
        if self.first.shape != self.second.shape or self.first.ndim != 2:
            raise DimensionError(
                f"preference sides differ: {self.first.shape} vs {self.second.shape}"
            )
        if self.labels.shape[0] != self.first.shape[0]:
            raise DimensionError("one label per preference pair required")
        if self.reference.shape[0] != self.first.shape[1]:
            raise DimensionError("reference dimension does not match embeddings")
        if not np.all((self.labels == 0.0) | (self.labels == 1.0)):
            raise ConfigError("preference labels must be 0 or 1")
        if float(np.linalg.norm(self.reference)) == 0.0:
            raise DegenerateInputError("reference vector has zero norm")


@dataclass
class CombinedWeight:
    """Convex mixing weight between the view-contrast and preference terms."""

    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1] (got {self.alpha})")


# -- results -------------------------------------------------------------------


@dataclass
class MarginLossResult:
    value: float
    grad_left: np.ndarray
    grad_right: np.ndarray


@dataclass
class NtXentResult:
    value: float
    grad_views: np.ndarray


@dataclass
class PreferenceResult:
    value: float
    grad_first: np.ndarray
    grad_second: np.ndarray
    grad_reference: np.ndarray


@dataclass
class CombinedResult:
    value: float
    grad_views: np.ndarray
    grad_first: np.ndarray
    grad_second: np.ndarray
    grad_reference: np.ndarray


# -- losses ----------------------------------------------------------------------


def margin_contrastive_loss(batch: LabeledPairBatch) -> MarginLossResult:
    """Pull similar pairs to zero cosine distance, push dissimilar pairs
    beyond the margin.

    value = (1/2N) * sum_i [ y_i D_i^2 + (1 - y_i) max(0, m - D_i)^2 ]

    Dissimilar pairs already beyond the margin get exactly zero gradient.
    """
    lh, ln = _normalized_rows(batch.left, "left")
    rh, rn = _normalized_rows(batch.right, "right")
    cos = np.sum(lh * rh, axis=1)
    dist = 1.0 - cos
    slack = np.maximum(0.0, batch.margin - dist)
    n = batch.left.shape[0]
    y = batch.labels
    value = float(np.sum(y * dist**2 + (1.0 - y) * slack**2) / (2.0 * n))
    dloss_ddist = (2.0 * y * dist - 2.0 * (1.0 - y) * slack) / (2.0 * n)
    grad_left = _cosine_pair_grads(lh, rh, cos, ln, dloss_ddist)
    grad_right = _cosine_pair_grads(rh, lh, cos, rn, dloss_ddist)
    return MarginLossResult(value, grad_left, grad_right)


def nt_xent_loss(batch: ViewBatch) -> NtXentResult:
    """Temperature-scaled cross-entropy over all 2N anchors.

    Each anchor's positive is its paired view; the denominator runs over the
    2N-1 other rows; similarities are cosine. The mean is over anchors, so a
    single pair (2 rows) gives exactly zero loss.
    """
    zh, norms = _normalized_rows(batch.views, "view")
    m = zh.shape[0]
    tau = batch.temperature
    logits = (zh @ zh.T) / tau
    off = logits.copy()
    np.fill_diagonal(off, -np.inf)
    row_max = off.max(axis=1)
    exps = np.exp(off - row_max[:, None])
    lse = row_max + np.log(exps.sum(axis=1))
    pos = np.arange(m) ^ 1  # rows 2k and 2k+1 are partners
    value = float(np.mean(lse - logits[np.arange(m), pos]))

    probs = exps / exps.sum(axis=1, keepdims=True)  # zero on the diagonal
    grad_logits = probs
    grad_logits[np.arange(m), pos] -= 1.0
    grad_logits /= m * tau
    dzh = (grad_logits + grad_logits.T) @ zh
    grad = (dzh - np.sum(dzh * zh, axis=1, keepdims=True) * zh) / norms[:, None]
    return NtXentResult(value, grad)


def preference_loss(batch: PreferenceBatch) -> PreferenceResult:
    """Binary cross-entropy on sigmoid(d(first, ref) - d(second, ref)).

    Minimizing with label 1 pushes ``first`` farther from the reference than
    ``second``. Probabilities are clamped to [1e-12, 1 - 1e-12] before the
    log so saturated pairs cannot produce infinities.
    """
    fh, fn = _normalized_rows(batch.first, "first")
    sh, sn = _normalized_rows(batch.second, "second")
    ref = batch.reference
    rn = float(np.linalg.norm(ref))
    rh = ref / rn
    cos_f = fh @ rh
    cos_s = sh @ rh
    delta = (1.0 - cos_f) - (1.0 - cos_s)
    p = sigmoid(delta)
    pc = np.clip(p, _CLAMP, 1.0 - _CLAMP)
    y = batch.labels
    value = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))))

    n = y.shape[0]
    ddelta = (p - y) / n
    grad_first = _cosine_pair_grads(fh, np.broadcast_to(rh, fh.shape), cos_f, fn, ddelta)
    grad_second = _cosine_pair_grads(
        sh, np.broadcast_to(rh, sh.shape), cos_s, sn, -ddelta
    )
    # reference accumulates from both distance terms
    dref_f = -(fh - cos_f[:, None] * rh) * ddelta[:, None]
    dref_s = -(sh - cos_s[:, None] * rh) * -ddelta[:, None]
    grad_reference = (dref_f + dref_s).sum(axis=0) / rn
    return PreferenceResult(value, grad_first, grad_second, grad_reference)


def combined_loss(
    nt: NtXentResult, pro: PreferenceResult, weight: CombinedWeight
) -> CombinedResult:
    """alpha-convex combination; endpoints reduce exactly to one component
    and zero the other component's gradients."""
    a = weight.alpha
    return CombinedResult(
        value=a * nt.value + (1.0 - a) * pro.value,
        grad_views=a * nt.grad_views,
        grad_first=(1.0 - a) * pro.grad_first,
        grad_second=(1.0 - a) * pro.grad_second,
        grad_reference=(1.0 - a) * pro.grad_reference,
    )
