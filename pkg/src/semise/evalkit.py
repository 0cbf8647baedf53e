"""Downstream evaluation: classifier and segmentation probes over a frozen
encoder, ordinal/overlap/ordering metrics, report emission, and the
alpha sweep.

Metric conventions (documented because the upstream definitions leave them
open): precision/recall use 0/0 = 0; F1 and recall are macro-averaged over
all classes, classes that never occur contributing 0; the severity error is
the mean absolute difference of ordinal indices; IoU/DICE of two empty masks
is 1.0 (correctly predicting "no lesion" scores full marks).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import ContractError, DataError, DimensionError, UndefinedMetricError
from .ndcore import Rng, mix_key
from .nets import ClassifierProbe, SegDecoder, cross_entropy_grad, pixel_bce_grad, segment
from .nets import SgdMomentum
from .pipeline import (
    Checkpoint,
    ModelBundle,
    TrainConfig,
    compute_reference,
    embed_records,
    train_full,
)
from .synthdata import serialize_dataset, stratified_split

CSV_COLUMNS = (
    "config_hash",
    "alpha",
    "f1_macro",
    "recall_macro",
    "maee",
    "iou",
    "dice",
    "spearman",
)

SWEEP_COLUMNS = ("alpha", "f1_macro", "maee", "recall_macro", "config_hash")


# -- basic metrics ---------------------------------------------------------------


class ConfusionTally:
    """K x K count matrix; entry (t, p) counts true class t predicted as p."""

    def __init__(self, n_classes: int):
        self.matrix = np.zeros((n_classes, n_classes), dtype=np.int64)

    @classmethod
    def from_labels(cls, true_levels, predicted_levels, n_classes: int):
        true_levels = np.asarray(true_levels, dtype=np.int64)
        predicted_levels = np.asarray(predicted_levels, dtype=np.int64)
        if true_levels.shape != predicted_levels.shape:
            raise DimensionError("label vectors differ in length")
        tally = cls(n_classes)
        for t, p in zip(true_levels, predicted_levels):
            tally.matrix[t, p] += 1
        return tally

    @property
    def total(self) -> int:
        return int(self.matrix.sum())


def f1_recall_macro(tally: ConfusionTally) -> tuple[float, float]:
    """Macro-averaged F1 and recall with the 0/0 = 0 convention."""
    if tally.total == 0:
        raise DataError("empty confusion tally")
    m = tally.matrix
    k = m.shape[0]
    f1s, recalls = [], []
    for c in range(k):
        tp = float(m[c, c])
        support = float(m[c, :].sum())
        predicted = float(m[:, c].sum())
        recall = tp / support if support > 0 else 0.0
        precision = tp / predicted if predicted > 0 else 0.0
        f1 = (
            2.0 * precision * recall / (precision + recall)
            if precision + recall > 0
            else 0.0
        )
        f1s.append(f1)
        recalls.append(recall)
    return float(np.mean(f1s)), float(np.mean(recalls))


def maee(true_levels, predicted_levels) -> float:
    """Mean absolute error between ordinal severity indices."""
    t = np.asarray(true_levels, dtype=np.float64)
    p = np.asarray(predicted_levels, dtype=np.float64)
    if t.shape != p.shape:
        raise DimensionError(f"length mismatch: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise DataError("no samples to score")
    return float(np.mean(np.abs(t - p)))


def iou_dice(pred_mask, true_mask) -> tuple[float, float]:
    """Region overlap of two binary masks; two empty masks score (1, 1)."""
    a = np.asarray(pred_mask)
    b = np.asarray(true_mask)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not np.all((a == 0) | (a == 1)) or not np.all((b == 0) | (b == 1)):
        raise DataError("masks must be binary (0/1)")
    inter = float(np.sum((a == 1) & (b == 1)))
    union = float(np.sum((a == 1) | (b == 1)))
    if union == 0.0:
        return 1.0, 1.0
    total = float(a.sum() + b.sum())
    return inter / union, 2.0 * inter / total


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0], dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    n = values.shape[0]
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError("spearman needs two equal-length vectors")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    sx = rx - rx.mean()
    sy = ry - ry.mean()
    denom = np.sqrt(float(sx @ sx) * float(sy @ sy))
    if denom == 0.0:
        raise UndefinedMetricError("rank correlation undefined for constant input")
    return float((sx @ sy) / denom)


def distances_to_reference(embeddings: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Cosine distance of each embedding row from the reference vector."""
    emb = np.asarray(embeddings, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64).ravel()
    norms = np.linalg.norm(emb, axis=1)
    rnorm = float(np.linalg.norm(ref))
    if rnorm == 0.0 or np.any(norms == 0.0):
        raise UndefinedMetricError("zero-norm embedding in distance computation")
    return 1.0 - (emb @ ref) / (norms * rnorm)


def ordering_diagnostic(embeddings, severities, reference) -> float:
    """Rank correlation between severity and distance from the reference."""
    severities = np.asarray(severities, dtype=np.int64)
    if severities.size < 3 or np.unique(severities).size < 2:
        raise DataError(
            "ordering diagnostic needs >= 3 samples with >= 2 distinct severities"
        )
    d = distances_to_reference(embeddings, reference)
    return spearman(severities.astype(np.float64), d)


# -- reports ---------------------------------------------------------------------


def dataset_digest(records) -> str:
    return hashlib.sha256(serialize_dataset(records)).hexdigest()[:16]


_METRIC_RANGES = {
    "f1_macro": (0.0, 1.0),
    "recall_macro": (0.0, 1.0),
    "iou": (0.0, 1.0),
    "dice": (0.0, 1.0),
    "spearman": (-1.0, 1.0),
    "maee": (0.0, float("inf")),
}


@dataclass
class MetricsReport:
    """Named scalar metrics plus enough metadata to reproduce the run."""

    task: str
    metrics: dict[str, float]
    config_hash: str
    config_text: str
    dataset_digest: str
    timestamp: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat()
    )

    def __post_init__(self):
        for name, value in self.metrics.items():
            lo, hi = _METRIC_RANGES.get(name, (-np.inf, np.inf))
            if not (lo <= value <= hi) or not np.isfinite(value):
                raise DataError(f"metric {name}={value} outside [{lo}, {hi}]")


def _fmt(x) -> str:
    return repr(float(x))


def metrics_csv(report: MetricsReport, alpha: float) -> str:
    """One header + one row; the column order is the documented contract."""
    row = {"config_hash": report.config_hash, "alpha": _fmt(alpha)}
    for col in CSV_COLUMNS[2:]:
        row[col] = _fmt(report.metrics[col]) if col in report.metrics else ""
    return (
        ",".join(CSV_COLUMNS)
        + "\n"
        + ",".join(row[c] for c in CSV_COLUMNS)
        + "\n"
    )


def report_json(report: MetricsReport) -> str:
    payload = dataclasses.asdict(report)
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def sweep_csv(rows: list[dict]) -> str:
    """Alpha-sweep table, sorted by alpha ascending."""
    out = [",".join(SWEEP_COLUMNS)]
    for row in sorted(rows, key=lambda r: r["alpha"]):
        cells = []
        for col in SWEEP_COLUMNS:
            v = row[col]
            cells.append(v if isinstance(v, str) else _fmt(v))
        out.append(",".join(cells))
    return "\n".join(out) + "\n"


# -- probe training and evaluation -------------------------------------------------


def _require_frozen(encoder):
    if not encoder.frozen:
        raise ContractError("downstream probes require a frozen encoder")


def _n_classes(records) -> int:
    return max(r.severity for r in records) + 1


@dataclass
class EmbeddingScaler:
    """Per-dimension standardization fitted on the training split.

    Raw embeddings have tiny, offset-dominated scales that leave the probe's
    optimization hopelessly ill-conditioned at its fixed learning rate, so
    probe inputs are z-scored like any frozen-feature evaluation protocol.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, emb: np.ndarray) -> "EmbeddingScaler":
        std = emb.std(axis=0)
        return cls(emb.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, emb: np.ndarray) -> np.ndarray:
        return (emb - self.mean) / self.std


def train_classifier_probe(
    encoder, train_records, cfg: TrainConfig
) -> tuple[ClassifierProbe, EmbeddingScaler]:
    """Fit the dropout MLP on frozen standardized embeddings with
    cross-entropy; returns the probe and the fitted scaler."""
    _require_frozen(encoder)
    raw = embed_records(encoder, train_records)
    scaler = EmbeddingScaler.fit(raw)
    emb = scaler.apply(raw)
    labels = np.array([r.severity for r in train_records], dtype=np.int64)
    probe = ClassifierProbe(_n_classes(train_records), Rng(mix_key(cfg.seed, "probe-init")))
    opt = SgdMomentum(cfg.momentum)
    opt.add_group(probe.named_params(), probe.named_grads(), cfg.lr_heads)
    n = len(train_records)
    for epoch in range(1, cfg.probe_epochs + 1):
        order = Rng(mix_key(cfg.seed, "probe-order", epoch)).permutation(n)
        drop_rng = Rng(mix_key(cfg.seed, "probe-dropout", epoch))
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            probs = probe.forward(emb[idx], train=True, rng=drop_rng)
            _, dlogits = cross_entropy_grad(probs, labels[idx])
            probe.backward_from_logits(dlogits)
            opt.step()
            probe.zero_grads()
    return probe, scaler


def classification_metrics(
    encoder, probe: ClassifierProbe, scaler: EmbeddingScaler, records
) -> dict[str, float]:
    _require_frozen(encoder)
    emb = scaler.apply(embed_records(encoder, records))
    probs = probe.forward(emb, train=False)
    predicted = probs.argmax(axis=1)
    true = np.array([r.severity for r in records], dtype=np.int64)
    tally = ConfusionTally.from_labels(true, predicted, probe.n_classes)
    f1, recall = f1_recall_macro(tally)
    return {"f1_macro": f1, "recall_macro": recall, "maee": maee(true, predicted)}


def train_seg_decoder(encoder, train_records, cfg: TrainConfig) -> SegDecoder:
    """Fit the mask decoder with per-pixel BCE; the encoder stays frozen."""
    _require_frozen(encoder)
    decoder = SegDecoder(Rng(mix_key(cfg.seed, "decoder-init")))
    opt = SgdMomentum(cfg.momentum)
    opt.add_group(decoder.named_params(), decoder.named_grads(), cfg.lr_heads)
    n = len(train_records)
    for epoch in range(1, cfg.decoder_epochs + 1):
        order = Rng(mix_key(cfg.seed, "decoder-order", epoch)).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            chunk = [train_records[i] for i in idx]
            images = np.stack([r.image for r in chunk])
            masks = np.stack([r.mask for r in chunk]).astype(np.float64)[:, None]
            _, stages = encoder.forward(images, keep_stages=True)
            probs = decoder.forward(stages)
            _, dlogits = pixel_bce_grad(probs, masks)
            decoder.backward(dlogits)
            opt.step()
            decoder.zero_grads()
    return decoder


def segmentation_metrics(
    encoder, decoder, records, threshold: float = 0.5
) -> dict[str, float]:
    """Mean per-image IoU and DICE of thresholded mask predictions."""
    _require_frozen(encoder)
    ious, dices = [], []
    for start in range(0, len(records), 64):
        chunk = records[start : start + 64]
        images = np.stack([r.image for r in chunk])
        probs = segment(encoder, decoder, images)
        pred = (probs[:, 0] >= threshold).astype(np.uint8)
        for k, r in enumerate(chunk):
            i, d = iou_dice(pred[k], r.mask)
            ious.append(i)
            dices.append(d)
    return {"iou": float(np.mean(ious)), "dice": float(np.mean(dices))}


# -- checkpoint-level evaluation entry points ---------------------------------------


def _models_from(ckpt: Checkpoint) -> ModelBundle:
    models = ModelBundle(ckpt.config).load_params(ckpt.params)
    models.encoder.freeze()
    return models


def _splits(ckpt: Checkpoint, records):
    cfg = ckpt.config
    return stratified_split(
        records, cfg.split_train, cfg.split_val, cfg.split_test, cfg.seed
    )


def classification_report(ckpt: Checkpoint, records) -> MetricsReport:
    """Train the classifier probe on the train split, score the test split."""
    models = _models_from(ckpt)
    train, _, test = _splits(ckpt, records)
    probe, scaler = train_classifier_probe(models.encoder, train, ckpt.config)
    metrics = classification_metrics(models.encoder, probe, scaler, test)
    return MetricsReport(
        task="classify",
        metrics=metrics,
        config_hash=ckpt.config.hash(),
        config_text=ckpt.config.text(),
        dataset_digest=dataset_digest(records),
    )


def segmentation_report(ckpt: Checkpoint, records) -> MetricsReport:
    """Train the decoder on the train split, score held-out lesions."""
    models = _models_from(ckpt)
    train, _, test = _splits(ckpt, records)
    decoder = train_seg_decoder(models.encoder, train, ckpt.config)
    lesions = [r for r in test if r.anomalous]
    metrics = segmentation_metrics(models.encoder, decoder, lesions)
    return MetricsReport(
        task="segment",
        metrics=metrics,
        config_hash=ckpt.config.hash(),
        config_text=ckpt.config.text(),
        dataset_digest=dataset_digest(records),
    )


def ordering_report(ckpt: Checkpoint, records) -> MetricsReport:
    """Severity-vs-distance rank correlation on held-out anomalies."""
    models = _models_from(ckpt)
    train, _, test = _splits(ckpt, records)
    healthy_train = [r for r in train if not r.anomalous]
    reference = compute_reference(models.encoder, models.preference, healthy_train)
    anomalies = [r for r in test if r.anomalous]
    emb = embed_records(models.encoder, anomalies, head=models.preference)
    rho = ordering_diagnostic(
        emb, [r.severity for r in anomalies], reference.vector
    )
    return MetricsReport(
        task="ordering",
        metrics={"spearman": rho},
        config_hash=ckpt.config.hash(),
        config_text=ckpt.config.text(),
        dataset_digest=dataset_digest(records),
    )


def alpha_sweep(cfg: TrainConfig, alphas, records) -> list[dict]:
    """Full pipeline + classifier probe per alpha, shared seed.

    The alpha 1.0 row is the contrast-only ablation, alpha 0.0 the
    preference-only ablation. Each row matches a standalone run with the
    same config bit for bit.
    """
    rows = []
    for a in alphas:
        run_cfg = dataclasses.replace(cfg, alpha=float(a)).validate()
        ckpt = train_full(run_cfg, records)
        report = classification_report(ckpt, records)
        rows.append(
            {
                "alpha": float(a),
                "f1_macro": report.metrics["f1_macro"],
                "maee": report.metrics["maee"],
                "recall_macro": report.metrics["recall_macro"],
                "config_hash": run_cfg.hash(),
            }
        )
    return sorted(rows, key=lambda r: r["alpha"])
