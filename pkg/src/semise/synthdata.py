"""Synthetic ordinal-severity image benchmark.

Each sample is a single-channel image of a textured background; anomalous
samples (severity 1..K-1) additionally carry one soft-edged lesion blob whose
radius and contrast grow monotonically with severity, with an exact binary
ground-truth mask. The background varies strongly between samples so that an
untrained encoder cannot rank severity from trivial intensity statistics.

Also provides the stochastic augmentation used for view contrast, the
preference-pair sampler, and the bit-exact dataset file format (SEVD).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError, FormatError
from .ndcore import Rng, mix_key

MAGIC = b"SEVD"
VERSION = 1

# background texture: keep variance comparable to the lesion signal
_BG_BASE = 0.45
_BG_LOWFREQ = 0.18
_BG_FINE = 0.03
_EDGE = 1.5  # soft-edge width of the lesion falloff, in pixels


@dataclass
class SampleRecord:
    """One image with its ordinal severity and ground-truth lesion mask."""

    id: int
    severity: int
    image: np.ndarray  # [1, H, W] float64 in [0, 1] (values on the float32 grid)
    mask: np.ndarray  # [H, W] uint8, 1 inside the lesion

    @property
    def anomalous(self) -> bool:
        return self.severity > 0


@dataclass
class PreferencePair:
    """Two anomalous sample ids; label 1 means the first is more severe."""

    first_id: int
    second_id: int
    label: int


@dataclass
class AugmentSpec:
    """Stochastic view augmentation: horizontal flip, crop-and-resize,
    brightness jitter and additive Gaussian noise, clamped back to [0, 1].

    Deterministic given (seed, sample id, draw index): every view draws from
    its own derived random stream.
    """

    flip_prob: float = 0.5
    scale_min: float = 0.8
    scale_max: float = 1.0
    noise_sigma: float = 0.02
    brightness: float = 0.1
    seed: int = 0


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize; identity when sizes match."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _background(rng: Rng, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(4, 4))
    low = _bilinear_resize(coarse, h, w)
    fine = rng.uniform(-1.0, 1.0, size=(h, w))
    return _BG_BASE + _BG_LOWFREQ * low + _BG_FINE * fine


def lesion_radius(severity: int, n_classes: int, h: int, w: int) -> float:
    return (severity / n_classes) * min(h, w) / 3.0


def lesion_contrast(severity: int, n_classes: int) -> float:
    return 0.3 + 0.5 * severity / (n_classes - 1)


def _quantize(img: np.ndarray) -> np.ndarray:
    # dataset files store float32; keeping in-memory values on the float32
    # grid makes the write/read round trip exact field-for-field
    return img.astype(np.float32).astype(np.float64)


def generate_dataset(
    n_per_class: int, n_classes: int, height: int, width: int, seed: int
) -> list[SampleRecord]:
    """Exactly ``n_per_class`` records per severity 0..n_classes-1.

    Severity-0 records are lesion-free with an all-zero mask; higher
    severities carry one blob of strictly increasing radius and contrast at a
    random position.
    """
    if n_classes < 2:
        raise ConfigError(f"need at least 2 severity classes, got {n_classes}")
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be positive, got {n_per_class}")
    if height % 8 or width % 8 or height < 16 or width < 16:
        raise ConfigError(
            f"image size must be >= 16 and divisible by 8, got {height}x{width}"
        )
    records = []
    next_id = 0
    for severity in range(n_classes):
        for k in range(n_per_class):
            rng = Rng(mix_key(seed, "sample", severity, k))
            img = _background(rng, height, width)
            mask = np.zeros((height, width), dtype=np.uint8)
            if severity > 0:
                r = lesion_radius(severity, n_classes, height, width)
                c = lesion_contrast(severity, n_classes)
                margin = int(np.ceil(r)) + 1
                cy = rng.integers(margin, height - margin)
                cx = rng.integers(margin, width - margin)
                yy, xx = np.mgrid[0:height, 0:width]
                dist = np.hypot(yy - cy, xx - cx)
                falloff = np.clip((r - dist) / _EDGE, 0.0, 1.0)
                img = img + c * falloff
                mask[falloff > 0] = 1
            img = _quantize(np.clip(img, 0.0, 1.0))
            records.append(
                SampleRecord(
                    id=next_id,
                    severity=severity,
                    image=img[None, :, :],
                    mask=mask,
                )
            )
            next_id += 1
    return records


def augment(spec: AugmentSpec, record: SampleRecord, draw: int) -> np.ndarray:
    """One stochastic view of a sample's image, shape [1, H, W].

    The random stream is keyed by (spec.seed, record.id, draw), so replaying
    the same triple yields a bit-identical view and distinct draws give
    distinct views.
    """
    rng = Rng(mix_key(spec.seed, "augment", record.id, draw))
    img = record.image[0]
    h, w = img.shape
    if rng.uniform() < spec.flip_prob:
        img = img[:, ::-1]
    scale = rng.uniform(spec.scale_min, spec.scale_max)
    ch = max(2, int(round(scale * h)))
    cw = max(2, int(round(scale * w)))
    oy = rng.integers(0, h - ch + 1)
    ox = rng.integers(0, w - cw + 1)
    view = _bilinear_resize(np.ascontiguousarray(img[oy : oy + ch, ox : ox + cw]), h, w)
    if spec.brightness > 0:
        view = view + rng.uniform(-spec.brightness, spec.brightness)
    if spec.noise_sigma > 0:
        view = view + rng.normal(0.0, spec.noise_sigma, size=view.shape)
    return np.clip(view, 0.0, 1.0)[None, :, :]


def sample_pairs(records, count: int, seed: int) -> list[PreferencePair]:
    """Uniform preference pairs over anomalous records with unequal severity.

    Each pair is drawn uniformly over unordered valid pairs and oriented at
    random (so labels are balanced); the label is 1 when the first member is
    the more severe one.
    """
    anomalous = [r for r in records if r.severity > 0]
    if len({r.severity for r in anomalous}) < 2:
        raise DataError("preference pairs need at least two distinct anomalous severities")
    rng = Rng(mix_key(seed, "pairs"))
    n = len(anomalous)
    pairs = []
    while len(pairs) < count:
        take = count - len(pairs)
        idx_a = rng.integers(0, n, size=take + 8)
        idx_b = rng.integers(0, n, size=take + 8)
        for a, b in zip(idx_a, idx_b):
            if len(pairs) == count:
                break
            ra, rb = anomalous[a], anomalous[b]
            if ra.severity == rb.severity:
                continue
            pairs.append(
                PreferencePair(ra.id, rb.id, int(ra.severity > rb.severity))
            )
    return pairs


def stratified_split(records, f_train: float, f_val: float, f_test: float, seed: int):
    """Deterministic per-class split into (train, val, test) lists."""
    if abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ConfigError("split fractions must sum to 1")
    by_class: dict[int, list] = {}
    for r in records:
        by_class.setdefault(r.severity, []).append(r)
    train, val, test = [], [], []
    for severity in sorted(by_class):
        group = by_class[severity]
        rng = Rng(mix_key(seed, "split", severity))
        order = rng.permutation(len(group))
        n = len(group)
        n_tr = int(round(f_train * n))
        n_va = int(round(f_val * n))
        for pos, idx in enumerate(order):
            if pos < n_tr:
                train.append(group[idx])
            elif pos < n_tr + n_va:
                val.append(group[idx])
            else:
                test.append(group[idx])
    return train, val, test


# -- dataset file format ---------------------------------------------------------
#
# little-endian: magic "SEVD", version u32, count u32, K u32, H u32, W u32;
# per record: id u64, severity u8, mask H*W bytes (0/1), image H*W float32.


def serialize_dataset(records) -> bytes:
    if not records:
        raise DataError("refusing to serialize an empty dataset")
    h, w = records[0].mask.shape
    n_classes = max(r.severity for r in records) + 1
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IIIII", VERSION, len(records), n_classes, h, w)
    for r in records:
        if r.mask.shape != (h, w):
            raise DimensionError(
                f"record {r.id} mask shape {r.mask.shape} differs from {h}x{w}"
            )
        out += struct.pack("<QB", r.id, r.severity)
        out += r.mask.astype(np.uint8).tobytes()
        out += r.image[0].astype("<f4").tobytes()
    return bytes(out)


def write_dataset(path, records) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_dataset(records))


def read_dataset(path) -> list[SampleRecord]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"bad dataset magic at offset 0: {blob[:4]!r}")
    if len(blob) < 24:
        raise FormatError(f"truncated dataset header at offset {len(blob)}")
    version, count, n_classes, h, w = struct.unpack_from("<IIIII", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version} at offset 4")
    offset = 24
    rec_size = 8 + 1 + h * w + 4 * h * w
    records = []
    for _ in range(count):
        if offset + rec_size > len(blob):
            raise FormatError(f"truncated record at offset {offset}")
        rid, severity = struct.unpack_from("<QB", blob, offset)
        offset += 9
        mask = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=offset)
        offset += h * w
        img = np.frombuffer(blob, dtype="<f4", count=h * w, offset=offset)
        offset += 4 * h * w
        if severity >= n_classes:
            raise FormatError(f"record {rid}: severity {severity} >= K={n_classes}")
        records.append(
            SampleRecord(
                id=int(rid),
                severity=int(severity),
                image=img.astype(np.float64).reshape(1, h, w),
                mask=mask.reshape(h, w).copy(),
            )
        )
    if offset != len(blob):
        raise FormatError(f"trailing bytes at offset {offset}")
    return records
