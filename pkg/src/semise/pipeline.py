"""Two-phase training orchestration.

Phase 1 separates healthy from anomalous samples with the pairwise margin
loss through the projection head. Phase 2 continues from those weights and
optimizes the alpha-weighted combination of the view-contrast loss (through
the projection head, on augmented views of anomalous samples) and the
preference loss (through the preference head, against the healthy-reference
vector). The reference vector is the normalized mean preference embedding of
the healthy training samples, recomputed at the start of every phase-2 epoch
and treated as a constant within the epoch.

Determinism: every random decision draws from a stream keyed by
(config seed, purpose label, epoch), and parameters plus optimizer velocities
are rounded to the float32 grid at each epoch boundary (matching the
checkpoint payload precision), so saving, reloading and resuming reproduces
the uninterrupted trajectory bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .errors import ConfigError, DataError, DegenerateInputError, FormatError
from .ndcore import Rng, mix_key
from .nets import ConvEncoder, NormalizedHead, SgdMomentum
from .synthdata import AugmentSpec, SampleRecord, augment, stratified_split

CKPT_MAGIC = b"SMSE"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    """All training hyperparameters; text round-trip is exact."""

    alpha: float = 0.5
    tau: float = 0.5
    margin: float = 1.0
    phase1_epochs: int = 20
    phase2_epochs: int = 40
    batch_size: int = 64
    lr_encoder: float = 1e-3
    lr_heads: float = 1e-1
    momentum: float = 0.9
    seed: int = 1
    train_pairs: int = 10000
    eval_pairs: int = 1000
    split_train: float = 0.72
    split_val: float = 0.08
    split_test: float = 0.20
    probe_epochs: int = 30
    decoder_epochs: int = 30

    def validate(self) -> "TrainConfig":
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1] (got {self.alpha})")
        if self.tau <= 0 or self.margin <= 0:
            raise ConfigError("tau and margin must be positive")
        if self.lr_encoder <= 0 or self.lr_heads <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1) (got {self.momentum})")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(
                f"batch_size must be even and >= 2 (got {self.batch_size})"
            )
        for name in ("phase1_epochs", "phase2_epochs", "probe_epochs", "decoder_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.train_pairs < 1 or self.eval_pairs < 1:
            raise ConfigError("pair counts must be positive")
        if abs(self.split_train + self.split_val + self.split_test - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        return self

    def text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name}={getattr(self, f.name)!r}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.text().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in mapping.items():
            if key not in types:
                raise ConfigError(f"unknown config key: {key}")
            try:
                if types[key] in ("int", int):
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs).validate()


@dataclass
class EpochStats:
    """Per-epoch training record (phase is 1 or 2; epoch is 1-based)."""

    phase: int
    epoch: int
    loss_total: float
    loss_ntxent: float | None
    loss_pro: float | None
    grad_norm_projection: float
    grad_norm_preference: float


@dataclass
class ReferenceVector:
    """Unit-norm healthy-reference embedding."""

    vector: np.ndarray
    provenance: str = "mean-of-healthy"


@dataclass
class Checkpoint:
    """Snapshot of everything needed to resume or evaluate a run."""

    config: TrainConfig
    params: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray]
    phase1_done: int
    phase2_done: int
    rng_keys: dict[str, int] = field(default_factory=dict)
    history: list[EpochStats] = field(default_factory=list)  # in-memory only


class ModelBundle:
    """Encoder plus the two normalized heads, as one named-parameter unit."""

    def __init__(self, cfg: TrainConfig):
        init = Rng(mix_key(cfg.seed, "init"))
        self.encoder = ConvEncoder(init.substream("encoder"))
        self.projection = NormalizedHead(init.substream("projection"), "projection")
        self.preference = NormalizedHead(init.substream("preference"), "preference")

    def named_params(self):
        out = dict(self.encoder.named_params())
        out.update(self.projection.named_params())
        out.update(self.preference.named_params())
        return out

    def named_grads(self):
        out = dict(self.encoder.named_grads())
        out.update(self.projection.named_grads())
        out.update(self.preference.named_grads())
        return out

    def zero_grads(self):
        self.encoder.zero_grads()
        self.projection.zero_grads()
        self.preference.zero_grads()

    def load_params(self, params: dict[str, np.ndarray]):
        own = self.named_params()
        if set(own) != set(params):
            missing = sorted(set(own) ^ set(params))
            raise FormatError(f"parameter names do not match model: {missing}")
        for name, arr in own.items():
            if params[name].shape != arr.shape:
                raise FormatError(
                    f"tensor {name}: shape {params[name].shape} != {arr.shape}"
                )
            arr[...] = params[name]
        return self


def _snapshot(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in arrays.items()}


def _quantize_f32(arrays: dict[str, np.ndarray]) -> None:
    # epoch-boundary rounding to the checkpoint payload precision keeps
    # save -> load -> resume bit-identical to the uninterrupted run
    for v in arrays.values():
        v[...] = v.astype("<f4").astype(np.float64)


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def _rng_keys(cfg: TrainConfig) -> dict[str, int]:
    return {
        name: mix_key(cfg.seed, name)
        for name in ("init", "phase1", "phase2-samples", "phase2-pairs", "augment")
    }


def embed_records(encoder, records, head=None, batch: int = 256) -> np.ndarray:
    """Embeddings (optionally through a head) for a list of records."""
    outs = []
    for start in range(0, len(records), batch):
        chunk = records[start : start + batch]
        images = np.stack([r.image for r in chunk])
        emb = encoder.forward(images)
        outs.append(head.forward(emb) if head is not None else emb)
    return np.concatenate(outs, axis=0)


def compute_reference(encoder, preference_head, healthy_records) -> ReferenceVector:
    """Normalized mean preference embedding of the healthy records."""
    if not healthy_records:
        raise DataError("reference computation needs at least one healthy record")
    emb = embed_records(encoder, healthy_records, head=preference_head)
    mean = emb.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        raise DegenerateInputError("healthy preference embeddings average to zero")
    return ReferenceVector(mean / norm)


def _draw_phase1_pairs(stream: Rng, healthy, anomalous, n_pairs: int):
    """Balanced same-flag / cross-flag pairs; falls back to cross pairs when
    a group is a singleton. Labels: 1 iff both members share the flag."""
    lefts, rights, labels = [], [], []
    for _ in range(n_pairs):
        same = stream.uniform() < 0.5
        group = healthy if stream.uniform() < 0.5 else anomalous
        if same and len(group) >= 2:
            i = stream.integers(0, len(group))
            j = stream.integers(0, len(group) - 1)
            if j >= i:
                j += 1
            lefts.append(group[i])
            rights.append(group[j])
            labels.append(1.0)
        else:
            i = stream.integers(0, len(healthy))
            j = stream.integers(0, len(anomalous))
            if stream.uniform() < 0.5:
                lefts.append(healthy[i])
                rights.append(anomalous[j])
            else:
                lefts.append(anomalous[j])
                rights.append(healthy[i])
            labels.append(0.0)
    return lefts, rights, np.array(labels)


def run_phase1(cfg: TrainConfig, records) -> Checkpoint:
    """Healthy/anomaly discrimination: trains encoder + projection head with
    the margin loss over balanced same/different-flag pairs."""
    cfg.validate()
    healthy = [r for r in records if not r.anomalous]
    anomalous = [r for r in records if r.anomalous]
    if not healthy or not anomalous:
        raise DataError(
            "phase 1 needs both healthy and anomalous records "
            f"(got {len(healthy)} healthy, {len(anomalous)} anomalous)"
        )
    models = ModelBundle(cfg)
    opt = SgdMomentum(cfg.momentum)
    opt.add_group(
        models.encoder.named_params(), models.encoder.named_grads(), cfg.lr_encoder
    )
    opt.add_group(
        models.projection.named_params(),
        models.projection.named_grads(),
        cfg.lr_heads,
    )
    n_pairs_per_step = cfg.batch_size // 2
    steps = max(1, len(records) // cfg.batch_size)
    history = []
    for epoch in range(1, cfg.phase1_epochs + 1):
        stream = Rng(mix_key(cfg.seed, "phase1", epoch))
        epoch_loss = 0.0
        epoch_gproj = 0.0
        for _ in range(steps):
            lefts, rights, labels = _draw_phase1_pairs(
                stream, healthy, anomalous, n_pairs_per_step
            )
            images = np.stack([r.image for r in lefts] + [r.image for r in rights])
            emb = models.encoder.forward(images)
            z = models.projection.forward(emb)
            batch = losses.LabeledPairBatch(
                z[:n_pairs_per_step], z[n_pairs_per_step:], labels, cfg.margin
            )
            res = losses.margin_contrastive_loss(batch)
            dz = np.concatenate([res.grad_left, res.grad_right])
            models.encoder.backward(models.projection.backward(dz))
            epoch_loss += res.value
            epoch_gproj += _grad_norm(models.projection.named_grads())
            opt.step()
            models.zero_grads()
        history.append(
            EpochStats(
                phase=1,
                epoch=epoch,
                loss_total=epoch_loss / steps,
                loss_ntxent=None,
                loss_pro=None,
                grad_norm_projection=epoch_gproj / steps,
                grad_norm_preference=0.0,
            )
        )
        _quantize_f32(models.named_params())
        _quantize_f32(opt.velocities)
    return Checkpoint(
        config=cfg,
        params=_snapshot(models.named_params()),
        velocities=_snapshot(opt.velocities),
        phase1_done=cfg.phase1_epochs,
        phase2_done=0,
        rng_keys=_rng_keys(cfg),
        history=history,
    )


def run_phase2(cfg: TrainConfig, ckpt: Checkpoint, records, pairs) -> Checkpoint:
    """Combined view-contrast + preference optimization on the anomalous
    records, continuing from the phase-1 weights.

    ``records`` is the training split; healthy members only feed the
    reference vector. Resumes from ``ckpt.phase2_done`` when nonzero.
    """
    cfg.validate()
    healthy = [r for r in records if not r.anomalous]
    anomalous = [r for r in records if r.anomalous]
    if not healthy:
        raise DataError("phase 2 needs healthy records for the reference vector")
    if not anomalous:
        raise DataError("phase 2 needs anomalous records")
    by_id = {r.id: r for r in records}
    for p in pairs:
        if p.first_id not in by_id or p.second_id not in by_id:
            raise DataError(
                f"preference pair ({p.first_id}, {p.second_id}) references "
                "ids missing from the record set"
            )

    models = ModelBundle(cfg).load_params(ckpt.params)
    opt = SgdMomentum(cfg.momentum)
    opt.add_group(
        models.encoder.named_params(), models.encoder.named_grads(), cfg.lr_encoder
    )
    head_params = dict(models.projection.named_params())
    head_params.update(models.preference.named_params())
    head_grads = dict(models.projection.named_grads())
    head_grads.update(models.preference.named_grads())
    opt.add_group(head_params, head_grads, cfg.lr_heads)
    if ckpt.phase2_done > 0:
        # mid-phase resume: restore momentum state
        for name, v in opt.velocities.items():
            v[...] = ckpt.velocities[name]

    weight = losses.CombinedWeight(cfg.alpha)
    aug = AugmentSpec(seed=mix_key(cfg.seed, "augment"))
    samples_per_step = min(cfg.batch_size // 2, len(anomalous))
    # a full batch_size of preference pairs per step: halving it leaves the
    # preference gradients noisy enough to knock the head into its
    # equal-distances attractor mid-run
    pairs_per_step = cfg.batch_size
    steps = max(1, len(anomalous) // samples_per_step)
    history = list(ckpt.history)

    for epoch in range(ckpt.phase2_done + 1, cfg.phase2_epochs + 1):
        reference = compute_reference(models.encoder, models.preference, healthy)
        order = Rng(mix_key(cfg.seed, "phase2-samples", epoch)).permutation(
            len(anomalous)
        )
        pair_order = Rng(mix_key(cfg.seed, "phase2-pairs", epoch)).permutation(
            len(pairs)
        )
        sums = {"total": 0.0, "nt": 0.0, "pro": 0.0, "gproj": 0.0, "gpref": 0.0}
        for step in range(steps):
            chosen = order[step * samples_per_step : (step + 1) * samples_per_step]
            views = []
            for idx in chosen:
                rec = anomalous[idx]
                views.append(augment(aug, rec, 2 * (epoch - 1)))
                views.append(augment(aug, rec, 2 * (epoch - 1) + 1))
            view_images = np.stack(views)

            emb_v = models.encoder.forward(view_images)
            z = models.projection.forward(emb_v)
            nt = losses.nt_xent_loss(losses.ViewBatch(z, cfg.tau))

            pair_idx = [
                pairs[pair_order[(step * pairs_per_step + k) % len(pairs)]]
                for k in range(pairs_per_step)
            ]
            first_imgs = np.stack([by_id[p.first_id].image for p in pair_idx])
            second_imgs = np.stack([by_id[p.second_id].image for p in pair_idx])
            labels = np.array([p.label for p in pair_idx], dtype=np.float64)

            # each encoder pass runs back to back with its backward so layer
            # caches stay consistent; gradients accumulate across both paths
            dz_views = weight.alpha * nt.grad_views
            models.encoder.backward(models.projection.backward(dz_views))

            # preference path
            pair_images = np.concatenate([first_imgs, second_imgs])
            emb_p = models.encoder.forward(pair_images)
            nu = models.preference.forward(emb_p)
            pro = losses.preference_loss(
                losses.PreferenceBatch(
                    nu[:pairs_per_step],
                    nu[pairs_per_step:],
                    reference.vector,
                    labels,
                )
            )
            combined = losses.combined_loss(nt, pro, weight)
            dnu = np.concatenate([combined.grad_first, combined.grad_second])
            models.encoder.backward(models.preference.backward(dnu))

            sums["total"] += combined.value
            sums["nt"] += nt.value
            sums["pro"] += pro.value
            sums["gproj"] += _grad_norm(models.projection.named_grads())
            sums["gpref"] += _grad_norm(models.preference.named_grads())
            opt.step()
            models.zero_grads()
        history.append(
            EpochStats(
                phase=2,
                epoch=epoch,
                loss_total=sums["total"] / steps,
                loss_ntxent=sums["nt"] / steps,
                loss_pro=sums["pro"] / steps,
                grad_norm_projection=sums["gproj"] / steps,
                grad_norm_preference=sums["gpref"] / steps,
            )
        )
        _quantize_f32(models.named_params())
        _quantize_f32(opt.velocities)
    return Checkpoint(
        config=cfg,
        params=_snapshot(models.named_params()),
        velocities=_snapshot(opt.velocities),
        phase1_done=ckpt.phase1_done,
        phase2_done=cfg.phase2_epochs,
        rng_keys=_rng_keys(cfg),
        history=history,
    )


def train_full(cfg: TrainConfig, records) -> Checkpoint:
    """Split, run both phases, and return the final checkpoint.

    Preference pairs are sampled from the anomalous training split with a
    seed derived from the config seed.
    """
    from .synthdata import sample_pairs

    train, _, _ = stratified_split(
        records, cfg.split_train, cfg.split_val, cfg.split_test, cfg.seed
    )
    ckpt = run_phase1(cfg, train)
    pairs = sample_pairs(train, cfg.train_pairs, mix_key(cfg.seed, "train"))
    return run_phase2(cfg, ckpt, train, pairs)


# -- checkpoint file format ------------------------------------------------------
#
# little-endian: magic "SMSE", version u32, config text (u32 byte length +
# UTF-8 key=value lines), tensor count u32; per tensor: name (u16 length +
# bytes), rank u8, dims u32 each, float32 payload.


def _config_block(ckpt: Checkpoint) -> str:
    lines = [f"cfg.{line}" for line in ckpt.config.text().splitlines()]
    lines.append(f"state.phase1_done={ckpt.phase1_done}")
    lines.append(f"state.phase2_done={ckpt.phase2_done}")
    for name in sorted(ckpt.rng_keys):
        lines.append(f"rng.{name}={ckpt.rng_keys[name]}")
    return "\n".join(lines) + "\n"


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    text = _config_block(ckpt).encode("utf-8")
    tensors = [(name, arr) for name, arr in ckpt.params.items()]
    tensors += [(f"velocity.{n}", arr) for n, arr in ckpt.velocities.items()]
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<I", CKPT_VERSION)
    out += struct.pack("<I", len(text))
    out += text
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<I", dim)
        out += arr.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic at offset 0: {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (text_len,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    text = blob[offset : offset + text_len].decode("utf-8")
    offset += text_len
    (n_tensors,) = struct.unpack_from("<I", blob, offset)
    offset += 4

    cfg_map, state, rng_keys = {}, {}, {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key.startswith("cfg."):
            cfg_map[key[4:]] = value
        elif key.startswith("state."):
            state[key[6:]] = int(value)
        elif key.startswith("rng."):
            rng_keys[key[4:]] = int(value)
        else:
            raise FormatError(f"unknown checkpoint config key: {key}")
    cfg = TrainConfig.from_mapping(cfg_map)

    params: dict[str, np.ndarray] = {}
    velocities: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        if offset + 2 > len(blob):
            raise FormatError(f"truncated tensor table at offset {offset}")
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        payload = 4 * count
        if offset + payload > len(blob):
            raise FormatError(
                f"tensor {name}: payload truncated "
                f"(needs {payload} bytes at offset {offset})"
            )
        arr = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            .astype(np.float64)
            .reshape(dims)
        )
        offset += payload
        if name.startswith("velocity."):
            velocities[name[len("velocity.") :]] = arr
        else:
            params[name] = arr
    if offset != len(blob):
        raise FormatError(f"trailing bytes at offset {offset}")
    return Checkpoint(
        config=cfg,
        params=params,
        velocities=velocities,
        phase1_done=state.get("phase1_done", 0),
        phase2_done=state.get("phase2_done", 0),
        rng_keys=rng_keys,
    )
