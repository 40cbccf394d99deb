"""Training loop and checkpoint persistence.

Epoch ``e`` runs with the discrepancy snapshot taken at the end of epoch
``e - 1`` (the first epoch sees the all-zero vector of two empty trackers).
Trackers keep counting during the epoch; the next snapshot is taken once it
ends and is the one validation and inference use.

Checkpoint layout (all integers little-endian)::

    "D3QE" | u32 version | u32 len | config JSON (UTF-8) | u32 epoch
    u32 tensor count, then per tensor:
        u32 name len | name (UTF-8) | u32 rank | u32 dims[rank] | f32 data
    u32 N | u64 real counts[N] | u64 fake counts[N]
    i32 snapshot epoch | f64 discrepancy[N]
"""

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .detector import (
    DetectorModel,
    ModelConfig,
    SemanticProvider,
    bce_loss,
    frozen_inputs,
    logits_from_tokens,
    score_frozen,
)
from .errors import (
    BadMagicError,
    ConfigError,
    DimensionError,
    FormatError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .evaluation import accuracy_at_threshold, average_precision
from .numerics.optim import adamw_step
from .numerics.rng import stream
from .vq import Codebook, DiscrepancyVector, FrequencyTracker, FrozenEncoder, snapshot_delta_d, update_tracker

MAGIC = b"D3QE"
VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be >= 0")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float = None
    val_ap: float = None


def train_epoch(model: DetectorModel, data, config: TrainConfig, epoch=1, frozen=None):
    """One pass over ``data`` (a SampleSet) in a seeded shuffled order.

    Per batch: add the batch's tokens to the trackers by label, score with
    the model's current snapshot, BCE, backward, AdamW. ``frozen`` holds the
    split's precomputed tokens and semantic features (computed here if None).
    """
    n = len(data)
    if n == 0:
        raise ConfigError("training data is empty")
    if frozen is None:
        frozen = frozen_inputs(data.images, data.ids, model)
    order = stream(config.seed, f"train/shuffle/{epoch}").permutation(n)
    params = model.parameters()
    total_loss = 0.0
    correct = 0
    for s in range(0, n, config.batch_size):
        idx = order[s:s + config.batch_size]
        labels = data.labels[idx].astype(np.int64)
        batch = frozen.take(idx)
        update_tracker(model.real_tracker, batch.quant.indices[labels == 0])
        update_tracker(model.fake_tracker, batch.quant.indices[labels == 1])

        for p in params:
            p.grad = None
        logits = logits_from_tokens(batch.quant, batch.semantic, model)
        loss = bce_loss(logits, labels)
        loss.backward()
        adamw_step(params, config.lr, config.weight_decay)

        total_loss += float(loss.item()) * len(idx)
        correct += int(((logits.data > 0) == (labels == 1)).sum())
    return model, EpochMetrics(epoch, total_loss / n, correct / n)


def evaluate_split(model: DetectorModel, data, frozen=None):
    """``(accuracy, AP)`` of the model on a SampleSet."""
    if frozen is None:
        frozen = frozen_inputs(data.images, data.ids, model)
    logits = score_frozen(frozen, model)
    probs = 1.0 / (1.0 + np.exp(-logits))
    acc = accuracy_at_threshold(probs, data.labels)
    ap = average_precision(probs, data.labels) if np.any(data.labels == 1) else float("nan")
    return acc, ap


@dataclass
class TrainResult:
    model: DetectorModel
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = None

    def to_dict(self):
        return {"best_epoch": self.best_epoch, "best_val_accuracy": self.best_val_accuracy,
                "history": [asdict(m) for m in self.history]}


def run_training(model: DetectorModel, train, val, config: TrainConfig, log=None) -> TrainResult:
    """Train for ``config.epochs`` epochs and return the best-validation model.

    Selection keeps the highest validation accuracy, later epochs winning
    ties; without a validation split the last epoch is kept.
    """
    if len(train) == 0:
        raise ConfigError("training data is empty")
    if len(np.unique(train.labels)) < 2:
        raise ConfigError("training data must contain both real and fake samples")
    model.set_snapshot(snapshot_delta_d(model.real_tracker, model.fake_tracker, model.epoch))
    result = TrainResult(model)
    best_blob = None
    train_frozen = frozen_inputs(train.images, train.ids, model)
    val_frozen = frozen_inputs(val.images, val.ids, model) if val is not None and len(val) else None
    for epoch in range(model.epoch + 1, model.epoch + config.epochs + 1):
        _, metrics = train_epoch(model, train, config, epoch, train_frozen)
        model.epoch = epoch
        model.set_snapshot(snapshot_delta_d(model.real_tracker, model.fake_tracker, epoch))
        if val_frozen is not None:
            metrics.val_accuracy, metrics.val_ap = evaluate_split(model, val, val_frozen)
        result.history.append(metrics)
        if log:
            log(metrics)
        better = (val is None or not len(val) or result.best_val_accuracy is None
                  or metrics.val_accuracy >= result.best_val_accuracy)
        if better:
            best_blob = checkpoint_bytes(model, train_config=config)
            result.best_epoch = epoch
            result.best_val_accuracy = metrics.val_accuracy
    result.model = checkpoint_from_bytes(best_blob, provider=model.provider)
    return result


# ---------------------------------------------------------------------------
# checkpoints

def _frozen_records(model):
    recs = [("frozen.codebook", model.codebook.entries),
            ("frozen.encoder", model.encoder.projection),
            ("frozen.positional", model.d3at.positional)]
    if model.provider.mode == "random":
        recs.append(("frozen.semantic", model.provider.weights))
    return recs


def checkpoint_bytes(model: DetectorModel, train_config: TrainConfig = None) -> bytes:
    cfg = {"model": model.config.to_dict(), "encoder_seed": model.encoder.seed,
           "train": asdict(train_config) if train_config is not None else None}
    cfg_raw = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(cfg_raw)))
    out.write(cfg_raw)
    out.write(struct.pack("<I", model.epoch))
    records = [(name, p.data) for name, p in model.named_parameters()] + _frozen_records(model)
    out.write(struct.pack("<I", len(records)))
    for name, arr in records:
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        out.write(struct.pack("<I", len(raw_name)))
        out.write(raw_name)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    n = model.config.num_codes
    out.write(struct.pack("<I", n))
    out.write(np.ascontiguousarray(model.real_tracker.counts, dtype="<u8").tobytes())
    out.write(np.ascontiguousarray(model.fake_tracker.counts, dtype="<u8").tobytes())
    out.write(struct.pack("<i", model.delta.epoch))
    out.write(np.ascontiguousarray(model.delta.values, dtype="<f8").tobytes())
    return out.getvalue()


def save_checkpoint(model: DetectorModel, path, train_config: TrainConfig = None):
    blob = checkpoint_bytes(model, train_config)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


class _Reader:
    def __init__(self, raw, source):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"{self.source}: file ends inside {what}", self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def checkpoint_from_bytes(raw, provider: SemanticProvider = None, expect=None, source="checkpoint"):
    """Rebuild a DetectorModel from checkpoint bytes.

    ``provider`` overrides the stored semantic provider; a model trained on a
    feature file needs one to score images. ``expect`` maps ModelConfig field names to values the stored
    config must match (``DimensionError`` otherwise).
    """
    r = _Reader(raw, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"{source}: expected magic {MAGIC.decode()!r} (D3QE), found {magic!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: checkpoint format version {version} (supported: {VERSION})", 4)
    (cfg_len,) = r.unpack("<I", "config length")
    cfg_at = r.pos
    try:
        cfg = json.loads(r.take(cfg_len, "config").decode("utf-8"))
        config = ModelConfig(**cfg["model"])
    except (ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"{source}: unreadable config echo: {exc}", cfg_at) from None
    for key, want in (expect or {}).items():
        have = getattr(config, key)
        if have != want:
            raise DimensionError(f"{source}: checkpoint has {key}={have}, expected {want}")
    (epoch,) = r.unpack("<I", "epoch stamp")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<I", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    (n,) = r.unpack("<I", "tracker length")
    if n != config.num_codes:
        raise DimensionError(f"{source}: trackers have {n} entries, config says {config.num_codes}")
    real = np.frombuffer(r.take(8 * n, "real tracker"), dtype="<u8").astype(np.uint64)
    fake = np.frombuffer(r.take(8 * n, "fake tracker"), dtype="<u8").astype(np.uint64)
    (snap_epoch,) = r.unpack("<i", "snapshot epoch")
    delta = np.frombuffer(r.take(8 * n, "discrepancy snapshot"), dtype="<f8").astype(np.float64)
    if r.pos != len(raw):
        raise FormatError(f"{source}: {len(raw) - r.pos} trailing bytes", r.pos)

    def need(name):
        if name not in tensors:
            raise FormatError(f"{source}: missing tensor {name!r}")
        return tensors.pop(name)

    codebook_arr = need("frozen.codebook")
    if codebook_arr.shape != (config.num_codes, config.channels):
        raise DimensionError(f"{source}: codebook record is {codebook_arr.shape}, config wants "
                             f"({config.num_codes}, {config.channels})")
    encoder = FrozenEncoder(config.patch_size, need("frozen.encoder"), cfg.get("encoder_seed", 0))
    positional = need("frozen.positional")
    semantic = tensors.pop("frozen.semantic", None)
    if provider is None:
        if semantic is None:
            # file-backed model loaded without its feature file: every lookup fails
            provider = SemanticProvider("file", config.semantic_dim)
        else:
            provider = SemanticProvider("random", config.semantic_dim, weights=semantic, seed=config.seed)

    model = DetectorModel(config, encoder, Codebook(codebook_arr), provider)
    if positional.shape != model.d3at.positional.shape:
        raise DimensionError(f"{source}: positional table is {positional.shape}, expected {model.d3at.positional.shape}")
    model.d3at.positional = positional
    for name, p in model.named_parameters():
        arr = need(name)
        if arr.shape != p.shape:
            raise DimensionError(f"{source}: tensor {name!r} is {arr.shape}, model expects {p.shape}")
        p.data = arr
    if tensors:
        raise FormatError(f"{source}: unexpected tensors {sorted(tensors)}")
    model.real_tracker = FrequencyTracker(n, "real", real)
    model.fake_tracker = FrequencyTracker(n, "fake", fake)
    model.delta = DiscrepancyVector(delta, snap_epoch)
    model.epoch = epoch
    return model


def load_checkpoint(path, provider: SemanticProvider = None, expect=None):
    with open(path, "rb") as fh:
        raw = fh.read()
    return checkpoint_from_bytes(raw, provider=provider, expect=expect, source=str(path))


def checkpoint_train_config(raw):
    """The training config echoed in a checkpoint header (or ``None``)."""
    cfg_len = struct.unpack_from("<I", raw, 8)[0]
    train = json.loads(raw[12:12 + cfg_len].decode("utf-8")).get("train")
    return TrainConfig(**train) if train else None
