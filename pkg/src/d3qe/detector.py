"""Semantic branch, fusion head and the end-to-end detector.

The semantic provider is a frozen stand-in for a CLIP image embedding: a
seeded Gaussian projection of a 32x32 downsample, or rows read from a
feature file keyed by sample id.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .d3at import D3ATConfig, D3ATParams, d3at_forward, sequence_from_grid
from .data import read_feature_file, resize_bilinear
from .errors import ConfigError, DimensionError, FeatureLookupError
from .numerics import ops
from .numerics.nn import MLP, LayerNorm, Module
from .numerics.rng import stream
from .numerics.tensor import Tensor, no_grad
from .vq import (
    Codebook,
    DiscrepancyVector,
    FrequencyTracker,
    FrozenEncoder,
    QuantizationResult,
    compute_delta_d,
    encode_image,
    quantize_nearest,
)

SEMANTIC_SIDE = 32
EVAL_BATCH = 50  # fixed chunking keeps batched scores reproducible bit for bit


class SemanticProvider:
    """Frozen ``d_s``-dim image descriptor.

    ``random`` mode: bilinear downsample to 32x32x3, flatten, multiply by a
    seeded ``N(0, 1/3072)`` matrix (no bias). ``file`` mode: look the sample
    id up in a feature table.
    """

    def __init__(self, mode, dim, weights=None, table=None, seed=None):
        if mode not in ("random", "file"):
            raise ConfigError(f"semantic provider mode must be 'random' or 'file', got {mode!r}")
        self.mode = mode
        self.dim = int(dim)
        self.seed = seed
        self.weights = weights
        self.table = table or {}
        if weights is not None:
            self.weights = np.array(weights, dtype=np.float32)
            self.weights.flags.writeable = False
            if self.weights.shape != (3 * SEMANTIC_SIDE ** 2, self.dim):
                raise DimensionError(f"projection must be {3 * SEMANTIC_SIDE ** 2} x {self.dim}")

    @classmethod
    def random_projection(cls, seed, dim=512):
        fan_in = 3 * SEMANTIC_SIDE ** 2
        w = stream(seed, "semantic/projection").normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, dim))
        return cls("random", dim, weights=w.astype(np.float32), seed=seed)

    @classmethod
    def from_feature_file(cls, blob_path, manifest_path, dim=None):
        ids, rows = read_feature_file(blob_path, manifest_path, expected_dim=dim)
        table = {sid: rows[i] for i, sid in enumerate(ids)}
        return cls("file", rows.shape[1] if dim is None else dim, table=table)

    def features(self, images, ids=None):
        """``(B, d_s)`` float32 features for a stack of images (or one image -> ``(d_s,)``)."""
        images = np.asarray(images, dtype=np.float32)
        single = images.ndim == 3
        if single:
            images = images[None]
            ids = None if ids is None else [ids]
        if self.mode == "file":
            if ids is None:
                raise FeatureLookupError("file-backed semantic features need sample ids")
            missing = [sid for sid in ids if sid not in self.table]
            if missing:
                raise FeatureLookupError(f"no semantic features for sample id {missing[0]!r}")
            out = np.stack([self.table[sid] for sid in ids]) if ids else np.zeros((0, self.dim), np.float32)
        else:
            small = resize_bilinear(images, SEMANTIC_SIDE, SEMANTIC_SIDE)
            out = small.reshape(len(images), -1) @ self.weights
        return out[0] if single else out


def semantic_features(image, provider: SemanticProvider, sample_id=None):
    return provider.features(image, sample_id)


class FusionHead(Module):
    """``A_D``: MLP(d -> d_e -> d_e) + LN; ``A_S``: MLP(d_s -> d_e -> d_e) + LN;
    classifier: MLP(2 d_e -> d_e -> 1) on ``[A_D(F_D), A_S(F_S)]``."""

    def __init__(self, seed, d, d_s, d_e=256, dtype=np.float32):
        self.align_d = MLP(stream(seed, "head/align_d"), d, d_e, d_e, dtype)
        self.norm_d = LayerNorm(d_e, dtype)
        self.align_s = MLP(stream(seed, "head/align_s"), d_s, d_e, d_e, dtype)
        self.norm_s = LayerNorm(d_e, dtype)
        self.classifier = MLP(stream(seed, "head/classifier"), 2 * d_e, d_e, 1, dtype)

    @property
    def dims(self):
        return self.align_d.fc1.weight.shape[0], self.align_s.fc1.weight.shape[0]


def fusion_logits(f_d, f_s, head: FusionHead):
    """Logits with shape ``f_d.shape[:-1]``."""
    f_d = f_d if isinstance(f_d, Tensor) else Tensor(f_d)
    f_s = f_s if isinstance(f_s, Tensor) else Tensor(np.asarray(f_s, dtype=f_d.dtype))
    d, d_s = head.dims
    if f_d.shape[-1] != d or f_s.shape[-1] != d_s:
        raise DimensionError(f"fusion head expects ({d}, {d_s}) features, got ({f_d.shape[-1]}, {f_s.shape[-1]})")
    lead = f_d.shape[:-1]
    if f_s.shape[:-1] != lead:
        raise DimensionError(f"feature batch shapes differ: {lead} vs {f_s.shape[:-1]}")
    if not lead:  # single vectors ride through the MLPs as one-row batches
        f_d, f_s = ops.reshape(f_d, (1, d)), ops.reshape(f_s, (1, d_s))
    a_d = head.norm_d(head.align_d(f_d))
    a_s = head.norm_s(head.align_s(f_s))
    out = head.classifier(ops.concat([a_d, a_s], axis=-1))
    return ops.reshape(out, lead)


@dataclass(frozen=True)
class DetectionScore:
    logit: float
    probability: float
    label: str

    @classmethod
    def from_logit(cls, logit):
        logit = float(logit)
        prob = sigmoid(logit)
        return cls(logit, prob, "fake" if prob > 0.5 else "real")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def fuse_and_classify(f_d, f_s, head: FusionHead) -> DetectionScore:
    return DetectionScore.from_logit(fusion_logits(f_d, f_s, head).item())


def bce_loss(logits, labels):
    """Mean ``softplus(-(2y - 1) z)``; labels 0 = real, 1 = fake."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    return ops.bce_with_logits(logits, labels)


@dataclass(frozen=True)
class ModelConfig:
    num_codes: int = 512
    channels: int = 8
    patch_size: int = 8
    height: int = 64
    width: int = 64
    hidden: int = 512
    layers: int = 2
    semantic_dim: int = 512
    embed_dim: int = 256
    use_distribution_bias: bool = True
    semantic_mode: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(f"image {self.height}x{self.width} is not divisible by patch size {self.patch_size}")
        if self.embed_dim < 2 or self.semantic_dim < 2:
            raise ConfigError("semantic and embedding dims must be >= 2")

    @property
    def seq_len(self):
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    def d3at_config(self):
        return D3ATConfig(layers=self.layers, hidden=self.hidden, seq_len=self.seq_len,
                          latent_dim=self.channels, use_distribution_bias=self.use_distribution_bias)

    def to_dict(self):
        return asdict(self)


class DetectorModel:
    """Trainable D3AT stack and fusion head, plus the frozen tokenizer,
    semantic provider, frequency trackers and the active discrepancy snapshot."""

    def __init__(self, config: ModelConfig, encoder: FrozenEncoder, codebook: Codebook,
                 provider: SemanticProvider, dtype=np.float32):
        if codebook.size != config.num_codes or codebook.dim != config.channels:
            raise DimensionError(
                f"codebook is {codebook.size}x{codebook.dim}, config wants {config.num_codes}x{config.channels}")
        if encoder.patch_size != config.patch_size or encoder.channels != config.channels:
            raise DimensionError("encoder does not match the model config")
        if provider.dim != config.semantic_dim:
            raise DimensionError(f"semantic provider dim {provider.dim} != config {config.semantic_dim}")
        self.config = config
        self.encoder = encoder
        self.codebook = codebook
        self.provider = provider
        self.d3at = D3ATParams(config.d3at_config(), config.seed, dtype)
        self.head = FusionHead(config.seed, config.hidden, config.semantic_dim, config.embed_dim, dtype)
        self.real_tracker = FrequencyTracker(config.num_codes, "real")
        self.fake_tracker = FrequencyTracker(config.num_codes, "fake")
        self.delta = compute_delta_d(self.real_tracker, self.fake_tracker)
        self.epoch = 0

    def named_parameters(self):
        return self.d3at.named_parameters("d3at.") + self.head.named_parameters("head.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def cast(self, dtype):
        self.d3at.cast(dtype)
        self.head.cast(dtype)
        return self

    @property
    def dtype(self):
        return self.d3at.input_proj.dtype

    def set_snapshot(self, delta: DiscrepancyVector):
        if delta.size != self.config.num_codes:
            raise DimensionError(f"discrepancy vector has {delta.size} entries, model has {self.config.num_codes}")
        self.delta = delta


def tokenize(images, model: DetectorModel):
    """Encode and quantize a stack of images with the frozen tokenizer."""
    return quantize_nearest(encode_image(images, model.encoder), model.codebook)


def logits_from_tokens(quant, f_s, model: DetectorModel, delta=None):
    err, idx = sequence_from_grid(quant.error, quant.indices)
    f_d = d3at_forward(err, idx, model.delta if delta is None else delta, model.d3at)
    return fusion_logits(f_d, Tensor(np.asarray(f_s, dtype=model.dtype)), model.head)


def batch_logits(images, ids, model: DetectorModel):
    """Differentiable logits for a stack of images."""
    return logits_from_tokens(tokenize(images, model), model.provider.features(images, ids), model)


@dataclass(frozen=True)
class FrozenInputs:
    """Tokenizer and semantic-branch outputs for a stack of images.

    Neither branch trains, so a training run computes these once per split
    instead of once per batch and epoch.
    """

    quant: QuantizationResult
    semantic: np.ndarray

    def __len__(self):
        return len(self.semantic)

    def take(self, idx):
        q = self.quant
        return FrozenInputs(QuantizationResult(q.z[idx], q.z_q[idx], q.indices[idx], q.error[idx]),
                            self.semantic[idx])


def frozen_inputs(images, ids, model: DetectorModel, batch=EVAL_BATCH):
    """:class:`FrozenInputs` for a stack of images, computed in fixed chunks."""
    images = np.asarray(images, dtype=np.float32)
    parts = []
    for s in range(0, len(images), batch):
        chunk = images[s:s + batch]
        parts.append((tokenize(chunk, model),
                      model.provider.features(chunk, None if ids is None else list(ids[s:s + batch]))))
    if not parts:
        raise ConfigError("no images to encode")
    quant = QuantizationResult(*(np.concatenate([getattr(q, f) for q, _ in parts])
                                 for f in ("z", "z_q", "indices", "error")))
    return FrozenInputs(quant, np.concatenate([f for _, f in parts]))


def score_frozen(frozen: FrozenInputs, model: DetectorModel, batch=EVAL_BATCH):
    """Float64 logits from precomputed frozen inputs, in fixed chunks."""
    out = np.empty(len(frozen), dtype=np.float64)
    with no_grad():
        for s in range(0, len(frozen), batch):
            part = frozen.take(slice(s, s + batch))
            out[s:s + batch] = logits_from_tokens(part.quant, part.semantic, model).data
    return out


def score_images(images, ids, model: DetectorModel, batch=EVAL_BATCH):
    """Float64 logits for any number of images, evaluated in fixed chunks."""
    images = np.asarray(images, dtype=np.float32)
    out = np.empty(len(images), dtype=np.float64)
    with no_grad():
        for s in range(0, len(images), batch):
            chunk_ids = None if ids is None else list(ids[s:s + batch])
            out[s:s + batch] = batch_logits(images[s:s + batch], chunk_ids, model).data
    return out


def predict(image, model: DetectorModel, sample_id=None) -> DetectionScore:
    """Score one ``(H, W, 3)`` image."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise DimensionError(f"predict takes one H x W x 3 image, got shape {image.shape}")
    logit = score_images(image[None], None if sample_id is None else [sample_id], model)[0]
    return DetectionScore.from_logit(logit)
