"""Synthetic long-tail vs. truncated token data, image ingestion, perturbations
and the semantic feature file format.

Real samples draw each token from a Zipf law over all ``N`` codebook entries;
fake samples draw from the same law restricted to the ``k`` most probable
entries, which is what top-k sampling does to an autoregressive generator.
Tokens are decoded to pixels through the transpose of the frozen encoder.

Codebook geometry is tied to Zipf rank: the entry of rank ``r`` has norm
growing linearly from ``radius_min`` to ``radius_max``. Decoding a rare entry
overshoots ``[0, 1]`` and gets clipped, so re-encoding it does not land back
on the entry. That clipping residual is the quantization error the detector
reads, and it only appears on long-tail tokens.
"""

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from .errors import (
    BadMagicError,
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .numerics.rng import stream
from .vq import Codebook, FrozenEncoder, patches_to_image

LABELS = ("real", "fake")
REAL_TAG = "synthetic-zipf"
FAKE_TAG = "synthetic-topk"
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# tokenizer and generator

@dataclass(frozen=True)
class SyntheticDataSpec:
    num_codes: int = 512
    channels: int = 8
    patch_size: int = 8
    height: int = 64
    width: int = 64
    zipf_s: float = 1.2
    top_k: int = None  # None -> N / 8
    noise_sigma: float = 0.01
    radius_min: float = 0.5
    radius_max: float = 16.0
    n_train: int = 4000
    n_val: int = 1000
    n_test: int = 1000

    def __post_init__(self):
        if self.num_codes < 2:
            raise ConfigError("codebook needs at least 2 entries")
        if self.top_k is None:
            object.__setattr__(self, "top_k", max(1, self.num_codes // 8))
        if not 1 <= self.top_k < self.num_codes:
            raise ConfigError(f"truncation k must be in [1, N), got {self.top_k}")
        if self.zipf_s <= 0:
            raise ConfigError(f"zipf exponent must be positive, got {self.zipf_s}")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(f"image {self.height}x{self.width} is not divisible by patch size {self.patch_size}")
        if not 0 < self.radius_min <= self.radius_max:
            raise ConfigError("need 0 < radius_min <= radius_max")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be >= 0")

    @property
    def grid(self):
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def tokens_per_image(self):
        h, w = self.grid
        return h * w

    def split_sizes(self):
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


def zipf_probabilities(n, s):
    """Zipf mass over ranks ``1..n``: ``r**-s`` normalized."""
    w = np.arange(1, n + 1, dtype=np.float64) ** -float(s)
    return w / w.sum()


def truncated_probabilities(n, s, k):
    """Zipf mass renormalized over the top ``k`` ranks (zero elsewhere)."""
    p = zipf_probabilities(n, s)
    out = np.zeros(n)
    out[:k] = p[:k] / p[:k].sum()
    return out


@dataclass(frozen=True)
class SyntheticTokenizer:
    """Frozen encoder/codebook pair plus the generator's rank-to-entry map.

    ``rank_to_index[r]`` is the codebook entry holding Zipf rank ``r``.
    """

    encoder: FrozenEncoder
    codebook: Codebook
    rank_to_index: np.ndarray

    def top_k_support(self, k):
        return np.sort(self.rank_to_index[:k])


def build_synthetic_tokenizer(seed, spec: SyntheticDataSpec) -> SyntheticTokenizer:
    n, c = spec.num_codes, spec.channels
    encoder = FrozenEncoder.from_seed(seed, spec.patch_size, c)
    dirs = stream(seed, "tokenizer/codebook").standard_normal((n, c))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = spec.radius_min + (spec.radius_max - spec.radius_min) * np.arange(n) / (n - 1)
    by_rank = dirs * radii[:, None]
    perm = stream(seed, "tokenizer/rank-permutation").permutation(n)
    entries = np.empty_like(by_rank)
    entries[perm] = by_rank
    return SyntheticTokenizer(encoder, Codebook(entries), perm)


def to_8bit(x):
    """Snap to the 8-bit lattice ``k / 255`` (what a PNG can hold exactly)."""
    return (np.rint(np.clip(x, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def decode_tokens(indices, tokenizer: SyntheticTokenizer):
    """Token grid ``(h, w)`` to an 8-bit-valued image via ``clip(0.5 + z P^T, 0, 1)``."""
    z = tokenizer.codebook.entries[np.asarray(indices)].astype(np.float64)
    proj = tokenizer.encoder.projection.astype(np.float64)
    patches = 0.5 + z @ proj.T
    return to_8bit(patches_to_image(patches, tokenizer.encoder.patch_size))


@dataclass
class SampleRecord:
    sample_id: str
    image: np.ndarray
    label: str
    source_tag: str


@dataclass
class SampleSet:
    """A split held as stacked arrays; ``labels`` uses 0 = real, 1 = fake."""

    ids: list
    images: np.ndarray
    labels: np.ndarray
    tags: list
    tokens: np.ndarray = field(default=None, repr=False)  # generator token grids, if known

    def __len__(self):
        return len(self.ids)

    def records(self):
        for i, sid in enumerate(self.ids):
            yield SampleRecord(sid, self.images[i], LABELS[int(self.labels[i])], self.tags[i])

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet([self.ids[i] for i in idx], self.images[idx], self.labels[idx],
                         [self.tags[i] for i in idx], None if self.tokens is None else self.tokens[idx])

    def with_images(self, images):
        return SampleSet(list(self.ids), images, self.labels.copy(), list(self.tags), None)


def sample_tokens(rng, probs, count):
    return rng.choice(len(probs), size=count, p=probs)


def generate_sample(sample_id, fake, seed, spec: SyntheticDataSpec, tokenizer: SyntheticTokenizer):
    """One image and its token grid; a pure function of ``(seed, sample_id)``."""
    rng = stream(seed, f"sample/{sample_id}")
    h, w = spec.grid
    probs = (truncated_probabilities(spec.num_codes, spec.zipf_s, spec.top_k) if fake
             else zipf_probabilities(spec.num_codes, spec.zipf_s))
    ranks = sample_tokens(rng, probs, h * w)
    tokens = tokenizer.rank_to_index[ranks].reshape(h, w)
    image = decode_tokens(tokens, tokenizer)
    if spec.noise_sigma > 0:
        image = to_8bit(image + rng.normal(0.0, spec.noise_sigma, size=image.shape))
    return image, tokens


def generate_split(name, count, seed, spec, tokenizer):
    ids, tags = [], []
    images = np.empty((count, spec.height, spec.width, 3), dtype=np.float32)
    labels = np.empty(count, dtype=np.int8)
    tokens = np.empty((count, *spec.grid), dtype=np.int64)
    for i in range(count):
        fake = i % 2 == 1
        sid = f"{name}-{i:06d}"
        images[i], tokens[i] = generate_sample(sid, fake, seed, spec, tokenizer)
        labels[i] = int(fake)
        ids.append(sid)
        tags.append(FAKE_TAG if fake else REAL_TAG)
    return SampleSet(ids, images, labels, tags, tokens)


def generate_synthetic_dataset(spec: SyntheticDataSpec, seed):
    """Returns ``(tokenizer, {"train": SampleSet, "val": ..., "test": ...})``.

    Labels alternate real/fake within each split, so every split is balanced
    (up to one sample) and ids encode the split name.
    """
    tokenizer = build_synthetic_tokenizer(seed, spec)
    splits = {name: generate_split(name, n, seed, spec, tokenizer)
              for name, n in spec.split_sizes().items()}
    return tokenizer, splits


# ---------------------------------------------------------------------------
# PNG and manifests

def save_png(path, image):
    arr = np.rint(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG", compress_level=6)


def read_png(path):
    """8-bit PNG as float32 ``(H, W, 3)`` in ``[0, 1]``; gray is replicated to RGB."""
    with Image.open(path) as im:
        if im.format != "PNG":
            raise DataError(f"{path}: not a PNG file")
        if im.mode in ("I", "I;16", "I;16B", "F"):
            raise DataError(f"{path}: only 8-bit PNG is supported (mode {im.mode})")
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.uint8)
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / np.float32(255.0)


def write_split(out_dir, split: SampleSet, name):
    img_dir = os.path.join(out_dir, "images", name)
    os.makedirs(img_dir, exist_ok=True)
    lines = []
    for rec in split.records():
        rel = f"images/{name}/{rec.sample_id}.png"
        save_png(os.path.join(out_dir, rel), rec.image)
        lines.append(f"{rec.sample_id}\t{rel}\t{rec.label}\t{rec.source_tag}\n")
    with open(os.path.join(out_dir, f"{name}.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def write_synthetic_dataset(out_dir, spec: SyntheticDataSpec, seed, splits):
    os.makedirs(out_dir, exist_ok=True)
    for name in SPLITS:
        write_split(out_dir, splits[name], name)
    meta = {"format": "d3qe-synthetic", "version": 1, "seed": int(seed), "spec": asdict(spec)}
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_dataset_meta(data_dir):
    path = os.path.join(data_dir, "dataset.json")
    try:
        with open(path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{path} not found; run gen-data first or pass a manifest") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None
    return int(meta["seed"]), SyntheticDataSpec(**meta["spec"])


def load_image_dataset(manifest_path, size=None):
    """Read a TSV manifest ``id<TAB>relpath<TAB>label[<TAB>source-tag]``.

    Paths are relative to the manifest's directory. Images are resized to
    ``size = (H, W)`` with corner-aligned bilinear interpolation when their
    dimensions differ. Blank lines are skipped.
    """
    base = os.path.dirname(os.path.abspath(manifest_path))
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from None
    ids, images, labels, tags = [], [], [], []
    seen = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise DataError(f"{manifest_path} line {lineno}: expected 3 or 4 tab-separated fields, got {len(cols)}")
        sid, rel, label = cols[:3]
        if label not in LABELS:
            raise DataError(f"{manifest_path} line {lineno}: bad label {label!r} (want real or fake)")
        if sid in seen:
            raise DataError(f"{manifest_path} line {lineno}: duplicate id {sid!r} (first seen on line {seen[sid]})")
        seen[sid] = lineno
        try:
            img = read_png(os.path.join(base, rel))
        except DataError as exc:
            raise DataError(f"{manifest_path} line {lineno}: {exc}") from None
        except (OSError, ValueError) as exc:
            raise DataError(f"{manifest_path} line {lineno}: cannot read image {rel!r}: {exc}") from None
        if size is not None and img.shape[:2] != tuple(size):
            img = resize_bilinear(img, *size)
        ids.append(sid)
        images.append(img)
        labels.append(LABELS.index(label))
        tags.append(cols[3] if len(cols) == 4 else "external")
    if images and len({im.shape for im in images}) > 1:
        raise DataError(f"{manifest_path}: images differ in size; pass a target size")
    stacked = np.stack(images) if images else np.zeros((0, *(size or (0, 0)), 3), dtype=np.float32)
    return SampleSet(ids, stacked, np.asarray(labels, dtype=np.int8), tags)


# ---------------------------------------------------------------------------
# perturbations

def resize_bilinear(image, out_h, out_w):
    """Corner-aligned bilinear resize of ``(..., H, W, C)``: output pixel ``i``
    samples source coordinate ``i * (H - 1) / (out_h - 1)``."""
    image = np.asarray(image)
    H, W = image.shape[-3], image.shape[-2]
    if (H, W) == (out_h, out_w):
        return image.astype(np.float32, copy=True)

    def coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = coords(H, out_h)
    x0, x1, wx = coords(W, out_w)
    img = image.astype(np.float64)
    rows = img[..., y0, :, :] * (1 - wy)[:, None, None] + img[..., y1, :, :] * wy[:, None, None]
    out = rows[..., :, x0, :] * (1 - wx)[:, None] + rows[..., :, x1, :] * wx[:, None]
    return out.astype(np.float32)


def center_crop_resize(image, f):
    """Keep the central ``floor(f*H) x floor(f*W)`` window and resize back to ``H x W``."""
    if not f > 0:
        raise ConfigError(f"crop factor must be > 0, got {f}")
    if f > 1:
        raise ConfigError(f"crop factor must be <= 1, got {f}")
    image = np.asarray(image, dtype=np.float32)
    H, W = image.shape[-3], image.shape[-2]
    ch, cw = max(1, math.floor(f * H)), max(1, math.floor(f * W))
    if (ch, cw) == (H, W):
        return image.copy()
    top, left = (H - ch) // 2, (W - cw) // 2
    crop = image[..., top:top + ch, left:left + cw, :]
    return np.clip(resize_bilinear(crop, H, W), 0.0, 1.0)


# ITU-T T.81 Annex K, Table K.1 (luminance)
JPEG_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)


def _dct_matrix(n=8):
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


_DCT8 = _dct_matrix()


def quality_scale(q):
    if not 1 <= q <= 100:
        raise ConfigError(f"JPEG quality must be in [1, 100], got {q}")
    return 5000 / q if q < 50 else 200 - 2 * q


def scaled_quant_table(q):
    s = quality_scale(q)
    return np.clip(np.floor((JPEG_LUMA_TABLE * s + 50) / 100), 1, 255)


def _rgb_to_ycbcr(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-1)


def _ycbcr_to_rgb(ycc):
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128.0, ycc[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def jpeg_like_compress(image, q):
    """Lossy stage of baseline JPEG: 8x8 DCT quantization with the Annex K
    luminance table on all three YCbCr channels (no chroma subsampling).

    Entropy coding is lossless and skipped. Output is snapped to 8 bits.
    """
    table = scaled_quant_table(q)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim > 3:
        return np.stack([jpeg_like_compress(im, q) for im in image])
    H, W, _ = image.shape
    ph, pw = -H % 8, -W % 8
    x = np.pad(image * 255.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    ycc = _rgb_to_ycbcr(x) - 128.0
    hb, wb = x.shape[0] // 8, x.shape[1] // 8
    blocks = ycc.reshape(hb, 8, wb, 8, 3).transpose(0, 2, 4, 1, 3)  # (hb, wb, ch, 8, 8)
    coef = _DCT8 @ blocks @ _DCT8.T
    coef = np.rint(coef / table) * table
    rec = _DCT8.T @ coef @ _DCT8
    ycc = rec.transpose(0, 3, 1, 4, 2).reshape(hb * 8, wb * 8, 3) + 128.0
    rgb = np.clip(_ycbcr_to_rgb(ycc), 0.0, 255.0)[:H, :W] / 255.0
    return to_8bit(rgb)


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    quality: int = None
    factor: float = None
    test_mode: bool = False  # allows the identity crop f = 1.0

    def __post_init__(self):
        if self.kind == "jpeg":
            if self.quality is None or not 60 <= self.quality <= 95:
                raise ConfigError(f"JPEG quality must be in [60, 95], got {self.quality}")
        elif self.kind == "crop":
            hi = 1.0 if self.test_mode else 0.9
            if self.factor is None or not 0.5 <= self.factor <= hi:
                raise ConfigError(f"crop factor must be in [0.5, {hi}], got {self.factor}")
        else:
            raise ConfigError(f"unknown perturbation kind {self.kind!r} (want jpeg or crop)")

    def describe(self):
        # real and fake images are perturbed alike; reports say so explicitly
        if self.kind == "jpeg":
            return {"kind": "jpeg", "quality": int(self.quality), "applied_to": "real+fake"}
        return {"kind": "crop", "factor": float(self.factor), "applied_to": "real+fake"}


def apply_perturbation(images, spec: PerturbationSpec):
    """Perturb one image or a stack; shape and ``[0, 1]`` range are preserved."""
    if spec.kind == "jpeg":
        return jpeg_like_compress(images, spec.quality)
    return center_crop_resize(images, spec.factor)


# ---------------------------------------------------------------------------
# semantic feature files

FEATURE_MAGIC = b"D3QF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")


def write_feature_file(blob_path, manifest_path, ids, rows):
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2 or rows.shape[0] != len(ids):
        raise DimensionError(f"need one row per id: {len(ids)} ids, rows of shape {rows.shape}")
    if len(set(ids)) != len(ids):
        raise DataError("feature ids must be unique")
    with open(blob_path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows.shape[0], rows.shape[1]))
        fh.write(rows.tobytes())
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        for i, sid in enumerate(ids):
            fh.write(f"{sid}\t{i}\n")


def read_feature_file(blob_path, manifest_path, expected_dim=None):
    """Returns ``(ids, rows)`` with ``ids[i]`` naming ``rows[i]``."""
    with open(blob_path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{blob_path}: expected magic {FEATURE_MAGIC!r}, found {raw[:4]!r}", 0)
    if len(raw) < _FEATURE_HEADER.size:
        raise TruncatedFileError(f"{blob_path}: header cut short", len(raw))
    _, version, count, dim = _FEATURE_HEADER.unpack_from(raw)
    if version != FEATURE_VERSION:
        raise UnsupportedVersionError(f"{blob_path}: feature file version {version} (supported: {FEATURE_VERSION})", 4)
    if expected_dim is not None and dim != expected_dim:
        raise DimensionError(f"{blob_path}: feature dim {dim} does not match provider dim {expected_dim}")
    need = _FEATURE_HEADER.size + 4 * count * dim
    if len(raw) != need:
        cls = TruncatedFileError if len(raw) < need else FormatError
        raise cls(f"{blob_path}: {count}x{dim} floats need {need} bytes, file has {len(raw)}",
                  min(len(raw), need))
    rows = np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(count, dim).astype(np.float32)

    ids = [None] * count
    seen = set()
    with open(manifest_path, encoding="utf-8") as fh:
        entries = [ln for ln in fh.read().splitlines() if ln.strip()]
    if len(entries) != count:
        raise FormatError(f"{manifest_path}: {len(entries)} manifest rows for {count} feature rows")
    for lineno, line in enumerate(entries, start=1):
        try:
            sid, row = line.split("\t")
            row = int(row)
        except ValueError:
            raise DataError(f"{manifest_path} line {lineno}: expected id<TAB>row") from None
        if not 0 <= row < count:
            raise DataError(f"{manifest_path} line {lineno}: row {row} outside [0, {count})")
        if ids[row] is not None or sid in seen:
            raise DataError(f"{manifest_path} line {lineno}: duplicate id or row")
        ids[row] = sid
        seen.add(sid)
    return ids, rows

