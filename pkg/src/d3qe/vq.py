"""Frozen tokenizer stand-in: patch encoder, codebook quantization, token
frequency trackers and the fake-minus-real discrepancy vector."""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, DimensionError
from .numerics.rng import stream

DUPLICATE_TOL = 1e-9


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


def _min_pairwise_distance(entries):
    e = entries.astype(np.float64)
    sq = (e * e).sum(axis=1)
    best = np.inf
    for s in range(0, len(e), 1024):
        blk = e[s:s + 1024]
        d2 = sq[s:s + 1024, None] + sq[None, :] - 2.0 * blk @ e.T
        rows = np.arange(len(blk))
        d2[rows, rows + s] = np.inf
        # the expansion is inexact near zero; recompute close pairs directly
        close = np.argwhere(d2 < 1e-6)
        for i, j in close:
            d2[i, j] = ((blk[i] - e[j]) ** 2).sum()
        best = min(best, float(np.sqrt(max(d2.min(), 0.0))))
    return best


@dataclass(frozen=True)
class Codebook:
    """``N x c`` table of latent vectors; immutable once built."""

    entries: np.ndarray

    def __post_init__(self):
        entries = np.asarray(self.entries)
        if entries.ndim != 2 or entries.shape[0] < 1:
            raise DimensionError(f"codebook must be N x c, got shape {entries.shape}")
        object.__setattr__(self, "entries", _frozen(entries, np.float32))
        if len(entries) > 1 and _min_pairwise_distance(self.entries) <= DUPLICATE_TOL:
            raise DataError("codebook contains (near-)identical entries")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class FrozenEncoder:
    """Non-overlapping ``p x p`` patch projection to ``c`` latent channels.

    The projection columns are orthonormal and orthogonal to the all-ones
    patch, so a flat grey patch encodes to zero and ``x @ P @ P.T`` recovers
    the component of ``x`` that the latents can see.
    """

    patch_size: int
    projection: np.ndarray
    seed: int = 0

    def __post_init__(self):
        p = self.patch_size
        proj = np.asarray(self.projection)
        if proj.ndim != 2 or proj.shape[0] != 3 * p * p:
            raise DimensionError(f"projection must be (3*p*p) x c = {3 * p * p} x c, got {proj.shape}")
        object.__setattr__(self, "projection", _frozen(proj, np.float32))

    @classmethod
    def from_seed(cls, seed, patch_size, channels):
        dim = 3 * patch_size * patch_size
        if not 1 <= channels < dim:
            raise ConfigError(f"latent channels must be in [1, {dim - 1}], got {channels}")
        rng = stream(seed, "tokenizer/encoder")
        a = rng.standard_normal((dim, channels))
        a -= a.mean(axis=0, keepdims=True)
        q, r = np.linalg.qr(a)
        q *= np.sign(np.diag(r))[None, :]
        return cls(patch_size, q, seed)

    @property
    def channels(self) -> int:
        return self.projection.shape[1]


@dataclass(frozen=True)
class QuantizationResult:
    """Per-position latents; arrays carry any leading batch dims.

    ``error`` is float64 and equals ``z_q - z`` exactly: both operands are
    float32, so their difference is representable and ``error + z`` gives
    back ``z_q`` bit for bit.
    """

    z: np.ndarray
    z_q: np.ndarray
    indices: np.ndarray
    error: np.ndarray


def image_to_patches(images, p):
    """(..., H, W, 3) -> (..., h, w, 3*p*p), each patch flattened row-major."""
    images = np.asarray(images)
    *lead, H, W, ch = images.shape
    if ch != 3:
        raise DimensionError(f"expected 3 channels, got {ch}")
    if H % p or W % p:
        raise DimensionError(f"image {H}x{W} is not divisible by patch size {p}")
    h, w = H // p, W // p
    x = images.reshape(*lead, h, p, w, p, 3)
    k = len(lead)
    x = np.moveaxis(x, k + 2, k + 1)
    return x.reshape(*lead, h, w, 3 * p * p)


def patches_to_image(patches, p):
    """Inverse of :func:`image_to_patches`."""
    patches = np.asarray(patches)
    *lead, h, w, _ = patches.shape
    k = len(lead)
    x = patches.reshape(*lead, h, w, p, p, 3)
    x = np.moveaxis(x, k + 1, k + 2)
    return x.reshape(*lead, h * p, w * p, 3)


def encode_image(image, encoder: FrozenEncoder):
    """Latent grid ``(h, w, c)`` for one image, or ``(B, h, w, c)`` for a batch."""
    image = np.asarray(image, dtype=np.float32)
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise DataError("pixel values must lie in [0, 1]")
    patches = image_to_patches(image, encoder.patch_size)
    lead = patches.shape[:-1]
    flat = patches.reshape(-1, patches.shape[-1])
    return (flat @ encoder.projection).reshape(*lead, encoder.channels)


def quantize_nearest(z, codebook: Codebook) -> QuantizationResult:
    """Snap every latent to its nearest codebook entry (lowest index on ties)."""
    z = np.asarray(z, dtype=np.float32)
    if z.shape[-1] != codebook.dim:
        raise DimensionError(f"latent dim {z.shape[-1]} does not match codebook dim {codebook.dim}")
    flat = np.ascontiguousarray(z.reshape(-1, codebook.dim), dtype=np.float64)
    idx = kernels.nearest_codebook(flat, codebook.entries.astype(np.float64))
    indices = idx.reshape(z.shape[:-1])
    z_q = codebook.entries[indices]
    error = z_q.astype(np.float64) - z.astype(np.float64)
    return QuantizationResult(z=z, z_q=z_q, indices=indices, error=error)


@dataclass
class FrequencyTracker:
    """Cumulative per-entry token counts for one label."""

    size: int
    label: str
    counts: np.ndarray = field(default=None)
    total: np.uint64 = field(default=np.uint64(0))

    def __post_init__(self):
        if self.label not in ("real", "fake"):
            raise ConfigError(f"tracker label must be 'real' or 'fake', got {self.label!r}")
        if self.counts is None:
            self.counts = np.zeros(self.size, dtype=np.uint64)
        else:
            self.counts = np.array(self.counts, dtype=np.uint64)
            if self.counts.shape != (self.size,):
                raise DimensionError(f"tracker counts must have length {self.size}")
        self.total = np.uint64(self.counts.sum(dtype=np.uint64))

    def copy(self):
        return FrequencyTracker(self.size, self.label, self.counts.copy())

    def merge(self, other):
        if other.size != self.size:
            raise DimensionError("cannot merge trackers of different sizes")
        self.counts += other.counts
        self.total = np.uint64(self.total + other.total)
        return self


def update_tracker(tracker: FrequencyTracker, indices) -> FrequencyTracker:
    """Add the occurrence counts of ``indices`` (any shape) to ``tracker`` in place."""
    idx = np.asarray(indices).reshape(-1)
    if idx.size == 0:
        return tracker
    if idx.dtype.kind not in "iu":
        raise DataError("token indices must be integers")
    if idx.min() < 0 or idx.max() >= tracker.size:
        bad = idx[(idx < 0) | (idx >= tracker.size)][0]
        raise DataError(f"token index {bad} outside [0, {tracker.size})")
    tracker.counts += np.bincount(idx, minlength=tracker.size).astype(np.uint64)
    tracker.total = np.uint64(tracker.total + np.uint64(idx.size))
    return tracker


@dataclass(frozen=True)
class DiscrepancyVector:
    values: np.ndarray
    epoch: int = -1

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, np.float64))

    @property
    def size(self) -> int:
        return self.values.shape[0]


def _relative_frequencies(tracker, smoothing):
    counts = tracker.counts.astype(np.float64)
    if smoothing:
        return (counts + 1.0) / (float(tracker.total) + tracker.size)
    if tracker.total == 0:
        raise DataError("unsmoothed frequencies need a non-empty tracker")
    return counts / float(tracker.total)


def compute_delta_d(real: FrequencyTracker, fake: FrequencyTracker, smoothing=True) -> DiscrepancyVector:
    """``p_fake - p_real`` with Laplace-smoothed relative frequencies.

    ``smoothing=False`` drops the +1 pseudo-counts (test mode); the result
    is then exactly invariant to scaling both trackers by a common factor.
    """
    if real.size != fake.size:
        raise DimensionError(f"tracker sizes differ: {real.size} vs {fake.size}")
    return DiscrepancyVector(_relative_frequencies(fake, smoothing) - _relative_frequencies(real, smoothing))


def snapshot_delta_d(real: FrequencyTracker, fake: FrequencyTracker, epoch: int) -> DiscrepancyVector:
    """Frozen copy of the current discrepancy, stamped with ``epoch``."""
    return DiscrepancyVector(compute_delta_d(real, fake).values, int(epoch))
