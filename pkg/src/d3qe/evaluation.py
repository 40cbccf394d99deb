"""Accuracy / average precision, JSON evaluation reports, robustness sweeps
and the codebook activation heatmap export."""

import datetime as _dt
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SCHEMA = 1
THRESHOLD = 0.5


def _binary_labels(labels):
    arr = np.asarray(labels)
    if arr.dtype.kind in "US":
        bad = set(arr.tolist()) - {"real", "fake"}
        if bad:
            raise ConfigError(f"labels must be 'real' or 'fake', got {sorted(bad)}")
        return (arr == "fake").astype(np.int64)
    arr = arr.astype(np.int64)
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ConfigError("labels must be binary (0 = real, 1 = fake)")
    return arr


def accuracy_at_threshold(scores, labels, threshold=THRESHOLD):
    """Fraction of samples where ``score > threshold`` agrees with ``label == fake``.

    A score exactly at the threshold counts as a "real" prediction.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = _binary_labels(labels)
    if scores.size == 0:
        raise ConfigError("accuracy of an empty score list is undefined")
    if scores.shape != y.shape:
        raise ConfigError(f"{scores.size} scores for {y.size} labels")
    return float(np.mean((scores > threshold) == (y == 1)))


def average_precision(scores, labels):
    """Step-wise area under the precision-recall curve.

    Samples are ranked by descending score; ties keep their input order.
    ``AP = sum_k (R_k - R_{k-1}) P_k``, which only moves at positive hits.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = _binary_labels(labels)
    if scores.shape != y.shape:
        raise ConfigError(f"{scores.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ConfigError("average precision needs at least one positive (fake) label")
    order = np.argsort(-scores, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    return float(precision[hits == 1].sum() / n_pos)


def report_timestamp():
    """UTC ISO-8601; honours SOURCE_DATE_EPOCH so reruns can be byte-identical."""
    sde = os.environ.get("SOURCE_DATE_EPOCH")
    if sde:
        when = _dt.datetime.fromtimestamp(int(sde), tz=_dt.timezone.utc)
    else:
        when = _dt.datetime.now(tz=_dt.timezone.utc).replace(microsecond=0)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


def _metrics(probs, y):
    out = {"count": int(len(y)), "real": int((y == 0).sum()), "fake": int((y == 1).sum()),
           "accuracy": accuracy_at_threshold(probs, y) if len(y) else None,
           "average_precision": average_precision(probs, y) if (y == 1).any() else None}
    return out


@dataclass
class EvalReport:
    per_source: dict
    overall: dict
    perturbation: dict = None
    config: dict = field(default_factory=dict)
    timestamp: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict)
    schema: int = SCHEMA

    def to_dict(self):
        return {"schema": self.schema, "timestamp": self.timestamp, "seed": self.seed,
                "perturbation": self.perturbation, "overall": self.overall,
                "per_source": self.per_source, "config": self.config, "extra": self.extra}

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != SCHEMA:
            raise ConfigError(f"unsupported report schema {d.get('schema')!r}")
        return cls(per_source=d["per_source"], overall=d["overall"], perturbation=d.get("perturbation"),
                   config=d.get("config", {}), timestamp=d.get("timestamp", ""), seed=d.get("seed", 0),
                   extra=d.get("extra", {}), schema=d["schema"])

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def build_report(probs, labels, tags, perturbation=None, config=None, seed=0, extra=None):
    """Per-source-tag and overall metrics; ``overall`` also holds the mean
    accuracy / AP across tags (tags without positives have no AP)."""
    probs = np.asarray(probs, dtype=np.float64)
    y = _binary_labels(labels)
    tags = list(tags)
    per_source = {}
    for tag in sorted(set(tags)):
        mask = np.array([t == tag for t in tags])
        per_source[tag] = _metrics(probs[mask], y[mask])
    overall = _metrics(probs, y)
    accs = [m["accuracy"] for m in per_source.values() if m["accuracy"] is not None]
    aps = [m["average_precision"] for m in per_source.values() if m["average_precision"] is not None]
    overall["mean_accuracy"] = float(np.mean(accs)) if accs else None
    overall["mean_average_precision"] = float(np.mean(aps)) if aps else None
    return EvalReport(per_source, overall, perturbation, dict(config or {}), report_timestamp(),
                      int(seed), dict(extra or {}))


def evaluate_dataset(model, data, perturbation=None, config=None, seed=0, extra=None):
    """Score a SampleSet (optionally perturbed, real and fake alike) and report."""
    from .data import apply_perturbation
    from .detector import score_images, sigmoid

    images = data.images if perturbation is None else apply_perturbation(data.images, perturbation)
    probs = sigmoid(score_images(images, data.ids, model))
    desc = None if perturbation is None else perturbation.describe()
    return build_report(np.atleast_1d(probs), data.labels, data.tags, desc, config, seed, extra)


def robustness_sweep(model, data, kind, grid, test_mode=False, config=None, seed=0):
    """One report per grid point; ``kind`` is ``jpeg`` (grid of qualities)
    or ``crop`` (grid of factors)."""
    from .data import PerturbationSpec

    reports = []
    for value in grid:
        spec = (PerturbationSpec("jpeg", quality=int(value), test_mode=test_mode) if kind == "jpeg"
                else PerturbationSpec(kind, factor=float(value), test_mode=test_mode))
        reports.append(evaluate_dataset(model, data, spec, config, seed))
    return reports


# ---------------------------------------------------------------------------
# heatmap

@dataclass
class HeatmapExport:
    grid: tuple
    real: np.ndarray
    fake: np.ndarray
    ratio: np.ndarray

    def planes(self):
        return {"real": self.real, "fake": self.fake, "ratio": self.ratio}


def _normalized_log(counts):
    v = np.log1p(counts.astype(np.float64))
    lo, hi = v.min(), v.max()
    return np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)


def export_activation_heatmap(real, fake, first_m=256, out_dir=None, prefix="heatmap"):
    """Planes over the first ``m`` codebook entries laid out row-major on a
    ``sqrt(m) x sqrt(m)`` grid: min-max normalized ``log(1 + count)`` per
    tracker, and ``log((fake + 1) / (real + 1))``. With ``out_dir`` set,
    writes ``<prefix>_{real,fake,ratio}.csv`` with ``row,col,value`` columns.
    """
    if real.size != fake.size:
        raise ConfigError("trackers differ in size")
    if not 1 <= first_m <= real.size:
        raise ConfigError(f"first-m must be in [1, {real.size}], got {first_m}")
    g = math.isqrt(first_m)
    if g * g != first_m:
        raise ConfigError(f"first-m must be a perfect square, got {first_m}")
    rc = real.counts[:first_m]
    fc = fake.counts[:first_m]
    ratio = np.log((fc.astype(np.float64) + 1.0) / (rc.astype(np.float64) + 1.0))
    export = HeatmapExport((g, g), _normalized_log(rc).reshape(g, g), _normalized_log(fc).reshape(g, g),
                           ratio.reshape(g, g))
    if out_dir is not None:
        write_heatmap_csv(export, out_dir, prefix)
    return export


def write_heatmap_csv(export: HeatmapExport, out_dir, prefix="heatmap"):
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, plane in export.planes().items():
        path = os.path.join(out_dir, f"{prefix}_{name}.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("row,col,value\n")
            for (r, c), v in np.ndenumerate(plane):
                fh.write(f"{r},{c},{float(v)!r}\n")
        paths.append(path)
    return paths


def read_heatmap_csv(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "row,col,value":
        raise ConfigError(f"{path}: missing row,col,value header")
    rows = [ln.split(",") for ln in lines[1:]]
    g = math.isqrt(len(rows))
    plane = np.zeros((g, g))
    for r, c, v in rows:
        plane[int(r), int(c)] = float(v)
    return plane
