"""Synthetic open-set shift benchmark, CSV ingestion and mini-batching.

CSV layout (UTF-8, LF line endings, ``.`` as decimal point)::

    f0,f1,...,f{d-1},label[,gt]

``label`` is a signed integer; ``-1`` marks an unlabeled target row. The
optional ``gt`` column carries target ground truth for evaluation only.
Floats are written with ``repr`` so a write/read cycle is lossless.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, GeneratorError
from .numkit import Rng, as_matrix

UNLABELED = -1
MAX_REJECTIONS = 10_000


@dataclass
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        self.features = as_matrix(self.features, "features")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (len(self.features),):
            raise DataError("one label per row required")
        if len(self.labels) == 0:
            raise DataError("empty labeled set")
        if self.labels.min() < 0:
            raise DataError("source labels must be non-negative")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1
        missing = set(range(self.num_classes)) - set(self.labels.tolist())
        if missing:
            raise DataError(f"classes {sorted(missing)} have no source samples")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


class TargetSet:
    """Unlabeled target samples.

    Training code reads ``features`` and writes ``pseudo_labels``. Ground
    truth is kept under ``ground_truth`` for the evaluation module only.
    """

    def __init__(self, features, ground_truth=None):
        self.features = as_matrix(features, "features")
        n = len(self.features)
        if n == 0:
            raise DataError("empty target set")
        self.pseudo_labels = np.full(n, UNLABELED, dtype=np.int64)
        self.ground_truth = None
        if ground_truth is not None:
            gt = np.asarray(ground_truth, dtype=np.int64)
            if gt.shape != (n,):
                raise DataError("one ground-truth entry per row required")
            self.ground_truth = gt

    def __len__(self):
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def without_ground_truth(self) -> "TargetSet":
        return TargetSet(self.features.copy())


@dataclass
class ShiftSpec:
    """Gaussian class blobs plus an affine source-to-target shift.

    ``separation`` is the minimum centre distance in units of ``sigma``.
    The target is ``scale * R(angle) @ x + translation`` applied to draws
    from the source-style class distributions, where ``R`` rotates every
    coordinate plane (0,1), (2,3), ... by ``rotation_deg``.
    ``imbalance_ratio < 1`` shrinks per-class target counts geometrically
    from the first to the last class.
    """

    num_known: int = 4
    num_implicit: int = 3
    dim: int = 6
    sigma: float = 1.0
    separation: float = 6.0
    box: float = 8.0
    rotation_deg: float = 5.0
    translation: float = 1.0
    scale: float = 1.0
    source_per_class: int = 100
    target_per_class: int = 100
    imbalance_ratio: float = 1.0

    def validate(self):
        for name in ("num_known", "dim", "source_per_class", "target_per_class"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.num_implicit < 0:
            raise ContractError("num_implicit must be >= 0")
        if not self.sigma > 0:
            raise ContractError("sigma must be > 0")
        if not self.scale > 0 or not self.box > 0:
            raise ContractError("scale and box must be > 0")
        if not 0 < self.imbalance_ratio <= 1:
            raise ContractError("imbalance_ratio must lie in (0, 1]")
        return self

    @property
    def num_classes(self) -> int:
        return self.num_known + self.num_implicit


PRESETS = {
    "default": ShiftSpec(),
    "hard": ShiftSpec(separation=3.0),
}


def preset(name: str, **overrides) -> ShiftSpec:
    if name not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def sample_centers(spec: ShiftSpec, rng: Rng) -> np.ndarray:
    min_dist = spec.separation * spec.sigma
    centers = []
    rejections = 0
    while len(centers) < spec.num_classes:
        c = rng.uniform(-spec.box, spec.box, spec.dim)
        if all(np.linalg.norm(c - o) >= min_dist for o in centers):
            centers.append(c)
            continue
        rejections += 1
        if rejections > MAX_REJECTIONS:
            raise GeneratorError(
                f"could not place {spec.num_classes} centres {min_dist:g} apart; "
                "increase `box` or `dim`, or lower `separation`"
            )
    return np.array(centers)


def shift_matrix(spec: ShiftSpec) -> np.ndarray:
    a = np.deg2rad(spec.rotation_deg)
    rot = np.eye(spec.dim)
    for i in range(0, spec.dim - 1, 2):
        rot[i, i] = rot[i + 1, i + 1] = np.cos(a)
        rot[i, i + 1] = -np.sin(a)
        rot[i + 1, i] = np.sin(a)
    return spec.scale * rot


def target_counts(spec: ShiftSpec) -> list[int]:
    c = spec.num_classes
    if spec.imbalance_ratio == 1.0 or c == 1:
        return [spec.target_per_class] * c
    return [
        max(1, int(round(spec.target_per_class * spec.imbalance_ratio ** (i / (c - 1)))))
        for i in range(c)
    ]


def generate(spec: ShiftSpec, rng: Rng):
    """Returns ``(source, target)``; target holds every class, source only the known ones."""
    spec.validate()
    centers = sample_centers(spec, rng.child("centers"))
    noise = rng.child("noise")
    xs, ys = [], []
    for j in range(spec.num_known):
        xs.append(centers[j] + spec.sigma * noise.normal(size=(spec.source_per_class, spec.dim)))
        ys.append(np.full(spec.source_per_class, j))
    source = LabeledSet(np.vstack(xs), np.concatenate(ys), spec.num_known)

    a = shift_matrix(spec)
    t = np.full(spec.dim, spec.translation / np.sqrt(spec.dim))
    xt, yt = [], []
    for j, n in enumerate(target_counts(spec)):
        raw = centers[j] + spec.sigma * noise.normal(size=(n, spec.dim))
        xt.append(raw @ a.T + t)
        yt.append(np.full(n, j))
    order = rng.child("order").permutation(sum(len(y) for y in yt))
    target = TargetSet(np.vstack(xt)[order], np.concatenate(yt)[order])
    return source, target


def batches(n: int, batch_size: int, rng: Rng) -> list[np.ndarray]:
    """Shuffled partition of ``range(n)``; a trailing batch shorter than 2 is dropped."""
    if batch_size < 2:
        raise ContractError("batch_size must be >= 2")
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if out and len(out[-1]) < 2:
        out.pop()
    return out


# -- CSV ------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def dumps_csv(features, labels, gt=None) -> str:
    features = as_matrix(features, "features")
    d = features.shape[1]
    header = [f"f{i}" for i in range(d)] + ["label"] + (["gt"] if gt is not None else [])
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for i, row in enumerate(features):
        cells = [_fmt(v) for v in row] + [str(int(labels[i]))]
        if gt is not None:
            cells.append(str(int(gt[i])))
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def write_csv(path, dataset) -> Path:
    """Writes a ``LabeledSet`` or a ``TargetSet`` (labels ``-1``, plus ``gt`` if known)."""
    path = Path(path)
    if isinstance(dataset, LabeledSet):
        text = dumps_csv(dataset.features, dataset.labels)
    else:
        labels = np.full(len(dataset), UNLABELED)
        text = dumps_csv(dataset.features, labels, dataset.ground_truth)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def load_csv(path, schema: str = "auto"):
    """Parse a dataset file.

    ``schema`` is ``"source"``, ``"target"`` or ``"auto"`` (target iff any
    label is -1). Errors cite the 1-based file line.
    """
    if schema not in ("auto", "source", "target"):
        raise ContractError(f"unknown schema {schema!r}")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError("empty file", line=1)
    header = [h.strip() for h in rows[0]]
    has_gt = header[-1:] == ["gt"]
    feat_cols = header[:-2] if has_gt else header[:-1]
    if (has_gt and header[-2:-1] != ["label"]) or (not has_gt and header[-1:] != ["label"]):
        raise DataError("header must end with `label` (optionally followed by `gt`)", line=1)
    expected = [f"f{i}" for i in range(len(feat_cols))]
    if not feat_cols or feat_cols != expected:
        bad = next((h for h, e in zip(feat_cols, expected) if h != e), None)
        raise DataError(f"unknown or misordered column {bad!r}; expected f0..f{{d-1}}", line=1)

    d = len(feat_cols)
    width = len(header)
    feats, labels, gts = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataError(f"expected {width} cells, found {len(row)}", line=lineno)
        try:
            vals = [float(v) for v in row[:d]]
        except ValueError as exc:
            raise DataError(f"non-numeric feature ({exc})", line=lineno) from None
        if not all(np.isfinite(vals)):
            raise DataError("non-finite feature value", line=lineno)
        try:
            labels.append(int(row[d]))
            if has_gt:
                gts.append(int(row[d + 1]))
        except ValueError:
            raise DataError("labels must be integers", line=lineno) from None
        feats.append(vals)
    if not feats:
        raise DataError("no data rows", line=2)

    x = np.array(feats, dtype=np.float64)
    y = np.array(labels, dtype=np.int64)
    is_target = schema == "target" or (schema == "auto" and np.any(y == UNLABELED))
    if is_target:
        return TargetSet(x, np.array(gts, dtype=np.int64) if has_gt else None)
    if np.any(y < 0):
        raise DataError("source file contains negative labels")
    return LabeledSet(x, y)
