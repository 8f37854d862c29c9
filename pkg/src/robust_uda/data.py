"""Synthetic domain-shift datasets and their CSV file format.

File layout::

    # grid 8 8 1            (optional sidecar line)
    feature_0,...,feature_{d-1},label,domain
    0.12,...,3,s            source rows (labeled)
    0.40,...,-1,t           target training rows (unlabeled)
    0.33,...,2,t            held-out target rows (labels for evaluation only)
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.datasets import make_moons

from .augment import GridShape
from .errors import SchemaError, ValidationError

UNLABELED = -1
TARGET_TRAIN_FRACTION = 0.7
# noiseless centroid of the sklearn moons; rotation is about the data centre
MOONS_CENTER = np.array([0.5, 0.25])


@dataclass
class DomainPair:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    n_classes: int
    grid: GridShape | None = None
    clip_range: tuple[float, float] | None = None
    input_scale: float = field(default=0.0)

    def __post_init__(self):
        self.source_x = np.asarray(self.source_x, dtype=np.float64)
        self.source_y = np.asarray(self.source_y, dtype=np.int64)
        self.target_x = np.asarray(self.target_x, dtype=np.float64)
        self.eval_x = np.asarray(self.eval_x, dtype=np.float64)
        self.eval_y = np.asarray(self.eval_y, dtype=np.int64)
        d = self.source_x.shape[1]
        for name in ("target_x", "eval_x"):
            if getattr(self, name).shape[1:] != (d,):
                raise ValidationError(f"{name} has dimension {getattr(self, name).shape[1:]}, expected {d}")
        if len(self.source_y) != len(self.source_x) or len(self.eval_y) != len(self.eval_x):
            raise ValidationError("labels and rows disagree in length")
        if np.any(self.source_y < 0) or np.any(self.source_y >= self.n_classes):
            raise ValidationError("source rows must all carry a class label")
        if self.grid is not None and self.grid.size != d:
            raise ValidationError(f"grid {self.grid} does not match dimension {d}")
        if not self.input_scale:
            self.input_scale = 1.0 if self.clip_range is not None else float(self.source_x.std(axis=0).mean())

    @property
    def dim(self) -> int:
        return self.source_x.shape[1]


def _split_target(x, y, rng):
    order = rng.permutation(len(x))
    cut = int(round(TARGET_TRAIN_FRACTION * len(x)))
    return x[order[:cut]], x[order[cut:]], y[order[cut:]]


def _moons(n, noise_sd, rng):
    x, y = make_moons(n_samples=n, noise=noise_sd, random_state=int(rng.integers(2**31 - 1)))
    return x - MOONS_CENTER, y.astype(np.int64)


def rotate(x, degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    r = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return x @ r.T


def gen_two_moons_shift(n: int, rotation_deg: float, noise_sd: float, rng: np.random.Generator) -> DomainPair:
    """Centered two moons as source; an independent draw rotated by ``rotation_deg`` as target."""
    if n < 2 or n % 2:
        raise ValidationError(f"n must be a positive even number, got {n}")
    if not 0 <= rotation_deg <= 90:
        raise ValidationError("rotation_deg must lie in [0, 90]")
    sx, sy = _moons(n, noise_sd, rng)
    tx, ty = _moons(n, noise_sd, rng)
    tx = rotate(tx, rotation_deg)
    target_x, eval_x, eval_y = _split_target(tx, ty, rng)
    return DomainPair(sx, sy, target_x, eval_x, eval_y, n_classes=2)


def gen_gaussian_shift(
    n: int, d: int, mean_shift: float, rng: np.random.Generator, separation: float = 2.0
) -> DomainPair:
    """Two unit-variance Gaussians at ``±separation/2`` along the diagonal.

    The target is the same mixture translated by ``mean_shift`` along the
    first coordinate.
    """
    if d < 1 or n < 2:
        raise ValidationError(f"invalid dimensions n={n}, d={d}")
    mu = np.full(d, separation / (2.0 * np.sqrt(d)))

    def draw(shift):
        y = np.repeat([0, 1], [n // 2, n - n // 2])
        x = rng.standard_normal((n, d)) + np.where(y[:, None] == 1, mu, -mu)
        x[:, 0] += shift
        order = rng.permutation(n)
        return x[order], y[order]

    sx, sy = draw(0.0)
    tx, ty = draw(mean_shift)
    target_x, eval_x, eval_y = _split_target(tx, ty, rng)
    return DomainPair(sx, sy, target_x, eval_x, eval_y, n_classes=2)


def grid_templates(shape: GridShape) -> np.ndarray:
    """Four binary patterns: horizontal bar, vertical bar, top-left and bottom-right corners."""
    h, w = shape.h, shape.w
    t = np.zeros((4, h, w))
    t[0, h // 2 - 1 : h // 2 + 1, :] = 1.0
    t[1, :, w // 2 - 1 : w // 2 + 1] = 1.0
    t[2, :2, : w // 2] = 1.0
    t[2, : h // 2, :2] = 1.0
    t[3, h - 2 :, w // 2 :] = 1.0
    t[3, h // 2 :, w - 2 :] = 1.0
    return np.repeat(t[..., None], shape.c, axis=3).reshape(4, -1)


def gen_grid_shift(
    n: int,
    shape: GridShape,
    style_shift: float,
    rng: np.random.Generator,
    noise_sd: float = 0.1,
) -> DomainPair:
    """Noisy templates; the target blends each image toward its inversion by ``style_shift``."""
    if not 0.0 <= style_shift <= 1.0:
        raise ValidationError("style_shift must lie in [0, 1]")
    templates = grid_templates(shape)

    def draw(shift):
        y = rng.integers(0, 4, size=n)
        x = templates[y]
        x = (1.0 - shift) * x + shift * (1.0 - x)
        if noise_sd > 0:
            x = x + noise_sd * rng.standard_normal(x.shape)
        return np.clip(x, 0.0, 1.0), y

    sx, sy = draw(0.0)
    tx, ty = draw(style_shift)
    target_x, eval_x, eval_y = _split_target(tx, ty, rng)
    return DomainPair(sx, sy, target_x, eval_x, eval_y, n_classes=4, grid=shape, clip_range=(0.0, 1.0))


# ---------------------------------------------------------------- CSV format

def save_dataset(pair: DomainPair, path) -> Path:
    path = Path(path)
    d = pair.dim
    with open(path, "w", newline="") as fh:
        if pair.grid is not None:
            fh.write(f"# grid {pair.grid.h} {pair.grid.w} {pair.grid.c}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"feature_{i}" for i in range(d)] + ["label", "domain"])
        blocks = (
            (pair.source_x, pair.source_y, "s"),
            (pair.target_x, np.full(len(pair.target_x), UNLABELED), "t"),
            (pair.eval_x, pair.eval_y, "t"),
        )
        for xs, ys, tag in blocks:
            for row, label in zip(xs, ys):
                writer.writerow([repr(float(v)) for v in row] + [int(label), tag])
    return path


def load_dataset(path, n_classes: int | None = None) -> DomainPair:
    """Inverse of :func:`save_dataset`; raises SchemaError on malformed files."""
    path = Path(path)
    grid = None
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "grid":
                if len(parts) != 4:
                    raise SchemaError(f"malformed grid sidecar line {line!r}")
                grid = GridShape(*(int(p) for p in parts[1:]))
            continue
        if line.strip():
            body.append(line)
    if not body:
        raise SchemaError(f"{path}: empty file")
    rows = list(csv.reader(body))
    header = rows[0]
    for col in ("label", "domain"):
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")
    if header[-2:] != ["label", "domain"]:
        raise SchemaError(f"{path}: header must end with 'label,domain'")
    d = len(header) - 2
    expected = [f"feature_{i}" for i in range(d)]
    if header[:d] != expected:
        raise SchemaError(f"{path}: feature columns must be named feature_0..feature_{d - 1}")

    groups = {"s": ([], []), "t": ([], []), "e": ([], [])}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != d + 2:
            raise SchemaError(f"{path}:{lineno}: expected {d + 2} fields, got {len(row)}")
        try:
            feats = [float(v) for v in row[:d]]
            label = int(row[d])
        except ValueError as exc:
            raise SchemaError(f"{path}:{lineno}: {exc}") from None
        tag = row[d + 1]
        if tag == "s":
            if label == UNLABELED:
                raise SchemaError(f"{path}:{lineno}: source rows must be labeled")
            key = "s"
        elif tag == "t":
            key = "t" if label == UNLABELED else "e"
        else:
            raise SchemaError(f"{path}:{lineno}: unknown domain tag {tag!r}")
        groups[key][0].append(feats)
        groups[key][1].append(label)

    def arr(key):
        xs, ys = groups[key]
        return np.array(xs, dtype=np.float64).reshape(-1, d), np.array(ys, dtype=np.int64)

    sx, sy = arr("s")
    tx, _ = arr("t")
    ex, ey = arr("e")
    if n_classes is None:
        labels = np.concatenate([sy, ey])
        n_classes = int(labels.max()) + 1 if labels.size else 2
    clip = (0.0, 1.0) if grid is not None else None
    return DomainPair(sx, sy, tx, ex, ey, n_classes=max(n_classes, 2), grid=grid, clip_range=clip)
