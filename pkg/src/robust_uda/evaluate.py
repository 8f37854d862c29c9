"""Clean/robust/pseudo-label accuracy, feature distance and CSV outputs.

Robust metrics attack the true label; training attacks use pseudo-labels.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackBudget, attack
from .core import Model, forward_features, predict
from .errors import ValidationError

METRICS_HEADER = (
    "epoch",
    "scheme",
    "clean_acc",
    "robust_pgd20",
    "robust_fgsm",
    "robust_cwinf",
    "pseudo_acc",
    "at_loss",
    "meta_loss",
    "feature_distance",
)
CSV_ATTACKS = ("pgd20", "fgsm", "cwinf")


def _check(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    if len(x) != len(y):
        raise ValidationError("inputs and labels differ in length")
    return x, y


def clean_accuracy(model: Model, x, y) -> float:
    x, y = _check(x, y)
    return float(np.mean(predict(model, x) == y))


def robust_accuracy(model: Model, x, y, budget: AttackBudget, rng=None) -> float:
    x, y = _check(x, y)
    x_adv = attack(model, x, y, budget, rng)
    return float(np.mean(predict(model, x_adv) == y))


def pseudo_label_accuracy(teacher: Model, x, y) -> float:
    """Agreement of the teacher's hard pseudo-labels with held-out target labels."""
    return clean_accuracy(teacher, x, y)


def feature_distance(model: Model, x, y, budget: AttackBudget, rng=None) -> float:
    """Mean L2 distance between clean and adversarial feature vectors."""
    x, y = _check(x, y)
    x_adv = attack(model, x, y, budget, rng)
    diff = forward_features(model, x) - forward_features(model, x_adv)
    return float(np.mean(np.sqrt(np.sum(diff * diff, axis=1))))


def export_embeddings(model: Model, x, y, budget: AttackBudget, path) -> Path:
    """Write clean and adversarial feature rows as ``f_0..f_{k-1},label,kind``."""
    x, y = _check(x, y)
    x_adv = attack(model, x, y, budget)
    f_clean = forward_features(model, x)
    f_adv = forward_features(model, x_adv)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f_{i}" for i in range(f_clean.shape[1])] + ["label", "kind"])
        for feats, kind in ((f_clean, "clean"), (f_adv, "adv")):
            for row, label in zip(feats, y):
                w.writerow([repr(float(v)) for v in row] + [int(label), kind])
    return path


def load_embeddings(path):
    """Returns (features, labels, kinds)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    feats = np.array([[float(v) for v in r[:-2]] for r in body], dtype=np.float64)
    labels = np.array([int(r[-2]) for r in body])
    kinds = [r[-1] for r in body]
    return feats, labels, kinds


@dataclass
class MetricsRecord:
    epoch: int
    scheme: str
    clean_acc: float
    robust_acc: dict = field(default_factory=dict)
    pseudo_acc: float = math.nan
    at_loss: float = math.nan
    meta_loss: float = math.nan
    feature_distance: float = math.nan

    def __post_init__(self):
        accs = [self.clean_acc, *self.robust_acc.values()]
        if not math.isnan(self.pseudo_acc):
            accs.append(self.pseudo_acc)
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise ValidationError("accuracies must lie in [0, 1]")
        if self.feature_distance < 0:
            raise ValidationError("feature distance must be non-negative")

    def csv_row(self) -> list[str]:
        def fmt(v, digits):
            return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"

        return [
            str(self.epoch),
            self.scheme,
            fmt(self.clean_acc, 4),
            *(fmt(self.robust_acc.get(name), 4) for name in CSV_ATTACKS),
            fmt(self.pseudo_acc, 4),
            fmt(self.at_loss, 6),
            fmt(self.meta_loss, 6),
            fmt(self.feature_distance, 6),
        ]


def evaluate_model(
    model: Model,
    x,
    y,
    attacks: dict[str, AttackBudget],
    *,
    epoch: int,
    scheme: str,
    teacher: Model | None = None,
    distance_attack: str = "pgd20",
    at_loss=math.nan,
    meta_loss=math.nan,
) -> MetricsRecord:
    """All per-epoch metrics for ``model`` on the held-out target split.

    The pseudo-label column scores ``teacher`` (or the model itself when the
    scheme has no separate teacher).
    """
    robust = {name: robust_accuracy(model, x, y, b) for name, b in attacks.items()}
    dist_budget = attacks.get(distance_attack) or next(iter(attacks.values()), None)
    dist = feature_distance(model, x, y, dist_budget) if dist_budget is not None else math.nan
    return MetricsRecord(
        epoch=epoch,
        scheme=scheme,
        clean_acc=clean_accuracy(model, x, y),
        robust_acc=robust,
        pseudo_acc=pseudo_label_accuracy(teacher if teacher is not None else model, x, y),
        at_loss=float(at_loss),
        meta_loss=float(meta_loss),
        feature_distance=dist,
    )


def write_metrics_csv(records, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow(r.csv_row())
    return path


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
