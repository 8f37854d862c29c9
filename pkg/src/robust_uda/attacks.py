"""L-infinity attacks: projection, FGSM, PGD and a margin-loss PGD (CW-inf surrogate)."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import Model, grad_input
from .errors import ShapeError, ValidationError

ATTACK_NAMES = ("fgsm", "pgd10", "pgd20", "cwinf")


@dataclass(frozen=True)
class AttackBudget:
    """Perturbation budget.  ``alpha`` defaults to ``epsilon / 4``.

    ``epsilon == 0`` is accepted as the null attack.
    """

    epsilon: float
    alpha: float | None = None
    k_max: int = 10
    loss_variant: str = "ce"
    random_start: bool = False
    clip_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValidationError("epsilon must be non-negative")
        if self.alpha is None:
            # a subnormal epsilon would underflow to a zero step
            object.__setattr__(self, "alpha", self.epsilon / 4.0 or self.epsilon)
        if self.alpha < 0 or (self.epsilon > 0 and self.alpha == 0):
            raise ValidationError("alpha must be positive")
        if self.k_max < 1:
            raise ValidationError("k_max must be at least 1")
        if self.loss_variant not in ("ce", "margin"):
            raise ValidationError(f"unknown loss variant {self.loss_variant!r}")
        if self.clip_range is not None:
            lo, hi = self.clip_range
            if not lo < hi:
                raise ValidationError("clip_range needs lo < hi")
            object.__setattr__(self, "clip_range", (float(lo), float(hi)))


def named_attack(name: str, epsilon: float, alpha: float | None = None, clip_range=None) -> AttackBudget:
    """Budget for one of the evaluation attacks: fgsm, pgd10, pgd20, cwinf."""
    if name == "fgsm":
        return AttackBudget(epsilon, alpha=epsilon if epsilon > 0 else 0.0, k_max=1, clip_range=clip_range)
    if name in ("pgd10", "pgd20"):
        return AttackBudget(epsilon, alpha=alpha, k_max=int(name[3:]), clip_range=clip_range)
    if name == "cwinf":
        return AttackBudget(epsilon, alpha=alpha, k_max=20, loss_variant="margin", clip_range=clip_range)
    raise ValidationError(f"unknown attack {name!r}; expected one of {ATTACK_NAMES}")


def project_linf(x_adv, x, budget: AttackBudget) -> np.ndarray:
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise ShapeError(f"shape mismatch {x_adv.shape} vs {x.shape}")
    out = np.clip(x_adv, x - budget.epsilon, x + budget.epsilon)
    if budget.clip_range is not None:
        out = np.clip(out, *budget.clip_range)
    return out


def pgd(model: Model, x, target, budget: AttackBudget, rng: np.random.Generator | None = None) -> np.ndarray:
    """Iterated signed-gradient ascent with projection onto the epsilon ball.

    The gradient is taken at the current iterate.  Starts from the clean
    input unless ``budget.random_start`` is set, in which case ``rng`` is
    required.
    """
    x = np.asarray(x, dtype=np.float64)
    if budget.epsilon == 0:
        return project_linf(x, x, budget)
    if budget.random_start:
        if rng is None:
            raise ValidationError("random_start needs an rng")
        x_adv = project_linf(x + rng.uniform(-budget.epsilon, budget.epsilon, size=x.shape), x, budget)
    else:
        x_adv = x.copy()
    for _ in range(budget.k_max):
        g = grad_input(model, x_adv, target, budget.loss_variant)
        x_adv = project_linf(x_adv + budget.alpha * np.sign(g), x, budget)
    return x_adv


def fgsm(model: Model, x, target, budget: AttackBudget) -> np.ndarray:
    """One signed-gradient step of size epsilon from the clean input."""
    one_step = replace(budget, alpha=budget.epsilon if budget.epsilon > 0 else 0.0, k_max=1, random_start=False)
    return pgd(model, x, target, one_step)


def margin_pgd(model: Model, x, true_label, budget: AttackBudget, rng=None) -> np.ndarray:
    """PGD on the CW margin loss (kappa = 0); stops pushing once misclassified."""
    return pgd(model, x, true_label, replace(budget, loss_variant="margin"), rng)


def attack(model: Model, x, target, budget: AttackBudget, rng=None) -> np.ndarray:
    """Dispatch on the budget's loss variant."""
    if budget.loss_variant == "margin":
        return margin_pgd(model, x, target, budget, rng)
    return pgd(model, x, target, budget, rng)
