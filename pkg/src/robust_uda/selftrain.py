"""Adversarial self-training with a meta-updated teacher, plus the baseline schemes.

Teacher ``G_s`` labels target data; student ``G_t`` is adversarially trained
on those labels.  The teacher is then nudged by how well the student, after
one (virtual) update, classifies labeled source data.

Meta-gradient (unrolled mode).  With soft labels ``p = softmax(G_s(x_t))`` the
student gradient is ``g_at = (1/B) sum_i J_t,i^T (q_i - p_i)`` and the virtual
update is ``theta_t' = theta_t - lr * g_at``.  Differentiating
``L_meta(theta_t')`` through ``p`` gives::

    dL_meta/dtheta_s = (lr/B) sum_i J_s,i^T (diag(p_i) - p_i p_i^T) (J_t,i g)

where ``g = grad L_meta(theta_t')`` and ``J`` are logit Jacobians.  ``J_t g`` is a
forward-mode product and the outer sum one reverse pass through the teacher,
so no second derivatives are formed.  The attack output is a constant.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .attacks import AttackBudget, pgd
from .augment import GridShape, standard_aug
from .core import (
    Arch,
    Model,
    clone_model,
    forward_logits,
    grad_params,
    init_model,
    logits_jvp,
    logits_vjp,
    loss_and_grad_params,
    require_smooth,
    rng_for,
    softmax,
)
from .data import DomainPair
from .errors import DivergenceError, ValidationError
from .optim import Adam
from .uda import MddConfig, pretrain_source

log = logging.getLogger(__name__)

META_MODES = ("unrolled", "dot-approx")
TARGET_MODES = ("soft", "hard")

# (epoch, student, teacher, at_loss, meta_loss) -> None
SelfTrainHook = Callable[[int, Model, Model, float, float], None]
# (epoch, model) -> None
ModelHook = Callable[[int, Model], None]


@dataclass(frozen=True)
class SelfTrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.0015
    betas: tuple[float, float] = (0.9, 0.999)
    meta_lr: float = 0.001
    budget: AttackBudget = field(default_factory=lambda: AttackBudget(8 / 255, k_max=10, clip_range=(0.0, 1.0)))
    meta_mode: str = "unrolled"
    target_mode: str = "soft"
    teacher_period: int = 1
    augment: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("selftrain epochs must be >= 1")
        if self.lr < 0 or self.meta_lr < 0:
            raise ValidationError("learning rates must be non-negative")
        if self.batch_size < 1 or self.teacher_period < 1:
            raise ValidationError("batch_size and teacher_period must be >= 1")
        if self.meta_mode not in META_MODES:
            raise ValidationError(f"meta_mode must be one of {META_MODES}")
        if self.target_mode not in TARGET_MODES:
            raise ValidationError(f"target_mode must be one of {TARGET_MODES}")


@dataclass
class PseudoLabels:
    soft: np.ndarray
    hard: np.ndarray

    def target(self, mode: str):
        return self.soft if mode == "soft" else self.hard


def pseudo_labels(teacher: Model, x_t) -> PseudoLabels:
    soft = softmax(np.atleast_2d(forward_logits(teacher, x_t)))
    return PseudoLabels(soft=soft, hard=np.argmax(soft, axis=1))


@dataclass
class AtStep:
    loss: float
    x_adv: np.ndarray
    grad: np.ndarray


def at_step(student: Model, x_t, pl: PseudoLabels, budget: AttackBudget, optimizer, target_mode="soft") -> AtStep:
    """Attack the pseudo-labels, then take one optimizer step on the adversarial loss.

    Updates ``student`` in place.
    """
    target = pl.target(target_mode)
    x_adv = pgd(student, x_t, target, budget)
    loss, g = loss_and_grad_params(student, x_adv, target)
    if not np.isfinite(loss) or not np.all(np.isfinite(g)):
        raise DivergenceError("at_step", -1, loss)
    optimizer.step(student.params, g)
    return AtStep(loss=loss, x_adv=x_adv, grad=g)


@dataclass
class MetaStep:
    meta_loss: float
    grad: np.ndarray


def meta_gradient(
    teacher: Model,
    student: Model,
    x_t,
    x_adv,
    x_s,
    y_s,
    student_lr: float,
    mode: str = "unrolled",
    target_mode: str = "soft",
) -> MetaStep:
    """Teacher gradient of the source loss after one virtual student step.

    ``student`` holds the pre-update parameters theta_t.  Unrolled mode always
    differentiates through soft pseudo-labels; dot-approx mode uses the
    student gradient for ``target_mode`` and the teacher's hard labels.
    """
    if mode not in META_MODES:
        raise ValidationError(f"meta_mode must be one of {META_MODES}")
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    x_adv = np.atleast_2d(np.asarray(x_adv, dtype=np.float64))
    pl = pseudo_labels(teacher, x_t)
    n = len(x_t)

    if mode == "unrolled":
        hint = "; use meta_mode = dot-approx instead"
        require_smooth(teacher, "unrolled meta-gradient", hint)
        require_smooth(student, "unrolled meta-gradient", hint)
        g_at = grad_params(student, x_adv, pl.soft)
    else:
        g_at = grad_params(student, x_adv, pl.target(target_mode))

    virtual = Model(student.arch, student.params - student_lr * g_at)
    meta_loss, g = loss_and_grad_params(virtual, x_s, y_s)

    if mode == "unrolled":
        u = logits_jvp(student, x_adv, g)
        p = pl.soft
        w = p * u - p * np.sum(p * u, axis=1, keepdims=True)
        grad = (student_lr / n) * logits_vjp(teacher, x_t, w)
    else:
        h = student_lr * float(np.dot(g, g_at))
        grad = h * grad_params(teacher, x_t, pl.hard)
    return MetaStep(meta_loss=meta_loss, grad=grad)


def meta_step(teacher: Model, student: Model, x_t, x_adv, x_s, y_s, cfg: SelfTrainConfig) -> MetaStep:
    """Compute the meta-gradient and apply one plain descent step to the teacher."""
    res = meta_gradient(teacher, student, x_t, x_adv, x_s, y_s, cfg.lr, cfg.meta_mode, cfg.target_mode)
    if not np.isfinite(res.meta_loss) or not np.all(np.isfinite(res.grad)):
        raise DivergenceError("meta_step", -1, res.meta_loss)
    if cfg.meta_lr:
        teacher.params -= cfg.meta_lr * res.grad
    return res


def _self_train(
    pair: DomainPair,
    teacher: Model,
    cfg: SelfTrainConfig,
    seed: int,
    meta: bool,
    on_epoch: SelfTrainHook | None,
):
    teacher = clone_model(teacher)
    student = clone_model(teacher)
    opt = Adam(cfg.lr, cfg.betas)
    batch_rng = rng_for(seed, "selftrain")
    source_rng = rng_for(seed, "meta")
    aug_rng = rng_for(seed, "aug")
    x_all = pair.target_x
    n_t, bs = len(x_all), cfg.batch_size
    if n_t == 0:
        raise ValidationError("self-training needs unlabeled target data")

    for epoch in range(1, cfg.epochs + 1):
        order = batch_rng.permutation(n_t)
        at_losses = []
        for start in range(0, n_t, bs):
            x_t = x_all[order[start : start + bs]]
            if cfg.augment and pair.grid is not None:
                x_t = standard_aug(x_t, pair.grid, aug_rng)
            before = student.params.copy()
            pl = pseudo_labels(teacher, x_t)
            try:
                step = at_step(student, x_t, pl, cfg.budget, opt, cfg.target_mode)
            except DivergenceError as exc:
                raise DivergenceError("selftrain", epoch, exc.value) from None
            at_losses.append(step.loss)
        meta_loss = math.nan
        if meta and epoch % cfg.teacher_period == 0:
            idx = source_rng.choice(len(pair.source_x), size=min(bs, len(pair.source_x)), replace=False)
            try:
                res = meta_step(
                    teacher, Model(student.arch, before), x_t, step.x_adv, pair.source_x[idx], pair.source_y[idx], cfg
                )
            except DivergenceError as exc:
                raise DivergenceError("meta_step", epoch, exc.value) from None
            meta_loss = res.meta_loss
        at_loss = float(np.mean(at_losses))
        log.debug("selftrain epoch %d at_loss %.4f meta_loss %.4f", epoch, at_loss, meta_loss)
        if on_epoch is not None:
            on_epoch(epoch, student, teacher, at_loss, meta_loss)
    return student, teacher


def run_uda(pair: DomainPair, arch: Arch, mdd: MddConfig, seed: int, on_epoch: ModelHook | None = None) -> Model:
    """Natural UDA baseline: the MDD pre-trained source model itself."""
    model, _ = pretrain_source(pair.source_x, pair.source_y, pair.target_x, arch, mdd, seed, pair.grid, on_epoch)
    return model


def run_srouda(
    pair: DomainPair,
    arch: Arch,
    mdd: MddConfig,
    cfg: SelfTrainConfig,
    seed: int,
    teacher: Model | None = None,
    on_epoch: SelfTrainHook | None = None,
):
    """Meta self-training; returns ``(student, teacher)``.

    ``teacher`` is the pre-trained source model; when omitted it is produced
    by MDD pre-training.
    """
    if teacher is None:
        teacher = run_uda(pair, arch, mdd, seed)
    return _self_train(pair, teacher, cfg, seed, meta=True, on_epoch=on_epoch)


def run_uda_at(
    pair: DomainPair,
    arch: Arch,
    mdd: MddConfig,
    cfg: SelfTrainConfig,
    seed: int,
    teacher: Model | None = None,
    on_epoch: SelfTrainHook | None = None,
):
    """Naive self-training: frozen teacher, adversarially trained student."""
    if teacher is None:
        teacher = run_uda(pair, arch, mdd, seed)
    return _self_train(pair, teacher, cfg, seed, meta=False, on_epoch=on_epoch)


def run_at_uda(
    pair: DomainPair,
    arch: Arch,
    mdd: MddConfig,
    cfg: SelfTrainConfig,
    seed: int,
    on_epoch: ModelHook | None = None,
) -> Model:
    """Adversarialize the source against a supervised model, then run MDD on it."""
    supervised, _ = pretrain_source(pair.source_x, pair.source_y, pair.target_x[:0], arch, replace(mdd, eta=0.0), seed)
    adv_source = pgd(supervised, pair.source_x, pair.source_y, cfg.budget)
    model, _ = pretrain_source(adv_source, pair.source_y, pair.target_x, arch, mdd, seed, pair.grid, on_epoch)
    return model


def run_source_only_at(
    pair: DomainPair,
    arch: Arch,
    cfg: SelfTrainConfig,
    seed: int,
    epochs: int | None = None,
    on_epoch: ModelHook | None = None,
) -> Model:
    """Standard adversarial training on labeled source data only."""
    model = init_model(arch, rng_for(seed, "init"))
    opt = Adam(cfg.lr, cfg.betas)
    batch_rng = rng_for(seed, "batch")
    n, bs = len(pair.source_x), cfg.batch_size
    for epoch in range(1, (epochs or cfg.epochs) + 1):
        order = batch_rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            xs, ys = pair.source_x[idx], pair.source_y[idx]
            x_adv = pgd(model, xs, ys, cfg.budget)
            loss, g = loss_and_grad_params(model, x_adv, ys)
            if not np.isfinite(loss):
                raise DivergenceError("source-at", epoch, loss)
            opt.step(model.params, g)
        if on_epoch is not None:
            on_epoch(epoch, model)
    return model
