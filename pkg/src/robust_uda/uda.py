"""Source-model pre-training with margin disparity discrepancy (MDD)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .augment import GridShape, RmaConfig, masked_copies
from .core import (
    Arch,
    Model,
    _as_batch,
    _backward,
    _forward,
    _loss_terms,
    forward_features,
    forward_logits,
    grad_input,
    grad_params,
    head_of,
    init_model,
    linear_head,
    logits_vjp,
    loss_and_grad_params,
    predict,
    rng_for,
    softmax,
)
from .errors import DivergenceError, ShapeError, ValidationError
from .optim import SGD

log = logging.getLogger(__name__)

EpochHook = Callable[[int, Model], None]


@dataclass(frozen=True)
class MddConfig:
    gamma: float = 4.0
    eta: float = 0.1
    epochs: int = 20
    lr: float = 0.004
    momentum: float = 0.0
    batch_size: int = 32
    soft_targets: bool = False
    eta_warmup: bool = True
    rma: RmaConfig = field(default_factory=RmaConfig)

    def __post_init__(self):
        if self.gamma < 1:
            raise ValidationError("gamma must be >= 1")
        if self.eta < 0:
            raise ValidationError("eta must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValidationError("epochs, batch_size and lr must be non-negative")


def eta_at(cfg: MddConfig, epoch: int) -> float:
    """Discrepancy weight for ``epoch`` (1-based); ramps from 0 to ``eta`` when warm-up is on."""
    if not cfg.eta_warmup:
        return cfg.eta
    progress = (epoch - 1) / max(cfg.epochs, 1)
    return cfg.eta * (2.0 / (1.0 + np.exp(-10.0 * progress)) - 1.0)


def _mean_ce(logits, target):
    return _loss_terms(np.atleast_2d(logits), target, "ce")[0].mean()


def disagreement_targets(main_head: Model, features, soft=False):
    """What the auxiliary head is scored against: the main head's argmax (or softmax)."""
    logits = forward_logits(main_head, features)
    return softmax(logits) if soft else np.argmax(logits, axis=-1)


def dd_loss(features_s, features_t, main_head: Model, aux_head: Model, gamma: float = 4.0, soft=False) -> float:
    """CE(aux, main) on target features minus ``gamma`` times the same on source features."""
    if main_head.arch.input_dim != aux_head.arch.input_dim or main_head.arch.n_classes != aux_head.arch.n_classes:
        raise ShapeError("main and auxiliary heads must agree in feature and class dimensions")
    ys = disagreement_targets(main_head, features_s, soft)
    yt = disagreement_targets(main_head, features_t, soft)
    ce_t = _mean_ce(forward_logits(aux_head, features_t), yt)
    ce_s = _mean_ce(forward_logits(aux_head, features_s), ys)
    return float(ce_t - gamma * ce_s)


def _check_labeled(ys):
    ys = np.asarray(ys)
    if ys.size == 0 or np.any(ys < 0):
        raise ValidationError("MDD needs a fully labeled source batch")


def mdd_objective(xs, ys, xt, model: Model, aux_head: Model, cfg: MddConfig) -> float:
    """Source cross-entropy plus ``eta`` times the disparity discrepancy."""
    _check_labeled(ys)
    ce = _mean_ce(forward_logits(model, xs), np.asarray(ys))
    if cfg.eta == 0 or len(xt) == 0:
        return float(ce)
    fs = forward_features(model, xs)
    ft = forward_features(model, xt)
    return float(ce + cfg.eta * dd_loss(fs, ft, head_of(model), aux_head, cfg.gamma, cfg.soft_targets))


def aux_ascent_grad(xs, xt, model: Model, aux: Model, cfg: MddConfig) -> np.ndarray:
    """Gradient of the discrepancy with respect to the auxiliary head (to be ascended)."""
    fs = forward_features(model, xs)
    ft = forward_features(model, xt)
    main = head_of(model)
    ys_hat = disagreement_targets(main, fs, cfg.soft_targets)
    yt_hat = disagreement_targets(main, ft, cfg.soft_targets)
    return grad_params(aux, ft, yt_hat) - cfg.gamma * grad_params(aux, fs, ys_hat)


def mdd_descent_grad(xs, ys, xt, model: Model, aux: Model, cfg: MddConfig):
    """MDD objective and its gradient with respect to the source model.

    Disagreement targets are constants, so the discrepancy only reaches the
    feature extractor.
    """
    n_s, n_t = len(xs), len(xt)
    xb, _ = _as_batch(model, xs)
    hs, pres = _forward(model, xb)
    fs = hs[len(model.arch.hidden)]
    ft = forward_features(model, xt)
    main = head_of(model)
    ys_hat = disagreement_targets(main, fs, cfg.soft_targets)
    yt_hat = disagreement_targets(main, ft, cfg.soft_targets)

    ce_vals, dz = _loss_terms(hs[-1], ys, "ce")
    df_s = -cfg.gamma * grad_input(aux, fs, ys_hat) / n_s
    df_t = grad_input(aux, ft, yt_hat) / n_t
    g_src, _ = _backward(model, hs, pres, dz / n_s, dfeat=cfg.eta * df_s)
    g_tgt = logits_vjp(model, xt, np.zeros((n_t, model.arch.n_classes)), dfeat=cfg.eta * df_t)

    dd = _mean_ce(forward_logits(aux, ft), yt_hat) - cfg.gamma * _mean_ce(forward_logits(aux, fs), ys_hat)
    return float(ce_vals.mean() + cfg.eta * dd), g_src + g_tgt


def pretrain_source(
    source_x,
    source_y,
    target_x,
    arch: Arch,
    cfg: MddConfig,
    seed: int,
    grid: GridShape | None = None,
    on_epoch: EpochHook | None = None,
    init: Model | None = None,
):
    """Alternating MDD training of the source model.

    Per mini-batch: one ascent step on the auxiliary head, then one descent
    step on the source model against the updated head.  The discrepancy
    weight follows :func:`eta_at`.  The target stream is
    the target data plus one masked copy when RMA is enabled.  With
    ``eta == 0`` or no target data this is plain supervised training and
    draws no target randomness.

    Returns ``(model, curve)`` with one dict per epoch in ``curve``.
    """
    source_x = np.asarray(source_x, dtype=np.float64)
    source_y = np.asarray(source_y, dtype=np.int64)
    target_x = np.asarray(target_x, dtype=np.float64).reshape(-1, source_x.shape[1])
    if len(source_x) == 0:
        raise ValidationError("empty source dataset")
    _check_labeled(source_y)

    init_rng = rng_for(seed, "init")
    model = init_model(arch, init_rng) if init is None else Model(init.arch, init.params.copy())
    aux = linear_head(arch.feature_dim, arch.n_classes, init_rng)
    opt = SGD(cfg.lr, cfg.momentum)
    aux_opt = SGD(cfg.lr, cfg.momentum)

    batch_rng = rng_for(seed, "batch")
    target_rng = rng_for(seed, "target")
    mask_rng = rng_for(seed, "rma")
    adapt = cfg.eta > 0 and len(target_x) > 0

    curve = []
    n, bs = len(source_x), cfg.batch_size
    for epoch in range(1, cfg.epochs + 1):
        step_cfg = replace(cfg, eta=eta_at(cfg, epoch))
        if adapt:
            stream = target_x
            if cfg.rma.enabled:
                stream = np.concatenate([target_x, masked_copies(target_x, grid, cfg.rma, mask_rng)])
            stream = stream[target_rng.permutation(len(stream))]
        order = batch_rng.permutation(n)
        losses = []
        for k, start in enumerate(range(0, n, bs)):
            idx = order[start : start + bs]
            xs, ys = source_x[idx], source_y[idx]
            if adapt:
                xt = stream[(k * bs + np.arange(len(idx))) % len(stream)]
                aux_opt.step(aux.params, -aux_ascent_grad(xs, xt, model, aux, cfg))
                loss, g = mdd_descent_grad(xs, ys, xt, model, aux, step_cfg)
            else:
                loss, g = loss_and_grad_params(model, xs, ys)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise DivergenceError("pretrain", epoch, loss)
            opt.step(model.params, g)
            losses.append(loss)
        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "source_acc": float(np.mean(predict(model, source_x) == source_y)),
        }
        curve.append(record)
        log.debug("pretrain epoch %d loss %.4f source acc %.4f", epoch, record["loss"], record["source_acc"])
        if on_epoch is not None:
            on_epoch(epoch, model)
    return model, curve
