import math

import numpy as np
import pytest

from conftest import central_diff, rel_err
from robust_uda.core import Arch, Model, forward_features, head_of, init_model, linear_head, loss_and_grad_params, predict, rng_for
from robust_uda.data import gen_two_moons_shift
from robust_uda.errors import DivergenceError, ShapeError, ValidationError
from robust_uda.optim import SGD
from robust_uda.uda import (
    MddConfig,
    aux_ascent_grad,
    dd_loss,
    eta_at,
    mdd_descent_grad,
    mdd_objective,
    pretrain_source,
)


def _head(w, b=(0.0, 0.0)):
    h = linear_head(1, 2)
    (wm, bm), = h.layers()
    wm[...] = np.array(w, dtype=float).reshape(2, 1)
    bm[...] = b
    return h


def _ce(z, label):
    return math.log(sum(math.exp(v) for v in z)) - z[label]


def test_dd_hand_computation():
    main = _head([1.0, -1.0])
    aux = _head([0.5, 2.0], b=(0.3, 0.0))
    fs, ft = np.array([[0.8]]), np.array([[-0.4]])
    # main argmax: source -> class 0, target -> class 1
    ce_t = _ce([0.5 * -0.4 + 0.3, 2.0 * -0.4], 1)
    ce_s = _ce([0.5 * 0.8 + 0.3, 2.0 * 0.8], 0)
    assert dd_loss(fs, ft, main, aux, gamma=4.0) == pytest.approx(ce_t - 4.0 * ce_s, rel=1e-13)


def test_dd_vanishes_when_aux_copies_main():
    main = _head([1.0, -1.0])
    aux = _head([200.0, -200.0])
    f = np.array([[0.5], [-0.7], [1.2]])
    assert abs(dd_loss(f, f[::-1], main, aux)) < 1e-100


def test_dd_head_mismatch():
    with pytest.raises(ShapeError):
        dd_loss(np.zeros((1, 1)), np.zeros((1, 1)), _head([1, -1]), linear_head(2, 2))


@pytest.fixture
def batch():
    rng = rng_for(0, "test")
    arch = Arch(2, (5, 4), 3, "tanh")
    model = init_model(arch, rng)
    aux = linear_head(4, 3, rng)
    xs = rng.normal(size=(8, 2))
    ys = rng.integers(0, 3, 8)
    xt = rng.normal(size=(6, 2)) + 1.0
    return model, aux, xs, ys, xt


def test_eta_zero_is_source_cross_entropy(batch):
    model, aux, xs, ys, xt = batch
    cfg = MddConfig(eta=0.0)
    assert mdd_objective(xs, ys, xt, model, aux, cfg) == loss_and_grad_params(model, xs, ys)[0]
    _, g = mdd_descent_grad(xs, ys, xt, model, aux, cfg)
    np.testing.assert_array_equal(g, loss_and_grad_params(model, xs, ys)[1])


def test_objective_recomposes(batch):
    model, aux, xs, ys, xt = batch
    cfg = MddConfig(eta=0.1)
    ce = loss_and_grad_params(model, xs, ys)[0]
    dd = dd_loss(forward_features(model, xs), forward_features(model, xt), head_of(model), aux, 4.0)
    assert mdd_objective(xs, ys, xt, model, aux, cfg) == pytest.approx(ce + 0.1 * dd, rel=1e-14)
    assert mdd_descent_grad(xs, ys, xt, model, aux, cfg)[0] == pytest.approx(ce + 0.1 * dd, rel=1e-14)


def test_descent_gradient_matches_finite_differences(batch):
    # hard disagreement targets are locally constant, so the objective is smooth here
    model, aux, xs, ys, xt = batch
    cfg = MddConfig(eta=0.5)
    _, g = mdd_descent_grad(xs, ys, xt, model, aux, cfg)
    fd = central_diff(lambda th: mdd_objective(xs, ys, xt, Model(model.arch, th), aux, cfg), model.params)
    assert rel_err(g, fd) <= 1e-5


def test_aux_gradient_matches_finite_differences(batch):
    model, aux, xs, ys, xt = batch
    cfg = MddConfig()
    fs, ft = forward_features(model, xs), forward_features(model, xt)
    g = aux_ascent_grad(xs, xt, model, aux, cfg)
    fd = central_diff(lambda th: dd_loss(fs, ft, head_of(model), Model(aux.arch, th), 4.0), aux.params)
    assert rel_err(g, fd) <= 1e-5


def test_gradients_do_not_mutate(batch):
    model, aux, xs, ys, xt = batch
    before = model.params.copy(), aux.params.copy()
    aux_ascent_grad(xs, xt, model, aux, MddConfig())
    mdd_descent_grad(xs, ys, xt, model, aux, MddConfig())
    np.testing.assert_array_equal(model.params, before[0])
    np.testing.assert_array_equal(aux.params, before[1])


def test_unlabeled_source_rejected(batch):
    model, aux, xs, ys, xt = batch
    with pytest.raises(ValidationError):
        mdd_objective(xs, np.full(len(xs), -1), xt, model, aux, MddConfig())
    with pytest.raises(ValidationError):
        pretrain_source(xs[:0], ys[:0], xt, model.arch, MddConfig(), 0)


def test_eta_warmup_schedule():
    cfg = MddConfig(eta=0.1, epochs=20)
    assert eta_at(cfg, 1) == 0.0
    vals = [eta_at(cfg, e) for e in range(1, 21)]
    assert all(b > a for a, b in zip(vals, vals[1:])) and vals[-1] < 0.1
    assert eta_at(MddConfig(eta=0.1, eta_warmup=False), 1) == 0.1


def test_defaults():
    cfg = MddConfig()
    assert (cfg.gamma, cfg.eta, cfg.epochs, cfg.lr) == (4.0, 0.1, 20, 0.004)


def test_separable_toy_set():
    rng = rng_for(1, "test")
    y = rng.integers(0, 2, 400)
    x = rng.normal(size=(400, 2)) * 0.3 + np.where(y[:, None] == 1, 1.0, -1.0)
    model, curve = pretrain_source(x, y, x[:0], Arch(2, (8,), 2), MddConfig(eta=0.0, epochs=20), 0)
    assert curve[-1]["source_acc"] >= 0.99


def test_eta_zero_equals_plain_supervised_loop():
    pair = gen_two_moons_shift(200, 45, 0.1, rng_for(0, "data"))
    arch = Arch(2, (6,), 2)
    cfg = MddConfig(eta=0.0, epochs=3, momentum=0.5)
    got, _ = pretrain_source(pair.source_x, pair.source_y, pair.target_x, arch, cfg, 7)

    model = init_model(arch, rng_for(7, "init"))
    opt = SGD(cfg.lr, cfg.momentum)
    order_rng = rng_for(7, "batch")
    for _ in range(cfg.epochs):
        order = order_rng.permutation(len(pair.source_x))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            opt.step(model.params, loss_and_grad_params(model, pair.source_x[idx], pair.source_y[idx])[1])
    np.testing.assert_array_equal(got.params, model.params)


def test_objective_decreases_over_epochs():
    pair = gen_two_moons_shift(600, 45, 0.1, rng_for(0, "data"))
    cfg = MddConfig()
    _, curve = pretrain_source(pair.source_x, pair.source_y, pair.target_x, Arch(2, (16, 16), 2), cfg, 0)
    losses = [c["loss"] for c in curve]
    rises = sum(b > a for a, b in zip(losses, losses[1:]))
    assert rises <= 0.1 * len(losses)
    assert losses[-1] < losses[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch():
    pair = gen_two_moons_shift(100, 45, 0.1, rng_for(0, "data"))
    with pytest.raises(DivergenceError) as info:
        pretrain_source(pair.source_x, pair.source_y, pair.target_x, Arch(2, (4,), 2, "linear"), MddConfig(lr=1e200), 0)
    assert info.value.epoch == 1


@pytest.mark.slow
def test_adaptation_beats_source_only():
    arch = Arch(2, (32, 32), 2)
    mdd = MddConfig(epochs=100, momentum=0.9)
    adapted, source_only = [], []
    for seed in range(5):
        p = gen_two_moons_shift(2000, 45, 0.1, rng_for(seed, "data"))
        m, _ = pretrain_source(p.source_x, p.source_y, p.target_x, arch, mdd, seed)
        s, _ = pretrain_source(p.source_x, p.source_y, p.target_x[:0], arch, mdd, seed)
        adapted.append(np.mean(predict(m, p.eval_x) == p.eval_y))
        source_only.append(np.mean(predict(s, p.eval_x) == p.eval_y))
    assert np.mean(adapted) > np.mean(source_only)
