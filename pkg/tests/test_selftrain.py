import numpy as np
import pytest

from robust_uda.attacks import AttackBudget
from robust_uda.core import (
    Arch,
    Model,
    clone_model,
    forward_logits,
    grad_params,
    init_model,
    loss_and_grad_params,
    rng_for,
)
from robust_uda.data import gen_two_moons_shift
from robust_uda.errors import CapabilityError, DivergenceError, ValidationError
from robust_uda.optim import SGD, Adam
from robust_uda.selftrain import (
    SelfTrainConfig,
    at_step,
    meta_gradient,
    meta_step,
    pseudo_labels,
    run_at_uda,
    run_source_only_at,
    run_srouda,
    run_uda,
)
from robust_uda.uda import MddConfig


@pytest.fixture
def setup():
    rng = rng_for(0, "test")
    arch = Arch(2, (5,), 3, "tanh")
    teacher = init_model(arch, rng)
    student = init_model(arch, rng)
    x_t = rng.normal(size=(8, 2))
    x_adv = x_t + rng.uniform(-0.1, 0.1, size=x_t.shape)
    x_s = rng.normal(size=(6, 2))
    y_s = rng.integers(0, 3, 6)
    return teacher, student, x_t, x_adv, x_s, y_s


def test_uniform_teacher_labels():
    pl = pseudo_labels(Model(Arch(2, (3,), 4)), np.ones((5, 2)))
    np.testing.assert_allclose(pl.soft, 0.25)
    np.testing.assert_array_equal(pl.hard, 0)


def test_hard_labels_are_argmax():
    rng = rng_for(1, "test")
    m = init_model(Arch(3, (6,), 5), rng)
    for _ in range(1000):
        x = rng.normal(size=(4, 3))
        z = forward_logits(m, x)
        brute = [max(range(5), key=lambda c: (row[c], -c)) for row in z]
        assert pseudo_labels(m, x).hard.tolist() == brute


def test_clone_reproduces_teacher_labels(setup):
    teacher, _, x_t, *_ = setup
    student = clone_model(teacher)
    np.testing.assert_array_equal(pseudo_labels(student, x_t).soft, pseudo_labels(teacher, x_t).soft)


def test_at_step_zero_lr_is_null(setup):
    teacher, student, x_t, *_ = setup
    before = student.params.copy()
    at_step(student, x_t, pseudo_labels(teacher, x_t), AttackBudget(0.1), Adam(0.0))
    np.testing.assert_array_equal(student.params, before)


def test_at_step_decreases_loss_on_convex_model():
    rng = rng_for(2, "test")
    arch = Arch(3, (), 3, "linear")
    student = init_model(arch, rng)
    teacher = init_model(arch, rng)
    x_t = rng.normal(size=(16, 3))
    pl = pseudo_labels(teacher, x_t)
    step = at_step(student, x_t, pl, AttackBudget(0.1), SGD(0.01), "soft")
    after = loss_and_grad_params(student, step.x_adv, pl.soft)[0]
    assert after < step.loss


def test_at_step_with_zero_epsilon_is_clean_step(setup):
    teacher, student, x_t, *_ = setup
    other = clone_model(student)
    pl = pseudo_labels(teacher, x_t)
    step = at_step(student, x_t, pl, AttackBudget(0.0), SGD(0.1), "hard")
    np.testing.assert_array_equal(step.x_adv, x_t)
    other.params -= 0.1 * grad_params(other, x_t, pl.hard)
    np.testing.assert_array_equal(student.params, other.params)


def test_at_step_divergence(setup):
    teacher, student, x_t, *_ = setup
    student.params[:] = np.nan
    with pytest.raises(DivergenceError):
        at_step(student, x_t, pseudo_labels(teacher, x_t), AttackBudget(0.1), Adam(0.1))


def test_default_config():
    cfg = SelfTrainConfig()
    assert (cfg.lr, cfg.betas, cfg.meta_lr, cfg.teacher_period, cfg.meta_mode) == (0.0015, (0.9, 0.999), 0.001, 1, "unrolled")
    with pytest.raises(ValidationError):
        SelfTrainConfig(meta_mode="exact")


@pytest.mark.parametrize("mode", ["unrolled", "dot-approx"])
def test_zero_student_lr_severs_meta_gradient(setup, mode):
    teacher, student, x_t, x_adv, x_s, y_s = setup
    res = meta_gradient(teacher, student, x_t, x_adv, x_s, y_s, 0.0, mode)
    np.testing.assert_array_equal(res.grad, 0.0)
    assert res.meta_loss == loss_and_grad_params(student, x_s, y_s)[0]


def test_unrolled_needs_smooth_activations(setup):
    _, _, x_t, x_adv, x_s, y_s = setup
    relu = init_model(Arch(2, (5,), 3, "relu"), rng_for(0, "init"))
    with pytest.raises(CapabilityError, match="dot-approx"):
        meta_gradient(relu, relu, x_t, x_adv, x_s, y_s, 0.1, "unrolled")
    meta_gradient(relu, relu, x_t, x_adv, x_s, y_s, 0.1, "dot-approx")


def test_dot_approx_formula(setup):
    teacher, student, x_t, x_adv, x_s, y_s = setup
    lr = 0.2
    pl = pseudo_labels(teacher, x_t)
    g_at = grad_params(student, x_adv, pl.hard)
    g_meta = loss_and_grad_params(Model(student.arch, student.params - lr * g_at), x_s, y_s)[1]
    expected = lr * np.dot(g_meta, g_at) * grad_params(teacher, x_t, pl.hard)
    got = meta_gradient(teacher, student, x_t, x_adv, x_s, y_s, lr, "dot-approx", "hard").grad
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_meta_step_moves_teacher_downhill(setup):
    teacher, student, x_t, x_adv, x_s, y_s = setup
    cfg = SelfTrainConfig(lr=0.3, meta_lr=0.5)
    before = clone_model(teacher)
    res = meta_step(teacher, student, x_t, x_adv, x_s, y_s, cfg)
    np.testing.assert_allclose(teacher.params, before.params - 0.5 * res.grad)
    after = meta_gradient(teacher, student, x_t, x_adv, x_s, y_s, 0.3).meta_loss
    assert after < res.meta_loss
    frozen = clone_model(teacher)
    meta_step(teacher, student, x_t, x_adv, x_s, y_s, SelfTrainConfig(meta_lr=0.0))
    np.testing.assert_array_equal(teacher.params, frozen.params)


@pytest.fixture(scope="module")
def small_pair():
    return gen_two_moons_shift(300, 45, 0.1, rng_for(0, "data")), Arch(2, (8,), 2)


def test_teacher_updated_once_per_epoch(small_pair):
    pair, arch = small_pair
    mdd = MddConfig(epochs=3)
    teacher = run_uda(pair, arch, mdd, 0)
    seen = []
    cfg = SelfTrainConfig(epochs=4, meta_lr=5.0, teacher_period=2, budget=AttackBudget(0.05))
    run_srouda(pair, arch, mdd, cfg, 0, teacher=teacher, on_epoch=lambda e, s, t, a, m: seen.append((t.params.copy(), m)))
    assert np.isnan(seen[0][1]) and not np.isnan(seen[1][1])
    np.testing.assert_array_equal(seen[0][0], teacher.params)
    assert not np.array_equal(seen[1][0], teacher.params)


def test_self_training_leaves_input_teacher_untouched(small_pair):
    pair, arch = small_pair
    mdd = MddConfig(epochs=2)
    teacher = run_uda(pair, arch, mdd, 0)
    before = teacher.params.copy()
    run_srouda(pair, arch, mdd, SelfTrainConfig(epochs=2, meta_lr=5.0, budget=AttackBudget(0.05)), 0, teacher=teacher)
    np.testing.assert_array_equal(teacher.params, before)


def test_at_uda_with_zero_epsilon_is_plain_uda(small_pair):
    pair, arch = small_pair
    mdd = MddConfig(epochs=3)
    plain = run_uda(pair, arch, mdd, 0)
    at = run_at_uda(pair, arch, mdd, SelfTrainConfig(budget=AttackBudget(0.0)), 0)
    np.testing.assert_array_equal(plain.params, at.params)


def test_source_only_at_with_zero_epsilon_is_supervised(small_pair):
    pair, arch = small_pair
    cfg = SelfTrainConfig(epochs=2, budget=AttackBudget(0.0))
    got = run_source_only_at(pair, arch, cfg, 3)
    model = init_model(arch, rng_for(3, "init"))
    opt = Adam(cfg.lr, cfg.betas)
    order_rng = rng_for(3, "batch")
    for _ in range(2):
        order = order_rng.permutation(len(pair.source_x))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            opt.step(model.params, loss_and_grad_params(model, pair.source_x[idx], pair.source_y[idx])[1])
    np.testing.assert_array_equal(got.params, model.params)


def test_self_training_needs_target_data(small_pair):
    pair, arch = small_pair
    from dataclasses import replace

    empty = replace(pair, target_x=pair.target_x[:0])
    with pytest.raises(ValidationError):
        run_srouda(empty, arch, MddConfig(epochs=1), SelfTrainConfig(epochs=1), 0, teacher=init_model(arch, rng_for(0, "init")))
