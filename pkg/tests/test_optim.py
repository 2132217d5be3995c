import numpy as np
import pytest

from vistok import tensor as T
from vistok.optim import Parameter, TrainConfig, adam_step, zero_grads
from vistok.tensor import GradientMissing, Tensor


def make_param(value):
    p = Parameter(np.asarray(value, dtype=np.float64))
    return p


class TestAdam:
    def test_first_step_scalar(self):
        # bias-corrected first step moves by exactly lr against the gradient sign
        p = make_param([1.0])
        p.grad = np.array([1.0])
        adam_step([p], 0.1, TrainConfig(lr=0.1))
        assert np.isclose(p.data[0], 0.9, atol=1e-9)

    def test_first_step_negative_gradient(self):
        p = make_param([1.0])
        p.grad = np.array([-2.0])
        adam_step([p], 0.1, TrainConfig(lr=0.1))
        assert np.isclose(p.data[0], 1.1, atol=1e-9)

    def test_matches_handrolled_adam(self):
        # independent scalar reference, run for several steps
        cfg = TrainConfig(lr=0.05)
        p = make_param([2.0])
        x, m, v = 2.0, 0.0, 0.0
        rng = np.random.default_rng(0)
        for t in range(1, 8):
            g = float(rng.standard_normal())
            p.grad = np.array([g])
            adam_step([p], cfg.lr, cfg)
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1**t)
            vhat = v / (1 - cfg.beta2**t)
            x -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
            assert np.isclose(p.data[0], x, atol=1e-12)

    def test_decoupled_weight_decay(self):
        # decay acts on the parameter directly, independent of the moment update
        cfg = TrainConfig(lr=0.1, weight_decay=0.5)
        p = make_param([1.0])
        p.grad = np.array([0.0])
        adam_step([p], cfg.lr, cfg)
        # zero gradient: moments stay zero, only decay applies
        assert np.isclose(p.data[0], 1.0 - 0.1 * 0.5 * 1.0, atol=1e-12)

    def test_missing_gradient_raises(self):
        p = make_param([1.0])
        with pytest.raises(GradientMissing):
            adam_step([p], 0.1, TrainConfig())

    def test_zero_grads(self):
        p = make_param([1.0])
        p.grad = np.array([3.0])
        zero_grads([p])
        assert p.grad is None

    def test_converges_on_quadratic(self):
        cfg = TrainConfig(lr=0.1)
        p = make_param([5.0])
        for _ in range(300):
            x = Tensor(p.data, requires_grad=True)
            loss = T.reduce_sum(T.power(x, 2.0))
            loss.backward()
            p.grad = x.grad
            adam_step([p], cfg.lr, cfg)
        assert abs(p.data[0]) < 1e-2


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(beta1=1.0)
        with pytest.raises(ValueError):
            TrainConfig(schedule="linear")

    def test_exponential_schedule(self):
        cfg = TrainConfig(lr=1.0, schedule="exponential", schedule_decay=0.5)
        assert cfg.lr_at(0) == 1.0
        assert cfg.lr_at(2) == 0.25

    def test_cosine_schedule_endpoints(self):
        cfg = TrainConfig(lr=1.0, schedule="cosine", epochs=10)
        assert np.isclose(cfg.lr_at(0), 1.0)
        assert cfg.lr_at(9) < cfg.lr_at(1)
        assert cfg.lr_at(9) >= 0.0

    def test_step_schedule(self):
        cfg = TrainConfig(lr=1.0, schedule="step", milestones=(3, 6), schedule_decay=0.1)
        assert cfg.lr_at(2) == 1.0
        assert np.isclose(cfg.lr_at(3), 0.1)
        assert np.isclose(cfg.lr_at(6), 0.01)
