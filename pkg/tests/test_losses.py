import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mirau.errors import ConfigError
from mirau.losses import (
    LossWeights,
    bce_loss,
    consistency_loss,
    dice_loss,
    entropy_loss,
    mim_loss,
    ramp_beta,
    supervised_loss,
    total_loss,
    unsup_loss,
)
from mirau.ndgrad import GradTape, Parameter, Tensor, grad_check, precision, sigmoid

LN2 = math.log(2.0)


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


class TestExamples:
    def test_mim(self):
        x = np.random.default_rng(0).uniform(size=(3, 192))
        assert mim_loss(t(x), x).item() == 0.0
        assert mim_loss(t(np.full((1, 192), 0.5)), np.zeros((1, 192))).item() == pytest.approx(96.0)
        assert mim_loss(t(2 * x), np.zeros_like(x)).item() == pytest.approx(2 * mim_loss(t(x), 0 * x).item())
        with pytest.raises(ConfigError):
            mim_loss(t(np.zeros((0, 192))), np.zeros((0, 192)))

    def test_dice(self):
        y = np.array([1.0, 0.0, 1.0, 1.0])
        assert dice_loss(t(y), y).item() == pytest.approx(0.0, abs=1e-6)
        assert dice_loss(t([0.5, 0.5]), np.array([1.0, 0.0])).item() == pytest.approx(0.5, abs=1e-6)
        assert dice_loss(t([0.0, 0.0]), np.array([1.0, 0.0])).item() == pytest.approx(1.0, abs=1e-5)

    def test_bce(self):
        assert bce_loss(t(np.full(10, 0.5)), np.array([0, 1] * 5)).item() == pytest.approx(LN2)
        y = np.array([0.0, 1.0, 1.0])
        assert bce_loss(t(y), y).item() <= 1e-6
        assert bce_loss(t([0.25]), np.array([1.0])).item() == pytest.approx(1.3862943611)

    def test_consistency(self):
        assert consistency_loss(np.full(4, 0.5), t(np.full(4, 0.5))).item() == pytest.approx(LN2)
        assert consistency_loss(np.array([1.0]), t([0.5])).item() == pytest.approx(LN2)

    def test_entropy(self):
        assert entropy_loss(t(np.full(6, 0.5))).item() == pytest.approx(LN2)
        assert entropy_loss(t([0.0, 1.0, 1.0])).item() == pytest.approx(0.0, abs=1e-5)
        assert entropy_loss(t([0.75])).item() == pytest.approx(0.5623351446)

    def test_unsup(self):
        half = np.full(5, 0.5)
        assert unsup_loss(t(half), half, np.zeros(5), half).item() == 0.0
        v = unsup_loss(t(half), half, np.ones(5), half, lambda_u=1.0, lambda_c=1.0).item()
        assert v == pytest.approx(LN2)

    def test_ramp(self):
        assert ramp_beta(0, 10) == pytest.approx(0.006737947)
        assert ramp_beta(10, 10) == 1.0 and ramp_beta(25, 10) == 1.0
        vals = [ramp_beta(i, 12) for i in range(13)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        with pytest.raises(ConfigError):
            ramp_beta(1, 0)

    def test_total(self):
        w = LossWeights(gamma=0.1)
        assert total_loss(1.0, 2.0, 3.0, w, beta=0.5) == pytest.approx(2.3)
        assert total_loss(1.0, 2.0, 3.0, LossWeights(gamma=0.0), beta=0.0) == 1.0

    def test_weights_validation(self):
        with pytest.raises(ConfigError):
            LossWeights(gamma=-1.0)
        with pytest.raises(ConfigError):
            LossWeights(kappa=0.0)


prob = st.floats(0.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(prob, st.booleans(), prob, prob), min_size=1, max_size=20))
def test_losses_nonnegative_and_finite(rows):
    p = np.array([r[0] for r in rows])
    y = np.array([float(r[1]) for r in rows])
    soft = np.array([r[2] for r in rows])
    w = np.array([r[3] for r in rows])
    for v in (dice_loss(t(p), y), bce_loss(t(p), y), consistency_loss(soft, t(p)),
              entropy_loss(t(p)), unsup_loss(t(p), soft, w, soft)):
        assert math.isfinite(v.item()) and v.item() >= -1e-12


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_unsup_weight_scale_invariance(scale, seed):
    rng = np.random.default_rng(seed)
    p, soft, weak, w = rng.uniform(size=(4, 16))
    a = unsup_loss(t(p), soft, w, weak).item()
    b = unsup_loss(t(p), soft, w * scale, weak).item()
    assert b == pytest.approx(a, rel=1e-10)


class TestGradients:
    @pytest.fixture
    def data(self):
        rng = np.random.default_rng(4)
        return {
            "z": rng.normal(size=(2, 1, 6, 6)),
            "y": (rng.random((2, 1, 6, 6)) > 0.5).astype(float),
            "soft": rng.uniform(size=(2, 1, 6, 6)),
            "w": rng.uniform(size=(2, 1, 6, 6)),
            "weak": rng.uniform(size=(2, 1, 6, 6)),
        }

    def check(self, fn, data):
        with precision(np.float64):
            logits = Parameter(data["z"].copy())
            err = grad_check(lambda: fn(sigmoid(logits)), [logits])
        assert err <= 1e-4

    def test_dice(self, data):
        self.check(lambda p: dice_loss(p, data["y"]), data)

    def test_bce(self, data):
        self.check(lambda p: bce_loss(p, data["y"]), data)

    def test_consistency(self, data):
        self.check(lambda p: consistency_loss(data["soft"], p), data)

    def test_entropy(self, data):
        self.check(entropy_loss, data)

    def test_unsup(self, data):
        self.check(lambda p: unsup_loss(p, data["soft"], data["w"], data["weak"]), data)

    def test_total(self, data):
        w = LossWeights()
        self.check(lambda p: total_loss(supervised_loss(p, data["y"], w),
                                        unsup_loss(p, data["soft"], data["w"], data["weak"]),
                                        entropy_loss(p), w, t=3), data)

    def test_mim(self):
        with precision(np.float64):
            rng = np.random.default_rng(1)
            pred = Parameter(rng.normal(size=(3, 12)))
            target = rng.normal(size=(3, 12))
            assert grad_check(lambda: mim_loss(pred, target), [pred]) <= 1e-4


def test_teacher_side_receives_no_gradient():
    with precision(np.float64):
        teacher_param = Parameter(np.array([0.3]))
        student_param = Parameter(np.array([0.1]))
        with GradTape() as tape:
            teacher_map = (teacher_param * np.ones(4)).detach()
            student = student_param * np.ones(4) + 0.4
            loss = consistency_loss(teacher_map, student) + unsup_loss(
                student, teacher_map.data, np.ones(4), teacher_map)
            tape.backward(loss)
    assert teacher_param.grad is None
    assert student_param.grad is not None


def test_attached_teacher_map_is_rejected():
    p = Parameter(np.array([0.5, 0.5]))
    with GradTape():
        attached = p * 1.0
        with pytest.raises(AssertionError):
            consistency_loss(attached, Tensor(np.array([0.5, 0.5])))
