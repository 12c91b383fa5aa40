import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
import hypothesis.extra.numpy as nph

from protodistill.dataio import generate_shapes
from protodistill.numerics import Tensor, ops, stream
from protodistill.ttm import (
    ClassifierNet, KDConfig, TrainConfig, accuracy, augment, crop_and_resize, kd_loss,
    random_resized_crop_boxes, soft_labels, train_student, train_student_hard, train_teacher,
)
from gradcheck import max_rel_error

logits = nph.arrays(np.float64, (3, 4), elements=st.floats(-20, 20))


@pytest.fixture(scope="module")
def data():
    return generate_shapes(10, K=4, size=8, seed=3)


@pytest.fixture(scope="module")
def small_teacher(data):
    return train_teacher(data, TrainConfig(epochs=20, batch_size=20, augment=False, hidden=(16,)),
                         seed=0).net


def kd_cfg(**kw):
    base = dict(epochs=15, batch_size=20, hidden=(16,))
    base.update(kw)
    return KDConfig(**base)


class TestKDLoss:
    @given(logits, st.floats(0.5, 50))
    @settings(max_examples=50, deadline=None)
    def test_identical_zero(self, x, tau):
        assert abs(kd_loss(x, x, tau).item()) < 1e-12

    @given(logits, logits, st.floats(0.5, 50))
    @settings(max_examples=100, deadline=None)
    def test_nonnegative(self, t, s, tau):
        assert kd_loss(t, s, tau).item() >= -1e-12

    def test_hand_case(self):
        # p = softmax([2, 0]), q = softmax([0, 2]) = reversed p
        e = math.exp(2)
        p = [e / (e + 1), 1 / (e + 1)]
        q = p[::-1]
        expected = sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q))
        got = kd_loss(np.array([[2.0, 0.0]]), np.array([[0.0, 2.0]]), 1.0).item()
        assert got == pytest.approx(expected, rel=1e-12)

    def test_temperature_scaling(self):
        t, s = np.array([[4.0, 0.0]]), np.array([[0.0, 4.0]])
        inner = kd_loss(t / 2, s / 2, 1.0).item()
        assert kd_loss(t, s, 2.0).item() == pytest.approx(4.0 * inner, rel=1e-12)

    def test_bad_temperature(self):
        with pytest.raises(ValueError, match="temperature"):
            kd_loss(np.zeros((1, 2)), np.zeros((1, 2)), 0.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient(self, seed):
        rng = stream(seed, "kd")
        teacher = rng.normal(0, 3, size=(4, 5))
        student = Tensor(rng.normal(0, 3, size=(4, 5)), requires_grad=True)
        tau = float(rng.uniform(0.5, 20))
        assert max_rel_error(lambda: kd_loss(teacher, student, tau), [student]) < 1e-4


class TestSoftLabels:
    def test_row_sums(self, data):
        for seed in range(5):
            net = ClassifierNet(data.image_shape, 4, hidden=(8,), seed=seed)
            p = soft_labels(net, data.images / 255.0, 1.0)
            np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_huge_temperature_uniform(self, data):
        net = ClassifierNet(data.image_shape, 4, hidden=(8,), seed=0)
        p = soft_labels(net, data.images / 255.0, 1e6)
        np.testing.assert_allclose(p, 0.25, atol=1e-4)

    def test_tau_one_is_softmax(self, data):
        net = ClassifierNet(data.image_shape, 4, hidden=(8,), seed=0)
        z = net.logits(data.images / 255.0)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        np.testing.assert_allclose(soft_labels(net, data.images / 255.0, 1.0),
                                   e / e.sum(axis=1, keepdims=True), atol=1e-14)


class TestAugmentation:
    def test_boxes_in_bounds(self):
        boxes = random_resized_crop_boxes(500, 32, 32, np.random.default_rng(0))
        top, left, h, w = boxes.T
        assert np.all(h >= 1) and np.all(w >= 1)
        assert np.all(top + h <= 32) and np.all(left + w <= 32)
        assert np.all(h * w >= 1) and np.all(h * w <= 32 * 32)

    def test_full_box_identity(self):
        x = np.random.default_rng(0).uniform(size=(2, 6, 6, 1))
        out = crop_and_resize(x, np.array([[0, 0, 6, 6], [0, 0, 6, 6]]))
        np.testing.assert_allclose(out, x, atol=1e-14)

    def test_constant_image_stays_constant(self):
        x = np.full((3, 8, 8, 1), 0.3)
        out = augment(x, np.random.default_rng(1))
        np.testing.assert_allclose(out, 0.3, atol=1e-14)

    def test_seeded_stream_repeats(self):
        x = np.random.default_rng(0).uniform(size=(4, 8, 8, 1))
        a = augment(x, stream(5, "student", "crops"))
        b = augment(x, stream(5, "student", "crops"))
        assert np.array_equal(a, b)


class TestClassifier:
    def test_features_width(self, data):
        net = ClassifierNet(data.image_shape, 4, hidden=(16, 8), seed=0)
        assert net.features(data.images / 255.0).shape == (len(data), 8)

    def test_copy_independent(self, data):
        net = ClassifierNet(data.image_shape, 4, hidden=(8,), seed=0)
        other = net.copy()
        other.parameters()[0].data += 1.0
        assert not np.array_equal(net.parameters()[0].data, other.parameters()[0].data)

    def test_wrong_shape(self):
        with pytest.raises(ValueError, match="do not match"):
            ClassifierNet((8, 8, 1), 4, hidden=(8,)).logits(np.zeros((1, 7, 8, 1)))

    @pytest.mark.parametrize("seed", range(10))
    def test_full_network_gradients(self, seed):
        net = ClassifierNet((3, 3, 1), 3, hidden=(5, 4), seed=seed)
        rng = stream(seed, "clf")
        x = rng.uniform(size=(4, 3, 3, 1))
        target = rng.normal(size=(4, 3))
        assert max_rel_error(lambda: kd_loss(target, net.forward(x), 2.0), net.parameters()) < 1e-4


class TestTraining:
    def test_teacher_deterministic(self, data, small_teacher):
        again = train_teacher(data, TrainConfig(epochs=20, batch_size=20, augment=False, hidden=(16,)),
                              seed=0).net
        for a, b in zip(again.parameters(), small_teacher.parameters()):
            assert np.array_equal(a.data, b.data)

    def test_teacher_zero_epochs(self, data):
        net = train_teacher(data, TrainConfig(epochs=0, hidden=(8,)), seed=0).net
        ref = ClassifierNet(data.image_shape, 4, hidden=(8,), seed=0, name="teacher")
        assert np.array_equal(net.parameters()[0].data, ref.parameters()[0].data)

    def test_student_loss_falls(self, data, small_teacher):
        res = train_student(data, small_teacher, kd_cfg(), seed=1)
        assert len(res.history) == 15 and res.history[-1] < res.history[0]

    def test_student_deterministic(self, data, small_teacher):
        a = train_student(data, small_teacher, kd_cfg(), seed=1)
        b = train_student(data, small_teacher, kd_cfg(), seed=1)
        assert a.history == b.history
        assert all(np.array_equal(p.data, q.data) for p, q in zip(a.net.parameters(), b.net.parameters()))

    def test_lr_zero_constant_loss(self, data, small_teacher):
        cfg = kd_cfg(lr=0.0, augment=False, batch_size=len(data))
        res = train_student(data, small_teacher, cfg, seed=0, init=small_teacher)
        assert res.history == [res.history[0]] * cfg.epochs

    def test_hard_deterministic(self, data):
        a = train_student_hard(data, kd_cfg(), seed=2)
        b = train_student_hard(data, kd_cfg(), seed=2)
        assert a.history == b.history

    def test_k_mismatch(self, data, small_teacher):
        with pytest.raises(ValueError, match="outputs"):
            accuracy(ClassifierNet(data.image_shape, 3, hidden=(4,)), data)


def test_teacher_gate(desk):
    assert accuracy(desk.teacher, desk.test) > 0.95
