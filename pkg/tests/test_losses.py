import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from a3tta.losses import (adaptation_loss, boundary_entropy_loss, ema_rate, pixel_entropy,
                          semantic_loss, teacher_divergence, total_loss)


def uniform(c, h=4, w=4, b=1):
    return torch.full((b, c, h, w), 1.0 / c, dtype=torch.float64)


def onehot(labels, c):
    t = torch.as_tensor(labels)
    return torch.nn.functional.one_hot(t, c).permute(0, 3, 1, 2).to(torch.float64)


def random_maps(seed, b=2, c=4, h=5, w=5, scale=2.0):
    g = torch.Generator().manual_seed(seed)
    return torch.softmax(scale * torch.randn(b, c, h, w, generator=g, dtype=torch.float64), dim=1)


class TestPixelEntropy:
    def test_uniform_four_classes_is_two_bits(self):
        assert float(pixel_entropy(uniform(4))[0, 0, 0]) == pytest.approx(2.0, abs=1e-12)

    def test_one_hot_is_zero(self):
        e = pixel_entropy(onehot([[[0, 1], [2, 3]]], 4))
        assert float(e.max()) < 1e-5

    def test_half_half(self):
        p = torch.tensor([0.5, 0.5, 0.0, 0.0], dtype=torch.float64).reshape(1, 4, 1, 1)
        assert float(pixel_entropy(p)) == pytest.approx(1.0, abs=1e-6)

    @given(st.integers(0, 10_000), st.sampled_from([2, 3, 4, 8]))
    @settings(max_examples=50, deadline=None)
    def test_range(self, seed, c):
        e = pixel_entropy(random_maps(seed, c=c))
        assert float(e.min()) >= 0.0
        assert float(e.max()) <= math.log2(c) + 1e-12


class TestSemanticLoss:
    def test_uniform_self_is_one(self):
        assert float(semantic_loss(uniform(4), uniform(4))) == pytest.approx(1.0, abs=1e-9)

    def test_one_hot_self_is_zero(self):
        p = onehot([[[0, 1], [2, 3]]], 4)
        assert float(semantic_loss(p, p)) < 1e-5

    def test_one_hot_vs_half(self):
        target = torch.tensor([1.0, 0.0], dtype=torch.float64).reshape(1, 2, 1, 1)
        pred = torch.tensor([0.5, 0.5], dtype=torch.float64).reshape(1, 2, 1, 1)
        assert float(semantic_loss(target, pred)) == pytest.approx(1.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            semantic_loss(uniform(4), uniform(3))

    @given(st.integers(0, 10_000), st.sampled_from([2, 3, 4]))
    @settings(max_examples=50, deadline=None)
    def test_self_loss_bounded_by_one(self, seed, c):
        p = random_maps(seed, c=c)
        val = float(semantic_loss(p, p))
        assert 0.0 <= val <= 1.0 + 1e-12

    def test_equals_normalized_entropy_on_self(self):
        p = random_maps(3)
        expected = float(pixel_entropy(p).mean()) / math.log2(4)
        assert float(teacher_divergence(p, p)) == pytest.approx(expected, rel=1e-10)

    def test_spatial_permutation_invariance(self):
        a, b = random_maps(1), random_maps(2)
        perm = torch.randperm(25, generator=torch.Generator().manual_seed(0))

        def shuffle(x):
            return x.reshape(2, 4, 25)[:, :, perm].reshape(2, 4, 5, 5)

        for fn in (semantic_loss, boundary_entropy_loss, teacher_divergence):
            assert float(fn(shuffle(a), shuffle(b))) == pytest.approx(float(fn(a, b)), rel=1e-12)


class TestBoundaryEntropyLoss:
    def test_identical_is_zero(self):
        p = random_maps(0)
        assert float(boundary_entropy_loss(p, p)) == 0.0

    def test_uniform_vs_one_hot(self):
        refined = onehot([[[0, 1], [1, 0]]], 2)
        pred = uniform(2, 2, 2)
        assert float(boundary_entropy_loss(refined, pred)) == pytest.approx(1.0, abs=1e-5)

    def test_symmetric(self):
        a, b = random_maps(4), random_maps(5)
        assert float(boundary_entropy_loss(a, b)) == float(boundary_entropy_loss(b, a))

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_bounds(self, seed):
        a, b = random_maps(seed, c=3), random_maps(seed + 1, c=3)
        val = float(boundary_entropy_loss(a, b))
        assert 0.0 <= val <= math.log2(3)


class TestTeacherDivergence:
    def test_agreeing_one_hot_is_zero(self):
        p = onehot([[[1, 1], [0, 2]]], 3)
        assert float(teacher_divergence(p, p)) < 1e-5
        assert ema_rate(teacher_divergence(p, p)) < 1e-5

    def test_uniform_agreement_is_one(self):
        assert float(teacher_divergence(uniform(4), uniform(4))) == pytest.approx(1.0, abs=1e-9)

    def test_confident_wrong_student_clamps_rate(self):
        teacher = torch.tensor([1.0, 0.0], dtype=torch.float64).reshape(1, 2, 1, 1)
        student = torch.tensor([0.25, 0.75], dtype=torch.float64).reshape(1, 2, 1, 1)
        div = float(teacher_divergence(teacher, student))
        assert div == pytest.approx(2.0, abs=1e-12)
        assert ema_rate(div) == 1.0


class TestTotalLoss:
    def test_arithmetic(self):
        assert total_loss(0.5, 0.1, 0.2, beta=5, gamma=1).total == pytest.approx(1.2, abs=1e-12)

    def test_zero_weights(self):
        assert total_loss(0.5, 0.1, 0.2, beta=0, gamma=0).total == 0.5

    def test_defaults(self):
        b = total_loss(0.1, 0.1, 0.1)
        assert (b.beta, b.gamma) == (5.0, 1.0)

    @given(st.floats(0, 1), st.floats(0, 2), st.floats(0, 1), st.floats(0, 10), st.floats(0, 10))
    def test_linear(self, sem, be, mt, beta, gamma):
        b = total_loss(sem, be, mt, beta, gamma)
        assert b.total == pytest.approx(sem + beta * be + gamma * mt, abs=1e-9)

    def test_batch_mean_of_per_image(self):
        p, q, t = random_maps(0, b=3), random_maps(1, b=3), random_maps(2, b=3)
        whole = adaptation_loss(p, q, t)
        per = [adaptation_loss(p[i:i + 1], q[i:i + 1], t[i:i + 1]).total for i in range(3)]
        assert whole.total == pytest.approx(np.mean(per), rel=1e-12)
