import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from divsal.errors import InvalidInputError
from divsal.losses import (
    LossBreakdown,
    cvae_loss,
    ensemble_loss,
    gan_discriminator_loss,
    gan_generator_loss,
    kl_diag_gaussian,
    random_select,
    soft_iou_term,
    structure_aware_loss,
    structure_weights,
)
from divsal.model import LatentDistribution


def half_mask(size=64, dtype=torch.float32):
    t = torch.zeros(1, 1, size, size, dtype=dtype)
    t[..., : size // 2] = 1
    return t


def saturated(target, mag=40.0):
    return torch.where(target > 0, mag, -mag)


def gauss(mu, sigma):
    mu = torch.as_tensor(mu, dtype=torch.float64).reshape(1, -1)
    sigma = torch.as_tensor(sigma, dtype=torch.float64).reshape(1, -1)
    return LatentDistribution.from_sigma(mu, sigma)


class TestRandomSelect:
    def test_singleton(self, rng):
        assert all(random_select(1, rng) == 0 for _ in range(100))

    def test_empty(self, rng):
        with pytest.raises(InvalidInputError):
            random_select(0, rng)

    def test_reproducible(self):
        def seq():
            g = np.random.default_rng(3)
            return [random_select(6, g) for _ in range(50)]

        assert seq() == seq()

    def test_uniform(self, rng):
        draws = [random_select(6, rng) for _ in range(10_000)]
        counts = np.bincount(draws, minlength=6)
        assert chisquare(counts).pvalue > 0.01


class TestStructureAware:
    @pytest.mark.parametrize("value", [0.0, 1.0])
    def test_uniform_target_unit_weights(self, value):
        w = structure_weights(torch.full((2, 1, 16, 16), value))
        assert torch.equal(w, torch.ones_like(w))

    def test_weights_peak_at_edges(self):
        w = structure_weights(half_mask())
        assert w.max() > 1.5 and w[..., 0, 0] < w[..., 0, 31]

    def test_saturated_correct(self):
        t = half_mask()
        assert structure_aware_loss(saturated(t), t) < 1e-3
        z = torch.zeros(1, 1, 32, 32)
        assert structure_aware_loss(saturated(z), z) < 1e-3

    def test_complement_iou(self):
        t = half_mask()
        w = structure_weights(t)
        term = soft_iou_term(saturated(1 - t), t, w).item()
        # intersection is zero; +1 smoothing leaves 1 - 1/(sum(w) + 1)
        assert term == pytest.approx(1.0 - 1.0 / (w.sum().item() + 1.0), abs=1e-6)
        assert term > 1 - 1e-3

    def test_non_binary_target(self):
        with pytest.raises(InvalidInputError):
            structure_aware_loss(torch.zeros(1, 1, 8, 8), torch.full((1, 1, 8, 8), 0.5))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            structure_aware_loss(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 4, 4))

    def test_accepts_3d_target_and_per_sample(self):
        t = (torch.rand(3, 8, 8) > 0.5).float()
        out = structure_aware_loss(torch.zeros(3, 1, 8, 8), t, reduction="none")
        assert out.shape == (3,)

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(0)
        t = (torch.rand(2, 1, 8, 8, generator=gen) > 0.5).float()
        x = torch.randn(2, 1, 8, 8, generator=gen)
        xg = x.clone().requires_grad_(True)
        (grad,) = torch.autograd.grad(structure_aware_loss(xg, t), xg)
        x64, t64 = x.double(), t.double()
        h = 1e-5
        fd = torch.zeros_like(x64)
        for idx in np.ndindex(*x.shape):
            xp, xm = x64.clone(), x64.clone()
            xp[idx] += h
            xm[idx] -= h
            fd[idx] = (structure_aware_loss(xp, t64) - structure_aware_loss(xm, t64)) / (2 * h)
        rel = (grad.double() - fd).norm() / fd.norm()
        assert rel < 1e-3


class TestKL:
    def test_identity(self):
        q = gauss([0.3, -1.0], [0.5, 2.0])
        assert kl_diag_gaussian(q, q).item() == 0.0

    def test_closed_form(self):
        assert abs(kl_diag_gaussian(gauss([1.0], [1.0]), gauss([0.0], [1.0])).item() - 0.5) < 1e-10

    def test_against_formula(self, rng):
        mq, mp = rng.normal(size=3), rng.normal(size=3)
        sq, sp = rng.uniform(0.2, 3, 3), rng.uniform(0.2, 3, 3)
        expected = np.sum(np.log(sp / sq) + (sq**2 + (mq - mp) ** 2) / (2 * sp**2) - 0.5)
        got = kl_diag_gaussian(gauss(mq, sq), gauss(mp, sp)).item()
        assert got == pytest.approx(expected, abs=1e-12)

    def test_nonnegative_sweep(self, rng):
        n = 10_000
        q = LatentDistribution(torch.from_numpy(rng.normal(0, 2, (n, 1))), torch.from_numpy(rng.normal(0, 2, (n, 1))))
        p = LatentDistribution(torch.from_numpy(rng.normal(0, 2, (n, 1))), torch.from_numpy(rng.normal(0, 2, (n, 1))))
        assert kl_diag_gaussian(q, p, reduction="none").min().item() >= -1e-9

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            kl_diag_gaussian(gauss([0.0], [1.0]), gauss([0.0, 0.0], [1.0, 1.0]))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-5, 5), st.floats(0.05, 5), st.floats(-5, 5), st.floats(0.05, 5))
    def test_zero_iff_equal(self, mq, sq, mp, sp):
        kl = kl_diag_gaussian(gauss([mq], [sq]), gauss([mp], [sp])).item()
        assert kl >= -1e-12
        if kl <= 1e-12:
            assert abs(mq - mp) < 1e-5 and abs(sq - sp) < 1e-5


class TestBreakdowns:
    def test_cvae_saturated(self):
        t = half_mask()
        q = LatentDistribution(torch.zeros(1, 4), torch.zeros(1, 4))
        bd = cvae_loss(saturated(t), t, q, q)
        assert bd.total < 1e-3 and bd.kl >= 0
        assert abs(bd.total - sum(bd.components().values())) <= 1e-12

    def test_gan_logit_zero(self):
        z = torch.zeros(2, 1, 2, 2)
        assert gan_discriminator_loss(z, z).item() == pytest.approx(2 * math.log(2), abs=1e-6)
        assert gan_discriminator_loss(z, z).item() == pytest.approx(1.3863, abs=1e-4)

    def test_gan_lambda_zero(self):
        t = half_mask()
        logits = torch.randn(1, 1, 64, 64)
        bd = gan_generator_loss(logits, t, torch.randn(1, 1, 2, 2), lam=0.0)
        assert bd.total == bd.rec
        assert torch.equal(bd.objective, structure_aware_loss(logits, t))

    def test_gan_total_is_weighted_sum(self):
        t = half_mask()
        bd = gan_generator_loss(torch.randn(1, 1, 64, 64), t, torch.randn(1, 1, 2, 2), lam=0.1)
        assert abs(bd.total - (bd.rec + 0.1 * bd.adv)) <= 1e-12

    def test_discriminator_separation(self):
        assert gan_discriminator_loss(torch.full((1, 1, 2, 2), -40.0), torch.full((1, 1, 2, 2), 40.0)) < 1e-3

    def test_is_finite(self):
        assert LossBreakdown(1.0, 1.0).is_finite()
        assert not LossBreakdown(float("nan"), 1.0).is_finite()


class TestEnsembleLoss:
    def test_single_branch(self, rng):
        losses = [torch.tensor(0.7)]
        for _ in range(20):
            value, j = ensemble_loss(losses, rng)
            assert j == 0 and value is losses[0]

    def test_bookkeeping(self, rng):
        losses = [torch.tensor(float(i)) for i in range(6)]
        for _ in range(50):
            value, j = ensemble_loss(losses, rng)
            assert value.item() == losses[j].item()

    def test_empty(self, rng):
        with pytest.raises(InvalidInputError):
            ensemble_loss([], rng)

    def test_uniform(self, rng):
        losses = list(range(6))
        counts = np.bincount([ensemble_loss(losses, rng)[1] for _ in range(10_000)], minlength=6)
        assert chisquare(counts).pvalue > 0.01
