import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from divsal.errors import InvalidInputError
from divsal.model import build_generator
from divsal.uncertainty import (
    UncertaintyTriple,
    binary_entropy,
    decompose,
    gt_predictive_uncertainty,
    load_uncertainty,
    mc_predict,
    read_tensor,
    save_uncertainty,
    write_tensor,
)


def entropy_oracle(p):
    return -(p * math.log2(p) + (1 - p) * math.log2(1 - p))


class TestBinaryEntropy:
    def test_values(self):
        assert binary_entropy(0.5) == pytest.approx(1.0)
        assert binary_entropy(0.0) < 1e-5 and binary_entropy(1.0) < 1e-5
        assert binary_entropy(0.25) == pytest.approx(0.8113, abs=1e-4)
        assert binary_entropy(0.25) == pytest.approx(entropy_oracle(0.25), abs=1e-12)
        assert binary_entropy(0.5, normalized=False) == pytest.approx(math.log(2))

    @settings(max_examples=200)
    @given(st.floats(0.0, 1.0))
    def test_symmetric(self, p):
        assert abs(binary_entropy(p) - binary_entropy(1 - p)) <= 1e-12


class TestDecompose:
    def test_identical_stack(self, rng):
        grid = rng.random((8, 8))
        tri = decompose(np.stack([grid] * 5))
        assert np.abs(tri.epistemic).max() <= 1e-12

    def test_zero_one_pixel(self):
        tri = decompose(np.array([[[0.0]], [[1.0]]]))
        assert tri.predictive[0, 0] == pytest.approx(1.0)
        assert tri.aleatoric[0, 0] == pytest.approx(0.0, abs=1e-5)
        assert tri.epistemic[0, 0] == pytest.approx(1.0, abs=1e-5)

    def test_against_direct_formula(self, rng):
        stack = rng.random((6, 4, 4))
        tri = decompose(stack)
        np.testing.assert_allclose(tri.predictive, binary_entropy(np.clip(stack, 1e-7, 1 - 1e-7).mean(0)), atol=1e-12)
        np.testing.assert_allclose(tri.aleatoric, binary_entropy(stack).mean(0), atol=1e-12)

    def test_jensen_sweep(self, rng):
        sizes = rng.integers(2, 17, size=2000)
        worst = min(decompose(rng.random((s, 8, 8))).epistemic.min() for s in sizes)
        assert worst >= -1e-9

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5, 3, 3), elements=st.floats(0.0, 1.0)), st.permutations(range(5)))
    def test_permutation_invariant(self, stack, perm):
        a, b = decompose(stack), decompose(stack[list(perm)])
        np.testing.assert_allclose(a.predictive, b.predictive, atol=1e-12)
        np.testing.assert_allclose(a.aleatoric, b.aleatoric, atol=1e-12)
        assert a.epistemic.min() >= -1e-9

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            decompose(np.zeros((0, 4, 4)))


class TestGroundTruth:
    def test_agreement_levels(self):
        ann = np.zeros((5, 1, 4), np.uint8)
        ann[:, 0, 1] = 1          # unanimous foreground
        ann[:2, 0, 2] = 1         # 2 of 5
        ann[:3, 0, 3] = 1         # 3 of 5
        u = gt_predictive_uncertainty(ann)[0]
        assert u[0] < 1e-5 and u[1] < 1e-5
        assert u[2] == pytest.approx(0.9710, abs=1e-4)
        assert u[2] == pytest.approx(u[3], abs=1e-12)

    def test_bad_shape(self):
        with pytest.raises(InvalidInputError):
            gt_predictive_uncertainty(np.zeros((4, 4)))


class TestMonteCarlo:
    def test_ensemble_returns_all_decoders(self):
        net = build_generator("desk", "ensemble", num_annotators=3, seed=0)
        out = mc_predict(torch.rand(2, 3, 32, 32), net, "ensemble", 16, torch.Generator().manual_seed(0))
        assert out.shape == (2, 4, 32, 32)

    def test_zero_prior_sigma_collapses_samples(self):
        net = build_generator("desk", "cvae", latent_dim=4, seed=0)
        with torch.no_grad():
            net.prior_net.fc_logvar.weight.zero_()
            net.prior_net.fc_logvar.bias.fill_(-1e4)
        out = mc_predict(torch.rand(1, 3, 32, 32), net, "cvae", 6, torch.Generator().manual_seed(0))
        assert np.all(out == out[:, :1])

    @pytest.mark.parametrize("framework", ["cvae", "gan", "abp"])
    def test_seeded(self, framework):
        net = build_generator("desk", framework, latent_dim=4, seed=0)
        x = torch.rand(1, 3, 32, 32)
        a = mc_predict(x, net, framework, 3, torch.Generator().manual_seed(1))
        b = mc_predict(x, net, framework, 3, torch.Generator().manual_seed(1))
        assert a.shape == (1, 3, 32, 32) and np.array_equal(a, b)
        assert not np.array_equal(a[:, 0], a[:, 1])

    def test_errors(self):
        net = build_generator("desk", "gan", latent_dim=4, seed=0)
        with pytest.raises(InvalidInputError):
            mc_predict(torch.rand(1, 3, 32, 32), net, "gan", 0, torch.Generator())
        with pytest.raises(InvalidInputError):
            mc_predict(torch.rand(1, 3, 32, 32), net, "cvae", 2, torch.Generator())


class TestTensorFile:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8])
    def test_round_trip(self, tmp_path, rng, dtype):
        arr = (rng.random((3, 5, 7)) * 200).astype(dtype)
        write_tensor(tmp_path / "t.dstn", arr)
        back = read_tensor(tmp_path / "t.dstn")
        assert back.dtype == arr.dtype and np.array_equal(back, arr)

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "bad.dstn").write_bytes(b"NOPE0000")
        with pytest.raises(InvalidInputError):
            read_tensor(tmp_path / "bad.dstn")
        with pytest.raises(InvalidInputError):
            write_tensor(tmp_path / "x.dstn", np.zeros(3, np.int16))

    def test_truncated(self, tmp_path):
        write_tensor(tmp_path / "t.dstn", np.zeros((4, 4)))
        raw = (tmp_path / "t.dstn").read_bytes()
        (tmp_path / "t.dstn").write_bytes(raw[:-8])
        with pytest.raises(InvalidInputError):
            read_tensor(tmp_path / "t.dstn")

    def test_save_triple(self, tmp_path, rng):
        tri = decompose(rng.random((4, 6, 6)))
        save_uncertainty(tmp_path, "img_01", tri)
        for kind, arr in tri.as_dict().items():
            assert np.array_equal(load_uncertainty(tmp_path, "img_01", kind), arr)
            assert (tmp_path / f"img_01_{kind}.png").exists()
        assert isinstance(tri, UncertaintyTriple)
