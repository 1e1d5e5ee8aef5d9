import math

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from divsal.data import SyntheticSpec, generate_synthetic
from divsal.errors import CheckpointError, InvalidInputError
from divsal.langevin import LangevinConfig
from divsal.losses import structure_aware_loss
from divsal.trainer import (
    Batch,
    LOG_FIELDS,
    StepRNG,
    TrainConfig,
    fit,
    init_state,
    latent_targets,
    load_checkpoint,
    make_batch,
    predict,
    save_checkpoint,
    train_step,
)


@pytest.fixture(scope="module")
def samples32():
    spec = SyntheticSpec(num_images=4, canvas=32, objects_per_image=(1, 2), salience_probs=(1.0, 0.6), seed=1)
    return generate_synthetic(spec)[0]


@pytest.fixture
def batch(samples32):
    return make_batch(samples32[:2])


def tiny(**kw):
    base = dict(image_size=32, batch_size=2, epochs=1, latent_dim=4)
    base.update(kw)
    return TrainConfig.desk(**base)


def params(model):
    return [p.detach().clone() for p in model.parameters()]


class TestConfig:
    def test_aliases_and_validation(self):
        assert tiny(sampling="majority").sampling == "majority_only"
        assert tiny(sampling="A").sampling == "all"
        with pytest.raises(InvalidInputError):
            tiny(framework="vae")
        with pytest.raises(InvalidInputError):
            tiny(sampling="sometimes")
        with pytest.raises(InvalidInputError):
            tiny(learning_rate=0)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.epochs, cfg.image_size, cfg.lambda_adv) == (2.5e-5, 50, 352, 0.1)

    def test_flat_round_trip(self):
        cfg = tiny(framework="abp", langevin=LangevinConfig(steps=3), deterministic=False)
        flat = cfg.to_flat()
        assert TrainConfig.from_flat(flat) == cfg
        as_text = {k: str(v) for k, v in flat.items()}
        assert TrainConfig.from_flat(as_text) == cfg

    def test_unknown_key(self):
        with pytest.raises(InvalidInputError):
            TrainConfig.from_flat({"epochz": "3"})


class TestSelection:
    def test_modes(self, batch):
        rng = StepRNG.for_step(0, 0)
        assert latent_targets(batch, "all", rng) == [0, 1, 2, 3, 4, 5]
        assert latent_targets(batch, "majority_only", rng) == [0]
        assert 1 <= latent_targets(batch, "random", rng)[0] <= 5

    def test_random_mode_uniform(self, batch):
        picks = [latent_targets(batch, "random", StepRNG.for_step(0, s))[0] for s in range(6000)]
        counts = np.bincount(picks, minlength=6)[1:]
        assert chisquare(counts).pvalue > 0.01

    def test_step_rng_reproducible(self):
        a, b = StepRNG.for_step(3, 11), StepRNG.for_step(3, 11)
        assert a.selector.integers(1000) == b.selector.integers(1000)
        assert torch.equal(torch.randn(3, generator=a.noise), torch.randn(3, generator=b.noise))
        c = StepRNG.for_step(3, 12)
        assert not torch.equal(torch.randn(3, generator=c.noise), torch.randn(3, generator=StepRNG.for_step(3, 11).noise))


class TestEnsembleStep:
    def test_majority_only(self, batch):
        state = init_state(tiny(framework="ensemble", sampling="majority"))
        assert {train_step(batch, state).selected_index for _ in range(5)} == {0}

    def test_selection_trace_reproducible(self, batch):
        def trace():
            state = init_state(tiny(framework="ensemble", seed=7))
            return [train_step(batch, state).selected_index for _ in range(8)]

        t = trace()
        assert t == trace() and len(set(t)) > 1

    def test_all_mode_averages(self, batch):
        state = init_state(tiny(framework="ensemble", sampling="all"))
        model = state.model
        with torch.no_grad():
            pyr = model.encode_backbone(batch.image)
            expected = np.mean([structure_aware_loss(model.decode_deterministic(pyr, j), batch.target(j)).item()
                                for j in range(6)])
        bd = train_step(batch, state)
        assert bd.selected_index is None and bd.rec == pytest.approx(expected, rel=1e-5)

    def test_only_selected_decoder_changes(self, batch):
        state = init_state(tiny(framework="ensemble"))
        before = [params(d) for d in state.model.decoders]
        j = train_step(batch, state).selected_index
        for i, d in enumerate(state.model.decoders):
            same = all(torch.equal(a, b) for a, b in zip(before[i], d.parameters()))
            assert same == (i != j)

    def test_wrong_annotator_count(self, batch):
        state = init_state(tiny(framework="ensemble", num_annotators=3))
        with pytest.raises(InvalidInputError):
            train_step(batch, state)


class TestLatentSteps:
    @pytest.mark.parametrize("sampling", ["random", "all", "majority_only"])
    def test_cvae_breakdown(self, batch, sampling):
        state = init_state(tiny(framework="cvae", sampling=sampling))
        bd = train_step(batch, state)
        assert bd.is_finite() and bd.kl >= 0
        assert abs(bd.total - (bd.rec + bd.kl + bd.mj)) <= 1e-12
        if sampling == "majority_only":
            assert bd.selected_index == 0

    def test_gan_one_update_each(self, batch):
        state = init_state(tiny(framework="gan"))
        bd = train_step(batch, state)
        for opt in (state.optimizer, state.disc_optimizer):
            steps = {int(s["step"]) for s in opt.state.values()}
            assert steps == {1}
        assert abs(bd.total - (bd.rec + 0.1 * bd.adv + bd.mj)) <= 1e-12

    def test_gan_initial_discriminator_loss(self, batch):
        state = init_state(tiny(framework="gan"))
        assert abs(train_step(batch, state).dis - 2 * math.log(2)) <= 0.5

    def test_gan_lambda_zero_ignores_discriminator(self, batch):
        results = []
        for disc_seed in (1, 2):
            state = init_state(tiny(framework="gan", lambda_adv=0.0))
            torch.manual_seed(disc_seed)
            for p in state.discriminator.parameters():
                torch.nn.init.normal_(p, std=0.5)
            train_step(batch, state)
            results.append(params(state.model))
        assert all(torch.equal(a, b) for a, b in zip(*results))

    def test_abp_zero_steps_is_prior_sample_training(self, batch):
        cfg = tiny(framework="abp", sampling="majority", langevin=LangevinConfig(steps=0))
        state = init_state(cfg)
        ref = init_state(cfg)
        rng = StepRNG.for_step(cfg.seed, 0)
        z = torch.randn(2, cfg.latent_dim, generator=StepRNG.for_step(cfg.seed, 0).noise)
        train_step(batch, state, rng)
        ref.model.train()
        pyr = ref.model.encode_backbone(batch.image)
        loss = structure_aware_loss(ref.model.decode_stochastic(pyr, z), batch.majority) + structure_aware_loss(
            ref.model.decode_deterministic(pyr), batch.majority)
        ref.optimizer.zero_grad()
        loss.backward()
        ref.optimizer.step()
        assert all(torch.equal(a, b) for a, b in zip(params(state.model), params(ref.model)))

    @pytest.mark.parametrize("steps", [0, 2])
    def test_abp_rng_accounting(self, batch, steps):
        cfg = tiny(framework="abp", sampling="random", langevin=LangevinConfig(steps=steps))
        state = init_state(cfg)
        rng = StepRNG.for_step(0, 0)
        train_step(batch, state, rng)
        ref = StepRNG.for_step(0, 0).noise
        for _ in range(steps + 1):
            torch.randn(2, cfg.latent_dim, generator=ref)
        assert torch.equal(torch.randn(5, generator=rng.noise), torch.randn(5, generator=ref))


class TestFitAndCheckpoint:
    def test_fit_reproducible(self, samples32):
        a = fit(samples32, tiny(framework="cvae", epochs=2))
        b = fit(samples32, tiny(framework="cvae", epochs=2))
        assert len(a.history) == 4
        for ra, rb in zip(a.history, b.history):
            assert ra == rb

    def test_log_file(self, samples32, tmp_path):
        fit(samples32, tiny(framework="ensemble"), log_path=tmp_path / "train.log")
        lines = (tmp_path / "train.log").read_text().splitlines()
        assert lines[0] == ", ".join(LOG_FIELDS) and len(lines) == 3

    def test_round_trip_and_resume(self, samples32, tmp_path):
        cfg = tiny(framework="gan", epochs=2)
        straight = fit(samples32, cfg)
        first = fit(samples32, tiny(framework="gan", epochs=1))
        save_checkpoint(first, tmp_path / "ck.pt")
        loaded = load_checkpoint(tmp_path / "ck.pt", expected_profile="desk")
        images = make_batch(samples32).image
        assert torch.equal(predict(first.model, images), predict(loaded.model, images))
        resumed = fit(samples32, cfg, state=loaded)
        assert resumed.history == straight.history
        assert all(torch.equal(a, b) for a, b in zip(params(resumed.model), params(straight.model)))

    def test_version_and_profile_mismatch(self, samples32, tmp_path):
        state = init_state(tiny(framework="ensemble"))
        save_checkpoint(state, tmp_path / "ck.pt")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck.pt", expected_profile="paper")
        payload = torch.load(tmp_path / "ck.pt", weights_only=True)
        payload["version"] = 99
        torch.save(payload, tmp_path / "bad.pt")
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "bad.pt")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing.pt")

    def test_empty_dataset(self):
        with pytest.raises(InvalidInputError):
            fit([], tiny())


def test_batch_targets(batch):
    assert torch.equal(batch.target(0), batch.majority)
    assert torch.equal(batch.target(3), batch.annotations[:, 2:3])
    assert isinstance(batch, Batch) and batch.num_annotators == 5


@pytest.fixture(scope="module")
def fixed_batch64():
    spec = SyntheticSpec(num_images=8, objects_per_image=(2, 2), salience_probs=(1.0, 0.6), seed=9)
    return make_batch(generate_synthetic(spec)[0])


@pytest.mark.slow
def test_ensemble_overfits_selected_branch(fixed_batch64):
    state = init_state(TrainConfig.desk(framework="ensemble", seed=9))
    losses = [train_step(fixed_batch64, state).rec for _ in range(200)]
    assert np.mean(losses[-10:]) <= 0.5 * losses[0]


@pytest.mark.slow
def test_cvae_kl_trends_down(fixed_batch64):
    state = init_state(TrainConfig.desk(framework="cvae", seed=9))
    kl = np.array([train_step(fixed_batch64, state).kl for _ in range(500)])
    blocks = kl.reshape(10, 50).mean(axis=1)
    assert np.all(np.diff(blocks) <= 0)
