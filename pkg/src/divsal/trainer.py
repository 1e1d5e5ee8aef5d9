"""Training steps for the four frameworks, the fit loop, and checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CheckpointError, InvalidInputError
from .langevin import LangevinConfig, langevin_sample
from .losses import (
    LossBreakdown,
    cvae_loss,
    gan_discriminator_loss,
    gan_generator_loss,
    random_select,
    structure_aware_loss,
)
from .model import FRAMEWORKS, FeaturePyramid, build_discriminator, build_generator, get_profile, reparameterize

log = logging.getLogger(__name__)

SAMPLING_MODES = ("random", "all", "majority_only")
SAMPLING_ALIASES = {"majority": "majority_only", "R": "random", "A": "all", "M": "majority_only"}
CHECKPOINT_FORMAT = "divsal-checkpoint"
CHECKPOINT_VERSION = 1
LOG_FIELDS = ("step", "epoch", "framework", "selected_index", "rec", "kl", "adv", "mj", "total")


@dataclass
class TrainConfig:
    framework: str = "cvae"
    sampling: str = "random"
    num_annotators: int = 5
    latent_dim: int = 32
    lambda_adv: float = 0.1
    langevin: LangevinConfig = field(default_factory=LangevinConfig)
    learning_rate: float = 2.5e-5
    epochs: int = 50
    batch_size: int = 8
    image_size: int = 352
    seed: int = 0
    profile: str = "paper"
    # GAN discriminator sees the image as well as the map
    condition_disc_on_image: bool = True
    # ensemble: "paired" draws one index for decoder and target, "independent" draws them separately
    pairing: str = "paired"
    deterministic: bool = True

    def __post_init__(self):
        self.sampling = SAMPLING_ALIASES.get(self.sampling, self.sampling)
        if self.framework not in FRAMEWORKS:
            raise InvalidInputError(f"unknown framework {self.framework!r}")
        if self.sampling not in SAMPLING_MODES:
            raise InvalidInputError(f"unknown sampling mode {self.sampling!r}")
        if self.pairing not in ("paired", "independent"):
            raise InvalidInputError(f"unknown pairing {self.pairing!r}")
        get_profile(self.profile)
        for name in ("num_annotators", "latent_dim", "epochs", "batch_size", "image_size"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.lambda_adv < 0:
            raise InvalidInputError("learning_rate must be > 0 and lambda_adv >= 0")
        if isinstance(self.langevin, dict):
            self.langevin = LangevinConfig(**self.langevin)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale defaults: 64 px, small encoder, batch 8, 10 epochs."""
        base = dict(profile="desk", image_size=64, batch_size=8, epochs=10, learning_rate=1e-3)
        base.update(overrides)
        return cls(**base)

    def to_flat(self) -> dict:
        d = dataclasses.asdict(self)
        lv = d.pop("langevin")
        d.update({f"langevin_{k}": v for k, v in lv.items()})
        return d

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        """Build from flat ``key -> value`` pairs; string values are coerced to field types."""
        flat = dict(flat)
        lv_kwargs = {}
        for f in dataclasses.fields(LangevinConfig):
            key = f"langevin_{f.name}"
            if key in flat:
                lv_kwargs[f.name] = _coerce(flat.pop(key), type(getattr(LangevinConfig(), f.name)))
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name == "langevin" or f.name not in flat:
                continue
            default = f.default if f.default is not dataclasses.MISSING else None
            kwargs[f.name] = _coerce(flat.pop(f.name), type(default) if default is not None else str)
        if flat:
            raise InvalidInputError(f"unknown config keys: {sorted(flat)}")
        return cls(langevin=LangevinConfig(**lv_kwargs), **kwargs)


def _coerce(value, typ):
    if not isinstance(value, str):
        return typ(value)
    if typ is bool:
        lowered = value.strip().lower()
        if lowered not in ("1", "0", "true", "false", "yes", "no"):
            raise InvalidInputError(f"not a boolean: {value!r}")
        return lowered in ("1", "true", "yes")
    return typ(value.strip())


@dataclass
class Batch:
    image: torch.Tensor  # (B, 3, H, W)
    annotations: torch.Tensor  # (B, M, H, W)
    majority: torch.Tensor  # (B, 1, H, W)

    def target(self, index: int) -> torch.Tensor:
        """y^0 for index 0, otherwise annotation ``index`` (1-based), as (B, 1, H, W)."""
        return self.majority if index == 0 else self.annotations[:, index - 1 : index]

    @property
    def num_annotators(self) -> int:
        return self.annotations.shape[1]


def make_batch(samples: Sequence, image_size: int | None = None) -> Batch:
    image = torch.from_numpy(np.stack([s.image for s in samples])).float().permute(0, 3, 1, 2).contiguous()
    ann = torch.from_numpy(np.stack([s.annotations for s in samples])).float()
    maj = torch.from_numpy(np.stack([s.majority for s in samples])).float()[:, None]
    if image_size is not None and image.shape[-1] != image_size:
        size = (image_size, image_size)
        image = F.interpolate(image, size=size, mode="bilinear", align_corners=False)
        ann = F.interpolate(ann, size=size, mode="nearest")
        maj = F.interpolate(maj, size=size, mode="nearest")
    return Batch(image, ann, maj)


@dataclass
class StepRNG:
    """Random streams for one update: index selection and Gaussian noise."""

    selector: np.random.Generator
    noise: torch.Generator

    @classmethod
    def for_step(cls, seed: int, step: int) -> "StepRNG":
        ss = np.random.SeedSequence([seed, step])
        sel_seq, noise_seq = ss.spawn(2)
        noise = torch.Generator().manual_seed(int(noise_seq.generate_state(1, dtype=np.uint64)[0] >> 1))
        return cls(np.random.default_rng(sel_seq), noise)


@dataclass
class TrainState:
    config: TrainConfig
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    discriminator: torch.nn.Module | None = None
    disc_optimizer: torch.optim.Optimizer | None = None
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)


def init_state(config: TrainConfig) -> TrainState:
    model = build_generator(config.profile, config.framework, config.num_annotators, config.latent_dim, seed=config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    disc = disc_opt = None
    if config.framework == "gan":
        disc = build_discriminator(config.profile, config.condition_disc_on_image, seed=config.seed)
        disc_opt = torch.optim.Adam(disc.parameters(), lr=config.learning_rate)
    return TrainState(config, model, opt, disc, disc_opt)


def set_deterministic(flag: bool = True):
    torch.use_deterministic_algorithms(flag)


# --------------------------------------------------------------------------
# target selection
# --------------------------------------------------------------------------


def latent_targets(batch: Batch, sampling: str, rng: StepRNG) -> list[int]:
    """Target indices for the stochastic branch (0 = majority map)."""
    m = batch.num_annotators
    if sampling == "random":
        return [1 + random_select(m, rng.selector)]
    if sampling == "all":
        return list(range(m + 1))
    return [0]


def _check_batch(batch: Batch, state: TrainState):
    if batch.num_annotators != state.config.num_annotators:
        raise InvalidInputError(
            f"batch carries {batch.num_annotators} annotations, model expects M={state.config.num_annotators}"
        )


def _mean(values):
    return sum(values) / len(values)


def _apply(optimizer, objective):
    optimizer.zero_grad(set_to_none=True)
    objective.backward()
    optimizer.step()


# --------------------------------------------------------------------------
# per-framework steps
# --------------------------------------------------------------------------


def train_step_ensemble(batch: Batch, state: TrainState, rng: StepRNG) -> LossBreakdown:
    """One update of the M+1-decoder ensemble.

    ``random`` back-propagates a single uniformly chosen branch, ``all``
    averages every branch, ``majority_only`` always uses branch 0.
    """
    _check_batch(batch, state)
    cfg, model = state.config, state.model
    model.train()
    pool = batch.num_annotators + 1
    pyr = model.encode_backbone(batch.image)
    if cfg.sampling == "all":
        losses = [structure_aware_loss(model.decode_deterministic(pyr, j), batch.target(j)) for j in range(pool)]
        objective = torch.stack(losses).mean()
        rec, selected = _mean([float(v.detach()) for v in losses]), None
    else:
        if cfg.sampling == "random":
            selected = random_select(pool, rng.selector)
            target_index = selected if cfg.pairing == "paired" else random_select(pool, rng.selector)
        else:
            selected = target_index = 0
        objective = structure_aware_loss(model.decode_deterministic(pyr, selected), batch.target(target_index))
        rec = float(objective.detach())
    _apply(state.optimizer, objective)
    return LossBreakdown(total=rec, rec=rec, selected_index=selected, objective=objective)


def train_step_cvae(batch: Batch, state: TrainState, rng: StepRNG) -> LossBreakdown:
    """Posterior-sampled reconstruction + KL(posterior || prior) + majority-branch loss."""
    _check_batch(batch, state)
    cfg, model = state.config, state.model
    model.train()
    pyr = model.encode_backbone(batch.image)
    prior = model.encode_prior(batch.image)
    targets = latent_targets(batch, cfg.sampling, rng)
    parts = []
    for idx in targets:
        y = batch.target(idx)
        post = model.encode_posterior(batch.image, y)
        eps = torch.randn(post.mu.shape, generator=rng.noise, dtype=post.mu.dtype)
        logits = model.decode_stochastic(pyr, reparameterize(post, eps))
        parts.append(cvae_loss(logits, y, post, prior))
    mj = structure_aware_loss(model.decode_deterministic(pyr), batch.majority)
    objective = torch.stack([p.objective for p in parts]).mean() + mj
    _apply(state.optimizer, objective)
    rec, kl, mj_f = _mean([p.rec for p in parts]), _mean([p.kl for p in parts]), float(mj.detach())
    return LossBreakdown(
        total=rec + kl + mj_f, rec=rec, kl=kl, mj=mj_f,
        selected_index=targets[0] if len(targets) == 1 else None, objective=objective,
    )


def train_step_gan(batch: Batch, state: TrainState, rng: StepRNG) -> LossBreakdown:
    """One discriminator update followed by one generator update."""
    _check_batch(batch, state)
    cfg, model, disc = state.config, state.model, state.discriminator
    model.train()
    disc.train()
    targets = latent_targets(batch, cfg.sampling, rng)
    z = torch.randn(batch.image.shape[0], cfg.latent_dim, generator=rng.noise)
    pyr = model.encode_backbone(batch.image)
    logits = model.decode_stochastic(pyr, z)
    fake = torch.sigmoid(logits)

    real_scores = [disc(batch.image, batch.target(i)) for i in targets]
    fake_scores = disc(batch.image, fake.detach())
    dis = torch.stack([gan_discriminator_loss(fake_scores, r) for r in real_scores]).mean()
    _apply(state.disc_optimizer, dis)

    realism = disc(batch.image, fake)
    parts = [gan_generator_loss(logits, batch.target(i), realism, cfg.lambda_adv) for i in targets]
    mj = structure_aware_loss(model.decode_deterministic(pyr), batch.majority)
    objective = torch.stack([p.objective for p in parts]).mean() + mj
    _apply(state.optimizer, objective)
    rec, adv, mj_f = _mean([p.rec for p in parts]), parts[0].adv, float(mj.detach())
    return LossBreakdown(
        total=rec + cfg.lambda_adv * adv + mj_f, rec=rec, adv=adv, mj=mj_f, dis=float(dis.detach()),
        selected_index=targets[0] if len(targets) == 1 else None, objective=objective,
    )


def train_step_abp(batch: Batch, state: TrainState, rng: StepRNG) -> LossBreakdown:
    """Langevin inference of z for the selected annotation, then a parameter update."""
    _check_batch(batch, state)
    cfg, model = state.config, state.model
    model.train()
    pyr = model.encode_backbone(batch.image)
    frozen = FeaturePyramid([lv.detach() for lv in pyr.levels], None, pyr.input_size)

    def generator(_image, z):
        return torch.sigmoid(model.decode_stochastic(frozen, z))

    targets = latent_targets(batch, cfg.sampling, rng)
    recs = []
    for idx in targets:
        y = batch.target(idx)
        z_t = langevin_sample(batch.image, y, generator, cfg.langevin, rng.noise, cfg.latent_dim)
        recs.append(structure_aware_loss(model.decode_stochastic(pyr, z_t), y))
    mj = structure_aware_loss(model.decode_deterministic(pyr), batch.majority)
    objective = torch.stack(recs).mean() + mj
    _apply(state.optimizer, objective)
    rec, mj_f = _mean([float(r.detach()) for r in recs]), float(mj.detach())
    return LossBreakdown(
        total=rec + mj_f, rec=rec, mj=mj_f,
        selected_index=targets[0] if len(targets) == 1 else None, objective=objective,
    )


STEP_FUNCTIONS: dict[str, Callable] = {
    "ensemble": train_step_ensemble,
    "cvae": train_step_cvae,
    "gan": train_step_gan,
    "abp": train_step_abp,
}


def train_step(batch: Batch, state: TrainState, rng: StepRNG | None = None) -> LossBreakdown:
    """Dispatch on the configured framework, then record the step in ``state.history``."""
    if rng is None:
        rng = StepRNG.for_step(state.config.seed, state.step)
    bd = STEP_FUNCTIONS[state.config.framework](batch, state, rng)
    state.history.append(history_record(state, bd))
    state.step += 1
    return bd


def history_record(state: TrainState, bd: LossBreakdown) -> dict:
    return {
        "step": state.step,
        "epoch": state.epoch,
        "framework": state.config.framework,
        "selected_index": bd.selected_index,
        "rec": bd.rec,
        "kl": bd.kl,
        "adv": bd.adv,
        "mj": bd.mj,
        "total": bd.total,
    }


def format_log_line(rec: dict) -> str:
    def fmt(v):
        if v is None:
            return ""
        return f"{v:.17g}" if isinstance(v, float) else str(v)

    return ", ".join(fmt(rec[k]) for k in LOG_FIELDS)


# --------------------------------------------------------------------------
# fit loop
# --------------------------------------------------------------------------


def fit(
    dataset: Sequence,
    config: TrainConfig,
    state: TrainState | None = None,
    log_path=None,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
) -> TrainState:
    """Train for ``config.epochs`` epochs with seeded per-epoch shuffling.

    Resumes from ``state.epoch`` when a state is supplied.
    """
    if len(dataset) == 0:
        raise InvalidInputError("empty dataset")
    if config.deterministic:
        set_deterministic(True)
    if state is None:
        state = init_state(config)
    full = make_batch(dataset, config.image_size)
    n = full.image.shape[0]
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists() or log_path.stat().st_size == 0
        log_file = open(log_path, "a")
        if new:
            log_file.write(", ".join(LOG_FIELDS) + "\n")
    try:
        while state.epoch < config.epochs:
            order = np.random.default_rng([config.seed, state.epoch, 0x5EED]).permutation(n)
            for start in range(0, n, config.batch_size):
                idx = torch.from_numpy(order[start : start + config.batch_size])
                batch = Batch(full.image[idx], full.annotations[idx], full.majority[idx])
                train_step(batch, state)
                if log_file is not None:
                    log_file.write(format_log_line(state.history[-1]) + "\n")
            state.epoch += 1
            last = state.history[-1]
            log.info("epoch %d/%d step %d total %.4f", state.epoch, config.epochs, state.step, last["total"])
            if checkpoint_dir is not None and checkpoint_every and state.epoch % checkpoint_every == 0:
                save_checkpoint(state, Path(checkpoint_dir) / f"epoch_{state.epoch:03d}.pt")
    finally:
        if log_file is not None:
            log_file.close()
    return state


@torch.no_grad()
def predict(model, images: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    """Majority-branch (or decoder-0) probabilities in eval mode, shape (B, 1, H, W)."""
    model.eval()
    out = [model.predict(images[i : i + batch_size]) for i in range(0, images.shape[0], batch_size)]
    return torch.cat(out)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(state: TrainState, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "profile": state.config.profile,
        "config": state.config.to_flat(),
        "generator": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "discriminator": None if state.discriminator is None else state.discriminator.state_dict(),
        "disc_optimizer": None if state.disc_optimizer is None else state.disc_optimizer.state_dict(),
        "epoch": state.epoch,
        "step": state.step,
        # per-step streams are derived from (seed, step); this pair is the full RNG state
        "rng_state": {"seed": state.config.seed, "step": state.step},
        "history": state.history,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, expected_profile: str | None = None) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a divsal checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
        )
    if expected_profile is not None and payload["profile"] != expected_profile:
        raise CheckpointError(f"checkpoint profile {payload['profile']!r} != requested {expected_profile!r}")
    config = TrainConfig.from_flat(payload["config"])
    state = init_state(config)
    state.model.load_state_dict(payload["generator"])
    state.optimizer.load_state_dict(payload["optimizer"])
    if state.discriminator is not None:
        state.discriminator.load_state_dict(payload["discriminator"])
        state.disc_optimizer.load_state_dict(payload["disc_optimizer"])
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.history = list(payload["history"])
    return state
