"""Saliency networks: backbone + dilated reductions, decoders, latent encoders, discriminator."""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError

FRAMEWORKS = ("ensemble", "cvae", "gan", "abp")


@dataclass(frozen=True)
class Profile:
    name: str
    image_size: int
    backbone: str  # "resnet50" or "small"
    stage_widths: tuple[int, int, int, int]
    reduced_width: int = 32  # C
    latent_enc_width: int = 32  # first conv width of prior/posterior nets
    disc_width: int = 32


PROFILES = {
    "paper": Profile("paper", 352, "resnet50", (256, 512, 1024, 2048)),
    "desk": Profile("desk", 64, "small", (16, 32, 64, 128), latent_enc_width=8, disc_width=8),
}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise InvalidInputError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]  # s'_1..s'_4, strides 4/8/16/32, C channels each
    latent_augmented_top: torch.Tensor | None = None  # nz'_4
    input_size: tuple[int, int] = (0, 0)

    def top(self) -> torch.Tensor:
        return self.levels[3] if self.latent_augmented_top is None else self.latent_augmented_top


@dataclass
class LatentDistribution:
    """Diagonal Gaussian stored as mean and log-variance."""

    mu: torch.Tensor
    logvar: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)

    @classmethod
    def from_sigma(cls, mu, sigma):
        return cls(mu, 2.0 * torch.log(sigma))


def reparameterize(dist: LatentDistribution, eps: torch.Tensor) -> torch.Tensor:
    return dist.mu + dist.sigma * eps


# --------------------------------------------------------------------------
# backbone
# --------------------------------------------------------------------------


def _conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SmallEncoder(nn.Module):
    """Four-stage conv encoder at strides 4/8/16/32."""

    def __init__(self, widths=(16, 32, 64, 128)):
        super().__init__()
        self.stem = _conv_bn_relu(3, widths[0], stride=2)
        stages = []
        cin = widths[0]
        for w in widths:
            stages.append(nn.Sequential(_conv_bn_relu(cin, w, stride=2), _conv_bn_relu(w, w)))
            cin = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ResNet50Encoder(nn.Module):
    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class DilatedReduction(nn.Module):
    """Parallel 1x1 and dilated 3x3 branches (rates 1, 3, 5) fused to ``cout`` channels."""

    def __init__(self, cin, cout, rates=(1, 3, 5)):
        super().__init__()
        self.branches = nn.ModuleList(
            [nn.Conv2d(cin, cout, 1)] + [nn.Conv2d(cin, cout, 3, padding=r, dilation=r) for r in rates]
        )
        self.fuse = nn.Conv2d(cout * len(self.branches), cout, 1)

    def forward(self, x):
        return self.fuse(torch.cat([F.relu(b(x)) for b in self.branches], dim=1))


class Backbone(nn.Module):
    def __init__(self, profile: Profile):
        super().__init__()
        self.encoder = ResNet50Encoder() if profile.backbone == "resnet50" else SmallEncoder(profile.stage_widths)
        self.reductions = nn.ModuleList(DilatedReduction(w, profile.reduced_width) for w in profile.stage_widths)

    def raw_features(self, image):
        return self.encoder(image)

    def forward(self, image) -> FeaturePyramid:
        if image.ndim != 4 or image.shape[1] != 3:
            raise InvalidInputError(f"expected image batch (B, 3, H, W), got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise InvalidInputError(f"image sides must be divisible by 32, got {h}x{w}")
        feats = self.encoder(image)
        return FeaturePyramid([red(f) for red, f in zip(self.reductions, feats)], None, (h, w))


# --------------------------------------------------------------------------
# decoders
# --------------------------------------------------------------------------


class Refine(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class SaliencyDecoder(nn.Module):
    """Top-down decoder: refine the coarsest level, then upsample x2 + skip + refine."""

    def __init__(self, c=32):
        super().__init__()
        self.refine = nn.ModuleList(Refine(c) for _ in range(4))
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        if len(pyramid.levels) != 4 or any(lv is None for lv in pyramid.levels):
            raise InvalidInputError("decoder needs all four pyramid levels")
        x = self.refine[3](pyramid.top())
        for k in (2, 1, 0):
            skip = pyramid.levels[k]
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False) + skip
            x = self.refine[k](x)
        logits = self.head(x)
        return F.interpolate(logits, size=pyramid.input_size, mode="bilinear", align_corners=False)


class LatentInjection(nn.Module):
    """Tile z spatially, concatenate with s'_4, 3x3 conv back to C channels."""

    def __init__(self, c=32, k=32):
        super().__init__()
        self.k = k
        self.conv = nn.Conv2d(c + k, c, 3, padding=1)

    def tiled(self, top, z):
        return torch.cat([top, z[:, :, None, None].expand(-1, -1, *top.shape[-2:])], dim=1)

    def forward(self, pyramid: FeaturePyramid, z: torch.Tensor) -> FeaturePyramid:
        if z.ndim != 2 or z.shape[1] != self.k:
            raise InvalidInputError(f"latent must have shape (B, {self.k}), got {tuple(z.shape)}")
        if not torch.isfinite(z).all():
            raise InvalidInputError("latent contains non-finite values")
        top = pyramid.levels[3]
        if z.shape[0] == 1 and top.shape[0] > 1:
            z = z.expand(top.shape[0], -1)
        elif z.shape[0] != top.shape[0]:
            raise InvalidInputError(f"latent batch {z.shape[0]} does not match features batch {top.shape[0]}")
        nz = self.conv(self.tiled(top, z))
        return replace(pyramid, latent_augmented_top=nz)


# --------------------------------------------------------------------------
# prior / posterior
# --------------------------------------------------------------------------


class LatentEncoder(nn.Module):
    """Five 4x4 stride-2 convs (C, 2C, 4C, 8C, 8C) with BN + ReLU, then mean / log-variance heads."""

    def __init__(self, in_channels, width=32, k=32):
        super().__init__()
        widths = (width, 2 * width, 4 * width, 8 * width, 8 * width)
        layers = []
        cin = in_channels
        for w in widths:
            layers += [nn.Conv2d(cin, w, 4, stride=2, padding=1), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            cin = w
        self.convs = nn.Sequential(*layers)
        self.fc_mu = nn.Linear(cin, k)
        self.fc_logvar = nn.Linear(cin, k)
        self.in_channels = in_channels

    def forward(self, x) -> LatentDistribution:
        if x.shape[1] != self.in_channels:
            raise InvalidInputError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        if min(x.shape[-2:]) < 32:
            raise InvalidInputError("input too small for five stride-2 stages (need >= 32 px)")
        h = self.convs(x).mean(dim=(2, 3))
        return LatentDistribution(self.fc_mu(h), self.fc_logvar(h))


# --------------------------------------------------------------------------
# discriminator
# --------------------------------------------------------------------------


class Discriminator(nn.Module):
    """Fully convolutional realism scorer over (image, saliency map) pairs.

    Five 4x4 stride-2 convs with leaky ReLU, then a 1x1 head; output stride 32.
    """

    def __init__(self, width=32, condition_on_image=True):
        super().__init__()
        self.condition_on_image = condition_on_image
        cin = 4 if condition_on_image else 1
        layers = []
        for i in range(5):
            w = width * 2**i
            layers += [nn.Conv2d(cin, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            cin = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, 1, 1)

    def forward(self, image, saliency_map):
        if saliency_map.ndim == 3:
            saliency_map = saliency_map[:, None]
        if image.shape[0] != saliency_map.shape[0] or image.shape[-2:] != saliency_map.shape[-2:]:
            raise InvalidInputError(
                f"image {tuple(image.shape)} and map {tuple(saliency_map.shape)} disagree in batch or size"
            )
        x = torch.cat([image, saliency_map], dim=1) if self.condition_on_image else saliency_map
        return self.head(self.body(x))


# --------------------------------------------------------------------------
# full generator
# --------------------------------------------------------------------------


class SaliencyNet(nn.Module):
    """Shared backbone with framework-specific heads.

    ``ensemble`` carries M+1 decoders, decoder j supervised by annotation j
    (j = 0 is the majority map). Latent frameworks carry a deterministic
    majority decoder, a stochastic decoder fed by the latent injection, and
    (CVAE only) prior and posterior encoders.
    """

    def __init__(self, profile: Profile, framework: str, num_annotators: int = 5, latent_dim: int = 32):
        super().__init__()
        if framework not in FRAMEWORKS:
            raise InvalidInputError(f"unknown framework {framework!r}")
        c = profile.reduced_width
        self.profile = profile
        self.framework = framework
        self.num_annotators = num_annotators
        self.latent_dim = latent_dim
        self.backbone = Backbone(profile)
        if framework == "ensemble":
            self.decoders = nn.ModuleList(SaliencyDecoder(c) for _ in range(num_annotators + 1))
        else:
            self.majority_decoder = SaliencyDecoder(c)
            self.stochastic_decoder = SaliencyDecoder(c)
            self.injection = LatentInjection(c, latent_dim)
        if framework == "cvae":
            self.prior_net = LatentEncoder(3, profile.latent_enc_width, latent_dim)
            self.posterior_net = LatentEncoder(4, profile.latent_enc_width, latent_dim)

    @property
    def is_latent(self) -> bool:
        return self.framework != "ensemble"

    def encode_backbone(self, image) -> FeaturePyramid:
        return self.backbone(image)

    def decode_deterministic(self, pyramid: FeaturePyramid, branch: int = 0) -> torch.Tensor:
        """Majority-branch logits (latent frameworks) or decoder ``branch`` logits (ensemble)."""
        if pyramid.latent_augmented_top is not None:
            raise InvalidInputError("deterministic decoding expects a pyramid without latent augmentation")
        if self.framework == "ensemble":
            return self.decoders[branch](pyramid)
        return self.majority_decoder(pyramid)

    def inject_latent(self, pyramid: FeaturePyramid, z) -> FeaturePyramid:
        return self.injection(pyramid, z)

    def decode_stochastic(self, pyramid: FeaturePyramid, z) -> torch.Tensor:
        return self.stochastic_decoder(self.inject_latent(pyramid, z))

    def encode_prior(self, image) -> LatentDistribution:
        return self.prior_net(image)

    def encode_posterior(self, image, annotation) -> LatentDistribution:
        if annotation.ndim == 3:
            annotation = annotation[:, None]
        if annotation.shape[-2:] != image.shape[-2:]:
            annotation = F.interpolate(annotation.float(), size=image.shape[-2:], mode="nearest")
        return self.posterior_net(torch.cat([image, annotation.to(image.dtype)], dim=1))

    def predict(self, image) -> torch.Tensor:
        """Point prediction in [0, 1]: majority branch (latent) or decoder 0 (ensemble)."""
        return torch.sigmoid(self.decode_deterministic(self.encode_backbone(image), 0))


def build_generator(profile, framework, num_annotators=5, latent_dim=32, seed=None) -> SaliencyNet:
    profile = get_profile(profile) if isinstance(profile, str) else profile
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        return SaliencyNet(profile, framework, num_annotators, latent_dim)


def build_discriminator(profile, condition_on_image=True, seed=None) -> Discriminator:
    profile = get_profile(profile) if isinstance(profile, str) else profile
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed + 1)
        return Discriminator(profile.disc_width, condition_on_image)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
