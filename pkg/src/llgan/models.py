"""DCGAN+ generator and discriminator.

The generator upsamples a 500-d latent vector from 1x1 to 282x282 through six
transposed convolutions (1 -> 8 -> 18 -> 36 -> 72 -> 142 -> 282); the
discriminator mirrors it with five strided convolutions
(282 -> 141 -> 71 -> 36 -> 18 -> 9) and a single-logit fc layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from llgan.diffcore import conv_out_size, conv_transpose_out_size

IMAGE_SIZE = 282

# (depth, kernel, stride, pad) per layer
GENERATOR_LAYERS = (
    (1024, 8, 2, 0),
    (512, 4, 2, 0),
    (256, 4, 2, 1),
    (128, 4, 2, 1),
    (64, 2, 2, 1),
    (3, 2, 2, 1),
)
DISCRIMINATOR_LAYERS = (
    (64, 4, 2, 1),
    (128, 3, 2, 1),
    (256, 3, 2, 1),
    (512, 3, 2, 1),
    (1024, 3, 2, 1),
)


def _scaled(depth: int, scale: float) -> int:
    return max(1, int(round(depth * scale)))


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 500
    channel_scale: float = 1.0

    def __post_init__(self):
        if not 0 < self.channel_scale <= 1:
            raise ValueError("channel_scale must lie in (0, 1]")

    @property
    def depths(self) -> tuple[int, ...]:
        # the RGB output layer is never scaled
        return tuple(_scaled(d, self.channel_scale) for d, *_ in GENERATOR_LAYERS[:-1]) + (3,)

    def spatial_chain(self) -> list[int]:
        sizes = [1]
        for _, k, s, p in GENERATOR_LAYERS:
            sizes.append(conv_transpose_out_size(sizes[-1], k, s, p))
        return sizes


@dataclass(frozen=True)
class DiscriminatorConfig:
    channel_scale: float = 1.0
    d_l3_depth: int = 128
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        if not 0 < self.channel_scale <= 1:
            raise ValueError("channel_scale must lie in (0, 1]")

    @property
    def depths(self) -> tuple[int, ...]:
        raw = [d for d, *_ in DISCRIMINATOR_LAYERS]
        raw[1] = self.d_l3_depth
        return tuple(_scaled(d, self.channel_scale) for d in raw)

    def spatial_chain(self) -> list[int]:
        sizes = [self.image_size]
        for _, k, s, p in DISCRIMINATOR_LAYERS:
            sizes.append(conv_out_size(sizes[-1], k, s, p))
        return sizes


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = config or GeneratorConfig()
        layers = []
        cin = self.config.latent_dim
        depths = self.config.depths
        for i, ((_, k, s, p), cout) in enumerate(zip(GENERATOR_LAYERS, depths)):
            layers.append(nn.ConvTranspose2d(cin, cout, k, s, p))
            if i < len(GENERATOR_LAYERS) - 1:
                layers += [nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
            else:
                layers.append(nn.Tanh())
            cin = cout
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() == 4:
            z = z.flatten(1)
        if z.dim() != 2 or z.shape[1] != self.config.latent_dim:
            raise ValueError(f"expected latent batch N x {self.config.latent_dim}, got {tuple(z.shape)}")
        return self.net(z[:, :, None, None])


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = config or DiscriminatorConfig()
        layers = []
        cin = 3
        for i, ((_, k, s, p), cout) in enumerate(zip(DISCRIMINATOR_LAYERS, self.config.depths)):
            layers.append(nn.Conv2d(cin, cout, k, s, p))
            if i > 0:
                layers.append(nn.BatchNorm2d(cout))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            cin = cout
        self.features = nn.Sequential(*layers)
        final = self.config.spatial_chain()[-1]
        self.fc = nn.Linear(cin * final * final, 1)

    @property
    def fc_in_features(self) -> int:
        return self.fc.in_features

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        size = self.config.image_size
        if images.dim() != 4 or images.shape[1:] != (3, size, size):
            raise ValueError(f"expected N x 3 x {size} x {size} images, got {tuple(images.shape)}")
        return self.fc(self.features(images).flatten(1)).squeeze(1)


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """DCGAN initialisation: conv weights N(0, 0.02), norm gamma N(1, 0.02), beta 0."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=gen) * 0.02)
                m.bias.zero_()
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def sample_latent(n: int, latent_dim: int, generator: torch.Generator | None = None) -> torch.Tensor:
    return torch.randn(n, latent_dim, generator=generator)
