"""Disentangled translation networks (stage I).

Content and style are split per image: a content encoder with a shared
last layer maps both domains into one structure space, a per-domain
style encoder produces a compact appearance code, and a generator whose
first layer is shared re-combines any (content, style) pair.  Weight
sharing at the content/generator junction is what ties the two domains
to a common content representation.

Sized for 64x64 patches on CPU; channel widths are deliberately small.
"""

import torch
import torch.nn.functional as F
from torch import nn

STYLE_DIM = 32
CONTENT_CHANNELS = 64


def _conv_in_lrelu(cin, cout, k, s, p):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, s, p),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(0.2, inplace=True),
    )


class ContentEncoder(nn.Module):
    """Per-domain front ends with a shared final block.

    Output is (B, 64, H/4, W/4): two stride-2 stages, so 16x16 maps for
    64x64 inputs.
    """

    def __init__(self):
        super().__init__()
        def front():
            return nn.Sequential(
                _conv_in_lrelu(3, 16, 3, 1, 1),
                _conv_in_lrelu(16, 32, 4, 2, 1),
                _conv_in_lrelu(32, 64, 4, 2, 1),
            )

        self.front = nn.ModuleDict({"source": front(), "target": front()})
        self.shared = _conv_in_lrelu(64, CONTENT_CHANNELS, 3, 1, 1)

    def forward(self, x, domain):
        return self.shared(self.front[domain](x))


class StyleEncoder(nn.Module):
    """Global appearance code: strided convs, pooled, projected to 32-d."""

    def __init__(self, dim=STYLE_DIM):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 4, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 4, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(32, 48, 4, 2, 1), nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.proj = nn.Linear(48, dim)

    def forward(self, x):
        return self.proj(self.net(x).flatten(1))


class Generator(nn.Module):
    """Decode (content map, style vector) into an image.

    The first block is shared between domains; upsampling branches are
    per-domain.  Style enters by broadcast-concatenation onto the
    content map.
    """

    def __init__(self, style_dim=STYLE_DIM):
        super().__init__()
        self.shared = _conv_in_lrelu(CONTENT_CHANNELS + style_dim, 64, 3, 1, 1)

        def branch():
            return nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                _conv_in_lrelu(64, 32, 3, 1, 1),
                nn.Upsample(scale_factor=2, mode="nearest"),
                _conv_in_lrelu(32, 16, 3, 1, 1),
                nn.Conv2d(16, 3, 3, 1, 1),
            )

        self.branch = nn.ModuleDict({"source": branch(), "target": branch()})

    def forward(self, content, style, domain):
        b, _, h, w = content.shape
        tiled = style[:, :, None, None].expand(b, style.shape[1], h, w)
        x = self.shared(torch.cat([content, tiled], dim=1))
        return torch.sigmoid(self.branch[domain](x))


class ImageDiscriminator(nn.Module):
    """PatchGAN-style discriminator; returns an (B, 1, H/8, W/8) logit map."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(16, 32, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(32, 64, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(64, 1, 3, 1, 1),
        )

    def forward(self, x):
        return self.net(x)


class ContentDiscriminator(nn.Module):
    """Tries to tell which domain a content map came from (scalar logit)."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(CONTENT_CHANNELS, 64, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(64, 64, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(64, 1, 4, 1, 0),
        )

    def forward(self, c):
        return self.net(c).mean(dim=(2, 3))


class ShapeHead(nn.Module):
    """Multi-scale dense predictor used for shape supervision.

    The input is analyzed at full, half and quarter resolution; per-scale
    features are upsampled back and fused into a single-channel logit
    map.  One instance predicts nucleus masks from RGB, another predicts
    boundaries from the hematoxylin channel.
    """

    def __init__(self, in_channels):
        super().__init__()
        def tower():
            return nn.Sequential(
                nn.Conv2d(in_channels, 16, 3, 1, 1), nn.ReLU(inplace=True),
                nn.Conv2d(16, 16, 3, 1, 1), nn.ReLU(inplace=True),
            )

        self.towers = nn.ModuleList([tower() for _ in range(3)])
        self.fuse = nn.Sequential(
            nn.Conv2d(48, 16, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(16, 1, 3, 1, 1),
        )

    def forward(self, x):
        h, w = x.shape[2:]
        feats = []
        for scale, tower in zip((1, 2, 4), self.towers):
            xs = F.avg_pool2d(x, scale) if scale > 1 else x
            f = tower(xs)
            if scale > 1:
                f = F.interpolate(f, size=(h, w), mode="nearest")
            feats.append(f)
        return self.fuse(torch.cat(feats, dim=1))


class TranslationModel(nn.Module):
    """Bundle of all stage-I networks, keyed for checkpointing."""

    def __init__(self, style_dim=STYLE_DIM):
        super().__init__()
        self.content_encoder = ContentEncoder()
        self.style_encoder = nn.ModuleDict(
            {"source": StyleEncoder(style_dim), "target": StyleEncoder(style_dim)}
        )
        self.generator = Generator(style_dim)
        self.image_disc = nn.ModuleDict(
            {"source": ImageDiscriminator(), "target": ImageDiscriminator()}
        )
        self.content_disc = ContentDiscriminator()
        self.mask_head = ShapeHead(3)
        self.boundary_head = ShapeHead(1)

    def encode(self, x, domain):
        return self.content_encoder(x, domain), self.style_encoder[domain](x)

    def decode(self, content, style, domain):
        return self.generator(content, style, domain)

    def generator_modules(self):
        """Everything optimized in the generator step."""
        return [
            self.content_encoder,
            self.style_encoder,
            self.generator,
            self.mask_head,
            self.boundary_head,
        ]

    def discriminator_modules(self):
        return [self.image_disc, self.content_disc]
