"""Stage-II networks: detector backbone, ROI heads, domain critics.

A small two-scale backbone feeds a single-anchor proposal head; ROI
features are pooled with roi_align and pass through a feature
disentangler that splits each ROI into a content map and a compact
style code.  Recognition heads (class / box refinement / mask) read the
content map only, so instance appearance is handled by the style path
and the consistency loss rather than by the recognizers.

Domain alignment is adversarial through gradient reversal at two
granularities: image-level on the fused backbone map, instance-level on
pooled ROI content.
"""

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import roi_align

FEATURE_STRIDE = 4
ANCHOR_SIZE = 14.0
ROI_SIZE = 14
MASK_SIZE = 28
INSTANCE_STYLE_DIM = 32


def _conv_in_lrelu(cin, cout, k, s, p):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, s, p),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(0.2, inplace=True),
    )


class Backbone(nn.Module):
    """Stride-4 fused feature map from a stride-4/stride-8 pyramid."""

    def __init__(self):
        super().__init__()
        self.stem = _conv_in_lrelu(3, 24, 3, 1, 1)
        self.down1 = _conv_in_lrelu(24, 32, 4, 2, 1)  # /2
        self.down2 = _conv_in_lrelu(32, 48, 4, 2, 1)  # /4
        self.down3 = _conv_in_lrelu(48, 64, 4, 2, 1)  # /8
        self.fuse = _conv_in_lrelu(48 + 64, 64, 3, 1, 1)

    def forward(self, x):
        f4 = self.down2(self.down1(self.stem(x)))
        f8 = self.down3(f4)
        up = F.interpolate(f8, size=f4.shape[2:], mode="nearest")
        return self.fuse(torch.cat([f4, up], dim=1))


class ProposalHead(nn.Module):
    """Per-cell objectness and box deltas for one anchor per location."""

    def __init__(self, channels=64):
        super().__init__()
        self.trunk = nn.Sequential(nn.Conv2d(channels, 64, 3, 1, 1), nn.ReLU(inplace=True))
        self.objectness = nn.Conv2d(64, 1, 1)
        self.deltas = nn.Conv2d(64, 4, 1)

    def forward(self, features):
        t = self.trunk(features)
        b = features.shape[0]
        obj = self.objectness(t).reshape(b, -1)
        deltas = self.deltas(t).reshape(b, 4, -1).permute(0, 2, 1)
        return obj, deltas


class RoiDisentangler(nn.Module):
    """Split an ROI feature into a content map and a style vector,
    and regenerate the input from the pair (cycle check of the split)."""

    def __init__(self, channels=64, style_dim=INSTANCE_STYLE_DIM):
        super().__init__()
        self.content = nn.Sequential(
            nn.Conv2d(channels, 64, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(64, 64, 3, 1, 1), nn.ReLU(inplace=True),
        )
        self.style = nn.Sequential(
            nn.Conv2d(channels, 32, 4, 2, 1), nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(32, style_dim),
        )
        self.regen = nn.Sequential(
            nn.Conv2d(64 + style_dim, 64, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(64, channels, 3, 1, 1),
        )

    def forward(self, rois):
        c = self.content(rois)
        z = self.style(rois)
        tiled = z[:, :, None, None].expand(-1, z.shape[1], c.shape[2], c.shape[3])
        rec = self.regen(torch.cat([c, tiled], dim=1))
        return c, z, rec


class RoiHeads(nn.Module):
    """Class, box-refinement and mask predictions from ROI content maps."""

    def __init__(self, channels=64):
        super().__init__()
        self.pool_trunk = nn.Sequential(nn.Linear(channels, 32), nn.ReLU(inplace=True))
        self.cls = nn.Linear(32, 1)
        self.box = nn.Linear(32, 4)
        self.mask = nn.Sequential(
            nn.Conv2d(channels, 32, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(32, 16, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(16, 1, 1),
        )

    def forward(self, content):
        pooled = content.mean(dim=(2, 3))
        t = self.pool_trunk(pooled)
        return self.cls(t).squeeze(-1), self.box(t), self.mask(content).squeeze(1)


class GlobalCritic(nn.Module):
    """Image-level domain critic on the fused backbone map (patch logits)."""

    def __init__(self, channels=64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, 32, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(32, 1, 3, 1, 1),
        )

    def forward(self, f):
        return self.net(f)


class LocalCritic(nn.Module):
    """Instance-level domain critic on pooled ROI content vectors."""

    def __init__(self, channels=64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(channels, 32), nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(32, 1),
        )

    def forward(self, pooled):
        return self.net(pooled).squeeze(-1)


class SegmentationModel(nn.Module):
    """Bundle of the full stage-II network."""

    def __init__(self, roi_disentangle=True):
        super().__init__()
        self.roi_disentangle = roi_disentangle
        self.backbone = Backbone()
        self.proposal = ProposalHead()
        self.disentangler = RoiDisentangler()
        self.heads = RoiHeads()
        self.global_critic = GlobalCritic()
        self.local_critic = LocalCritic()

    def pool_rois(self, features, boxes):
        """roi_align on the stride-4 map; boxes are image-space xyxy."""
        return roi_align(
            features, boxes, output_size=ROI_SIZE,
            spatial_scale=1.0 / FEATURE_STRIDE, sampling_ratio=2, aligned=True,
        )

    def roi_forward(self, features, boxes):
        """(content, style, regen_loss_input, cls, box, mask) for ROIs.

        With the disentangler off, heads read raw ROI features and the
        style/regeneration path is bypassed.
        """
        rois = self.pool_rois(features, boxes)
        if self.roi_disentangle:
            content, style, rec = self.disentangler(rois)
        else:
            content, style, rec = rois, None, None
        cls, box, mask = self.heads(content)
        return {
            "rois": rois, "content": content, "style": style, "recon": rec,
            "cls": cls, "box": box, "mask": mask,
        }
