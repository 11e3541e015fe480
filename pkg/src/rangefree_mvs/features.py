"""Shared-weight image features, reference context features and lookup pyramids."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensor_core import check_finite


@dataclass
class FeatureConfig:
    c_coarse: int = 64
    c_fine: int = 32
    c_ctx: int = 96
    c_ctx_hidden: int = 48
    width: tuple = (32, 48, 64)
    norm: str = "instance"  # "instance" | "none"


class ResidualConv(nn.Module):
    def __init__(self, c, norm):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, padding=1)
        self.norm = nn.InstanceNorm2d(c, affine=True) if norm == "instance" else nn.Identity()

    def forward(self, x):
        return x + F.relu(self.norm(self.conv(x)))


class DownConv(nn.Module):
    def __init__(self, c_in, c_out, norm):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.norm = nn.InstanceNorm2d(c_out, affine=True) if norm == "instance" else nn.Identity()

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class _Backbone(nn.Module):
    """Six conv layers: (stride-2 conv, residual conv) x 3, tapped at 1/4 and 1/8."""

    def __init__(self, widths, norm, out_fine, out_coarse):
        super().__init__()
        w1, w2, w3 = widths
        self.stage1 = nn.Sequential(DownConv(3, w1, norm), ResidualConv(w1, norm))
        self.stage2 = nn.Sequential(DownConv(w1, w2, norm), ResidualConv(w2, norm))
        self.stage3 = nn.Sequential(DownConv(w2, w3, norm), ResidualConv(w3, norm))
        self.head_fine = nn.Conv2d(w2, out_fine, 1)
        self.head_coarse = nn.Conv2d(w3, out_coarse, 1)

    def forward(self, images):
        x = self.stage1(images)
        x4 = self.stage2(x)
        x8 = self.stage3(x4)
        return self.head_coarse(x8), self.head_fine(x4)


class FeatureExtractor(nn.Module):
    """Matching features at 1/8 (coarse) and 1/4 (fine) resolution.

    The same instance processes the reference and every source image in one
    batch, so weight sharing is structural.
    """

    def __init__(self, cfg: FeatureConfig = FeatureConfig()):
        super().__init__()
        self.backbone = _Backbone(cfg.width, cfg.norm, cfg.c_fine, cfg.c_coarse)

    def forward(self, images: torch.Tensor) -> dict:
        """``images``: (B, 3, H, W) in [0, 1]. Returns ``{"coarse": ..., "fine": ...}``."""
        coarse, fine = self.backbone(images * 2.0 - 1.0)
        check_finite(coarse, "coarse features")
        check_finite(fine, "fine features")
        return {"coarse": coarse, "fine": fine}


class ContextExtractor(nn.Module):
    """Reference-only context: per level a tanh-bounded GRU init and a relu context part."""

    def __init__(self, cfg: FeatureConfig = FeatureConfig()):
        super().__init__()
        self.split = cfg.c_ctx_hidden
        self.backbone = _Backbone(cfg.width, "none", cfg.c_ctx, cfg.c_ctx)

    def forward(self, image: torch.Tensor) -> dict:
        coarse, fine = self.backbone(image * 2.0 - 1.0)
        out = {}
        for level, x in (("coarse", coarse), ("fine", fine)):
            check_finite(x, f"{level} context")
            hidden, ctx = torch.split(x, [self.split, x.shape[1] - self.split], dim=1)
            out[level] = (torch.tanh(hidden), torch.relu(ctx))
        return out


def extract_features(extractor: FeatureExtractor, image: torch.Tensor) -> dict:
    """Single-image convenience wrapper; ``image`` is (3, H, W) or (H, W, 3)."""
    if image.shape[-1] == 3 and image.shape[0] != 3:
        image = image.permute(2, 0, 1)
    return {k: v[0] for k, v in extractor(image[None]).items()}


def build_lookup_pyramid(fmap: torch.Tensor, levels: int = 4) -> list:
    """Average-pool pyramid; ``fmap`` is (..., C, H, W). Level 0 is ``fmap`` itself."""
    pyramid = [fmap]
    for _ in range(levels - 1):
        x = pyramid[-1]
        lead = x.shape[:-3]
        y = F.avg_pool2d(x.reshape(-1, *x.shape[-3:]), 2, stride=2, ceil_mode=True)
        pyramid.append(y.reshape(*lead, *y.shape[-3:]))
    return pyramid
