"""Matching evidence along epipolar lines.

Per source view: a correlation volume sampled around the current match
hypothesis, a variance-derived uncertainty, and a recurrent per-view
hidden state that is rewritten every iteration.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensor_core import bilinear_sample, check_finite


def sample_offsets(radius: int, dtype=torch.float32) -> torch.Tensor:
    return torch.arange(-radius, radius + 1, dtype=dtype)


def sample_coordinates(positions: torch.Tensor, e_dir: torch.Tensor, level: int, radius: int) -> torch.Tensor:
    """Sample points on pyramid ``level`` for positions given on the level-0 grid.

    ``positions``/``e_dir``: (V, H, W, 2). Returns (V, H, W, M, 2); samples are
    one pixel of the pyramid-level grid apart along ``e_dir``.
    """
    scale = 2.0**level
    centre = (positions + 0.5) / scale - 0.5
    offs = sample_offsets(radius, positions.dtype)
    return centre[..., None, :] + offs[:, None] * e_dir[..., None, :]


def sample_cost_volume(ref_feat, src_pyramid, positions, e_dir, radius: int = 4, return_coords: bool = False):
    """Correlation volume of shape (V, L*M, H, W).

    ``ref_feat``: (C, H, W) reference features; ``src_pyramid``: list of L
    tensors (V, C, H_l, W_l); ``positions``: (V, H, W, 2) current epipolar
    positions on the level-0 grid. Channel ``l*M + m`` holds
    ``<F_ref(p_r), F_src(sample_m)> / sqrt(C)`` on pyramid level ``l``.
    """
    C = ref_feat.shape[0]
    V, H, W, _ = positions.shape
    ref = ref_feat.permute(1, 2, 0)[None, :, :, None, :]  # 1,H,W,1,C
    vols, coords = [], []
    for level, fmap in enumerate(src_pyramid):
        pts = sample_coordinates(positions, e_dir, level, radius)
        M = pts.shape[-2]
        feats = bilinear_sample(fmap.permute(0, 2, 3, 1), pts.reshape(V, -1, 2))
        feats = feats.reshape(V, H, W, M, C)
        vols.append((feats * ref).sum(-1) / math.sqrt(C))
        coords.append(pts)
    vol = torch.cat(vols, dim=-1).permute(0, 3, 1, 2).contiguous()
    check_finite(vol, "cost volume")
    if return_coords:
        return vol, coords
    return vol


def estimate_uncertainty(volume: torch.Tensor) -> torch.Tensor:
    """``1 - sigmoid(mean squared deviation over channels)``; (V, K, H, W) -> (V, 1, H, W).

    Evaluated as ``sigmoid(-x)``, which equals ``1 - sigmoid(x)`` but keeps
    its precision for large ``x``; the floor at the smallest normal number
    keeps the result strictly positive even when the exponential underflows.
    """
    dev = volume - volume.mean(dim=1, keepdim=True)
    u = torch.sigmoid(-(dev * dev).mean(dim=1, keepdim=True))
    return u.clamp_min(torch.finfo(u.dtype).tiny)


def init_hidden_state(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    """Standard-normal draw for the per-view hidden state, shape (V, C, H, W).

    One draw is shared by every view so that relabelling the source views
    relabels the states and nothing else.
    """
    V, C, H, W = shape
    gen = torch.Generator().manual_seed(int(seed))
    noise = torch.randn((1, C, H, W), generator=gen, dtype=torch.float64).to(dtype)
    return noise.expand(V, C, H, W).clone()


class DisparityEncoder(nn.Module):
    """Turns (cost volume, uncertainty, flow, previous hidden state) into a
    disparity feature and the next hidden state.

    The state update is a gated blend ``(1 - z) * H_prev + z * tanh(...)``.
    With ``use_uncertainty`` / ``use_hidden`` off the corresponding inputs are
    zeroed and the state is never written, which leaves a plain encoder of
    flow and cost volume.
    """

    def __init__(self, cost_channels: int, flow_channels: int, hidden: int = 32, out: int = 64,
                 use_uncertainty: bool = True, use_hidden: bool = True):
        super().__init__()
        self.use_uncertainty = use_uncertainty
        self.use_hidden = use_hidden
        c_in = cost_channels + 1 + flow_channels + hidden
        self.feat = nn.Sequential(
            nn.Conv2d(c_in, 96, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(96, out - flow_channels, 3, padding=1),
            nn.ReLU(),
        )
        self.gate = nn.Conv2d(c_in, hidden, 3, padding=1)
        self.cand = nn.Conv2d(c_in, hidden, 3, padding=1)

    def forward(self, volume, uncertainty, flow_enc, h_prev):
        if not self.use_uncertainty:
            uncertainty = torch.zeros_like(uncertainty)
        if not self.use_hidden:
            h_prev = torch.zeros_like(h_prev)
        x = torch.cat([volume, uncertainty, flow_enc, h_prev], dim=1)
        feat = torch.cat([self.feat(x), flow_enc], dim=1)
        if not self.use_hidden:
            return feat, h_prev
        z = torch.sigmoid(self.gate(x))
        h_new = (1 - z) * h_prev + z * torch.tanh(self.cand(x))
        return feat, h_new


def encode_disparity(encoder: DisparityEncoder, uncertainty, h_prev, volume, flow_enc):
    return encoder(volume, uncertainty, flow_enc, h_prev)
