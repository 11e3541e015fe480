"""Multi-view disparity attention with 3-D pose embedding.

Disparity features of all source views are enriched with a geometric
embedding (relative pose distance, ray angle, sample coordinates, both
depths, ray directions) and a 2-D positional code of the reference pixel,
then mixed by linear self-attention within each view and softmax
attention across views. Nothing orders the views: every operation on the
view axis is permutation-equivariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import PointBehindCamera, ShapeMismatch
from .geometry import CameraView, Pose

POSE_FEATURES = 12


def pose_distance(rel: Pose, squared_translation: bool = False) -> float:
    """``sqrt(|t| + 2/3 tr(I - R))``; the squared-norm variant is behind a flag."""
    tn = float(np.linalg.norm(rel.translation))
    if squared_translation:
        tn = tn * tn
    arg = tn + (2.0 / 3.0) * float(np.trace(np.eye(3) - rel.rotation))
    return math.sqrt(max(arg, 0.0))


def ray_angle(ref: CameraView, src: CameraView, point) -> float:
    """Angle at a world point between the rays from the two camera centres."""
    point = np.asarray(point, dtype=np.float64)
    for view in (ref, src):
        if view.world_to_camera.apply(point)[2] <= 0:
            raise PointBehindCamera("point is behind a camera")
    a = point - ref.center
    b = point - src.center
    cross = np.linalg.norm(np.cross(a, b))
    return float(math.atan2(cross, float(a @ b)))


@dataclass
class PoseEmbedding:
    theta: torch.Tensor  # (V, H, W)
    pose_distance: torch.Tensor  # (V,)
    p_s: torch.Tensor  # (V, H, W, 2), divided by the level extent
    log_d_r: torch.Tensor  # (V, H, W)
    log_d_s: torch.Tensor  # (V, H, W)
    r_0: torch.Tensor  # (H, W, 3)
    r_i: torch.Tensor  # (V, H, W, 3)

    def stack(self) -> torch.Tensor:
        """(V, 12, H, W) channel stack in a fixed order."""
        V, H, W = self.theta.shape
        chans = [
            self.theta[:, None],
            self.pose_distance.reshape(V, 1, 1, 1).expand(V, 1, H, W),
            self.p_s.permute(0, 3, 1, 2),
            self.log_d_r[:, None],
            self.log_d_s[:, None],
            self.r_0.permute(2, 0, 1)[None].expand(V, 3, H, W),
            self.r_i.permute(0, 3, 1, 2),
        ]
        return torch.cat(chans, dim=1)


def compute_pose_embedding(ray0, positions, d_r, d_s, centers, pose_dist, width, height, scale) -> PoseEmbedding:
    """Geometric context for every (pixel, view).

    ``ray0``: (H, W, 3) back-projected reference rays ``K0^-1 p_r``;
    ``positions``: (V, H, W, 2) current epipolar positions; ``d_r``/``d_s``:
    (V, H, W) depths at those positions; ``centers``: (V, 3) source centres
    in reference-camera coordinates; ``pose_dist``: (V,). Depths enter as
    ``log(d / scale)`` with ``scale`` a scene-level depth, which keeps the
    embedding unchanged when the whole scene is scaled.
    """
    r0 = ray0 / ray0.norm(dim=-1, keepdim=True)
    point = ray0[None] * d_r[..., None]
    ri = point - centers[:, None, None, :]
    ri = ri / ri.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    cross = torch.linalg.cross(r0[None].expand_as(ri), ri, dim=-1).norm(dim=-1)
    theta = torch.atan2(cross, (r0[None] * ri).sum(-1))
    size = torch.tensor([width, height], dtype=positions.dtype)
    return PoseEmbedding(
        theta=theta,
        pose_distance=pose_dist,
        p_s=positions / size,
        log_d_r=torch.log(d_r.clamp_min(1e-12) / scale),
        log_d_s=torch.log(d_s.clamp_min(1e-12) / scale),
        r_0=r0,
        r_i=ri,
    )


def positional_encoding_2d(height: int, width: int, bands: int = 4, dtype=torch.float32) -> torch.Tensor:
    """(2 + 4*bands, H, W): normalised coordinates and their sin/cos bands."""
    v, u = torch.meshgrid(
        torch.arange(height, dtype=torch.float64), torch.arange(width, dtype=torch.float64), indexing="ij"
    )
    x, y = u / width, v / height
    chans = [x, y]
    for k in range(bands):
        f = (2.0**k) * math.pi
        chans += [torch.sin(f * x), torch.cos(f * x), torch.sin(f * y), torch.cos(f * y)]
    return torch.stack(chans).to(dtype)


def phi(x: torch.Tensor) -> torch.Tensor:
    return F.relu(x) + 1.0


def linear_attention(q, k, v):
    """Kernelised attention ``phi(Q) (phi(K)^T V)`` with row normalisation.

    Shapes (B, L, heads, d); cost is linear in L.
    """
    q, k = phi(q), phi(k)
    kv = torch.einsum("blhd,blhe->bhde", k, v)
    z = torch.einsum("blhd,bhd->blh", q, k.sum(dim=1))
    return torch.einsum("blhd,bhde->blhe", q, kv) / z[..., None]


def explicit_kernel_attention(q, k, v):
    """Quadratic reference form of :func:`linear_attention`."""
    q, k = phi(q), phi(k)
    a = torch.einsum("blhd,bmhd->bhlm", q, k)
    a = a / a.sum(dim=-1, keepdim=True)
    return torch.einsum("bhlm,bmhe->blhe", a, v)


def softmax_attention(q, k, v):
    a = torch.einsum("blhd,bmhd->bhlm", q, k) / math.sqrt(q.shape[-1])
    return torch.einsum("bhlm,bmhe->blhe", torch.softmax(a, dim=-1), v)


class _Attention(nn.Module):
    """Pre-norm multi-head attention with residual: ``x + W_o attn(LN x)``."""

    def __init__(self, dim: int, heads: int, kernel):
        super().__init__()
        if dim % heads:
            raise ShapeMismatch(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.kernel = kernel

    def forward(self, x):
        if x.ndim != 3 or x.shape[-1] != self.o.out_features:
            raise ShapeMismatch(f"attention expects (B, L, {self.o.out_features}), got {tuple(x.shape)}")
        B, L, D = x.shape
        y = self.norm(x)
        split = lambda t: t.reshape(B, L, self.heads, D // self.heads)
        out = self.kernel(split(self.q(y)), split(self.k(y)), split(self.v(y)))
        return x + self.o(out.reshape(B, L, D))


class LinearSelfAttention(_Attention):
    def __init__(self, dim, heads=4):
        super().__init__(dim, heads, linear_attention)


class CrossViewAttention(_Attention):
    def __init__(self, dim, heads=4):
        super().__init__(dim, heads, softmax_attention)


class FeedForward(nn.Module):
    def __init__(self, dim, mult=2):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))

    def forward(self, x):
        return x + self.net(self.norm(x))


def linear_self_attention(attn: LinearSelfAttention, ffn: FeedForward, x):
    """``x``: (V, H*W, C); views are independent sequences."""
    return ffn(attn(x))


def cross_view_attention(attn: CrossViewAttention, ffn: FeedForward, x):
    """``x``: (H*W, V, C); each pixel attends over its source views."""
    return ffn(attn(x))


class MDABlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.self_attn = LinearSelfAttention(dim, heads)
        self.self_ffn = FeedForward(dim)
        self.cross_attn = CrossViewAttention(dim, heads)
        self.cross_ffn = FeedForward(dim)

    def forward(self, x):
        # x: (V, L, D)
        x = linear_self_attention(self.self_attn, self.self_ffn, x)
        x = cross_view_attention(self.cross_attn, self.cross_ffn, x.transpose(0, 1))
        return x.transpose(0, 1)


class MultiViewDisparityAttention(nn.Module):
    def __init__(self, feat_dim: int = 64, dim: int = 64, heads: int = 4, blocks: int = 2,
                 pe_bands: int = 4, use_pose_embedding: bool = True):
        super().__init__()
        self.use_pose_embedding = use_pose_embedding
        self.pose_proj = nn.Conv2d(POSE_FEATURES, feat_dim, 1)
        pe_dim = 2 + 4 * pe_bands
        self.pe_bands = pe_bands
        self.inp = nn.Linear(2 * feat_dim + pe_dim, dim)
        self.blocks = nn.ModuleList([MDABlock(dim, heads) for _ in range(blocks)])
        self.out_norm = nn.LayerNorm(dim)

    def embed_pose(self, pose_raw):
        emb = self.pose_proj(pose_raw)
        if not self.use_pose_embedding:
            emb = torch.zeros_like(emb)
        return emb

    def forward(self, feats, pose_raw, pe=None):
        """``feats``: (V, C, H, W); ``pose_raw``: (V, 12, H, W); returns (V, dim, H, W)."""
        V, C, H, W = feats.shape
        if pose_raw.shape[0] != V or pose_raw.shape[-2:] != (H, W):
            raise ShapeMismatch("pose embedding and features are on different grids")
        if pe is None:
            pe = positional_encoding_2d(H, W, self.pe_bands, feats.dtype)
        x = torch.cat([feats, self.embed_pose(pose_raw), pe[None].expand(V, -1, H, W)], dim=1)
        x = self.inp(x.flatten(2).transpose(1, 2))  # V, L, D
        for block in self.blocks:
            x = block(x)
        x = self.out_norm(x)
        return x.transpose(1, 2).reshape(V, -1, H, W)


def mda_forward(module: MultiViewDisparityAttention, feats, pose_raw, pe=None):
    return module(feats, pose_raw, pe)
