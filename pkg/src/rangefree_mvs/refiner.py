"""Iterative epipolar-flow refinement and multi-view depth fusion.

One inference call runs ``t_c`` updates on the 1/8 grid and ``t_f`` on the
1/4 grid. Each update moves every source view's 1-D flow along its
epipolar line, converts the flows to depths, fuses them with softmax
weights, and re-derives all flows from the fused depth. The loop starts
from the midpoints of the depth-positive segments, so no depth range is
ever consulted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .disparity import DisparityEncoder, estimate_uncertainty, init_hidden_state, sample_cost_volume
from .errors import DegenerateConfiguration, ShapeMismatch
from .features import ContextExtractor, FeatureConfig, FeatureExtractor, build_lookup_pyramid
from .geometry import (
    BASELINE_EPS,
    CameraView,
    DepthMap,
    Pose,
    back_project,
    depths_from_rays,
    epipolar_field,
    pixel_grid,
    relative_pose,
)
from .mda import MultiViewDisparityAttention, compute_pose_embedding, pose_distance, positional_encoding_2d
from .tensor_core import check_finite

LEVELS = ("coarse", "fine")


@dataclass
class RefinerConfig:
    t_c: int = 8
    t_f: int = 2
    n_views: int = 3
    samples: int = 9
    pyramid_levels: int = 4
    strides: tuple = (8, 4)

    def __post_init__(self):
        if self.t_c < 1 or self.t_f < 0:
            raise ValueError("need t_c >= 1 and t_f >= 0")
        if self.samples % 2 != 1:
            raise ValueError("samples must be odd (centred on the current position)")

    @property
    def radius(self) -> int:
        return self.samples // 2


@dataclass
class ModelConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    disp_hidden: int = 32
    disp_feat: int = 64
    attn_dim: int = 64
    heads: int = 4
    blocks: int = 2
    use_pose_embedding: bool = True
    use_uncertainty: bool = True
    use_hidden_state: bool = True
    squared_translation: bool = False


# ---------------------------------------------------------------------------
# per-level epipolar geometry as tensors


@dataclass
class LevelGeometry:
    height: int
    width: int
    stride: int
    e_dir: torch.Tensor  # V,H,W,2
    base: torch.Tensor  # V,H,W,2
    lo: torch.Tensor  # V,H,W
    hi: torch.Tensor
    branch_x: torch.Tensor
    valid: torch.Tensor
    ray: torch.Tensor  # V,H,W,3   R K0^-1 p_r
    t: torch.Tensor  # V,1,1,3
    Ki: torch.Tensor  # V,3,3
    Ki_inv: torch.Tensor  # V,3,3
    ray0: torch.Tensor  # H,W,3     K0^-1 p_r
    centers: torch.Tensor  # V,3 source centres in reference coordinates
    rel: list
    d_lo: torch.Tensor = None
    d_hi: torch.Tensor = None

    @property
    def n_src(self) -> int:
        return self.e_dir.shape[0]

    def to(self, dtype):
        out = LevelGeometry(**{k: (v.to(dtype) if isinstance(v, torch.Tensor) and v.is_floating_point() else v)
                               for k, v in self.__dict__.items()})
        return out


def build_level_geometry(views, stride: int, dtype=torch.float32) -> LevelGeometry:
    """Epipolar segments of every reference pixel in every source view.

    Views lacking a baseline are kept but flagged invalid everywhere; an
    error is raised only if no source view is usable.
    """
    ref, srcs = views[0], views[1:]
    if not srcs:
        raise DegenerateConfiguration("need at least one source view")
    H, W = ref.height // stride, ref.width // stride
    K0 = ref.intrinsics.scaled(stride)
    grid = pixel_grid(H, W)
    parts = {k: [] for k in ("e_dir", "base", "lo", "hi", "branch_x", "valid", "ray", "t", "Ki", "Ki_inv", "centers")}
    rels = []
    for src in srcs:
        rel = relative_pose(ref, src)
        Ki = src.intrinsics.scaled(stride)
        rels.append(rel)
        if np.linalg.norm(rel.translation) <= BASELINE_EPS:
            geom = epipolar_field(Pose(rel.rotation, [1.0, 0.0, 0.0], check=False), K0, Ki, grid, src.width // stride, src.height // stride)
            valid = np.zeros((H, W), dtype=bool)
        else:
            geom = epipolar_field(rel, K0, Ki, grid, src.width // stride, src.height // stride)
            valid = geom.valid
        lo, hi = geom.clamp_bounds()
        parts["e_dir"].append(geom.e_dir)
        parts["base"].append(geom.base_point)
        parts["lo"].append(lo)
        parts["hi"].append(hi)
        parts["branch_x"].append(geom.branch_x)
        parts["valid"].append(valid)
        parts["ray"].append(geom.rays)
        parts["t"].append(rel.translation.reshape(1, 1, 3))
        parts["Ki"].append(Ki.matrix)
        parts["Ki_inv"].append(Ki.inverse)
        parts["centers"].append(rel.center)
    valid = np.stack(parts["valid"])
    if not valid.any():
        raise DegenerateConfiguration("no source view has a usable baseline")
    t = lambda name: torch.as_tensor(np.stack(parts[name]), dtype=dtype)
    g = LevelGeometry(
        height=H,
        width=W,
        stride=stride,
        e_dir=t("e_dir"),
        base=t("base"),
        lo=t("lo"),
        hi=t("hi"),
        branch_x=torch.as_tensor(np.stack(parts["branch_x"])),
        valid=torch.as_tensor(valid),
        ray=t("ray"),
        t=t("t"),
        Ki=t("Ki"),
        Ki_inv=t("Ki_inv"),
        ray0=torch.as_tensor(back_project(K0, grid), dtype=dtype),
        centers=t("centers"),
        rel=rels,
    )
    with torch.no_grad():
        d_lo, _ = flows_to_depths(g, g.lo)
        d_hi, _ = flows_to_depths(g, g.hi)
    g.d_lo = torch.where(g.valid, d_lo, torch.ones_like(d_lo))
    g.d_hi = torch.where(g.valid, d_hi, torch.ones_like(d_hi))
    return g


@dataclass
class SceneGeometry:
    levels: dict

    @classmethod
    def build(cls, views, config: RefinerConfig, dtype=torch.float32) -> "SceneGeometry":
        ref = views[0]
        s = max(config.strides)
        if ref.height % s or ref.width % s:
            raise ShapeMismatch(f"image extents must be divisible by {s}")
        return cls({lvl: build_level_geometry(views, st, dtype) for lvl, st in zip(LEVELS, config.strides)})

    def to(self, dtype):
        return SceneGeometry({k: v.to(dtype) for k, v in self.levels.items()})


def clamp_flows(g: LevelGeometry, e):
    return torch.maximum(torch.minimum(e, g.hi), g.lo)


def flow_positions(g: LevelGeometry, e):
    return g.base + e[..., None] * g.e_dir


def flows_to_depths(g: LevelGeometry, e):
    """Differentiable per-view ``(d_r, d_s)`` for flows ``e`` of shape (V, H, W)."""
    pos = flow_positions(g, clamp_flows(g, e))
    ones = torch.ones_like(pos[..., :1])
    q = torch.einsum("vhwj,vij->vhwi", torch.cat([pos, ones], dim=-1), g.Ki_inv)
    d_r, d_s = depths_from_rays(q, g.ray, g.t.expand_as(q), g.branch_x)
    one = torch.ones_like(d_r)
    return torch.where(g.valid, d_r, one), torch.where(g.valid, d_s, one)


def redistribute_flows(g: LevelGeometry, depth):
    """Per-view flows reproducing the fused ``depth`` (H, W); returns ``(flows, n_clamped)``."""
    d = depth[None].expand(g.n_src, -1, -1)
    dc = torch.maximum(torch.minimum(d, g.d_hi), g.d_lo)
    X = g.ray * dc[..., None] + g.t
    proj = torch.einsum("vhwj,vij->vhwi", X, g.Ki)
    p_s = proj[..., :2] / proj[..., 2:3]
    e = ((p_s - g.base) * g.e_dir).sum(-1)
    ec = clamp_flows(g, e)
    clamped = ((dc != d) | (ec != e)) & g.valid
    ec = torch.where(g.valid, ec, torch.zeros_like(ec))
    return ec, int(clamped.sum())


def fuse_depth(depths, logits, valid):
    """Softmax-weighted fusion over views; returns ``(depth, mask, weights)``."""
    any_valid = valid.any(dim=0)
    logits = logits.masked_fill(~valid, float("-inf"))
    logits = torch.where(any_valid[None], logits, torch.zeros_like(logits))
    w = torch.softmax(logits, dim=0)
    d = torch.where(valid, depths, torch.ones_like(depths))
    fused = (w * d).sum(0)
    fused = torch.where(any_valid, fused, torch.ones_like(fused))
    return fused, any_valid, w


def upsample(x, factor: int):
    """Bilinear upsampling of (..., H, W) maps by an integer factor."""
    lead = x.shape[:-2]
    y = F.interpolate(x.reshape(1, -1, *x.shape[-2:]), scale_factor=factor, mode="bilinear", align_corners=False)
    return y.reshape(*lead, *y.shape[-2:])


# ---------------------------------------------------------------------------
# learned update operator


class ConvGRU(nn.Module):
    def __init__(self, hidden: int, inp: int):
        super().__init__()
        self.convz = nn.Conv2d(hidden + inp, hidden, 3, padding=1)
        self.convr = nn.Conv2d(hidden + inp, hidden, 3, padding=1)
        self.convq = nn.Conv2d(hidden + inp, hidden, 3, padding=1)

    def forward(self, h, x):
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.convz(hx))
        r = torch.sigmoid(self.convr(hx))
        q = torch.tanh(self.convq(torch.cat([r * h, x], dim=1)))
        return (1 - z) * h + z * q


FLOW_CHANNELS = 2


def encode_flows(g: LevelGeometry, e):
    half = 0.5 * (g.hi - g.lo)
    return torch.stack([e / half, torch.tanh(e / 4.0)], dim=1)


class UpdateBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, refiner: RefinerConfig):
        super().__init__()
        fc = cfg.features
        self.encoder = DisparityEncoder(
            refiner.pyramid_levels * refiner.samples,
            FLOW_CHANNELS,
            hidden=cfg.disp_hidden,
            out=cfg.disp_feat,
            use_uncertainty=cfg.use_uncertainty,
            use_hidden=cfg.use_hidden_state,
        )
        self.mda = MultiViewDisparityAttention(
            cfg.disp_feat, cfg.attn_dim, cfg.heads, cfg.blocks, use_pose_embedding=cfg.use_pose_embedding
        )
        ctx_dim = fc.c_ctx - fc.c_ctx_hidden
        self.gru = ConvGRU(fc.c_ctx_hidden, 2 * cfg.attn_dim + 2 * FLOW_CHANNELS + ctx_dim)
        self.head = nn.Sequential(
            nn.Conv2d(fc.c_ctx_hidden + cfg.attn_dim, 64, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(64, 2, 3, padding=1),
        )

    def gru_step(self, h, mda_feats, flow_enc, context):
        """One GRU update; returns ``(h', delta_flow (V,H,W), weight_logits (V,H,W))``."""
        pooled = torch.cat(
            [mda_feats.mean(0), mda_feats.amax(0), flow_enc.mean(0), flow_enc.amax(0), context], dim=0
        )
        h = self.gru(h[None], pooled[None])[0]
        V = mda_feats.shape[0]
        out = self.head(torch.cat([h[None].expand(V, -1, -1, -1), mda_feats], dim=1))
        return h, out[:, 0], out[:, 1]


@dataclass
class UpdateState:
    gru_hidden: torch.Tensor
    disp_hidden: torch.Tensor
    flows: torch.Tensor
    fused_depth: torch.Tensor
    mask: torch.Tensor
    iteration: int = 0
    level: str = "coarse"
    clamp_count: int = 0


@dataclass
class InferenceResult:
    depth: torch.Tensor  # full resolution
    mask: torch.Tensor
    iterations: list  # (level, depth on level grid, mask)
    init_depth: torch.Tensor
    clamp_count: int
    per_view_depths: list = field(default_factory=list)

    def depth_map(self) -> DepthMap:
        values = self.depth.detach().double().numpy()
        return DepthMap(values=values, mask=self.mask.numpy() & (values > 0) & np.isfinite(values))


def initial_depth(g: LevelGeometry):
    """Uniform-weight fusion of the per-view segment-midpoint depths."""
    zeros = torch.zeros_like(g.lo)
    d, _ = flows_to_depths(g, zeros)
    fused, mask, _ = fuse_depth(d, torch.zeros_like(d), g.valid)
    return fused, mask, d


class RangeFreeMVS(nn.Module):
    def __init__(self, cfg: ModelConfig = None, refiner: RefinerConfig = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.refiner = refiner or RefinerConfig()
        self.fnet = FeatureExtractor(self.cfg.features)
        self.cnet = ContextExtractor(self.cfg.features)
        self.update = nn.ModuleDict({lvl: UpdateBlock(self.cfg, self.refiner) for lvl in LEVELS})

    def initialize(self, geom: SceneGeometry, context, seed: int) -> UpdateState:
        g = geom.levels["coarse"]
        fused, mask, _ = initial_depth(g)
        h, _ = context["coarse"]
        dtype = g.lo.dtype
        hd = init_hidden_state((g.n_src, self.cfg.disp_hidden, g.height, g.width), seed, dtype)
        return UpdateState(
            gru_hidden=h[0],
            disp_hidden=hd,
            flows=torch.zeros_like(g.lo),
            fused_depth=fused,
            mask=mask,
        )

    def _iterate(self, state: UpdateState, g: LevelGeometry, ref_feat, pyramid, context, scale, pose_dist, pe):
        block = self.update[state.level]
        e = state.flows.detach()
        with torch.no_grad():
            d_r, d_s = flows_to_depths(g, e)
            pos = flow_positions(g, clamp_flows(g, e))
            pose = compute_pose_embedding(g.ray0, pos, d_r, d_s, g.centers, pose_dist, g.width, g.height, scale).stack()
            pose = pose * g.valid[:, None]
        vol = sample_cost_volume(ref_feat, pyramid, pos, g.e_dir, self.refiner.radius)
        unc = estimate_uncertainty(vol)
        flow_enc = encode_flows(g, e)
        feat_d, hd = block.encoder(vol, unc, flow_enc, state.disp_hidden)
        mda = block.mda(feat_d, pose, pe)
        h, delta, logits = block.gru_step(state.gru_hidden, mda, flow_enc, context)
        e_new = clamp_flows(g, e + delta)
        depths, _ = flows_to_depths(g, e_new)
        fused, mask, _ = fuse_depth(depths, logits, g.valid)
        check_finite(fused, "fused depth")
        flows, n_clamped = redistribute_flows(g, fused.detach())
        return UpdateState(
            gru_hidden=h,
            disp_hidden=hd,
            flows=flows,
            fused_depth=fused,
            mask=mask,
            iteration=state.iteration + 1,
            level=state.level,
            clamp_count=state.clamp_count + n_clamped,
        ), depths

    def forward(self, images: torch.Tensor, geom: SceneGeometry, seed: int = 0) -> InferenceResult:
        """``images``: (N, 3, H, W) with the reference first."""
        cfg = self.refiner
        if images.shape[0] != geom.levels["coarse"].n_src + 1:
            raise ShapeMismatch("image count does not match the geometry")
        feats = self.fnet(images)
        context = self.cnet(images[:1])
        state = self.initialize(geom, context, seed)
        init_depth = state.fused_depth
        g = geom.levels["coarse"]
        scale = torch.median(init_depth[state.mask]).detach()
        pose_dist = {
            lvl: torch.tensor(
                [pose_distance(Pose(r.rotation, r.translation / float(scale), check=False), self.cfg.squared_translation)
                 for r in geom.levels[lvl].rel],
                dtype=g.lo.dtype,
            )
            for lvl in LEVELS
        }
        iterations, per_view = [], []
        for lvl, steps in (("coarse", cfg.t_c), ("fine", cfg.t_f)):
            g = geom.levels[lvl]
            if lvl == "fine":
                if steps == 0:
                    break
                up = upsample(state.fused_depth, 2)
                flows, n = redistribute_flows(g, up.detach())
                state = UpdateState(
                    gru_hidden=context["fine"][0][0],
                    disp_hidden=upsample(state.disp_hidden, 2),
                    flows=flows,
                    fused_depth=up,
                    mask=upsample(state.mask[None].to(up.dtype), 2)[0] > 0.5,
                    iteration=state.iteration,
                    level="fine",
                    clamp_count=state.clamp_count + n,
                )
            fmap = feats[lvl]
            pyramid = build_lookup_pyramid(fmap[1:], cfg.pyramid_levels)
            pe = positional_encoding_2d(g.height, g.width, dtype=fmap.dtype)
            ctx = context[lvl][1][0]
            for _ in range(steps):
                state, depths = self._iterate(state, g, fmap[0], pyramid, ctx, scale, pose_dist[lvl], pe)
                iterations.append((lvl, state.fused_depth, state.mask))
                per_view.append(depths)
        last_lvl, last, last_mask = iterations[-1]
        factor = geom.levels[last_lvl].stride
        full = upsample(last, factor)
        mask = upsample(last_mask[None].to(full.dtype), factor)[0] > 0.999
        return InferenceResult(
            depth=full,
            mask=mask,
            iterations=iterations,
            init_depth=init_depth,
            clamp_count=state.clamp_count,
            per_view_depths=per_view,
        )


def views_to_tensor(views, dtype=torch.float32) -> torch.Tensor:
    imgs = np.stack([np.asarray(v.image, dtype=np.float64) for v in views])
    return torch.as_tensor(imgs, dtype=dtype).permute(0, 3, 1, 2).contiguous()


def initialize(views, config: RefinerConfig = None) -> tuple:
    """Prior-free initial depth ``D_0`` on the coarse grid.

    Returns ``(fused_depth, mask, per_view_midpoint_depths)`` as numpy arrays.
    """
    config = config or RefinerConfig()
    g = build_level_geometry(views, config.strides[0], torch.float64)
    fused, mask, d = initial_depth(g)
    return fused.numpy(), mask.numpy(), np.where(g.valid.numpy(), d.numpy(), np.nan)


def run_inference(model: RangeFreeMVS, views, seed: int = 0, dtype=torch.float32) -> InferenceResult:
    geom = SceneGeometry.build(views, model.refiner, dtype)
    with torch.no_grad():
        return model(views_to_tensor(views, dtype), geom, seed)
