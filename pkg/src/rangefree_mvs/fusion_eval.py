"""Geometric-consistency filtering, point-cloud fusion and cloud metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, ShapeMismatch
from .geometry import CameraView, DepthMap, back_project, pixel_grid


@dataclass
class FusionConfig:
    pixel_threshold: float = 1.0
    depth_threshold: float = 0.01
    min_views: int = 2
    voxel: float = 0.0


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")
        if self.colors is not None:
            self.colors = np.asarray(self.colors).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ShapeMismatch("one colour per point required")

    def __len__(self):
        return len(self.points)


@dataclass
class MetricReport:
    acc: float
    comp: float
    overall: float
    fscore: float
    precision: float = 0.0
    recall: float = 0.0
    tau: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _sample_bilinear(values: np.ndarray, mask: np.ndarray, pix: np.ndarray):
    """Bilinear lookup that requires all four neighbours to be valid."""
    H, W = values.shape
    u, v = pix[..., 0], pix[..., 1]
    inside = (u >= 0) & (v >= 0) & (u <= W - 1) & (v <= H - 1) & np.isfinite(u) & np.isfinite(v)
    u0 = np.clip(np.floor(np.where(inside, u, 0)).astype(int), 0, max(W - 2, 0))
    v0 = np.clip(np.floor(np.where(inside, v, 0)).astype(int), 0, max(H - 2, 0))
    fu, fv = np.where(inside, u, 0) - u0, np.where(inside, v, 0) - v0
    out = np.zeros(u.shape)
    ok = inside.copy()
    for du, dv, w in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)), (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        uu, vv = np.minimum(u0 + du, W - 1), np.minimum(v0 + dv, H - 1)
        ok &= mask[vv, uu] | (w == 0)
        out += w * np.where(mask[vv, uu], values[vv, uu], 0.0)
    return out, ok


def _to_world(view: CameraView, pix, depth):
    cam = back_project(view.intrinsics, pix) * depth[..., None]
    return view.world_to_camera.inverse().apply(cam)


def _to_camera(view: CameraView, X):
    cam = view.world_to_camera.apply(X)
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = cam @ view.intrinsics.matrix.T
        pix = proj[..., :2] / proj[..., 2:3]
    return pix, z


def filter_depths(depths, views, pixel_threshold: float = 1.0, depth_threshold: float = 0.01,
                  min_views: int = 2) -> list:
    """Keep a pixel when at least ``min_views`` other views confirm it.

    A view confirms a pixel if the forward-backward reprojection through its
    depth map lands within ``pixel_threshold`` pixels of the start and the
    round-trip depth differs by less than ``depth_threshold`` relative.
    """
    if len(depths) != len(views):
        raise ShapeMismatch("one depth map per view required")
    masks = []
    for i, (di, vi) in enumerate(zip(depths, views)):
        grid = pixel_grid(vi.height, vi.width)
        ok_i = di.mask & (di.values > 0)
        d = np.where(ok_i, di.values, 1.0)
        X = _to_world(vi, grid, d)
        support = np.zeros(d.shape, dtype=int)
        for j, (dj, vj) in enumerate(zip(depths, views)):
            if j == i:
                continue
            pj, zj = _to_camera(vj, X)
            dj_s, ok = _sample_bilinear(dj.values, dj.mask & (dj.values > 0), pj)
            ok &= zj > 0
            Xb = _to_world(vj, pj, np.where(ok, dj_s, 1.0))
            pb, zb = _to_camera(vi, Xb)
            err = np.linalg.norm(pb - grid, axis=-1)
            rel = np.abs(zb - d) / d
            support += (ok & (err < pixel_threshold) & (rel < depth_threshold)).astype(int)
        masks.append(ok_i & (support >= min_views))
    return masks


def fuse_cloud(depths, masks, views, voxel: float = 0.0) -> PointCloud:
    """Back-project kept pixels to world points; optional voxel-hash deduplication.

    With ``voxel > 0`` the first point falling into each cell survives;
    ``voxel == 0`` keeps every kept pixel.
    """
    pts, cols = [], []
    for dm, m, v in zip(depths, masks, views):
        m = np.asarray(m, dtype=bool)
        if not m.any():
            continue
        grid = pixel_grid(v.height, v.width)
        pts.append(_to_world(v, grid[m], dm.values[m]))
        if v.image is not None:
            cols.append(np.asarray(v.image)[m])
    if not pts:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    P = np.concatenate(pts)
    C = np.concatenate(cols) if len(cols) == len(pts) else None
    if voxel > 0:
        keys = np.floor(P / voxel).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        first = np.sort(first)
        P = P[first]
        C = C[first] if C is not None else None
    return PointCloud(P, C)


def _distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a - b) ** 2).sum(-1))


def nearest_distances(query: np.ndarray, ref: np.ndarray, brute_force: bool = False, chunk: int = 1024) -> np.ndarray:
    """Distance from every query point to its nearest reference point.

    The tree path fetches a few candidates per query and re-scores them with
    the same expression the brute-force path uses, so both agree bit for bit.
    """
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if brute_force:
        out = np.empty(len(query))
        for s in range(0, len(query), chunk):
            q = query[s : s + chunk]
            out[s : s + chunk] = _distances(q[:, None, :], ref[None, :, :]).min(axis=1)
        return out
    k = min(4, len(ref))
    _, idx = cKDTree(ref).query(query, k=k)
    idx = idx.reshape(len(query), k)
    return _distances(query[:, None, :], ref[idx]).min(axis=1)


def evaluate(pred: PointCloud, gt: PointCloud, outlier_cap: float = np.inf, tau: float = 0.01,
             brute_force: bool = False) -> MetricReport:
    """Accuracy, completeness, their mean, and the F-score at ``tau``.

    Distances above ``outlier_cap`` are dropped from the two means (the
    mean falls back to ``outlier_cap`` if nothing is left). Precision and
    recall use all points.
    """
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyCloud("both clouds must be non-empty")
    d_pred = nearest_distances(pred.points, gt.points, brute_force)
    d_gt = nearest_distances(gt.points, pred.points, brute_force)

    def capped_mean(d):
        keep = d <= outlier_cap
        return float(d[keep].mean()) if keep.any() else float(outlier_cap)

    acc, comp = capped_mean(d_pred), capped_mean(d_gt)
    precision = float((d_pred < tau).mean())
    recall = float((d_gt < tau).mean())
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MetricReport(acc=acc, comp=comp, overall=(acc + comp) / 2, fscore=f,
                        precision=precision, recall=recall, tau=tau)
