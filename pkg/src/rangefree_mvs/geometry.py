"""Pinhole cameras, relative poses and epipolar-line algebra.

Everything here is expressed in pixels and scene units only. There is no
depth-range argument anywhere in this module: the search segment on each
epipolar line is derived from cheirality (both depths positive) and the
image extent.

Conventions
-----------
* Poses are stored world-to-camera: ``x_cam = R @ x_world + t``.
* Pixel centres sit at integer coordinates, ``u`` along the width.
* ``rel = relative_pose(ref, src)`` maps reference-camera coordinates to
  source-camera coordinates, so ``Ki^-1 p_s d_s = R K0^-1 p_r d_r + T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .errors import DegenerateConfiguration, PointBehindCamera

DENOM_EPS = 1e-12
BASELINE_EPS = 1e-9
RECT_INFLATION = 0.25
# fraction of the interval width kept clear of each end when clamping
CLAMP_MARGIN = 1e-4


class PixelPoint(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise ValueError("principal point must be finite")

    @classmethod
    def from_matrix(cls, K) -> "Intrinsics":
        K = np.asarray(K, dtype=np.float64)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]))

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, stride: float) -> "Intrinsics":
        """Intrinsics of the same camera on a grid downsampled by ``stride``."""
        return Intrinsics(
            self.fx / stride,
            self.fy / stride,
            (self.cx + 0.5) / stride - 0.5,
            (self.cy + 0.5) / stride - 0.5,
        )


def _check_rotation(R: np.ndarray, tol: float = 1e-9):
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(R @ R.T - np.eye(3))) > tol:
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("rotation must have determinant +1")


class Pose:
    """Rigid transform ``x -> R x + t``."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation, check: bool = True):
        R = np.array(rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(translation, dtype=np.float64).reshape(3)
        if check:
            _check_rotation(R)
            if not np.all(np.isfinite(t)):
                raise ValueError("translation must be finite")
        R.setflags(write=False)
        t.setflags(write=False)
        self.rotation = R
        self.translation = t

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3), check=False)

    @classmethod
    def from_matrix(cls, M, check: bool = True) -> "Pose":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3], check=check)

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @property
    def center(self) -> np.ndarray:
        """Origin of this frame expressed in the source frame (camera centre)."""
        return -self.rotation.T @ self.translation

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            check=False,
        )

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation, check=False)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class CameraView:
    intrinsics: Intrinsics
    world_to_camera: Pose
    width: int
    height: int
    image: np.ndarray | None = None

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("views must be at least 16x16 pixels")
        if self.image is not None:
            img = np.asarray(self.image)
            if img.shape != (self.height, self.width, 3):
                raise ValueError(
                    f"image shape {img.shape} does not match {self.height}x{self.width}x3"
                )
            if not np.all(np.isfinite(img)):
                raise ValueError("image contains non-finite values")

    @property
    def center(self) -> np.ndarray:
        return self.world_to_camera.center


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise ValueError("depth values and mask must share a shape")
        v = self.values[self.mask]
        if not (np.all(np.isfinite(v)) and np.all(v > 0)):
            raise ValueError("masked depth values must be positive and finite")


def relative_pose(ref: CameraView, src: CameraView) -> Pose:
    """Pose taking reference-camera coordinates to source-camera coordinates."""
    return src.world_to_camera.compose(ref.world_to_camera.inverse())


def _homogeneous(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)


def back_project(K: Intrinsics, p) -> np.ndarray:
    """``K^-1 [u, v, 1]`` for pixels ``p`` of shape (..., 2)."""
    return _homogeneous(p) @ K.inverse.T


def rotated_ray(rel: Pose, K0: Intrinsics, p_r) -> np.ndarray:
    """``R K0^-1 p_r``: the reference viewing ray expressed in source axes."""
    return back_project(K0, p_r) @ rel.rotation.T


def position_from_depth(rel: Pose, K0: Intrinsics, Ki: Intrinsics, p_r, d_r):
    """Warp reference pixel(s) at depth ``d_r`` into the source view.

    Returns ``(p_s, d_s)``; vectorised over leading dimensions.
    """
    d_r = np.asarray(d_r, dtype=np.float64)
    if np.any(~(d_r > 0)):
        raise ValueError("reference depth must be positive")
    X = rotated_ray(rel, K0, p_r) * d_r[..., None] + rel.translation
    d_s = X[..., 2]
    if np.any(d_s <= 0):
        raise PointBehindCamera("warped point lies behind the source camera")
    proj = X @ Ki.matrix.T
    return proj[..., :2] / proj[..., 2:3], d_s


def _xp(x):
    return torch if isinstance(x, torch.Tensor) else np


def _where(cond, a, b):
    if isinstance(cond, torch.Tensor) or isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        return torch.where(torch.as_tensor(cond), a, b)
    return np.where(cond, a, b)


def branch_denominators(q, r):
    """Denominators of the x and y closed forms for source ray ``q`` and rotated ray ``r``."""
    den_x = q[..., 0] * r[..., 2] - q[..., 2] * r[..., 0]
    den_y = q[..., 1] * r[..., 2] - q[..., 2] * r[..., 1]
    return den_x, den_y


def depths_from_rays(q, r, t, branch_x):
    """Closed-form reference and source depths along an epipolar line.

    ``q = Ki^-1 p_s``, ``r = R K0^-1 p_r``, ``t`` the relative translation and
    ``branch_x`` a boolean (array) selecting the x-row or the y-row solution.
    Works on numpy arrays and torch tensors alike; the unused branch is
    guarded so it never injects NaN gradients.
    """
    den_x, den_y = branch_denominators(q, r)
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    num_rx = tx * q[..., 2] - tz * q[..., 0]
    num_ry = ty * q[..., 2] - tz * q[..., 1]
    num_sx = tx * r[..., 2] - tz * r[..., 0]
    num_sy = ty * r[..., 2] - tz * r[..., 1]
    den = _where(branch_x, den_x, den_y)
    safe = _where(_xp(den).abs(den) > 0, den, den * 0 + 1)
    d_r = _where(branch_x, num_rx, num_ry) / safe
    d_s = _where(branch_x, num_sx, num_sy) / safe
    return d_r, d_s


def depth_from_position(rel: Pose, K0: Intrinsics, Ki: Intrinsics, p_r, p_s, branch=None):
    """Recover ``(d_r, d_s)`` from a correspondence ``p_r <-> p_s``.

    ``branch`` is ``"x"``, ``"y"`` or ``None``; with ``None`` (or when the
    requested branch is ill-conditioned) the better-conditioned row is used.
    """
    r = rotated_ray(rel, K0, p_r)
    q = back_project(Ki, p_s)
    den_x, den_y = branch_denominators(q, r)
    ax, ay = np.abs(den_x), np.abs(den_y)
    if np.any((ax <= DENOM_EPS) & (ay <= DENOM_EPS)):
        raise DegenerateConfiguration("source pixel sits at the epipole")
    if branch is None:
        use_x = ax >= ay
    else:
        if branch not in ("x", "y"):
            raise ValueError(f"branch must be 'x' or 'y', got {branch!r}")
        # fall back to the other row when the requested one is singular
        use_x = ax > DENOM_EPS if branch == "x" else ay <= DENOM_EPS
    t = np.broadcast_to(rel.translation, r.shape)
    return depths_from_rays(q, r, t, use_x)


@dataclass(frozen=True, eq=False)
class EpipolarGeometry:
    """Search segments on the epipolar lines of one or many reference pixels.

    Array fields share the leading shape of ``p_r``. Positions on the line
    are ``base_point + e * e_dir`` with the 1-D flow ``e`` restricted to
    ``valid_interval``; ``e_dir`` points toward increasing reference depth.
    """

    e_dir: np.ndarray
    base_point: np.ndarray
    valid_interval: np.ndarray
    branch_x: np.ndarray
    valid: np.ndarray
    rel: Pose
    K0: Intrinsics
    Ki: Intrinsics
    p_r: np.ndarray

    @property
    def branch(self):
        if np.ndim(self.branch_x) == 0:
            return "x" if bool(self.branch_x) else "y"
        return np.where(self.branch_x, "x", "y")

    @property
    def rays(self) -> np.ndarray:
        return rotated_ray(self.rel, self.K0, self.p_r)

    def clamp_bounds(self):
        lo, hi = self.valid_interval[..., 0], self.valid_interval[..., 1]
        m = CLAMP_MARGIN * (hi - lo)
        return lo + m, hi - m

    def to_torch(self, dtype=torch.float32) -> dict:
        """Tensors needed by the differentiable flow/depth maps."""
        lo, hi = self.clamp_bounds()
        t = np.broadcast_to(self.rel.translation, self.p_r.shape[:-1] + (3,))
        return {
            "e_dir": torch.as_tensor(self.e_dir, dtype=dtype),
            "base": torch.as_tensor(self.base_point, dtype=dtype),
            "lo": torch.as_tensor(lo, dtype=dtype),
            "hi": torch.as_tensor(hi, dtype=dtype),
            "branch_x": torch.as_tensor(self.branch_x),
            "valid": torch.as_tensor(self.valid),
            "ray": torch.as_tensor(self.rays, dtype=dtype),
            "t": torch.as_tensor(np.ascontiguousarray(t), dtype=dtype),
            "Ki_inv": torch.as_tensor(self.Ki.inverse, dtype=dtype),
        }


def _half_line(c0, c1, lo, hi):
    """Intersect ``[lo, hi]`` with ``{s : c0 + c1 s > 0}`` elementwise."""
    with np.errstate(divide="ignore", invalid="ignore"):
        root = -c0 / c1
    lo = np.where(c1 > 0, np.maximum(lo, root), lo)
    hi = np.where(c1 < 0, np.minimum(hi, root), hi)
    dead = (c1 == 0) & ~(c0 > 0)
    hi = np.where(dead, -np.inf, hi)
    return lo, hi


def epipolar_field(rel: Pose, K0: Intrinsics, Ki: Intrinsics, p_r, width: int, height: int) -> EpipolarGeometry:
    """Vectorised epipolar setup for reference pixels ``p_r`` of shape (..., 2).

    Pixels whose line is undefined or whose segment is empty are flagged
    invalid rather than raising; callers mask them.
    """
    t = rel.translation
    if np.linalg.norm(t) <= BASELINE_EPS:
        raise DegenerateConfiguration("zero baseline: epipolar line undefined")
    p_r = np.asarray(p_r, dtype=np.float64)
    r = rotated_ray(rel, K0, p_r)
    epipole = np.broadcast_to(Ki.matrix @ t, r.shape)
    vanishing = r @ Ki.matrix.T
    line = np.cross(epipole, vanishing)
    line = line / np.maximum(np.linalg.norm(line, axis=-1, keepdims=True), 1e-300)
    l0, l1, l2 = line[..., 0], line[..., 1], line[..., 2]
    n2 = l0 * l0 + l1 * l1
    ok = n2 > 1e-24
    n2 = np.where(ok, n2, 1.0)
    d = np.stack([-l1, l0], axis=-1) / np.sqrt(n2)[..., None]
    d = np.where(ok[..., None], d, np.array([1.0, 0.0]))

    centre = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    off = (l0 * centre[0] + l1 * centre[1] + l2) / n2
    a = centre - off[..., None] * np.stack([l0, l1], axis=-1)

    branch_x = np.abs(d[..., 0]) >= np.abs(d[..., 1])
    j = np.where(branch_x, 0, 1)
    take = lambda v: np.take_along_axis(v, j[..., None], axis=-1)[..., 0]
    q0 = back_project(Ki, a)
    q1 = np.stack([d[..., 0] / Ki.fx, d[..., 1] / Ki.fy], axis=-1)
    q0j, q1j, rj = take(q0[..., :2]), take(q1), take(r[..., :2])
    tj = np.where(branch_x, t[0], t[1])
    rz, tz = r[..., 2], t[2]
    # d_r(s) = (nr0 + nr1 s) / (den0 + den1 s),  d_s(s) = ns / (den0 + den1 s)
    den0, den1 = q0j * rz - rj, q1j * rz
    nr0, nr1 = tj - tz * q0j, -tz * q1j
    ns = tj * rz - tz * rj

    flip = (nr1 * den0 - nr0 * den1) < 0
    sgn = np.where(flip, -1.0, 1.0)
    d = d * sgn[..., None]
    den1, nr1 = den1 * sgn, nr1 * sgn
    ok &= np.abs(ns) > DENOM_EPS

    sigma = np.sign(ns)
    lo = np.full(ns.shape, -np.inf)
    hi = np.full(ns.shape, np.inf)
    lo, hi = _half_line(sigma * den0, sigma * den1, lo, hi)
    lo, hi = _half_line(sigma * nr0, sigma * nr1, lo, hi)
    xmin = -0.5 - RECT_INFLATION * width
    xmax = width - 0.5 + RECT_INFLATION * width
    ymin = -0.5 - RECT_INFLATION * height
    ymax = height - 0.5 + RECT_INFLATION * height
    lo, hi = _half_line(a[..., 0] - xmin, d[..., 0], lo, hi)
    lo, hi = _half_line(xmax - a[..., 0], -d[..., 0], lo, hi)
    lo, hi = _half_line(a[..., 1] - ymin, d[..., 1], lo, hi)
    lo, hi = _half_line(ymax - a[..., 1], -d[..., 1], lo, hi)
    ok &= np.isfinite(lo) & np.isfinite(hi) & (hi - lo > 1e-9)

    mid = np.where(ok, 0.5 * (lo + hi), 0.0)
    half = np.where(ok, 0.5 * (hi - lo), 1.0)
    base = a + mid[..., None] * d
    return EpipolarGeometry(
        e_dir=d,
        base_point=base,
        valid_interval=np.stack([-half, half], axis=-1),
        branch_x=branch_x,
        valid=ok,
        rel=rel,
        K0=K0,
        Ki=Ki,
        p_r=p_r,
    )


def epipolar_setup(ref: CameraView, src: CameraView, p_r) -> EpipolarGeometry:
    """Search segment for ``p_r`` in ``src``; raises if the segment is empty."""
    geom = epipolar_field(
        relative_pose(ref, src), ref.intrinsics, src.intrinsics, p_r, src.width, src.height
    )
    if not np.all(geom.valid):
        raise DegenerateConfiguration("no depth-positive segment on the epipolar line")
    return geom


def clamp_flow(geom: EpipolarGeometry, e_s):
    """Clamp flows into the (margin-shrunk) valid interval; returns ``(flow, n_clamped)``."""
    lo, hi = geom.clamp_bounds()
    e_s = np.asarray(e_s, dtype=np.float64)
    clamped = np.clip(e_s, lo, hi)
    return clamped, int(np.count_nonzero(clamped != e_s))


def flow_position(geom: EpipolarGeometry, e_s) -> np.ndarray:
    return geom.base_point + np.asarray(e_s, dtype=np.float64)[..., None] * geom.e_dir


def flow_to_depth(geom: EpipolarGeometry, e_s) -> np.ndarray:
    """Reference depth at flow ``e_s`` along the line (clamped first)."""
    e_s, _ = clamp_flow(geom, e_s)
    q = back_project(geom.Ki, flow_position(geom, e_s))
    t = np.broadcast_to(geom.rel.translation, q.shape)
    d_r, _ = depths_from_rays(q, geom.rays, t, geom.branch_x)
    return d_r


def depth_bounds(geom: EpipolarGeometry):
    lo, hi = geom.clamp_bounds()
    return flow_to_depth(geom, lo), flow_to_depth(geom, hi)


def depth_to_flow(geom: EpipolarGeometry, d_r) -> np.ndarray:
    """Flow whose position on the line has reference depth ``d_r`` (clamped)."""
    d_lo, d_hi = depth_bounds(geom)
    d = np.clip(np.asarray(d_r, dtype=np.float64), d_lo, d_hi)
    X = geom.rays * d[..., None] + geom.rel.translation
    proj = X @ geom.Ki.matrix.T
    p_s = proj[..., :2] / proj[..., 2:3]
    e = np.sum((p_s - geom.base_point) * geom.e_dir, axis=-1)
    return clamp_flow(geom, e)[0]


def triangulate(ref: CameraView, src: CameraView, p_r, p_s) -> np.ndarray:
    """3-D point in reference-camera coordinates from a correspondence."""
    rel = relative_pose(ref, src)
    d_r, d_s = depth_from_position(rel, ref.intrinsics, src.intrinsics, p_r, p_s)
    if np.any(d_s <= 0) or np.any(d_r <= 0):
        raise PointBehindCamera("triangulated point is behind a camera")
    return back_project(ref.intrinsics, p_r) * np.asarray(d_r)[..., None]


def project(view: CameraView, points_world):
    """Project world points; returns ``(pixels, depths)``."""
    X = view.world_to_camera.apply(points_world)
    proj = X @ view.intrinsics.matrix.T
    return proj[..., :2] / proj[..., 2:3], X[..., 2]


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of ``(u, v)`` pixel centres."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack([u, v], axis=-1)
