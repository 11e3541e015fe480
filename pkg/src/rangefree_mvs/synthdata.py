"""Procedural multi-view scenes with analytic ground truth.

Cameras sit on an arc around a look-at target and image a textured
primitive (tilted plane, sphere, or a two-level step). Depth is the exact
ray/primitive intersection; colour is multi-octave value noise painted in
surface coordinates. Scaling a scene by ``depth_scale`` scales cameras,
primitive and texture coordinates together, so images are unchanged and
every depth is multiplied by exactly that factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import CoverageTooLow
from .geometry import CameraView, DepthMap, Intrinsics, Pose, back_project, pixel_grid, relative_pose

PRIMITIVES = ("plane", "sphere", "step")


@dataclass(frozen=True)
class SceneSpec:
    primitive: str = "plane"
    width: int = 80
    height: int = 64
    n_views: int = 3
    arc_radius: float = 3.0
    arc_step_deg: float = 12.0
    elevation_deg: float = 4.0
    focal_scale: float = 1.1
    target: tuple = (0.0, 0.0, 0.0)
    tilt_deg: float = 20.0
    tilt_axis_deg: float = 30.0
    sphere_radius: float = 4.0
    step_height: float = 0.35
    texture_octaves: int = 4
    texture_cell: float = 0.6
    texture_seed: int = 0
    depth_scale: float = 1.0
    min_coverage: float = 0.9

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.primitive!r}")
        if self.texture_octaves < 3:
            raise ValueError("at least three texture octaves are required")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")


@dataclass
class GroundTruth:
    depths: list  # DepthMap per view
    cloud: np.ndarray  # (P, 3) world points on the surface


def _rotation(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def look_at(position, target) -> Pose:
    """World-to-camera pose with +z toward ``target`` and +y pointing down (world +y)."""
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    f /= np.linalg.norm(f)
    x = np.cross([0.0, 1.0, 0.0], f)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f])
    return Pose(R, -R @ position)


def camera_rig(spec: SceneSpec) -> list:
    """Reference camera first, then alternating sides of the arc."""
    lam = spec.depth_scale
    target = np.asarray(spec.target, dtype=np.float64) * lam
    K = Intrinsics(
        spec.focal_scale * spec.width,
        spec.focal_scale * spec.width,
        (spec.width - 1) / 2.0,
        (spec.height - 1) / 2.0,
    )
    views = []
    for k in range(spec.n_views):
        side = (k + 1) // 2 * (1 if k % 2 else -1)
        az = math.radians(spec.arc_step_deg * side)
        el = math.radians(spec.elevation_deg * (0 if k == 0 else (1 if k % 4 in (1, 2) else -1)))
        r = spec.arc_radius * lam
        pos = target + r * np.array([math.sin(az) * math.cos(el), math.sin(el), -math.cos(az) * math.cos(el)])
        views.append((K, look_at(pos, target)))
    return views


# ---------------------------------------------------------------------------
# texture


def _hash(i, j, salt):
    """Deterministic lattice noise in [0, 1)."""
    h = (i.astype(np.int64) * 374761393 + j.astype(np.int64) * 668265263 + salt * 2147483647) & 0xFFFFFFFF
    h = h.astype(np.uint64)
    h = (h ^ (h >> np.uint64(13))) * np.uint64(1274126177) & np.uint64(0xFFFFFFFF)
    h = h ^ (h >> np.uint64(16))
    return (h & np.uint64(0xFFFFFF)).astype(np.float64) / float(1 << 24)


def value_noise(uv, octaves: int, cell: float, seed: int) -> np.ndarray:
    """Sum of bilinearly interpolated lattice noise; ``uv`` (..., 2) -> values in [0, 1]."""
    total = np.zeros(uv.shape[:-1])
    norm = 0.0
    for o in range(octaves):
        size = cell / 2**o
        x = uv[..., 0] / size
        y = uv[..., 1] / size
        i, j = np.floor(x), np.floor(y)
        fx, fy = x - i, y - j
        salt = seed * 31 + o * 7 + 1
        v00 = _hash(i, j, salt)
        v10 = _hash(i + 1, j, salt)
        v01 = _hash(i, j + 1, salt)
        v11 = _hash(i + 1, j + 1, salt)
        val = v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy) + v01 * (1 - fx) * fy + v11 * fx * fy
        amp = 0.6**o
        total += amp * val
        norm += amp
    return total / norm


def _colour(uv, spec: SceneSpec):
    s = spec.texture_seed * 4
    common = value_noise(uv, spec.texture_octaves, spec.texture_cell, s)
    chans = [
        0.6 * common + 0.4 * value_noise(uv, spec.texture_octaves, spec.texture_cell, s + c + 1)
        for c in range(3)
    ]
    img = np.stack(chans, axis=-1)
    # stretch contrast around mid-grey
    return np.clip(0.5 + 1.8 * (img - 0.5), 0.0, 1.0)


# ---------------------------------------------------------------------------
# primitives


class _Surface:
    def intersect(self, origin, dirs):
        """Ray parameters ``t`` (inf on miss) for rays ``origin + t * dirs``."""
        raise NotImplementedError

    def uv(self, points):
        raise NotImplementedError


class _Plane(_Surface):
    def __init__(self, point, normal, lam):
        self.p0 = np.asarray(point, dtype=np.float64)
        n = np.asarray(normal, dtype=np.float64)
        self.n = n / np.linalg.norm(n)
        a = np.array([1.0, 0.0, 0.0]) if abs(self.n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        self.b1 = np.cross(self.n, a)
        self.b1 /= np.linalg.norm(self.b1)
        self.b2 = np.cross(self.n, self.b1)
        self.lam = lam

    def intersect(self, origin, dirs):
        den = dirs @ self.n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.p0 - origin) @ self.n) / den
        return np.where((np.abs(den) > 1e-15) & (t > 0), t, np.inf)

    def uv(self, points):
        d = points - self.p0
        return np.stack([d @ self.b1, d @ self.b2], axis=-1) / self.lam


class _Sphere(_Surface):
    def __init__(self, centre, radius, lam):
        self.c = np.asarray(centre, dtype=np.float64)
        self.r = radius
        self.lam = lam

    def intersect(self, origin, dirs):
        oc = origin - self.c
        a = np.sum(dirs * dirs, axis=-1)
        b = 2 * (dirs @ oc)
        c = oc @ oc - self.r**2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 0, t0, t1)
        return np.where((disc >= 0) & (t > 0), t, np.inf)

    def uv(self, points):
        d = (points - self.c) / self.r
        lon = np.arctan2(d[..., 0], -d[..., 2])
        lat = np.arcsin(np.clip(d[..., 1], -1, 1))
        return np.stack([lon, lat], axis=-1) * (self.r / self.lam)


class _Step(_Surface):
    """Two fronto-facing half-planes joined by a riser at x = x0."""

    def __init__(self, centre, height, lam):
        self.c = np.asarray(centre, dtype=np.float64)
        self.h = height
        self.lam = lam

    def intersect(self, origin, dirs):
        z0, x0 = self.c[2], self.c[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_back = (z0 - origin[2]) / dirs[..., 2]
            t_front = (z0 - self.h - origin[2]) / dirs[..., 2]
            t_riser = (x0 - origin[0]) / dirs[..., 0]
        xb = origin[0] + t_back * dirs[..., 0]
        xf = origin[0] + t_front * dirs[..., 0]
        zr = origin[2] + t_riser * dirs[..., 2]
        cands = [
            np.where((t_back > 0) & (xb < x0), t_back, np.inf),
            np.where((t_front > 0) & (xf >= x0), t_front, np.inf),
            np.where((t_riser > 0) & (zr >= z0 - self.h) & (zr <= z0), t_riser, np.inf),
        ]
        return np.min(np.stack(cands), axis=0)

    def uv(self, points):
        d = points - self.c
        # unfold the riser into the texture plane
        u = np.where(np.abs(d[..., 0]) < 1e-12, d[..., 2], d[..., 0])
        return np.stack([u, d[..., 1]], axis=-1) / self.lam


def make_surface(spec: SceneSpec) -> _Surface:
    lam = spec.depth_scale
    target = np.asarray(spec.target, dtype=np.float64) * lam
    if spec.primitive == "plane":
        ax = math.radians(spec.tilt_axis_deg)
        axis = np.array([math.cos(ax), math.sin(ax), 0.0])
        normal = _rotation(axis, math.radians(spec.tilt_deg)) @ np.array([0.0, 0.0, -1.0])
        return _Plane(target, normal, lam)
    if spec.primitive == "sphere":
        # front of the sphere passes through the target
        return _Sphere(target + np.array([0.0, 0.0, spec.sphere_radius * lam]), spec.sphere_radius * lam, lam)
    return _Step(target, spec.step_height * lam, lam)


# ---------------------------------------------------------------------------
# rendering


def camera_rays(K: Intrinsics, pose: Pose, pixels):
    """World-space ray origin and directions whose camera-z component is 1."""
    dirs = back_project(K, pixels) @ pose.rotation  # R^T applied row-wise
    return pose.center, dirs


def render_depth(surface: _Surface, K: Intrinsics, pose: Pose, pixels) -> np.ndarray:
    """Analytic camera-z depth at arbitrary (sub-)pixels; ``inf`` where the ray misses."""
    origin, dirs = camera_rays(K, pose, pixels)
    return surface.intersect(origin, dirs)


class Scene:
    """A generated scene: views, ground truth and the analytic surface."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.surface = make_surface(spec)
        self.views = []
        depths = []
        grid = pixel_grid(spec.height, spec.width)
        for K, pose in camera_rig(spec):
            depth = render_depth(self.surface, K, pose, grid)
            hit = np.isfinite(depth)
            if hit.mean() < spec.min_coverage:
                raise CoverageTooLow(f"only {hit.mean():.1%} of pixels see the primitive")
            origin, dirs = camera_rays(K, pose, grid)
            pts = origin + np.where(hit, depth, 0.0)[..., None] * dirs
            img = np.where(hit[..., None], _colour(self.surface.uv(pts), spec), 0.0)
            self.views.append(CameraView(K, pose, spec.width, spec.height, img))
            depths.append(DepthMap(values=np.where(hit, depth, 0.0), mask=hit))
        self.gt = GroundTruth(depths=depths, cloud=self._dense_cloud())

    def depth_at(self, view_index: int, pixels) -> np.ndarray:
        v = self.views[view_index]
        return render_depth(self.surface, v.intrinsics, v.world_to_camera, pixels)

    def _dense_cloud(self, supersample: int = 2) -> np.ndarray:
        spec = self.spec
        step = 1.0 / supersample
        v, u = np.meshgrid(
            np.arange(0, spec.height, step) - 0.5 + step / 2,
            np.arange(0, spec.width, step) - 0.5 + step / 2,
            indexing="ij",
        )
        pix = np.stack([u, v], axis=-1)
        clouds = []
        for view in self.views:
            origin, dirs = camera_rays(view.intrinsics, view.world_to_camera, pix)
            t = self.surface.intersect(origin, dirs)
            ok = np.isfinite(t)
            clouds.append(origin + t[ok][:, None] * dirs[ok])
        return np.concatenate(clouds)


def generate(spec: SceneSpec, seed: int | None = None):
    """Build ``(views, GroundTruth)``; ``seed`` overrides the texture seed."""
    scene = make_scene(spec, seed)
    return scene.views, scene.gt


def make_scene(spec: SceneSpec, seed: int | None = None) -> Scene:
    if seed is not None:
        spec = replace(spec, texture_seed=seed)
    return Scene(spec)


def epipolar_oracle(views, pixel, src_index: int = 1, samples: int = 10_000, inflation: float = 0.25):
    """Brute-force table along the epipolar line of ``pixel`` in ``views[src_index]``.

    The line is swept across the source image rectangle inflated by
    ``inflation`` per side. Depths come from a least-squares solve of
    ``Ki^-1 p_s d_s - R K0^-1 p_r d_r = T`` at each sample, independent of
    any closed form. Returns a dict of arrays ``positions, d_r, d_s, residual``;
    the residual is relative to the larger side of the equation (at least 1).
    """
    ref, src = views[0], views[src_index]
    rel = relative_pose(ref, src)
    r = back_project(ref.intrinsics, np.asarray(pixel, dtype=np.float64)) @ rel.rotation.T
    Km = src.intrinsics.matrix
    line = np.cross(Km @ rel.translation, Km @ r)
    n = line[:2]
    direction = np.array([-n[1], n[0]]) / np.linalg.norm(n)
    centre = np.array([(src.width - 1) / 2, (src.height - 1) / 2])
    origin = centre - (line[:2] @ centre + line[2]) / (n @ n) * n
    xmin, xmax = -0.5 - inflation * src.width, src.width - 0.5 + inflation * src.width
    ymin, ymax = -0.5 - inflation * src.height, src.height - 0.5 + inflation * src.height
    lo, hi = -np.inf, np.inf
    for o, d, a, b in ((origin[0], direction[0], xmin, xmax), (origin[1], direction[1], ymin, ymax)):
        if abs(d) > 1e-15:
            s1, s2 = sorted(((a - o) / d, (b - o) / d))
            lo, hi = max(lo, s1), min(hi, s2)
    s = np.linspace(lo, hi, samples)
    pos = origin + s[:, None] * direction
    q = back_project(src.intrinsics, pos)
    # two-column Gram-Schmidt QR of A = [q, -r], then back substitution
    a1, a2 = q, -np.broadcast_to(r, q.shape)
    r11 = np.linalg.norm(a1, axis=-1)
    q1 = a1 / r11[:, None]
    r12 = np.einsum("ni,ni->n", q1, a2)
    v = a2 - r12[:, None] * q1
    r22 = np.linalg.norm(v, axis=-1)
    q2 = v / r22[:, None]
    d_r = (q2 @ rel.translation) / r22
    d_s = (q1 @ rel.translation - r12 * d_r) / r11
    lhs, rhs = q * d_s[:, None], r * d_r[:, None] + rel.translation
    # relative to the magnitude of the terms, so far-away samples are judged fairly
    size = np.maximum.reduce([np.linalg.norm(lhs, axis=-1), np.linalg.norm(rhs, axis=-1), np.ones(len(s))])
    resid = np.linalg.norm(lhs - rhs, axis=-1) / size
    return {"s": s, "positions": pos, "d_r": d_r, "d_s": d_s, "residual": resid, "direction": direction}


def random_rotation(rng: np.random.Generator, max_angle: float = math.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    return _rotation(axis, rng.uniform(-max_angle, max_angle))


def random_camera_pair(rng: np.random.Generator, width: int = 64, height: int = 48):
    """Two image-less views with a non-trivial baseline looking at a common region."""
    def intr():
        f = rng.uniform(0.6, 1.5) * width
        return Intrinsics(f, f * rng.uniform(0.9, 1.1), (width - 1) / 2 + rng.uniform(-4, 4),
                          (height - 1) / 2 + rng.uniform(-4, 4))

    ref_pose = Pose(random_rotation(rng), rng.normal(size=3))
    rel_R = random_rotation(rng, math.radians(25))
    rel_t = rng.normal(size=3)
    rel_t *= rng.uniform(0.1, 1.0) / np.linalg.norm(rel_t)
    src_pose = Pose(rel_R, rel_t).compose(ref_pose)
    return CameraView(intr(), ref_pose, width, height), CameraView(intr(), src_pose, width, height)
