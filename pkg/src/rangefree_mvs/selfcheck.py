"""Fast in-process oracle, gradient and property checks behind ``rfmvs selfcheck``.

Every check returns ``(name, passed, detail)``; the detail strings are
deterministic so two runs with the same seed print identical reports.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
import torch

from . import fileio
from .disparity import estimate_uncertainty
from .errors import DegenerateConfiguration, PointBehindCamera
from .fusion_eval import nearest_distances
from .geometry import (
    Intrinsics,
    Pose,
    depth_from_position,
    depth_to_flow,
    epipolar_field,
    flow_to_depth,
    position_from_depth,
    relative_pose,
)
from .mda import MultiViewDisparityAttention, explicit_kernel_attention, linear_attention
from .refiner import ModelConfig, RangeFreeMVS, RefinerConfig, run_inference
from .synthdata import SceneSpec, make_scene, random_camera_pair
from .tensor_core import bilinear_sample, grad_check, load_checkpoint, save_checkpoint

D64 = torch.float64


def check_geometry(seed: int, n: int):
    rng = np.random.default_rng(seed)
    worst_res = worst_rt = worst_flow = 0.0
    used = 0
    while used < n:
        ref, src = random_camera_pair(rng)
        rel = relative_pose(ref, src)
        p_r = rng.uniform([0, 0], [ref.width - 1, ref.height - 1])
        geom = epipolar_field(rel, ref.intrinsics, src.intrinsics, p_r, src.width, src.height)
        if not geom.valid:
            continue
        lo, hi = geom.clamp_bounds()
        e = rng.uniform(lo, hi)
        d = float(flow_to_depth(geom, e))
        try:
            p_s, d_s = position_from_depth(rel, ref.intrinsics, src.intrinsics, p_r, d)
        except PointBehindCamera:
            continue
        used += 1
        lhs = src.intrinsics.inverse @ np.append(p_s, 1.0) * d_s
        rhs = rel.rotation @ (ref.intrinsics.inverse @ np.append(p_r, 1.0)) * d + rel.translation
        worst_res = max(worst_res, np.linalg.norm(lhs - rhs))
        d_back, _ = depth_from_position(rel, ref.intrinsics, src.intrinsics, p_r, p_s)
        worst_rt = max(worst_rt, abs(float(d_back) - d) / d)
        e_back = float(depth_to_flow(geom, d))
        worst_flow = max(worst_flow, abs(float(flow_to_depth(geom, e_back)) - d) / d)
    ok = worst_res < 1e-9 and worst_rt < 1e-9 and worst_flow < 1e-9
    return "geometry round trips", ok, f"{n} pairs, residual {worst_res:.1e}, depth {worst_rt:.1e}, flow {worst_flow:.1e}"


def check_rectified():
    worst = 0.0
    K = Intrinsics(1.0, 1.0, 0.0, 0.0)
    for b in (0.1, 0.5, 1.0, 3.0):
        for u in (-1.0, 0.0, 0.25):
            for disp in (0.05, 0.5, 2.0):
                rel = Pose(np.eye(3), [b, 0.0, 0.0])
                d_r, _ = depth_from_position(rel, K, K, (u, 0.1), (u + disp, 0.1), branch="x")
                worst = max(worst, abs(float(d_r) - b / disp))
    return "rectified closed form", worst < 1e-12, f"max error {worst:.1e}"


def check_gradients(seed: int):
    gen = torch.Generator().manual_seed(seed)
    feat = torch.randn(8, 8, 4, generator=gen, dtype=D64)
    pts = torch.rand(10, 2, generator=gen, dtype=D64) * 6 + 0.5
    errs = {
        "bilinear": grad_check(bilinear_sample, [feat, pts], eps=1e-6),
        "uncertainty": grad_check(estimate_uncertainty, [torch.randn(2, 6, 3, 3, generator=gen, dtype=D64)]),
        "linear attention": grad_check(
            linear_attention, [torch.randn(1, 5, 2, 3, generator=gen, dtype=D64) for _ in range(3)]
        ),
    }
    worst = max(errs.values())
    return "gradient checks", worst < 1e-4, ", ".join(f"{k} {v:.1e}" for k, v in errs.items())


def check_attention(seed: int):
    gen = torch.Generator().manual_seed(seed)
    q, k, v = (torch.randn(2, 32, 4, 8, generator=gen, dtype=D64) for _ in range(3))
    diff = float((linear_attention(q, k, v) - explicit_kernel_attention(q, k, v)).abs().max())
    torch.manual_seed(seed)
    mda = MultiViewDisparityAttention(feat_dim=8, dim=16, heads=4, blocks=1).to(D64)
    feats = torch.randn(3, 8, 4, 5, generator=gen, dtype=D64)
    pose = torch.randn(3, 12, 4, 5, generator=gen, dtype=D64)
    perm = torch.tensor([2, 0, 1])
    with torch.no_grad():
        eq = float((mda(feats, pose)[perm] - mda(feats[perm], pose[perm])).abs().max())
    ok = diff < 1e-6 and eq < 1e-6
    return "attention equivalences", ok, f"kernel form {diff:.1e}, view permutation {eq:.1e}"


def check_uncertainty(seed: int):
    gen = torch.Generator().manual_seed(seed)
    const = estimate_uncertainty(torch.full((1, 36, 2, 2), 3.7, dtype=D64))
    fuzz = estimate_uncertainty(torch.randn(4, 36, 5, 5, generator=gen, dtype=D64) * 10.0)
    ok = bool((const == 0.5).all()) and bool(((fuzz > 0) & (fuzz < 1)).all())
    return "uncertainty bounds", ok, f"constant -> {float(const.flatten()[0])}, fuzzed range ({float(fuzz.min()):.3g}, {float(fuzz.max()):.3g})"


def _small_model(seed: int) -> RangeFreeMVS:
    torch.manual_seed(seed)
    cfg = ModelConfig(disp_hidden=8, disp_feat=16, attn_dim=16, heads=2, blocks=1)
    cfg.features.c_coarse, cfg.features.c_fine = 16, 8
    cfg.features.c_ctx, cfg.features.c_ctx_hidden = 24, 12
    cfg.features.width = (8, 12, 16)
    return RangeFreeMVS(cfg, RefinerConfig(t_c=2, t_f=1)).to(D64).eval()


def check_inference(seed: int):
    scene = make_scene(SceneSpec(primitive="plane", width=48, height=32), seed=seed)
    model = _small_model(seed)
    a = run_inference(model, scene.views, seed=seed, dtype=D64)
    b = run_inference(model, scene.views, seed=seed, dtype=D64)
    swapped = [scene.views[0], scene.views[2], scene.views[1]]
    c = run_inference(model, swapped, seed=seed, dtype=D64)
    det = bool(torch.equal(a.depth, b.depth))
    perm = float((a.depth - c.depth).abs().max())
    return "inference determinism and view-order invariance", det and perm < 1e-6, f"repeat identical {det}, permutation {perm:.1e}"


def check_nearest(seed: int, n: int):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    same = np.array_equal(nearest_distances(a, b), nearest_distances(a, b, brute_force=True))
    return "spatial index vs brute force", bool(same), f"{n} points, identical {same}"


def check_files(seed: int):
    rng = np.random.default_rng(seed)
    details = []
    ok = True
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        depth = rng.uniform(0.5, 3, size=(7, 9)).astype(np.float32)
        fileio.write_pfm(tmp / "d.pfm", depth)
        same = np.array_equal(fileio.read_pfm(tmp / "d.pfm"), depth)
        ok &= same
        details.append(f"pfm {same}")
        pts = rng.normal(size=(50, 3))
        for binary in (True, False):
            fileio.write_ply(tmp / "c.ply", pts, binary=binary)
            same = np.array_equal(fileio.read_ply(tmp / "c.ply")[0], pts)
            ok &= same
            details.append(f"ply-{'bin' if binary else 'txt'} {same}")
        entries = {"w": rng.normal(size=(3, 4)).astype(np.float32)}
        save_checkpoint(tmp / "m.ckpt", entries)
        same = np.array_equal(load_checkpoint(tmp / "m.ckpt")["w"], entries["w"])
        ok &= same
        details.append(f"checkpoint {same}")
    pose = Pose(np.eye(3), [0.1, 0.2, 0.3])
    K = Intrinsics(50.0, 50.0, 20.0, 15.0)
    plain = fileio.parse_camera_file(fileio.format_camera_file(pose, K))
    noisy = fileio.parse_camera_file(fileio.format_camera_file(pose, K, [[425.0, 2.5]]))
    same = (np.array_equal(plain.pose.matrix, noisy.pose.matrix) and plain.intrinsics == noisy.intrinsics
            and noisy.ignored_trailing == 1)
    ok &= same
    details.append(f"camera metadata ignored {same}")
    return "file formats", bool(ok), ", ".join(details)


def run_selfcheck(seed: int = 0, quick: bool = True) -> list:
    n_geo = 200 if quick else 1000
    n_nn = 2000 if quick else 10_000
    checks = [
        lambda: check_geometry(seed, n_geo),
        check_rectified,
        lambda: check_gradients(seed),
        lambda: check_attention(seed),
        lambda: check_uncertainty(seed),
        lambda: check_inference(seed),
        lambda: check_nearest(seed, n_nn),
        lambda: check_files(seed),
    ]
    results = []
    for fn in checks:
        try:
            results.append(fn())
        except (DegenerateConfiguration, ValueError, RuntimeError) as exc:
            results.append((getattr(fn, "__name__", "check"), False, f"raised {type(exc).__name__}: {exc}"))
    return results
