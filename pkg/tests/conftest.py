import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from rangefree_mvs.errors import PointBehindCamera
from rangefree_mvs.geometry import epipolar_field, flow_to_depth, relative_pose
from rangefree_mvs.refiner import ModelConfig, RangeFreeMVS, RefinerConfig
from rangefree_mvs.synthdata import random_camera_pair

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

D64 = torch.float64


def valid_configurations(seed, n, width=64, height=48):
    """Yield ``(ref, src, rel, p_r, geom)`` with a non-empty search segment."""
    rng = np.random.default_rng(seed)
    made = 0
    while made < n:
        ref, src = random_camera_pair(rng, width, height)
        rel = relative_pose(ref, src)
        p_r = rng.uniform([0, 0], [width - 1, height - 1])
        geom = epipolar_field(rel, ref.intrinsics, src.intrinsics, p_r, width, height)
        if geom.valid:
            made += 1
            yield ref, src, rel, p_r, geom


def small_model(seed=0, dtype=D64, t_c=2, t_f=1, norm="instance", **flags) -> RangeFreeMVS:
    torch.manual_seed(seed)
    cfg = ModelConfig(disp_hidden=8, disp_feat=16, attn_dim=16, heads=2, blocks=1, **flags)
    cfg.features.c_coarse, cfg.features.c_fine = 16, 8
    cfg.features.c_ctx, cfg.features.c_ctx_hidden = 24, 12
    cfg.features.width = (8, 12, 16)
    cfg.features.norm = norm
    return RangeFreeMVS(cfg, RefinerConfig(t_c=t_c, t_f=t_f)).to(dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One verdict line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::test_criterion_" not in getattr(rep, "nodeid", ""):
                continue
            if rep.when != "call" and outcome != "error":
                continue
            props = dict(getattr(rep, "user_properties", []))
            number = int(rep.nodeid.split("test_criterion_")[1].split("_")[0])
            verdict = "PASS" if outcome == "passed" else "FAIL"
            lines.append((number, f"criterion {number:2d} {verdict}  {props.get('title', '')}  {props.get('detail', '')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines):
            terminalreporter.write_line(text)
