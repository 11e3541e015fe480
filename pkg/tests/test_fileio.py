import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rangefree_mvs import fileio
from rangefree_mvs.errors import MalformedCameraFile, MalformedHeader
from rangefree_mvs.geometry import DepthMap, Intrinsics, Pose
from rangefree_mvs.synthdata import SceneSpec, make_scene, random_rotation

K = Intrinsics(52.5, 51.0, 23.5, 15.25)


def pose(seed=0):
    rng = np.random.default_rng(seed)
    return Pose(random_rotation(rng), rng.normal(size=3))


def test_camera_round_trip_exact():
    p = pose()
    rec = fileio.parse_camera_file(fileio.format_camera_file(p, K))
    assert np.array_equal(rec.pose.matrix, p.matrix)
    assert rec.intrinsics == K and rec.ignored_trailing == 0


@given(st.lists(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=4), max_size=3))
def test_trailing_metadata_never_changes_camera(rows):
    p = pose(1)
    plain = fileio.parse_camera_file(fileio.format_camera_file(p, K))
    noisy = fileio.parse_camera_file(fileio.format_camera_file(p, K, rows))
    assert np.array_equal(plain.pose.matrix, noisy.pose.matrix)
    assert plain.intrinsics == noisy.intrinsics
    assert noisy.ignored_trailing == len(rows)


def _camera_text(R, t=(0.0, 0.0, 0.0), Kmat=None):
    E = np.eye(4)
    E[:3, :3], E[:3, 3] = R, t
    Kmat = K.matrix if Kmat is None else Kmat
    rows = ["extrinsic"] + [" ".join(map(repr, r)) for r in E.tolist()] + ["", "intrinsic"]
    return "\n".join(rows + [" ".join(map(repr, r)) for r in Kmat.tolist()]) + "\n"


def test_slightly_off_rotation_is_snapped():
    R = pose(2).rotation + 1e-6
    rec = fileio.parse_camera_file(_camera_text(R))
    assert np.abs(rec.pose.rotation @ rec.pose.rotation.T - np.eye(3)).max() < 1e-12


def test_bad_rotation_rejected_with_line():
    with pytest.raises(MalformedCameraFile) as err:
        fileio.parse_camera_file(_camera_text(np.diag([1.0, 1.0, 1.1])))
    assert err.value.line == 2
    with pytest.raises(MalformedCameraFile):
        fileio.parse_camera_file(_camera_text(np.diag([1.0, 1.0, -1.0])))


def test_skew_rejected():
    Kmat = K.matrix.copy()
    Kmat[0, 1] = 0.5
    with pytest.raises(MalformedCameraFile):
        fileio.parse_camera_file(_camera_text(np.eye(3), Kmat=Kmat))


@pytest.mark.parametrize(
    "mutate,line",
    [
        (lambda ls: ["extrinsics"] + ls[1:], 1),
        (lambda ls: ls[:3] + ["1 2 x 4"] + ls[4:], 4),
        (lambda ls: ls[:3] + ["1 2 3"] + ls[4:], 4),
        (lambda ls: ls[:2] + ["nan 0 0 0"] + ls[3:], 3),
        (lambda ls: ls + ["425.0 oops"], 12),
    ],
)
def test_malformed_camera_reports_line(mutate, line):
    lines = fileio.format_camera_file(pose(3), K).splitlines()
    with pytest.raises(MalformedCameraFile) as err:
        fileio.parse_camera_file("\n".join(mutate(lines)) + "\n")
    assert err.value.line == line


def test_truncated_camera_file():
    text = fileio.format_camera_file(pose(), K)
    with pytest.raises(MalformedCameraFile):
        fileio.parse_camera_file(text[: text.index("intrinsic") + 15])


@given(st.text(max_size=200))
def test_camera_parser_fails_cleanly_on_garbage(text):
    try:
        fileio.parse_camera_file(text)
    except MalformedCameraFile:
        pass


def test_pfm_round_trip(tmp_path):
    d = np.random.default_rng(0).uniform(0.1, 9, size=(5, 7)).astype(np.float32)
    fileio.write_pfm(tmp_path / "a.pfm", d)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n7 5\n-1.0\n")
    assert np.array_equal(fileio.read_pfm(tmp_path / "a.pfm"), d)


def test_pfm_big_endian_and_colour(tmp_path):
    d = np.arange(24, dtype=np.float32).reshape(2, 4, 3)
    (tmp_path / "b.pfm").write_bytes(b"PF\n4 2\n1.0\n" + d[::-1].astype(">f4").tobytes())
    assert np.array_equal(fileio.read_pfm(tmp_path / "b.pfm"), d)


@pytest.mark.parametrize(
    "payload,offset",
    [(b"P6\n2 2\n-1.0\n" + bytes(16), 0), (b"Pf\n2 x\n-1.0\n" + bytes(16), 3), (b"Pf\n2 2\n0\n" + bytes(16), 7),
     (b"Pf\n2 2\n-1.0\n" + bytes(15), 27)],
)
def test_pfm_header_errors_carry_offset(tmp_path, payload, offset):
    (tmp_path / "x.pfm").write_bytes(payload)
    with pytest.raises(MalformedHeader) as err:
        fileio.read_pfm(tmp_path / "x.pfm")
    assert err.value.offset == offset


def test_depth_pfm_masks_invalid(tmp_path):
    dm = DepthMap(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[True, False], [True, True]]))
    fileio.depth_to_pfm(tmp_path / "d.pfm", dm)
    back = fileio.depth_from_pfm(tmp_path / "d.pfm")
    assert np.array_equal(back.mask, dm.mask)
    assert back.values[0, 1] == 0.0 and back.values[1, 1] == 4.0


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(tmp_path, binary):
    rng = np.random.default_rng(1)
    P, C = rng.normal(size=(40, 3)), rng.integers(0, 256, size=(40, 3)).astype(np.uint8)
    fileio.write_ply(tmp_path / "c.ply", P, C, binary=binary)
    P2, C2 = fileio.read_ply(tmp_path / "c.ply")
    assert np.array_equal(P, P2) and np.array_equal(C, C2)


def test_ply_big_endian_float(tmp_path):
    P = np.array([[1.5, -2.0, 3.25], [0.0, 1.0, 2.0]], dtype=">f4")
    head = b"ply\nformat binary_big_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\n" \
           b"property float z\nend_header\n"
    (tmp_path / "be.ply").write_bytes(head + P.tobytes())
    P2, C2 = fileio.read_ply(tmp_path / "be.ply")
    assert np.array_equal(P2, P.astype(np.float64)) and C2 is None


def test_ply_errors(tmp_path):
    (tmp_path / "bad.ply").write_bytes(b"not a ply")
    with pytest.raises(MalformedHeader):
        fileio.read_ply(tmp_path / "bad.ply")
    head = b"ply\nformat binary_little_endian 1.0\nelement vertex 5\nproperty double x\nproperty double y\n" \
           b"property double z\nend_header\n"
    (tmp_path / "short.ply").write_bytes(head + bytes(10))
    with pytest.raises(MalformedHeader):
        fileio.read_ply(tmp_path / "short.ply")


def test_pair_file_round_trip_and_errors():
    pairs = [(0, [1, 2]), (1, [0]), (2, [])]
    assert fileio.read_pair_file(fileio.format_pair_file(pairs)) == pairs
    with pytest.raises(ValueError):
        fileio.read_pair_file("2\n0\n1 1 0.5\n")


def test_bundle_round_trip(tmp_path):
    scene = make_scene(SceneSpec(width=32, height=24), seed=0)
    pairs = [(0, [1, 2]), (2, [0])]
    fileio.write_bundle(tmp_path, scene.views, pairs, scene.gt.depths, scene.gt.cloud, [[1.0, 0.01]] * 3)
    b = fileio.read_bundle(tmp_path)
    assert b.pairs == pairs and len(b.views) == 3
    assert b.report["depth-range metadata ignored"] == "yes"
    assert b.report["depth_range_lines_ignored"] == 3
    for v, w in zip(scene.views, b.views):
        assert np.array_equal(v.world_to_camera.matrix, w.world_to_camera.matrix)
        assert np.abs(v.image - w.image).max() <= 0.5 / 255 + 1e-12
    np.testing.assert_allclose(b.gt_depths[0].values, scene.gt.depths[0].values, rtol=1e-6)
    assert np.array_equal(b.gt_cloud, scene.gt.cloud)
    assert [id(v) for v in b.views_for(2)] == [id(b.views[2]), id(b.views[0])]
    with pytest.raises(KeyError):
        b.views_for(1)


def test_bundle_without_metadata_or_pairs(tmp_path):
    scene = make_scene(SceneSpec(width=32, height=24), seed=0)
    fileio.write_bundle(tmp_path, scene.views, [(0, [1, 2])])
    (tmp_path / "pair.txt").unlink()
    b = fileio.read_bundle(tmp_path)
    assert b.report["depth-range metadata ignored"] == "no"
    assert b.pairs[1] == (1, [0, 2]) and b.gt_depths is None


def test_missing_bundle(tmp_path):
    with pytest.raises(FileNotFoundError):
        fileio.read_bundle(tmp_path)
