"""On-disk formats: camera files, PFM depth maps, PLY clouds, pair lists and scene bundles.

Camera files follow the common MVS layout::

    extrinsic
    r11 r12 r13 t1
    r21 r22 r23 t2
    r31 r32 r33 t3
    0 0 0 1

    intrinsic
    fx 0 cx
    0 fy cy
    0 0 1

    <optional trailing numeric lines>

Trailing numeric lines conventionally carry a depth range. They are
counted and thrown away here; nothing downstream ever sees them.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MalformedCameraFile, MalformedHeader
from .geometry import CameraView, DepthMap, Intrinsics, Pose

ORTHO_REJECT = 1e-3
ORTHO_SNAP = 1e-9


# ---------------------------------------------------------------------------
# camera files


@dataclass
class CameraRecord:
    pose: Pose
    intrinsics: Intrinsics
    ignored_trailing: int  # number of trailing metadata lines discarded


def _numbers(line: str, lineno: int, count: int | None = None) -> list:
    try:
        vals = [float(x) for x in line.split()]
    except ValueError:
        raise MalformedCameraFile(f"expected numbers, got {line.strip()!r}", line=lineno) from None
    if count is not None and len(vals) != count:
        raise MalformedCameraFile(f"expected {count} numbers, got {len(vals)}", line=lineno)
    if not all(np.isfinite(vals)):
        raise MalformedCameraFile("non-finite number", line=lineno)
    return vals


def _nearest_rotation(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def parse_camera_file(text: str) -> CameraRecord:
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    pos = 0

    def expect_keyword(word):
        nonlocal pos
        if pos >= len(lines):
            raise MalformedCameraFile(f"missing {word!r} block", line=len(text.splitlines()) + 1)
        lineno, ln = lines[pos]
        if ln.strip().lower() != word:
            raise MalformedCameraFile(f"expected {word!r}, got {ln.strip()!r}", line=lineno)
        pos += 1

    def matrix(rows, cols, what):
        nonlocal pos
        out = []
        for _ in range(rows):
            if pos >= len(lines):
                raise MalformedCameraFile(f"{what} block is truncated", line=len(text.splitlines()) + 1)
            lineno, ln = lines[pos]
            out.append(_numbers(ln, lineno, cols))
            pos += 1
        return np.array(out), lines[pos - rows][0]

    expect_keyword("extrinsic")
    E, e_line = matrix(4, 4, "extrinsic")
    expect_keyword("intrinsic")
    K, k_line = matrix(3, 3, "intrinsic")
    trailing = 0
    while pos < len(lines):
        lineno, ln = lines[pos]
        _numbers(ln, lineno)
        trailing += 1
        pos += 1

    if not np.allclose(E[3], [0, 0, 0, 1], atol=1e-9):
        raise MalformedCameraFile("last extrinsic row must be 0 0 0 1", line=e_line + 3)
    R = E[:3, :3]
    dev = np.max(np.abs(R @ R.T - np.eye(3)))
    if dev > ORTHO_REJECT or np.linalg.det(R) <= 0:
        raise MalformedCameraFile(f"rotation is not a proper orthonormal matrix (deviation {dev:.2e})", line=e_line)
    if dev > ORTHO_SNAP:
        R = _nearest_rotation(R)
    if not np.allclose(K[2], [0, 0, 1], atol=1e-9) or abs(K[1, 0]) > 1e-9:
        raise MalformedCameraFile("intrinsic matrix must be upper triangular with last row 0 0 1", line=k_line + 2)
    if abs(K[0, 1]) > 1e-6 * abs(K[0, 0]):
        raise MalformedCameraFile("skewed intrinsics are not supported", line=k_line)
    try:
        intr = Intrinsics.from_matrix(K)
        pose = Pose(R, E[:3, 3])
    except ValueError as exc:
        raise MalformedCameraFile(str(exc), line=e_line) from None
    return CameraRecord(pose, intr, trailing)


def format_camera_file(pose: Pose, intrinsics: Intrinsics, trailing: list | None = None) -> str:
    fmt = lambda row: " ".join(repr(float(x)) for x in row)
    out = ["extrinsic"] + [fmt(r) for r in pose.matrix] + ["", "intrinsic"]
    out += [fmt(r) for r in intrinsics.matrix] + [""]
    for row in trailing or []:
        out.append(fmt(row))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path, data: np.ndarray):
    """Single-channel little-endian PFM (rows stored bottom-up)."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("write_pfm expects a 2-D array")
    H, W = arr.shape
    header = f"Pf\n{W} {H}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    off = 0
    fields = []
    for _ in range(3):
        end = data.find(b"\n", off)
        if end < 0:
            raise MalformedHeader("header line not terminated", offset=off)
        fields.append((off, data[off:end].decode("ascii", errors="replace").strip()))
        off = end + 1
    (o0, tag), (o1, dims), (o2, scale_s) = fields
    if tag not in ("Pf", "PF"):
        raise MalformedHeader(f"unknown PFM tag {tag!r}", offset=o0)
    channels = 1 if tag == "Pf" else 3
    m = re.fullmatch(r"(\d+)\s+(\d+)", dims)
    if not m:
        raise MalformedHeader(f"bad dimensions {dims!r}", offset=o1)
    W, H = int(m.group(1)), int(m.group(2))
    try:
        scale = float(scale_s)
    except ValueError:
        raise MalformedHeader(f"bad scale {scale_s!r}", offset=o2) from None
    if scale == 0 or not np.isfinite(scale):
        raise MalformedHeader("scale must be non-zero and finite", offset=o2)
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    need = W * H * channels * 4
    if len(data) - off < need:
        raise MalformedHeader(f"payload truncated: {len(data) - off} of {need} bytes", offset=len(data))
    arr = np.frombuffer(data, dtype=dtype, count=W * H * channels, offset=off)
    shape = (H, W) if channels == 1 else (H, W, 3)
    return arr.reshape(shape)[::-1].astype(np.float32)


def depth_to_pfm(path, depth: DepthMap):
    write_pfm(path, np.where(depth.mask, depth.values, 0.0))


def depth_from_pfm(path) -> DepthMap:
    v = read_pfm(path).astype(np.float64)
    mask = np.isfinite(v) & (v > 0)
    return DepthMap(values=np.where(mask, v, 0.0), mask=mask)


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, points, colors=None, binary: bool = True):
    """Vertex-only PLY with double coordinates and optional uchar colours."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    C = None
    if colors is not None:
        C = np.asarray(colors)
        if C.dtype != np.uint8:
            C = np.clip(np.round(C * 255.0), 0, 255).astype(np.uint8)
        C = C.reshape(-1, 3)
    fmt = "binary_little_endian" if binary else "ascii"
    head = ["ply", f"format {fmt} 1.0", f"element vertex {len(P)}",
            "property double x", "property double y", "property double z"]
    if C is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head.append("end_header")
    header = ("\n".join(head) + "\n").encode("ascii")
    if binary:
        fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")] + ([("r", "u1"), ("g", "u1"), ("b", "u1")] if C is not None else [])
        rec = np.empty(len(P), dtype=fields)
        rec["x"], rec["y"], rec["z"] = P.T
        if C is not None:
            rec["r"], rec["g"], rec["b"] = C.T
        Path(path).write_bytes(header + rec.tobytes())
    else:
        rows = []
        for i, p in enumerate(P):
            row = " ".join(repr(float(x)) for x in p)
            if C is not None:
                row += " " + " ".join(str(int(c)) for c in C[i])
            rows.append(row)
        Path(path).write_bytes(header + ("\n".join(rows) + ("\n" if rows else "")).encode("ascii"))


def read_ply(path):
    """Returns ``(points (N,3) float64, colors (N,3) uint8 or None)``."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MalformedHeader("not a PLY file", offset=0)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise MalformedHeader("header not terminated", offset=end)
    body_off = nl + 1
    fmt, count, props = None, None, []
    in_vertex = False
    off = 0
    for raw in data[:body_off].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        parts = line.split()
        if parts[:1] == ["format"]:
            fmt = parts[1] if len(parts) > 1 else None
        elif parts[:1] == ["element"]:
            in_vertex = len(parts) == 3 and parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
            elif count is None:
                raise MalformedHeader("elements before vertex are not supported", offset=off)
        elif parts[:1] == ["property"] and in_vertex:
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise MalformedHeader(f"unsupported property {line!r}", offset=off)
            props.append((parts[2], _PLY_TYPES[parts[1]]))
        off += len(raw) + 1
    names = [p[0] for p in props]
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian") or count is None:
        raise MalformedHeader("missing format or vertex element", offset=0)
    if not all(k in names for k in "xyz"):
        raise MalformedHeader("vertex element lacks x/y/z", offset=0)
    if fmt == "ascii":
        rows = data[body_off:].split(b"\n")
        rows = [r for r in rows if r.strip()]
        if len(rows) < count:
            raise MalformedHeader(f"expected {count} vertices, found {len(rows)}", offset=len(data))
        try:
            table = np.array([[float(x) for x in r.split()[: len(props)]] for r in rows[:count]]).reshape(count, len(props))
        except ValueError as exc:
            raise MalformedHeader(f"bad vertex row ({exc})", offset=body_off) from None
        col = {n: table[:, i] for i, n in enumerate(names)}
    else:
        bo = "<" if fmt == "binary_little_endian" else ">"
        dt = np.dtype([(n, bo + t) for n, t in props])
        if len(data) - body_off < dt.itemsize * count:
            raise MalformedHeader("vertex payload truncated", offset=len(data))
        rec = np.frombuffer(data, dtype=dt, count=count, offset=body_off)
        col = {n: rec[n] for n in names}
    P = np.stack([col["x"], col["y"], col["z"]], axis=-1).astype(np.float64)
    C = None
    if all(k in col for k in ("red", "green", "blue")):
        C = np.stack([col["red"], col["green"], col["blue"]], axis=-1).astype(np.uint8)
    return P, C


# ---------------------------------------------------------------------------
# pair lists


def read_pair_file(text: str) -> list:
    """``[(ref, [src, ...]), ...]``; the scores in the file are dropped."""
    tokens = text.split()
    try:
        n = int(tokens[0])
        pos = 1
        pairs = []
        for _ in range(n):
            ref = int(tokens[pos])
            k = int(tokens[pos + 1])
            pos += 2
            srcs = [int(tokens[pos + 2 * i]) for i in range(k)]
            for i in range(k):
                float(tokens[pos + 2 * i + 1])  # scores are validated, then dropped
            pos += 2 * k
            pairs.append((ref, srcs))
    except (IndexError, ValueError):
        raise ValueError("malformed pair list") from None
    return pairs


def format_pair_file(pairs: list) -> str:
    out = [str(len(pairs))]
    for ref, srcs in pairs:
        out.append(str(ref))
        out.append(" ".join([str(len(srcs))] + [f"{s} {1.0:.1f}" for s in srcs]))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# bundles


@dataclass
class ViewBundle:
    root: Path
    views: list
    pairs: list
    gt_depths: list | None = None
    gt_cloud: np.ndarray | None = None
    report: dict = field(default_factory=dict)

    def views_for(self, ref: int) -> list:
        """Reference first, then its sources in pair-list order."""
        for r, srcs in self.pairs:
            if r == ref:
                return [self.views[r]] + [self.views[s] for s in srcs]
        raise KeyError(f"view {ref} is not a reference in the pair list")


def _name(i: int) -> str:
    return f"{i:08d}"


def write_bundle(root, views, pairs, gt_depths=None, gt_cloud=None, depth_ranges=None):
    """Write ``images/``, ``cams/``, optional ``depths/`` and ``gt.ply``, and ``pair.txt``.

    ``depth_ranges`` (one row of numbers per view) is appended to each camera
    file as trailing metadata, mimicking common datasets.
    """
    root = Path(root)
    for sub in ("images", "cams"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, v in enumerate(views):
        img = np.clip(np.round(np.asarray(v.image) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(root / "images" / f"{_name(i)}.png")
        trailing = [depth_ranges[i]] if depth_ranges is not None else None
        (root / "cams" / f"{_name(i)}_cam.txt").write_text(format_camera_file(v.world_to_camera, v.intrinsics, trailing))
    if gt_depths is not None:
        (root / "depths").mkdir(exist_ok=True)
        for i, d in enumerate(gt_depths):
            depth_to_pfm(root / "depths" / f"{_name(i)}.pfm", d)
    if gt_cloud is not None:
        write_ply(root / "gt.ply", gt_cloud)
    (root / "pair.txt").write_text(format_pair_file(pairs))


def read_bundle(root) -> ViewBundle:
    root = Path(root)
    cams = sorted((root / "cams").glob("*_cam.txt"))
    if not cams:
        raise FileNotFoundError(f"no camera files under {root / 'cams'}")
    views, ignored = [], 0
    for i, cam in enumerate(cams):
        if cam.name != f"{_name(i)}_cam.txt":
            raise FileNotFoundError(f"camera files must be numbered contiguously; unexpected {cam.name}")
        try:
            rec = parse_camera_file(cam.read_text())
        except MalformedCameraFile as exc:
            raise MalformedCameraFile(f"{cam.name}: {exc}") from None
        ignored += rec.ignored_trailing
        img = np.asarray(Image.open(root / "images" / f"{_name(i)}.png").convert("RGB"), dtype=np.float64) / 255.0
        views.append(CameraView(rec.intrinsics, rec.pose, img.shape[1], img.shape[0], img))
    pair_path = root / "pair.txt"
    if pair_path.exists():
        pairs = read_pair_file(pair_path.read_text())
    else:
        pairs = [(i, [j for j in range(len(views)) if j != i]) for i in range(len(views))]
    for ref, srcs in pairs:
        if not all(0 <= x < len(views) for x in [ref, *srcs]):
            raise ValueError(f"pair list names a missing view (reference {ref})")
    gt = None
    if (root / "depths").is_dir():
        gt = [depth_from_pfm(root / "depths" / f"{_name(i)}.pfm") for i in range(len(views))]
    cloud = read_ply(root / "gt.ply")[0] if (root / "gt.ply").exists() else None
    report = {"views": len(views), "depth_range_lines_ignored": ignored,
              "depth-range metadata ignored": "yes" if ignored else "no"}
    return ViewBundle(root, views, pairs, gt, cloud, report)
