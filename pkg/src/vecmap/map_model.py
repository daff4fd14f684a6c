"""Core types for vectorized local maps: polylines, instances, poses, ranges.

Coordinate conventions
----------------------
Ego frame: x forward, y left, right-handed. Metric coordinates are meters in
the ego frame. Normalized coordinates map the perception range rectangle
[-x_half, x_half] x [-y_half, y_half] onto the unit square [0, 1]^2 with
(0.5, 0.5) at the ego position.

Closed polylines never repeat the first point as the last; closure is implicit
through ``kind``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CLASS_NAMES = ("ped_crossing", "divider", "boundary")

OPEN = "open"
CLOSED = "closed"

_POSE_TOL = 1e-6


class VmapParseError(ValueError):
    """Raised when a .vmap.jsonl file cannot be parsed; carries the line number."""

    def __init__(self, path: str | Path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


@dataclass(frozen=True)
class PerceptionRange:
    """Axis-aligned perception window [-x_half, x_half] x [-y_half, y_half]."""

    x_half: float
    y_half: float

    def __post_init__(self):
        if self.x_half <= 0 or self.y_half <= 0:
            raise ValueError(f"perception range must be positive, got {self}")


RANGE_30 = PerceptionRange(30.0, 15.0)
RANGE_50 = PerceptionRange(50.0, 25.0)


def range_preset(x_half: float) -> PerceptionRange:
    """Canonical range presets keyed by the forward half-extent (30 or 50 m)."""
    presets = {30.0: RANGE_30, 50.0: RANGE_50}
    try:
        return presets[float(x_half)]
    except KeyError:
        raise ValueError(f"no canonical range preset for x_half={x_half}; use 30 or 50") from None


@dataclass(frozen=True, eq=False)
class Polyline:
    """Ordered 2-D point chain, open or closed (closure implicit, never repeated)."""

    points: np.ndarray  # (n, 2) float64
    kind: str = OPEN

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"polyline points must have shape (n, 2), got {pts.shape}")
        if len(pts) < 2:
            raise ValueError("polyline needs at least 2 points")
        if self.kind not in (OPEN, CLOSED):
            raise ValueError(f"unknown polyline kind {self.kind!r}")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_closed(self) -> bool:
        return self.kind == CLOSED

    @property
    def vertices(self) -> np.ndarray:
        """Traversed vertex chain; closed polylines append the implicit closing point."""
        if self.is_closed:
            return np.vstack([self.points, self.points[:1]])
        return self.points

    def arc_length(self) -> float:
        seg = np.diff(self.vertices, axis=0)
        return float(np.hypot(seg[:, 0], seg[:, 1]).sum())


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """4x4 homogeneous rigid transform (rotation + translation)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"transform matrix must be 4x4, got {m.shape}")
        if not np.allclose(m[3], (0.0, 0.0, 0.0, 1.0), atol=_POSE_TOL):
            raise ValueError("transform bottom row must be (0, 0, 0, 1)")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=_POSE_TOL):
            raise ValueError("rotation block is not orthonormal")
        if np.linalg.det(r) < 1.0 - _POSE_TOL:
            raise ValueError("rotation block must have determinant +1")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_flat(cls, values: Sequence[float]) -> "RigidTransform":
        """Build from 16 row-major floats."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != (16,):
            raise ValueError(f"expected 16 values, got {arr.shape}")
        return cls(arr.reshape(4, 4))

    @classmethod
    def from_xytheta(cls, dx: float, dy: float, yaw: float) -> "RigidTransform":
        """Planar transform: rotate by yaw about +z, then translate by (dx, dy)."""
        c, s = np.cos(yaw), np.sin(yaw)
        m = np.eye(4)
        m[0, 0], m[0, 1] = c, -s
        m[1, 0], m[1, 1] = s, c
        m[0, 3], m[1, 3] = dx, dy
        return cls(m)

    def flat(self) -> np.ndarray:
        """Row-major 16-vector."""
        return self.matrix.reshape(-1)

    def inverse(self) -> "RigidTransform":
        r = self.matrix[:3, :3]
        t = self.matrix[:3, 3]
        inv = np.eye(4)
        inv[:3, :3] = r.T
        inv[:3, 3] = -r.T @ t
        return RigidTransform(inv)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.matrix @ other.matrix)


@dataclass(frozen=True, eq=False)
class MapInstance:
    """One map element: class label, polyline geometry, detection confidence."""

    class_id: str
    polyline: Polyline
    confidence: float = 1.0

    def __post_init__(self):
        if self.class_id not in CLASS_NAMES:
            raise ValueError(f"unknown class {self.class_id!r}, expected one of {CLASS_NAMES}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")

    @property
    def class_index(self) -> int:
        return CLASS_NAMES.index(self.class_id)


@dataclass(frozen=True, eq=False)
class LocalMap:
    """All map instances of one frame in the ego frame, with the frame's pose."""

    frame_id: str
    timestamp: float
    ego_pose: RigidTransform
    instances: tuple[MapInstance, ...]
    range: PerceptionRange

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))

    def clipped(self) -> "LocalMap":
        """Copy with every instance clipped to this map's range."""
        out: list[MapInstance] = []
        for inst in self.instances:
            out.extend(clip_to_range(inst, self.range))
        return replace(self, instances=tuple(out))


# ---------------------------------------------------------------------------
# Polyline operations
# ---------------------------------------------------------------------------

def resample_polyline(p: Polyline, n: int) -> Polyline:
    """Resample to exactly n points equally spaced by arc length.

    Open polylines keep both endpoints exactly; closed polylines traverse the
    closing segment and place samples at arc positions k * L / n.
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    verts = p.vertices
    seg = np.diff(verts, axis=0)
    arcs = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
    total = arcs[-1]
    if total <= 0.0:
        raise ValueError("zero-length polyline")
    if p.is_closed:
        targets = np.arange(n) * (total / n)
    else:
        targets = np.linspace(0.0, total, n)
    out = np.column_stack([
        np.interp(targets, arcs, verts[:, 0]),
        np.interp(targets, arcs, verts[:, 1]),
    ])
    if not p.is_closed:
        out[0] = p.points[0]
        out[-1] = p.points[-1]
    return Polyline(out, p.kind)


def normalize_points(points: np.ndarray, r: PerceptionRange) -> np.ndarray:
    """Map metric ego coordinates onto the unit square of the range rectangle."""
    pts = np.asarray(points, dtype=np.float64)
    out = np.empty_like(pts)
    out[..., 0] = (pts[..., 0] + r.x_half) / (2.0 * r.x_half)
    out[..., 1] = (pts[..., 1] + r.y_half) / (2.0 * r.y_half)
    return out


def denormalize_points(points: np.ndarray, r: PerceptionRange) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    out = np.empty_like(pts)
    out[..., 0] = pts[..., 0] * (2.0 * r.x_half) - r.x_half
    out[..., 1] = pts[..., 1] * (2.0 * r.y_half) - r.y_half
    return out


def normalize(p: Polyline, r: PerceptionRange) -> Polyline:
    """Metric polyline -> normalized unit-square polyline (affine, invertible)."""
    return Polyline(normalize_points(p.points, r), p.kind)


def denormalize(p: Polyline, r: PerceptionRange) -> Polyline:
    """Inverse of :func:`normalize`."""
    return Polyline(denormalize_points(p.points, r), p.kind)


def _clip_segment(p0: np.ndarray, p1: np.ndarray, x_half: float, y_half: float):
    """Liang-Barsky segment/rectangle clip; returns (t0, t1) or None if outside."""
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    checks = (
        (-d[0], p0[0] + x_half),
        (d[0], x_half - p0[0]),
        (-d[1], p0[1] + y_half),
        (d[1], y_half - p0[1]),
    )
    for p, q in checks:
        if p == 0.0:
            if q < 0.0:
                return None
            continue
        t = q / p
        if p < 0.0:
            if t > t1:
                return None
            if t > t0:
                t0 = t
        else:
            if t < t0:
                return None
            if t < t1:
                t1 = t
    return t0, t1


def _finish_run(points: list[np.ndarray], runs: list[np.ndarray]) -> list[np.ndarray]:
    if len(points) >= 2:
        arr = np.asarray(points)
        keep = np.ones(len(arr), dtype=bool)
        keep[1:] = np.any(np.abs(np.diff(arr, axis=0)) > 0.0, axis=1)
        arr = arr[keep]
        if len(arr) >= 2:
            runs.append(arr)
    return []


def clip_to_range(inst: MapInstance, r: PerceptionRange) -> list[MapInstance]:
    """Clip an instance's polyline against the range rectangle.

    Each maximal in-range run becomes one output instance with interpolated
    boundary-crossing points. Closed polylines whose clip removes anything come
    back open; instances fully outside yield an empty list.
    """
    pl = inst.polyline
    verts = pl.vertices
    xh, yh = r.x_half, r.y_half

    if np.all(np.abs(verts[:, 0]) <= xh) and np.all(np.abs(verts[:, 1]) <= yh):
        return [inst]

    runs: list[np.ndarray] = []
    cur: list[np.ndarray] = []
    for i in range(len(verts) - 1):
        p0, p1 = verts[i], verts[i + 1]
        clipped = _clip_segment(p0, p1, xh, yh)
        if clipped is None:
            cur = _finish_run(cur, runs)
            continue
        t0, t1 = clipped
        a = p0 if t0 <= 0.0 else p0 + t0 * (p1 - p0)
        b = p1 if t1 >= 1.0 else p0 + t1 * (p1 - p0)
        if t0 > 0.0:
            cur = _finish_run(cur, runs)
        if not cur:
            cur.append(a)
        cur.append(b)
        if t1 < 1.0:
            cur = _finish_run(cur, runs)
    _finish_run(cur, runs)

    if not runs:
        return []

    # A clipped closed polyline may re-enter through its closing segment: the
    # run ending at the original start point continues into the run beginning
    # there, so stitch them into one open run.
    if pl.is_closed and len(runs) >= 2:
        start = verts[0]
        if np.array_equal(runs[0][0], start) and np.array_equal(runs[-1][-1], start):
            merged = np.vstack([runs[-1], runs[0][1:]])
            runs = [merged] + runs[1:-1]

    return [
        MapInstance(inst.class_id, Polyline(run, OPEN), inst.confidence)
        for run in runs
    ]


# ---------------------------------------------------------------------------
# Map file format (.vmap.jsonl)
# ---------------------------------------------------------------------------
#
# One JSON object per line:
#   {"frame_id": str, "timestamp": float seconds,
#    "ego_pose": [16 floats, row-major ego->world],
#    "range": [x_half, y_half],
#    "instances": [{"class": str, "kind": "open"|"closed",
#                   "confidence": float, "points": [[x, y], ...] meters}]}
# Floats are written in shortest round-trip decimal form, so parsed values are
# bit-exact.

def local_map_to_dict(m: LocalMap) -> dict:
    return {
        "frame_id": m.frame_id,
        "timestamp": m.timestamp,
        "ego_pose": [float(v) for v in m.ego_pose.flat()],
        "range": [m.range.x_half, m.range.y_half],
        "instances": [
            {
                "class": inst.class_id,
                "kind": inst.polyline.kind,
                "confidence": inst.confidence,
                "points": inst.polyline.points.tolist(),
            }
            for inst in m.instances
        ],
    }


def local_map_from_dict(d: dict) -> LocalMap:
    instances = tuple(
        MapInstance(
            class_id=item["class"],
            polyline=Polyline(np.asarray(item["points"], dtype=np.float64), item["kind"]),
            confidence=float(item["confidence"]),
        )
        for item in d["instances"]
    )
    return LocalMap(
        frame_id=str(d["frame_id"]),
        timestamp=float(d["timestamp"]),
        ego_pose=RigidTransform.from_flat(d["ego_pose"]),
        instances=instances,
        range=PerceptionRange(*d["range"]),
    )


def write_vmap(path: str | Path, maps: Iterable[LocalMap]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in maps:
            fh.write(json.dumps(local_map_to_dict(m)) + "\n")


def read_vmap(path: str | Path) -> list[LocalMap]:
    maps: list[LocalMap] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = local_map_from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise VmapParseError(path, line_no, str(exc)) from exc
            if record.frame_id in seen:
                raise VmapParseError(path, line_no, f"duplicate frame_id {record.frame_id!r}")
            seen.add(record.frame_id)
            maps.append(record)
    return maps
