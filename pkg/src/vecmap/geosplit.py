"""Geographic coverage rasters, overlap auditing, and split generation.

Coverage is the union of fixed-radius disks around every ego pose, rasterized
onto a per-city world grid: a cell counts as covered iff its center lies
inside some disk. Grid origins snap to multiples of the resolution, so any two
rasters of one city at the same resolution align on integer cell offsets and
overlap is exact cellwise AND. The overlap ratio divides the overlapping area
by the validation-side area.

Split search: scenes whose rasters intersect are grouped by union-find; whole
groups go to the validation side greedily (largest first) while they fit, one
group is split to fill the remainder, and seeded local scene swaps then refine
the split until no swap lowers the overlap ratio (ties decided by attribute
balance) or 10,000 swaps were applied.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .map_model import RigidTransform
from .streaming import read_poses

_MAX_SWAPS = 10_000


class InfeasibleSplitError(ValueError):
    """Requested split sizes cannot be satisfied."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One scene's ego track in a per-city world frame."""

    scene_id: str
    city: str
    poses: tuple[tuple[float, RigidTransform], ...]
    attributes: Mapping[str, str] = None

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "attributes", dict(self.attributes or {}))
        if not self.poses:
            raise ValueError(f"scene {self.scene_id}: needs at least one pose")
        ts = [t for t, _ in self.poses]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"scene {self.scene_id}: timestamps must strictly increase")

    def positions(self) -> np.ndarray:
        return np.array([[p.matrix[0, 3], p.matrix[1, 3]] for _, p in self.poses])


@dataclass(eq=False)
class CoverageRaster:
    """Boolean occupancy over world coordinates.

    ``occupancy[iy, ix]`` covers the cell centered at
    (origin_x + (ix + 0.5) * resolution, origin_y + (iy + 0.5) * resolution);
    the origin is the lower-left corner of cell (0, 0) and snaps to a multiple
    of the resolution.
    """

    occupancy: np.ndarray
    origin: tuple[float, float]
    resolution: float
    city: str

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        self.occupancy = np.asarray(self.occupancy, dtype=bool)

    @property
    def area_m2(self) -> float:
        return float(self.occupancy.sum()) * self.resolution ** 2

    @property
    def area_km2(self) -> float:
        return self.area_m2 / 1e6


def _snap(v: float, resolution: float) -> float:
    return np.floor(v / resolution) * resolution


def _stamp_disks(occupancy: np.ndarray, origin: tuple[float, float], resolution: float,
                 centers: np.ndarray, radius: float) -> None:
    h, w = occupancy.shape
    ox, oy = origin
    r2 = radius * radius
    for cx, cy in centers:
        ix0 = max(0, int((cx - radius - ox) / resolution) - 1)
        ix1 = min(w - 1, int((cx + radius - ox) / resolution) + 1)
        iy0 = max(0, int((cy - radius - oy) / resolution) - 1)
        iy1 = min(h - 1, int((cy + radius - oy) / resolution) + 1)
        if ix1 < ix0 or iy1 < iy0:
            continue
        xs = ox + (np.arange(ix0, ix1 + 1) + 0.5) * resolution
        ys = oy + (np.arange(iy0, iy1 + 1) + 0.5) * resolution
        mask = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 <= r2
        occupancy[iy0:iy1 + 1, ix0:ix1 + 1] |= mask


def _raster_for_positions(positions: np.ndarray, radius: float, resolution: float,
                          city: str) -> CoverageRaster:
    pad = radius + resolution
    ox = _snap(positions[:, 0].min() - pad, resolution)
    oy = _snap(positions[:, 1].min() - pad, resolution)
    w = int(np.ceil((positions[:, 0].max() + pad - ox) / resolution)) + 1
    h = int(np.ceil((positions[:, 1].max() + pad - oy) / resolution)) + 1
    occ = np.zeros((h, w), dtype=bool)
    _stamp_disks(occ, (ox, oy), resolution, positions, radius)
    return CoverageRaster(occ, (ox, oy), resolution, city)


def coverage(trajs: Sequence[Trajectory], radius: float = 30.0,
             resolution: float = 0.5) -> dict[str, CoverageRaster]:
    """Disk-union coverage raster per city."""
    if radius <= 0 or resolution <= 0:
        raise ValueError("radius and resolution must be positive")
    by_city: dict[str, list[Trajectory]] = {}
    for traj in trajs:
        by_city.setdefault(traj.city, []).append(traj)
    out = {}
    for city, group in by_city.items():
        positions = np.vstack([t.positions() for t in group])
        out[city] = _raster_for_positions(positions, radius, resolution, city)
    return out


def _cell_offset(a: CoverageRaster, b: CoverageRaster) -> tuple[int, int]:
    """Integer cell offset of b's origin inside a's grid; errors if misaligned."""
    dx = (b.origin[0] - a.origin[0]) / a.resolution
    dy = (b.origin[1] - a.origin[1]) / a.resolution
    ix, iy = round(dx), round(dy)
    if abs(dx - ix) > 1e-6 or abs(dy - iy) > 1e-6:
        raise ValueError(f"rasters for {a.city!r} are not lattice-aligned")
    return ix, iy


def _intersection_cells(a: CoverageRaster, b: CoverageRaster) -> int:
    if abs(a.resolution - b.resolution) > 1e-12:
        raise ValueError(f"resolution mismatch for {a.city!r}: {a.resolution} vs {b.resolution}")
    ix, iy = _cell_offset(a, b)
    ha, wa = a.occupancy.shape
    hb, wb = b.occupancy.shape
    x0, x1 = max(0, ix), min(wa, ix + wb)
    y0, y1 = max(0, iy), min(ha, iy + hb)
    if x0 >= x1 or y0 >= y1:
        return 0
    sub_a = a.occupancy[y0:y1, x0:x1]
    sub_b = b.occupancy[y0 - iy:y1 - iy, x0 - ix:x1 - ix]
    return int(np.count_nonzero(sub_a & sub_b))


def overlap(a: Mapping[str, CoverageRaster], b: Mapping[str, CoverageRaster]) -> dict:
    """Area accounting between two raster sets; ratio = overlap / area of b."""
    area_a = sum(r.area_km2 for r in a.values())
    area_b = sum(r.area_km2 for r in b.values())
    overlap_km2 = 0.0
    for city in set(a) & set(b):
        cells = _intersection_cells(a[city], b[city])
        overlap_km2 += cells * a[city].resolution ** 2 / 1e6
    ratio = overlap_km2 / area_b if area_b > 0 else 0.0
    return {
        "area_a_km2": area_a,
        "area_b_km2": area_b,
        "overlap_km2": overlap_km2,
        "ratio": ratio,
    }


# ---------------------------------------------------------------------------
# Split search
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SplitResult:
    train: tuple[str, ...]
    val: tuple[str, ...]
    report: dict

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "report": self.report}


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[rj] = ri


class _SplitState:
    """Incremental per-city occupancy counts for both split sides."""

    def __init__(self, scenes: Sequence[Trajectory], rasters: Sequence[CoverageRaster],
                 city_rasters: Mapping[str, CoverageRaster]):
        self.scenes = scenes
        self.rasters = rasters
        self.resolution = {c: r.resolution for c, r in city_rasters.items()}
        self.train_counts = {c: np.zeros(r.occupancy.shape, dtype=np.int32)
                             for c, r in city_rasters.items()}
        self.val_counts = {c: np.zeros(r.occupancy.shape, dtype=np.int32)
                           for c, r in city_rasters.items()}
        self.city_origin = {c: r.origin for c, r in city_rasters.items()}
        self.train_cells = Counter()
        self.val_cells = Counter()
        self.overlap_cells = Counter()
        self._windows = []
        for raster in rasters:
            city = raster.city
            full = city_rasters[city]
            ix, iy = _cell_offset(full, raster)
            h, w = raster.occupancy.shape
            self._windows.append((city, slice(iy, iy + h), slice(ix, ix + w)))

    def _apply(self, idx: int, side: str, delta: int) -> None:
        city, ys, xs = self._windows[idx]
        occ = self.rasters[idx].occupancy
        train = self.train_counts[city][ys, xs]
        val = self.val_counts[city][ys, xs]
        before_t, before_v = train > 0, val > 0
        if side == "train":
            train += delta * occ
        else:
            val += delta * occ
        after_t, after_v = train > 0, val > 0
        self.train_cells[city] += int(after_t.sum() - before_t.sum())
        self.val_cells[city] += int(after_v.sum() - before_v.sum())
        self.overlap_cells[city] += int((after_t & after_v).sum() - (before_t & before_v).sum())

    def add(self, idx: int, side: str) -> None:
        self._apply(idx, side, +1)

    def remove(self, idx: int, side: str) -> None:
        self._apply(idx, side, -1)

    def areas_km2(self) -> tuple[float, float, float]:
        scale = {c: self.resolution[c] ** 2 / 1e6 for c in self.resolution}
        train = sum(self.train_cells[c] * scale[c] for c in scale)
        val = sum(self.val_cells[c] * scale[c] for c in scale)
        over = sum(self.overlap_cells[c] * scale[c] for c in scale)
        return train, val, over

    def ratio(self) -> float:
        _, val, over = self.areas_km2()
        return over / val if val > 0 else 0.0

    def per_city(self) -> dict:
        out = {}
        for c in sorted(self.resolution):
            scale = self.resolution[c] ** 2 / 1e6
            out[c] = {
                "train_km2": self.train_cells[c] * scale,
                "val_km2": self.val_cells[c] * scale,
                "overlap_km2": self.overlap_cells[c] * scale,
            }
        return out


def _distribution(scenes: Iterable[Trajectory], key: str) -> Counter:
    return Counter(t.attributes.get(key, "") for t in scenes)


def total_variation(p: Counter, q: Counter) -> float:
    """TV distance between two empirical attribute distributions."""
    np_, nq = sum(p.values()), sum(q.values())
    if np_ == 0 or nq == 0:
        return 0.0
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p[k] / np_ - q[k] / nq) for k in keys)


def _balance_deviation(trajs: Sequence[Trajectory], train_idx: set[int], val_idx: set[int],
                       balance_keys: Sequence[str]) -> float:
    if not balance_keys:
        return 0.0
    train = [trajs[i] for i in sorted(train_idx)]
    val = [trajs[i] for i in sorted(val_idx)]
    return max(total_variation(_distribution(train, k), _distribution(val, k))
               for k in balance_keys)


def propose_split(trajs: Sequence[Trajectory], n_train: int, n_val: int,
                  radius: float = 30.0, resolution: float = 0.5,
                  balance_keys: Sequence[str] = (), seed: int = 0) -> SplitResult:
    """Deterministic seeded search for a low-overlap, balanced split."""
    trajs = list(trajs)
    if n_train < 0 or n_val < 0 or n_train + n_val != len(trajs):
        raise InfeasibleSplitError(
            f"n_train={n_train} + n_val={n_val} must equal the {len(trajs)} scenes")

    city_rasters = coverage(trajs, radius, resolution)
    scene_rasters = [
        _raster_for_positions(t.positions(), radius, resolution, t.city) for t in trajs
    ]

    # Cluster scenes whose coverage intersects (same-city only).
    uf = _UnionFind(len(trajs))
    adjacency = [0] * len(trajs)
    for i in range(len(trajs)):
        for j in range(i + 1, len(trajs)):
            if trajs[i].city != trajs[j].city:
                continue
            if _intersection_cells(scene_rasters[i], scene_rasters[j]) > 0:
                uf.union(i, j)
                adjacency[i] += 1
                adjacency[j] += 1
    clusters: dict[int, list[int]] = {}
    for i in range(len(trajs)):
        clusters.setdefault(uf.find(i), []).append(i)
    ordered = sorted(clusters.values(),
                     key=lambda c: (-len(c), min(trajs[i].scene_id for i in c)))

    # Greedy: whole clusters to val while they fit, then split one cluster,
    # preferring weakly connected scenes for the partial fill.
    val_idx: set[int] = set()
    remaining = []
    for cluster in ordered:
        if len(val_idx) + len(cluster) <= n_val:
            val_idx.update(cluster)
        else:
            remaining.append(cluster)
    need = n_val - len(val_idx)
    if need > 0:
        donor = min(remaining, key=lambda c: (len(c), min(trajs[i].scene_id for i in c)))
        picks = sorted(donor, key=lambda i: (adjacency[i], trajs[i].scene_id))[:need]
        val_idx.update(picks)
    train_idx = set(range(len(trajs))) - val_idx

    state = _SplitState(trajs, scene_rasters, city_rasters)
    for i in train_idx:
        state.add(i, "train")
    for i in val_idx:
        state.add(i, "val")

    # Local swap refinement.
    rng = np.random.default_rng(seed)
    balance = _balance_deviation(trajs, train_idx, val_idx, balance_keys)
    ratio = state.ratio()
    swaps = 0
    improved = True
    while improved and swaps < _MAX_SWAPS and train_idx and val_idx:
        improved = False
        pairs = [(t, v) for t in sorted(train_idx) for v in sorted(val_idx)]
        rng.shuffle(pairs)
        for t, v in pairs:
            if swaps >= _MAX_SWAPS:
                break
            if t not in train_idx or v not in val_idx:
                continue  # moved by an earlier swap this sweep
            state.remove(t, "train")
            state.add(t, "val")
            state.remove(v, "val")
            state.add(v, "train")
            new_ratio = state.ratio()
            new_train = (train_idx - {t}) | {v}
            new_val = (val_idx - {v}) | {t}
            new_balance = _balance_deviation(trajs, new_train, new_val, balance_keys)
            better = new_ratio < ratio - 1e-15 or (
                abs(new_ratio - ratio) <= 1e-15 and new_balance < balance - 1e-15)
            if better:
                train_idx, val_idx = new_train, new_val
                ratio, balance = new_ratio, new_balance
                swaps += 1
                improved = True
            else:
                state.remove(v, "train")
                state.add(v, "val")
                state.remove(t, "val")
                state.add(t, "train")

    train_km2, val_km2, overlap_km2 = state.areas_km2()
    balance_report = {}
    for key in balance_keys:
        train_dist = _distribution((trajs[i] for i in sorted(train_idx)), key)
        val_dist = _distribution((trajs[i] for i in sorted(val_idx)), key)
        balance_report[key] = {
            "tv": total_variation(train_dist, val_dist),
            "train": dict(sorted(train_dist.items())),
            "val": dict(sorted(val_dist.items())),
        }
    report = {
        "train_km2": train_km2,
        "val_km2": val_km2,
        "overlap_km2": overlap_km2,
        "overlap_ratio": ratio,
        "swaps": swaps,
        "per_city": state.per_city(),
        "balance": balance_report,
    }
    return SplitResult(
        train=tuple(sorted(trajs[i].scene_id for i in train_idx)),
        val=tuple(sorted(trajs[i].scene_id for i in val_idx)),
        report=report,
    )


def split_overlap_ratio(trajs: Sequence[Trajectory], val_ids: Iterable[str],
                        radius: float = 30.0, resolution: float = 0.5) -> float:
    """Overlap ratio of an arbitrary split, for auditing existing divisions."""
    val_ids = set(val_ids)
    train = [t for t in trajs if t.scene_id not in val_ids]
    val = [t for t in trajs if t.scene_id in val_ids]
    if not val:
        return 0.0
    return overlap(coverage(train, radius, resolution),
                   coverage(val, radius, resolution))["ratio"]


# ---------------------------------------------------------------------------
# Scene manifest and coverage images
# ---------------------------------------------------------------------------
#
# Manifest (.jsonl): one {"scene_id", "city", "attributes": {...},
# "poses": "relative/path.poses.jsonl"} object per line.

def read_manifest(path: str | Path) -> list[Trajectory]:
    path = Path(path)
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            records = read_poses(path.parent / d["poses"])
            out.append(Trajectory(
                scene_id=str(d["scene_id"]),
                city=str(d["city"]),
                poses=tuple((r.timestamp, r.pose) for r in records),
                attributes=d.get("attributes", {}),
            ))
    return out


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Binary PGM (P5) with row 0 at maximum world y."""
    values = np.asarray(values, dtype=np.uint8)
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + values[::-1].tobytes())
