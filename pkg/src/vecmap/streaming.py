"""Temporal state propagation between frames.

The streaming memory is one BEV feature grid plus the top-k refined queries of
the previous frame. Between frames, the grid is inverse-warped into the new
ego frame and fused with the current grid by a per-cell GRU; queries are
re-expressed with a residual MLP on (embedding, flattened transform) and their
polylines are rigidly transformed. The frame-to-frame transform ``t`` maps
previous-frame ego coordinates into current-frame ego coordinates.

BEV grid layout: ``data[i, j, :]`` is the feature at row i, column j, where
row 0 lies at maximum x (front) and column 0 at maximum y (left). Cell (i, j)
is centered at

    x = x_half - (i + 0.5) * (2 * x_half / H)
    y = y_half - (j + 0.5) * (2 * y_half / W)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .map_model import (
    MapInstance,
    PerceptionRange,
    Polyline,
    RigidTransform,
    denormalize,
    normalize,
)
from .weights import Xorshift64Star

FRESH = "fresh"
PROPAGATED = "propagated"

# Division guard only: the fused cells must come out with channel variance 1
# (up to gain/bias), so this stays far below any real variance.
_LN_EPS = 1e-12
_BEV_MAGIC = b"BEVF"


@dataclass(frozen=True, eq=False)
class QueryState:
    """Streaming memory element: embedding, confidence, normalized polyline."""

    embedding: np.ndarray  # (d,)
    score: float
    polyline: Polyline
    origin: str = FRESH

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1:
            raise ValueError(f"embedding must be 1-D, got shape {emb.shape}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if self.origin not in (FRESH, PROPAGATED):
            raise ValueError(f"unknown origin {self.origin!r}")
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True, eq=False)
class BevGrid:
    """H x W x C feature raster bound to a metric perception range."""

    data: np.ndarray
    range: PerceptionRange

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"BEV data must be (H, W, C) with positive dims, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("BEV data must be finite")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(xs over rows, ys over cols) of cell centers, meters."""
        h, w, _ = self.data.shape
        ch = 2.0 * self.range.x_half / h
        cw = 2.0 * self.range.y_half / w
        xs = self.range.x_half - (np.arange(h) + 0.5) * ch
        ys = self.range.y_half - (np.arange(w) + 0.5) * cw
        return xs, ys

    def grid_coords(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Metric points -> fractional (row, col); integers land on cell centers."""
        h, w, _ = self.data.shape
        ch = 2.0 * self.range.x_half / h
        cw = 2.0 * self.range.y_half / w
        rows = (self.range.x_half - np.asarray(x)) / ch - 0.5
        cols = (self.range.y_half - np.asarray(y)) / cw - 0.5
        return rows, cols


def sample_bilinear(data: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear sample of an (H, W, C) array at fractional (row, col) positions.

    Cells outside the grid read as zero, so samples fade to zero within one
    cell of the border and vanish beyond it.
    """
    h, w, _ = data.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]

    def corner(ri, ci):
        valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        vals = data[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)]
        return vals * valid[..., None]

    v00 = corner(r0, c0)
    v01 = corner(r0, c0 + 1)
    v10 = corner(r0 + 1, c0)
    v11 = corner(r0 + 1, c0 + 1)
    top = v00 * (1.0 - fc) + v01 * fc
    bot = v10 * (1.0 - fc) + v11 * fc
    return top * (1.0 - fr) + bot * fr


@dataclass(frozen=True, eq=False)
class GruWeights:
    """Per-cell GRU over the C channels, with a final layer normalization."""

    wz: np.ndarray
    uz: np.ndarray
    bz: np.ndarray
    wr: np.ndarray
    ur: np.ndarray
    br: np.ndarray
    wh: np.ndarray
    uh: np.ndarray
    bh: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    layer_norm: bool = True

    def __post_init__(self):
        c = self.wz.shape[0]
        squares = (self.wz, self.uz, self.wr, self.ur, self.wh, self.uh)
        vectors = (self.bz, self.br, self.bh, self.ln_gain, self.ln_bias)
        if any(m.shape != (c, c) for m in squares) or any(v.shape != (c,) for v in vectors):
            raise ValueError("inconsistent GRU weight shapes")

    @property
    def channels(self) -> int:
        return self.wz.shape[0]


@dataclass(frozen=True, eq=False)
class TransformMlpWeights:
    """Two-layer residual MLP mapping (embedding ++ flattened 4x4 T) -> embedding."""

    w1: np.ndarray  # (d, d + 16)
    b1: np.ndarray
    w2: np.ndarray  # (d, d)
    b2: np.ndarray

    def __post_init__(self):
        d = self.w2.shape[0]
        if self.w1.shape != (d, d + 16) or self.b1.shape != (d,) \
                or self.w2.shape != (d, d) or self.b2.shape != (d,):
            raise ValueError("transform MLP weight shapes must be (d, d+16), (d,), (d, d), (d,)")

    @property
    def dim(self) -> int:
        return self.w2.shape[0]


def random_gru_weights(channels: int, seed: int) -> GruWeights:
    gen = Xorshift64Star(seed)
    mats = [gen.matrix(channels, channels) for _ in range(6)]
    vecs = [gen.vector(channels) for _ in range(3)]
    return GruWeights(
        wz=mats[0], uz=mats[1], bz=vecs[0],
        wr=mats[2], ur=mats[3], br=vecs[1],
        wh=mats[4], uh=mats[5], bh=vecs[2],
        ln_gain=np.ones(channels), ln_bias=np.zeros(channels),
    )


def random_transform_mlp(dim: int, seed: int) -> TransformMlpWeights:
    gen = Xorshift64Star(seed)
    return TransformMlpWeights(
        w1=gen.matrix(dim, dim + 16),
        b1=gen.vector(dim),
        w2=gen.matrix(dim, dim),
        b2=gen.vector(dim),
    )


_GRU_FIELDS = ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh", "ln_gain", "ln_bias")
_TMLP_FIELDS = ("w1", "b1", "w2", "b2")


def gru_to_tensors(w: GruWeights) -> dict[str, np.ndarray]:
    return {f"gru.{name}": getattr(w, name) for name in _GRU_FIELDS}


def gru_from_tensors(tensors: dict[str, np.ndarray]) -> GruWeights:
    return GruWeights(**{name: tensors[f"gru.{name}"] for name in _GRU_FIELDS})


def tmlp_to_tensors(w: TransformMlpWeights) -> dict[str, np.ndarray]:
    return {f"tmlp.{name}": getattr(w, name) for name in _TMLP_FIELDS}


def tmlp_from_tensors(tensors: dict[str, np.ndarray]) -> TransformMlpWeights:
    return TransformMlpWeights(**{name: tensors[f"tmlp.{name}"] for name in _TMLP_FIELDS})


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def transform_polyline(p: Polyline, t: RigidTransform) -> Polyline:
    """Re-express a metric polyline under a rigid transform (z taken as 0)."""
    pts = p.points
    hom = np.column_stack([pts, np.zeros(len(pts)), np.ones(len(pts))])
    out = hom @ t.matrix.T
    return Polyline(out[:, :2], p.kind)


def transform_queries(queries: Sequence[QueryState], t: RigidTransform,
                      w: TransformMlpWeights, r: PerceptionRange) -> list[QueryState]:
    """Carry queries into the next frame: residual MLP on the embedding,
    rigid re-expression of the polyline, score preserved."""
    if not queries:
        return []
    embs = np.stack([q.embedding for q in queries])
    if embs.shape[1] != w.dim:
        raise ValueError(f"embedding dim {embs.shape[1]} != MLP dim {w.dim}")
    flat = np.broadcast_to(t.flat(), (len(queries), 16))
    hidden = np.maximum(np.concatenate([embs, flat], axis=1) @ w.w1.T + w.b1, 0.0)
    new_embs = hidden @ w.w2.T + w.b2 + embs
    out = []
    for q, emb in zip(queries, new_embs):
        metric = denormalize(q.polyline, r)
        moved = normalize(transform_polyline(metric, t), r)
        out.append(QueryState(emb, q.score, moved, PROPAGATED))
    return out


def select_and_merge(prev: Sequence[QueryState], fresh: Sequence[QueryState],
                     k: int, n_q: int) -> list[QueryState]:
    """Exactly n_q queries: top-min(k, |prev|) propagated then top fresh fill.

    Both groups are ordered by descending score, ties broken by input index.
    """
    if k > n_q:
        raise ValueError(f"k={k} exceeds n_q={n_q}")
    take = min(k, len(prev))
    need = n_q - take
    if len(fresh) < need:
        raise ValueError(f"need {need} fresh queries, only {len(fresh)} available")

    def top(states: Sequence[QueryState], m: int) -> list[QueryState]:
        order = sorted(range(len(states)), key=lambda i: (-states[i].score, i))
        return [states[i] for i in order[:m]]

    return top(prev, take) + top(fresh, need)


def warp_bev(f: BevGrid, t: RigidTransform) -> BevGrid:
    """Inverse-warp a grid into the current frame: the output cell at metric
    point p reads f bilinearly at t^-1 p; out-of-view samples are zero."""
    xs, ys = f.cell_centers()
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    m = t.inverse().matrix
    px = m[0, 0] * gx + m[0, 1] * gy + m[0, 3]
    py = m[1, 0] * gx + m[1, 1] * gy + m[1, 3]
    rows, cols = f.grid_coords(px, py)
    return BevGrid(sample_bilinear(f.data, rows, cols), f.range)


def gru_fuse(prev_warped: BevGrid, cur: BevGrid, w: GruWeights) -> BevGrid:
    """Per-cell GRU with prev_warped as hidden state and cur as input, then a
    layer normalization over the channels of each cell (unless disabled)."""
    if prev_warped.shape != cur.shape:
        raise ValueError(f"shape mismatch: {prev_warped.shape} vs {cur.shape}")
    h0, w0, c = cur.shape
    if c != w.channels:
        raise ValueError(f"grid has {c} channels, weights expect {w.channels}")
    x = cur.data.reshape(-1, c)
    h = prev_warped.data.reshape(-1, c)
    z = expit(x @ w.wz.T + h @ w.uz.T + w.bz)
    r = expit(x @ w.wr.T + h @ w.ur.T + w.br)
    cand = np.tanh(x @ w.wh.T + (r * h) @ w.uh.T + w.bh)
    out = (1.0 - z) * h + z * cand
    if w.layer_norm:
        mean = out.mean(axis=1, keepdims=True)
        var = out.var(axis=1, keepdims=True)
        out = (out - mean) / np.sqrt(var + _LN_EPS) * w.ln_gain + w.ln_bias
    return BevGrid(out.reshape(h0, w0, c), cur.range)


# ---------------------------------------------------------------------------
# Streaming step
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StreamMemory:
    """Constant-size carry-over: one fused grid plus the top-k refined queries."""

    bev: BevGrid
    queries: tuple[QueryState, ...]


@dataclass(frozen=True, eq=False)
class StreamParams:
    decoder: "DecoderWeights"  # noqa: F821 - see vecmap.attention
    tmlp: TransformMlpWeights
    gru: GruWeights
    cfg: "AttentionConfig"  # noqa: F821
    k: int = 33


@dataclass(frozen=True, eq=False)
class StepResult:
    instances: tuple[MapInstance, ...]
    queries: tuple[QueryState, ...]
    memory: StreamMemory


def step(memory: StreamMemory | None, cur_bev: BevGrid, t: RigidTransform,
         params: StreamParams) -> StepResult:
    """One streaming frame: fuse BEV memory, propagate queries, decode.

    The first frame (memory None) skips fusion and propagation entirely and
    decodes the fresh query set against the raw current grid. Emitted
    instances are metric (denormalized to the grid's range).
    """
    from . import attention  # deferred: attention imports this module's types

    fresh = attention.fresh_queries(params.decoder, params.cfg)
    if memory is None:
        fused = cur_bev
        merged = fresh
    else:
        warped = warp_bev(memory.bev, t)
        fused = gru_fuse(warped, cur_bev, params.gru)
        prev = transform_queries(memory.queries, t, params.tmlp, cur_bev.range)
        merged = select_and_merge(prev, fresh, params.k, params.cfg.n_q)

    decoded, refined = attention.decode(merged, fused, params.decoder, params.cfg)
    instances = tuple(
        MapInstance(inst.class_id, denormalize(inst.polyline, cur_bev.range), inst.confidence)
        for inst in decoded
    )
    order = sorted(range(len(refined)), key=lambda i: (-refined[i].score, i))
    kept = tuple(refined[i] for i in order[: params.k])
    return StepResult(instances=instances, queries=tuple(refined),
                      memory=StreamMemory(bev=fused, queries=kept))


def memory_stats(memory: StreamMemory) -> dict:
    """Structural footprint of the carry-over state, for O(1)-memory audits."""
    h, w, c = memory.bev.shape
    dims = {q.embedding.shape[0] for q in memory.queries}
    return {
        "bev_grids": 1,
        "bev_shape": [h, w, c],
        "n_queries": len(memory.queries),
        "query_dim": dims.pop() if len(dims) == 1 else sorted(dims),
        "floats": h * w * c + sum(q.embedding.size + q.polyline.points.size + 1
                                  for q in memory.queries),
    }


# ---------------------------------------------------------------------------
# File formats: BEV grids and pose logs
# ---------------------------------------------------------------------------
#
# .bev.bin: magic "BEVF", then H, W, C as little-endian uint32, then x_half,
# y_half as little-endian float32, then H*W*C little-endian float32 values in
# row-major (H, W, C) order.
#
# .poses.jsonl: one {"frame_id", "timestamp", "matrix": [16 floats row-major]}
# object per line.

def write_bev(path: str | Path, grid: BevGrid) -> None:
    header = struct.pack("<4sIII", _BEV_MAGIC, *grid.shape)
    extent = struct.pack("<ff", grid.range.x_half, grid.range.y_half)
    data = np.ascontiguousarray(grid.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + extent + data)


def read_bev(path: str | Path) -> BevGrid:
    raw = Path(path).read_bytes()
    magic, h, w, c = struct.unpack_from("<4sIII", raw, 0)
    if magic != _BEV_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    x_half, y_half = struct.unpack_from("<ff", raw, 16)
    data = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=24)
    return BevGrid(data.astype(np.float64).reshape(h, w, c),
                   PerceptionRange(float(x_half), float(y_half)))


@dataclass(frozen=True, eq=False)
class PoseRecord:
    frame_id: str
    timestamp: float
    pose: RigidTransform


def write_poses(path: str | Path, records: Sequence[PoseRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({
                "frame_id": rec.frame_id,
                "timestamp": rec.timestamp,
                "matrix": [float(v) for v in rec.pose.flat()],
            }) + "\n")


def read_poses(path: str | Path) -> list[PoseRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            records.append(PoseRecord(
                frame_id=str(d["frame_id"]),
                timestamp=float(d["timestamp"]),
                pose=RigidTransform.from_flat(d["matrix"]),
            ))
    return records
