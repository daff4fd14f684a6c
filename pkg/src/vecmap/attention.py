"""Deterministic forward kernels for the map decoder.

The decoder stacks layers whose cross-attention samples the BEV grid at every
point of each query's current polyline (plus learned offsets) instead of at a
single center reference. Per query and layer that touches exactly
``n_p * n_off`` sample sites regardless of grid size; attention weights are
softmax-normalized jointly over all slots, so with a constant feature field the
attention output is that constant (convex combination).

Sampling locations are normalized [0,1]^2 coordinates over the grid's
perception range, the same space the regression head predicts into. All
weights are supplied externally (file or seeded generator); nothing here
trains.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, softmax

from .map_model import CLASS_NAMES, CLOSED, OPEN, MapInstance, Polyline, denormalize_points
from .streaming import FRESH, BevGrid, QueryState, sample_bilinear
from .weights import Xorshift64Star

_SIG_CLAMP = 1e-5


@dataclass(frozen=True)
class AttentionConfig:
    n_q: int = 100
    n_p: int = 20
    n_off: int = 1
    d: int = 64
    layers: int = 3

    def __post_init__(self):
        if min(self.n_q, self.n_p, self.n_off, self.d, self.layers) < 1:
            raise ValueError("all attention config fields must be positive")


@dataclass(frozen=True, eq=False)
class MlpWeights:
    """Dense layers applied as x @ W.T + b with ReLU between (none after last)."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]


def mlp_forward(w: MlpWeights, x: np.ndarray) -> np.ndarray:
    last = len(w.layers) - 1
    for i, (mat, bias) in enumerate(w.layers):
        x = x @ mat.T + bias
        if i != last:
            x = np.maximum(x, 0.0)
    return x


@dataclass(frozen=True, eq=False)
class LayerNormParams:
    gain: np.ndarray
    bias: np.ndarray


def layer_norm(x: np.ndarray, p: LayerNormParams, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * p.gain + p.bias


@dataclass(frozen=True, eq=False)
class SelfAttentionWeights:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray


@dataclass(frozen=True, eq=False)
class MpaLayerWeights:
    """Cross-attention maps of one layer plus the shared regression head."""

    offset_w: np.ndarray  # (2 * n_p * n_off, d)
    offset_b: np.ndarray
    weight_w: np.ndarray  # (n_p * n_off, d)
    weight_b: np.ndarray
    value_w: np.ndarray   # (d, c_bev)
    value_b: np.ndarray
    reg: MlpWeights       # d -> 2 * n_p, shared across layers


@dataclass(frozen=True, eq=False)
class DecoderLayerWeights:
    ln_sa: LayerNormParams
    sa: SelfAttentionWeights
    mpa: MpaLayerWeights
    ln_ffn: LayerNormParams
    ffn: MlpWeights


@dataclass(frozen=True, eq=False)
class DecoderWeights:
    """Full decoder parameter set, including the learnable fresh-query state."""

    query_embed: np.ndarray      # (n_q, d)
    init_polylines: np.ndarray   # (n_q, n_p, 2) in (0, 1)
    cls_head: MlpWeights         # d -> 3
    reg: MlpWeights              # d -> 2 * n_p, the single shared head
    layers: tuple[DecoderLayerWeights, ...]

    def __post_init__(self):
        if any(layer.mpa.reg is not self.reg for layer in self.layers):
            raise ValueError("all layers must share the decoder's regression head")


@dataclass(frozen=True, eq=False)
class BaselineLayerWeights:
    """Single-reference-point layer with its own per-layer regression (d -> 2)."""

    offset_w: np.ndarray  # (2 * n_off, d)
    offset_b: np.ndarray
    weight_w: np.ndarray  # (n_off, d)
    weight_b: np.ndarray
    value_w: np.ndarray
    value_b: np.ndarray
    reg: MlpWeights


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

class SampleCounter:
    """Counts feature-grid sample sites touched while active."""

    def __init__(self):
        self.count = 0


_active_counter: SampleCounter | None = None


@contextmanager
def count_samples():
    """Instrument deformable sampling: ``with count_samples() as c: ...``."""
    global _active_counter
    counter = SampleCounter()
    prev = _active_counter
    _active_counter = counter
    try:
        yield counter
    finally:
        _active_counter = prev


def deformable_sample(f: BevGrid, loc: np.ndarray,
                      value_w: np.ndarray | None = None,
                      value_b: np.ndarray | None = None) -> np.ndarray:
    """Bilinear sample of the value-projected grid at normalized locations.

    ``loc`` has shape (..., 2) in [0,1]^2 over the grid's range; locations
    outside read as zero. Returns (..., d) where d is the projection's output
    dim (the raw channel count when no projection is given). Exact at cell
    centers and exactly linear in the feature field.
    """
    loc = np.asarray(loc, dtype=np.float64)
    global _active_counter
    if _active_counter is not None:
        _active_counter.count += loc[..., 0].size
    if value_w is None:
        vmap = f.data
    else:
        vmap = f.data @ value_w.T + (0.0 if value_b is None else value_b)
    metric = denormalize_points(loc, f.range)
    rows, cols = f.grid_coords(metric[..., 0], metric[..., 1])
    return sample_bilinear(vmap, rows, cols)


def inverse_sigmoid(p: np.ndarray) -> np.ndarray:
    """Logit with inputs clamped to [1e-5, 1 - 1e-5] to dodge the poles."""
    p = np.clip(np.asarray(p, dtype=np.float64), _SIG_CLAMP, 1.0 - _SIG_CLAMP)
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _cross_attention(q: np.ndarray, refs: np.ndarray, f: BevGrid,
                     w: MpaLayerWeights) -> np.ndarray:
    """Batched multi-point cross-attention: (n, d), (n, s, 2) -> (n, d)."""
    n, _ = q.shape
    s = w.weight_w.shape[0]
    offsets = (q @ w.offset_w.T + w.offset_b).reshape(n, s, 2)
    wts = softmax(q @ w.weight_w.T + w.weight_b, axis=1)
    samples = deformable_sample(f, refs + offsets, w.value_w, w.value_b)
    return np.einsum("ns,nsd->nd", wts, samples)


def mpa_layer(q: np.ndarray, p_prev: Polyline, f: BevGrid,
              w: MpaLayerWeights) -> tuple[np.ndarray, Polyline]:
    """Multi-point attention for one query.

    Samples at every polyline point plus its offsets, weights softmaxed over
    all n_p * n_off slots jointly, then predicts absolute coordinates through
    the shared regression head (no residual on the reference points).
    """
    n_p = len(p_prev)
    s = w.weight_w.shape[0]
    if s % n_p != 0:
        raise ValueError(f"{s} weight slots do not divide into {n_p} reference points")
    n_off = s // n_p
    refs = np.repeat(p_prev.points, n_off, axis=0)[None]
    q_new = _cross_attention(q[None], refs, f, w)[0]
    p_new = expit(mlp_forward(w.reg, q_new)).reshape(n_p, 2)
    return q_new, Polyline(p_new, p_prev.kind)


def baseline_layer(q: np.ndarray, ref: np.ndarray, f: BevGrid,
                   w: BaselineLayerWeights) -> tuple[np.ndarray, np.ndarray]:
    """Conventional single-reference layer: offsets around one point, then a
    residual reference update through the clamped inverse sigmoid."""
    n_off = w.weight_w.shape[0]
    offsets = (w.offset_w @ q + w.offset_b).reshape(n_off, 2)
    wts = softmax(w.weight_w @ q + w.weight_b)
    samples = deformable_sample(f, ref[None] + offsets, w.value_w, w.value_b)
    q_new = wts @ samples
    ref_new = expit(inverse_sigmoid(ref) + mlp_forward(w.reg, q_new))
    return q_new, ref_new


def _self_attention(x: np.ndarray, w: SelfAttentionWeights) -> np.ndarray:
    d = x.shape[1]
    q = x @ w.wq.T + w.bq
    k = x @ w.wk.T + w.bk
    v = x @ w.wv.T + w.bv
    attn = softmax(q @ k.T / np.sqrt(d), axis=1)
    return (attn @ v) @ w.wo.T + w.bo


def fresh_queries(w: DecoderWeights, cfg: AttentionConfig) -> list[QueryState]:
    """Initial query set: learned embeddings and reference polylines, scored by
    the classification head on the raw embeddings."""
    probs = expit(mlp_forward(w.cls_head, w.query_embed))
    scores = probs.max(axis=1)
    return [
        QueryState(w.query_embed[i], float(scores[i]),
                   Polyline(w.init_polylines[i], OPEN), FRESH)
        for i in range(cfg.n_q)
    ]


def decode(queries: Sequence[QueryState], f: BevGrid, w: DecoderWeights,
           cfg: AttentionConfig) -> tuple[list[MapInstance], list[QueryState]]:
    """Run the decoder stack over a full query set.

    Per layer: pre-norm residual self-attention over the set, multi-point
    cross-attention (replacing the embedding), pre-norm residual feed-forward,
    then polylines re-predicted from the layer output through the shared head.
    Each query yields a map instance whose class is the argmax head
    probability and whose confidence is the max; pedestrian crossings come
    back closed, other classes open.
    """
    if len(queries) != cfg.n_q:
        raise ValueError(f"expected {cfg.n_q} queries, got {len(queries)}")
    q = np.stack([s.embedding for s in queries])
    p = np.stack([s.polyline.points for s in queries])
    if p.shape[1] != cfg.n_p:
        raise ValueError(f"reference polylines must have {cfg.n_p} points, got {p.shape[1]}")

    n_q, n_p = cfg.n_q, cfg.n_p
    for layer in w.layers:
        q = q + _self_attention(layer_norm(q, layer.ln_sa), layer.sa)
        s = layer.mpa.weight_w.shape[0]
        refs = np.repeat(p, s // n_p, axis=1)
        q = _cross_attention(q, refs, f, layer.mpa)
        q = q + mlp_forward(layer.ffn, layer_norm(q, layer.ln_ffn))
        p = expit(mlp_forward(w.reg, q)).reshape(n_q, n_p, 2)

    probs = expit(mlp_forward(w.cls_head, q))
    scores = probs.max(axis=1)
    classes = probs.argmax(axis=1)
    instances = []
    refined = []
    for i in range(n_q):
        name = CLASS_NAMES[classes[i]]
        kind = CLOSED if name == "ped_crossing" else OPEN
        instances.append(MapInstance(name, Polyline(p[i], kind), float(scores[i])))
        refined.append(QueryState(q[i], float(scores[i]), Polyline(p[i], OPEN),
                                  queries[i].origin))
    return instances, refined


# ---------------------------------------------------------------------------
# Weight generation and tensor mapping
# ---------------------------------------------------------------------------

_OFFSET_SCALE = 0.05  # keeps learned-free random offsets small in unit coordinates


def random_decoder_weights(cfg: AttentionConfig, c_bev: int, seed: int) -> DecoderWeights:
    """Deterministic random decoder weights (see vecmap.weights for the PRNG)."""
    gen = Xorshift64Star(seed)
    d, n_p, n_off = cfg.d, cfg.n_p, cfg.n_off
    query_embed = gen.uniform(-1.0, 1.0, (cfg.n_q, d))
    init_polylines = gen.uniform(0.1, 0.9, (cfg.n_q, n_p, 2))
    cls_head = MlpWeights(((gen.matrix(d, d), gen.vector(d)),
                           (gen.matrix(3, d), gen.vector(3))))
    reg = MlpWeights(((gen.matrix(d, d), gen.vector(d)),
                      (gen.matrix(2 * n_p, d), gen.vector(2 * n_p))))
    layers = []
    for _ in range(cfg.layers):
        sa = SelfAttentionWeights(
            wq=gen.matrix(d, d), bq=gen.vector(d),
            wk=gen.matrix(d, d), bk=gen.vector(d),
            wv=gen.matrix(d, d), bv=gen.vector(d),
            wo=gen.matrix(d, d), bo=gen.vector(d),
        )
        mpa = MpaLayerWeights(
            offset_w=_OFFSET_SCALE * gen.matrix(2 * n_p * n_off, d),
            offset_b=_OFFSET_SCALE * gen.vector(2 * n_p * n_off),
            weight_w=gen.matrix(n_p * n_off, d),
            weight_b=gen.vector(n_p * n_off),
            value_w=gen.matrix(d, c_bev),
            value_b=gen.vector(d),
            reg=reg,
        )
        ffn = MlpWeights(((gen.matrix(d, d), gen.vector(d)),
                          (gen.matrix(d, d), gen.vector(d))))
        layers.append(DecoderLayerWeights(
            ln_sa=LayerNormParams(np.ones(d), np.zeros(d)),
            sa=sa,
            mpa=mpa,
            ln_ffn=LayerNormParams(np.ones(d), np.zeros(d)),
            ffn=ffn,
        ))
    return DecoderWeights(query_embed=query_embed, init_polylines=init_polylines,
                          cls_head=cls_head, reg=reg, layers=tuple(layers))


def random_baseline_weights(n_off: int, d: int, c_bev: int, seed: int) -> BaselineLayerWeights:
    gen = Xorshift64Star(seed)
    return BaselineLayerWeights(
        offset_w=_OFFSET_SCALE * gen.matrix(2 * n_off, d),
        offset_b=_OFFSET_SCALE * gen.vector(2 * n_off),
        weight_w=gen.matrix(n_off, d),
        weight_b=gen.vector(n_off),
        value_w=gen.matrix(d, c_bev),
        value_b=gen.vector(d),
        reg=MlpWeights(((gen.matrix(d, d), gen.vector(d)),
                        (gen.matrix(2, d), gen.vector(2)))),
    )


def _mlp_tensors(prefix: str, w: MlpWeights) -> dict[str, np.ndarray]:
    out = {}
    for i, (mat, bias) in enumerate(w.layers):
        out[f"{prefix}.{i}.w"] = mat
        out[f"{prefix}.{i}.b"] = bias
    return out


def _mlp_from_tensors(prefix: str, tensors: dict[str, np.ndarray]) -> MlpWeights:
    layers = []
    i = 0
    while f"{prefix}.{i}.w" in tensors:
        layers.append((tensors[f"{prefix}.{i}.w"], tensors[f"{prefix}.{i}.b"]))
        i += 1
    if not layers:
        raise ValueError(f"no tensors under {prefix!r}")
    return MlpWeights(tuple(layers))


def decoder_to_tensors(w: DecoderWeights) -> dict[str, np.ndarray]:
    out = {
        "decoder.query_embed": w.query_embed,
        "decoder.init_polylines": w.init_polylines,
    }
    out.update(_mlp_tensors("decoder.cls", w.cls_head))
    out.update(_mlp_tensors("decoder.reg", w.reg))
    for i, layer in enumerate(w.layers):
        base = f"decoder.layers.{i}"
        out[f"{base}.ln_sa.gain"] = layer.ln_sa.gain
        out[f"{base}.ln_sa.bias"] = layer.ln_sa.bias
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            out[f"{base}.sa.{name}"] = getattr(layer.sa, name)
        out[f"{base}.mpa.offset.w"] = layer.mpa.offset_w
        out[f"{base}.mpa.offset.b"] = layer.mpa.offset_b
        out[f"{base}.mpa.weight.w"] = layer.mpa.weight_w
        out[f"{base}.mpa.weight.b"] = layer.mpa.weight_b
        out[f"{base}.mpa.value.w"] = layer.mpa.value_w
        out[f"{base}.mpa.value.b"] = layer.mpa.value_b
        out[f"{base}.ln_ffn.gain"] = layer.ln_ffn.gain
        out[f"{base}.ln_ffn.bias"] = layer.ln_ffn.bias
        out.update(_mlp_tensors(f"{base}.ffn", layer.ffn))
    return out


def decoder_from_tensors(tensors: dict[str, np.ndarray]) -> DecoderWeights:
    reg = _mlp_from_tensors("decoder.reg", tensors)
    layers = []
    i = 0
    while f"decoder.layers.{i}.mpa.offset.w" in tensors:
        base = f"decoder.layers.{i}"
        sa = SelfAttentionWeights(**{
            name: tensors[f"{base}.sa.{name}"]
            for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
        })
        mpa = MpaLayerWeights(
            offset_w=tensors[f"{base}.mpa.offset.w"],
            offset_b=tensors[f"{base}.mpa.offset.b"],
            weight_w=tensors[f"{base}.mpa.weight.w"],
            weight_b=tensors[f"{base}.mpa.weight.b"],
            value_w=tensors[f"{base}.mpa.value.w"],
            value_b=tensors[f"{base}.mpa.value.b"],
            reg=reg,
        )
        layers.append(DecoderLayerWeights(
            ln_sa=LayerNormParams(tensors[f"{base}.ln_sa.gain"], tensors[f"{base}.ln_sa.bias"]),
            sa=sa,
            mpa=mpa,
            ln_ffn=LayerNormParams(tensors[f"{base}.ln_ffn.gain"], tensors[f"{base}.ln_ffn.bias"]),
            ffn=_mlp_from_tensors(f"{base}.ffn", tensors),
        ))
        i += 1
    return DecoderWeights(
        query_embed=tensors["decoder.query_embed"],
        init_polylines=tensors["decoder.init_polylines"],
        cls_head=_mlp_from_tensors("decoder.cls", tensors),
        reg=reg,
        layers=tuple(layers),
    )
