"""Landmark pathway: facial graph, GAT frame embedding, shot pooling, LSTM -> GRU.

Landmark indices follow the 0-indexed iBUG 68-point layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .autodiff import (
    DEFAULT_DTYPE,
    ContractError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    getitem,
    leaky_relu,
    record_op,
    matmul,
    mul,
    reduce_mean,
    reshape,
    sigmoid,
    stack,
    sub,
    tanh,
    transpose,
)
from .nn import Module, activation, masked_softmax, mean_pool, param, xavier_uniform

NUM_LANDMARKS = 68

REGIONS: dict[str, tuple[int, ...]] = {
    "jaw": tuple(range(0, 17)),
    "right_brow": tuple(range(17, 22)),
    "left_brow": tuple(range(22, 27)),
    "nose_bridge": tuple(range(27, 31)),
    "nose_base": tuple(range(31, 36)),
    "right_eye": tuple(range(36, 42)),
    "left_eye": tuple(range(42, 48)),
    "outer_lip": tuple(range(48, 60)),
    "inner_lip": tuple(range(60, 68)),
}

_CHAINS = ((0, 16), (17, 21), (22, 26), (27, 30), (31, 35))
_CYCLES = ((36, 41), (42, 47), (48, 59), (60, 67))
_BRIDGES = ((21, 27), (22, 27), (30, 33), (36, 17), (45, 26), (48, 3), (54, 13), (62, 66))
# without these two the bridges above leave three components
# (jaw + outer lip, brows/eyes/nose, inner lip)
_CONNECTORS = ((33, 51), (48, 60))


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class FacialGraph:
    node_count: int
    edges: tuple[tuple[int, int], ...]
    adjacency: tuple[tuple[int, ...], ...]
    mask: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_edges(cls, node_count: int, edges) -> "FacialGraph":
        und = set()
        for u, v in edges:
            if not (0 <= u < node_count and 0 <= v < node_count):
                raise ValueError(f"edge ({u}, {v}) outside 0..{node_count - 1}")
            und.add((min(u, v), max(u, v)))
        und.update((i, i) for i in range(node_count))
        mask = np.zeros((node_count, node_count), dtype=bool)
        for u, v in und:
            mask[u, v] = mask[v, u] = True
        adjacency = tuple(tuple(int(j) for j in np.flatnonzero(mask[i])) for i in range(node_count))
        mask.setflags(write=False)
        return cls(node_count, tuple(sorted(und)), adjacency, mask)

    @cached_property
    def padded(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Neighbor table padded to the max degree (self loops included).

        Returns (nbr [N, K], valid [N, K], rev [N, K]) where for a valid slot
        nbr[rev... ] closes the loop: nbr[nbr[i, k], rev[i, k]] == i.  Padding
        slots point at the node itself and are masked out by ``valid``.
        """
        N = self.node_count
        K = max(len(a) for a in self.adjacency)
        nbr = np.tile(np.arange(N)[:, None], (1, K))
        valid = np.zeros((N, K), dtype=bool)
        for i, adj in enumerate(self.adjacency):
            nbr[i, :len(adj)] = adj
            valid[i, :len(adj)] = True
        rev = np.zeros((N, K), dtype=np.intp)
        for i, adj in enumerate(self.adjacency):
            for k, j in enumerate(adj):
                rev[i, k] = self.adjacency[j].index(i)
        for arr in (nbr, valid, rev):
            arr.setflags(write=False)
        return nbr, valid, rev

    def neighbors(self, i: int, include_self: bool = True) -> tuple[int, ...]:
        return tuple(j for j in self.adjacency[i] if include_self or j != i)

    def is_symmetric(self) -> bool:
        return bool((self.mask == self.mask.T).all())

    def is_connected(self) -> bool:
        seen = {0}
        todo = [0]
        while todo:
            u = todo.pop()
            for v in self.adjacency[u]:
                if v not in seen:
                    seen.add(v)
                    todo.append(v)
        return len(seen) == self.node_count

    def permuted(self, perm: Sequence[int]) -> "FacialGraph":
        """Relabel node i as perm[i]."""
        return FacialGraph.from_edges(self.node_count, [(perm[u], perm[v]) for u, v in self.edges])

    def subgraph(self, nodes: Sequence[int]) -> "FacialGraph":
        index = {n: i for i, n in enumerate(nodes)}
        return FacialGraph.from_edges(
            len(nodes), [(index[u], index[v]) for u, v in self.edges if u in index and v in index])


def build_facial_graph() -> FacialGraph:
    edges = []
    for a, b in _CHAINS:
        edges += [(i, i + 1) for i in range(a, b)]
    for a, b in _CYCLES:
        edges += [(i, i + 1) for i in range(a, b)] + [(b, a)]
    edges += list(_BRIDGES) + list(_CONNECTORS)
    return FacialGraph.from_edges(NUM_LANDMARKS, edges)


# -- landmark containers -----------------------------------------------------------

@dataclass
class LandmarkFrame:
    coords: np.ndarray  # [68, 2] (x, y)
    valid: bool = True

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.shape != (NUM_LANDMARKS, 2):
            raise ShapeError(f"landmark frame must be (68, 2), got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise GeometryError("landmark coordinates must be finite")


@dataclass
class LandmarkShot:
    coords: np.ndarray  # [F, 68, 2]
    shot_id: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 3 or self.coords.shape[1:] != (NUM_LANDMARKS, 2):
            raise ShapeError(f"landmark shot must be (F, 68, 2), got {self.coords.shape}")
        if self.coords.shape[0] == 0:
            raise ContractError("a landmark shot needs at least one frame")

    @classmethod
    def from_frames(cls, frames: Sequence[LandmarkFrame], shot_id: str = "") -> "LandmarkShot":
        kept = [f.coords for f in frames if f.valid]
        if not kept:
            raise ContractError(f"shot {shot_id!r} has no frame with a detected face")
        return cls(np.stack(kept), shot_id)

    @property
    def frames(self) -> list[LandmarkFrame]:
        return [LandmarkFrame(c) for c in self.coords]

    def __len__(self) -> int:
        return self.coords.shape[0]


def normalize_coords(coords: np.ndarray) -> np.ndarray:
    """Center each [68, 2] frame at its centroid and scale inter-ocular distance to 1.

    Frames whose eye centers coincide fall back to bounding-box diagonal scaling.
    """
    c = np.asarray(coords, dtype=np.float64)
    single = c.ndim == 2
    if single:
        c = c[None]
    centered = c - c.mean(axis=1, keepdims=True)
    right = centered[:, 36:42].mean(axis=1)
    left = centered[:, 42:48].mean(axis=1)
    scale = np.linalg.norm(left - right, axis=-1)
    diag = np.linalg.norm(centered.max(axis=1) - centered.min(axis=1), axis=-1)
    if np.any(diag == 0):
        raise GeometryError("degenerate landmark frame: all coordinates identical")
    scale = np.where(scale > 0, scale, diag)
    out = centered / scale[:, None, None]
    return out[0] if single else out


def normalize_landmarks(f: LandmarkFrame) -> LandmarkFrame:
    if not f.valid:
        raise ContractError("cannot normalize an invalid (no face) frame")
    return LandmarkFrame(normalize_coords(f.coords), True)


# -- aspect ratios -------------------------------------------------------------------

_EYES = {"right": tuple(range(36, 42)), "left": tuple(range(42, 48))}


def _aspect_ratio(pts: np.ndarray, p1, p2, p3, p4, p5, p6) -> np.ndarray:
    horiz = np.linalg.norm(pts[..., p1, :] - pts[..., p4, :], axis=-1)
    if np.any(horiz == 0):
        raise GeometryError("zero horizontal span in aspect ratio")
    v1 = np.linalg.norm(pts[..., p2, :] - pts[..., p6, :], axis=-1)
    v2 = np.linalg.norm(pts[..., p3, :] - pts[..., p5, :], axis=-1)
    return (v1 + v2) / (2.0 * horiz)


def compute_ear(f: LandmarkFrame | np.ndarray, eye: str = "right"):
    """Eye aspect ratio (|p2-p6| + |p3-p5|) / (2 |p1-p4|) over the eye's 6-point cycle.

    Accepts a frame or an array [..., 68, 2]; returns a float or an array.
    """
    if eye not in _EYES:
        raise ValueError(f"eye must be 'left' or 'right', got {eye!r}")
    pts = f.coords if isinstance(f, LandmarkFrame) else np.asarray(f, dtype=np.float64)
    out = _aspect_ratio(pts, *_EYES[eye])
    return float(out) if np.ndim(out) == 0 else out


def compute_mar(f: LandmarkFrame | np.ndarray):
    """Mouth aspect ratio (|p50-p58| + |p52-p56|) / (2 |p48-p54|) on the outer lip."""
    pts = f.coords if isinstance(f, LandmarkFrame) else np.asarray(f, dtype=np.float64)
    out = _aspect_ratio(pts, 48, 50, 52, 54, 56, 58)
    return float(out) if np.ndim(out) == 0 else out


# -- GAT -------------------------------------------------------------------------------

class GATLayer(Module):
    """Multi-head graph attention with concatenated heads.

    ``W`` is [heads, d_out/heads, d_in] and ``a`` is [heads, 2*d_out/heads]; the
    first half of ``a`` scores the receiving node, the second half the neighbor.
    """

    def __init__(self, d_in: int, d_out: int, heads: int, rng: np.random.Generator,
                 attn_slope: float = 0.2, act: str = "leaky_relu", dtype=DEFAULT_DTYPE):
        super().__init__()
        if d_out % heads:
            raise ValueError(f"d_out={d_out} is not divisible by heads={heads}")
        dh = d_out // heads
        self.heads = heads
        self.attn_slope = attn_slope
        self.act = act
        self.W = param(xavier_uniform((heads, dh, d_in), d_in, dh, rng, dtype))
        self.a = param(xavier_uniform((heads, 2 * dh), 2 * dh, 1, rng, dtype))


def gat_attend(Wh: Tensor, s_recv: Tensor, s_nbr: Tensor, g: FacialGraph, slope: float):
    """Neighbor attention: out[i] = sum_j alpha_ij Wh[j] over the neighbors j of i,
    alpha_i = softmax_j(leaky_relu(s_recv[i] + s_nbr[j])).

    Wh is [B, H, N, dh]; scores are [B, H, N].  Works on the padded neighbor
    table (max degree K), so every step is a gather over a small K axis.
    Returns (out, alpha [B, H, N, K] with zeros on padding slots).
    """
    nbr, valid, rev = g.padded
    wh, sr, sn = Wh.data, s_recv.data, s_nbr.data
    K = nbr.shape[1]
    z = sr[..., None] + sn[..., nbr]                     # B, H, N, K
    scale = np.where(z > 0, 1.0, slope).astype(z.dtype)
    e = np.where(valid, z * scale, -np.inf)
    ex = np.exp(e - e.max(axis=-1, keepdims=True))
    alpha = ex / ex.sum(axis=-1, keepdims=True)
    whn = [wh[:, :, nbr[:, k], :] for k in range(K)]
    out = alpha[..., 0, None] * whn[0]
    for k in range(1, K):
        out += alpha[..., k, None] * whn[k]

    def fn(gout):
        ga = np.stack([(gout * whn[k]).sum(-1) for k in range(K)], axis=-1)
        gz = alpha * (ga - (alpha * ga).sum(axis=-1, keepdims=True)) * scale
        # symmetric graph: the edges arriving at j are (nbr[j, k] -> j), slot rev[j, k]
        a_in = np.where(valid, alpha[:, :, nbr, rev], 0.0)
        gz_in = np.where(valid, gz[:, :, nbr, rev], 0.0)
        gwh = a_in[..., 0, None] * gout[:, :, nbr[:, 0], :]
        for k in range(1, K):
            gwh += a_in[..., k, None] * gout[:, :, nbr[:, k], :]
        return gwh, gz.sum(axis=-1), gz_in.sum(axis=-1)

    return record_op("gat_attend", out, (Wh, s_recv, s_nbr), fn), alpha


def gat_layer(node_feats: Tensor, g: FacialGraph, p: GATLayer, return_attention: bool = False):
    """One GAT layer over [..., N, d_in] node features -> [..., N, d_out]."""
    h = as_tensor(node_feats)
    H, dh, din = p.W.shape
    N = g.node_count
    if h.shape[-2:] != (N, din):
        raise ShapeError(f"gat_layer expects [..., {N}, {din}] features, got {h.shape}")
    lead = h.shape[:-2]
    B = int(np.prod(lead)) if lead else 1
    h4 = reshape(h, (B, 1, N, din))
    Wh = matmul(h4, transpose(p.W, (0, 2, 1)))  # B, H, N, dh
    a_recv = reshape(getitem(p.a, (slice(None), slice(0, dh))), (H, dh, 1))
    a_nbr = reshape(getitem(p.a, (slice(None), slice(dh, 2 * dh))), (H, dh, 1))
    s_recv = matmul(Wh, a_recv)  # B, H, N, 1
    s_nbr = matmul(Wh, a_nbr)
    out, alpha = gat_attend(Wh, reshape(s_recv, (B, H, N)), reshape(s_nbr, (B, H, N)), g,
                            p.attn_slope)
    out = reshape(transpose(out, (0, 2, 1, 3)), lead + (N, H * dh))
    out = activation(out, p.act)
    if return_attention:
        nbr, valid, _ = g.padded
        dense = np.zeros((B, H, N, N), dtype=alpha.dtype)
        rows = np.broadcast_to(np.arange(N)[:, None], nbr.shape)
        dense[:, :, rows[valid], nbr[valid]] = alpha[:, :, valid]
        return out, dense.reshape(lead + (H, N, N))
    return out


def node_features(coords: Tensor, use_velocity: bool = True) -> Tensor:
    """[F, 68, 2] normalized coords -> [F, 68, 2 or 4]; velocity of frame 0 is zero."""
    coords = as_tensor(coords)
    if not use_velocity:
        return coords
    zero = Tensor._wrap(np.zeros((1,) + coords.shape[1:], dtype=coords.dtype))
    if coords.shape[0] == 1:
        vel = zero
    else:
        vel = concat([zero, sub(getitem(coords, slice(1, None)), getitem(coords, slice(0, -1)))], axis=0)
    return concat([coords, vel], axis=-1)


class LandmarkEncoder(Module):
    """Stack of GAT layers followed by a mean over nodes (one vector per frame)."""

    def __init__(self, d_in: int, dims: Sequence[int], heads: int, rng: np.random.Generator,
                 attn_slope: float = 0.2, act: str = "leaky_relu", dtype=DEFAULT_DTYPE):
        super().__init__()
        self.layers = []
        for d_out in dims:
            self.layers.append(GATLayer(d_in, d_out, heads, rng, attn_slope, act, dtype))
            d_in = d_out
        self.embed_dim = d_in


def frame_embed(feats: Tensor, g: FacialGraph, p: LandmarkEncoder) -> Tensor:
    """[..., 68, d_in] node features -> [..., embed_dim] frame embeddings z_t."""
    h = as_tensor(feats)
    for layer in p.layers:
        h = gat_layer(h, g, layer)
    return reduce_mean(h, axis=-2)


def shot_pool(zs) -> Tensor:
    """Frame-wise mean of the frame embeddings of one shot."""
    if isinstance(zs, Tensor):
        if zs.shape[0] == 0:
            raise ContractError("shot_pool of an empty shot")
        return reduce_mean(zs, axis=0)
    return mean_pool(zs)


# -- recurrent cells -------------------------------------------------------------------

def _slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    return getitem(x, (Ellipsis, slice(start, stop)))


class LSTM(Module):
    """Single-layer LSTM; packed gate order (input, forget, cell, output)."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.hidden = hidden
        self.weight_ih = param(xavier_uniform((4 * hidden, d_in), d_in, hidden, rng, dtype))
        self.weight_hh = param(xavier_uniform((4 * hidden, hidden), hidden, hidden, rng, dtype))
        self.bias = param(np.zeros(4 * hidden, dtype=dtype))


class GRU(Module):
    """Single-layer GRU; packed gate order (reset, update, candidate)."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.hidden = hidden
        self.weight_ih = param(xavier_uniform((3 * hidden, d_in), d_in, hidden, rng, dtype))
        self.weight_hh = param(xavier_uniform((3 * hidden, hidden), hidden, hidden, rng, dtype))
        self.bias_ih = param(np.zeros(3 * hidden, dtype=dtype))
        self.bias_hh = param(np.zeros(3 * hidden, dtype=dtype))


def _zeros_like_hidden(x: Tensor, hidden: int) -> Tensor:
    return Tensor._wrap(np.zeros(x.shape[:-1] + (hidden,), dtype=x.dtype))


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, p: LSTM) -> tuple[Tensor, Tensor]:
    D = p.hidden
    gates = add(add(matmul(x, transpose(p.weight_ih)), matmul(h, transpose(p.weight_hh))), p.bias)
    i = sigmoid(_slice_last(gates, 0, D))
    f = sigmoid(_slice_last(gates, D, 2 * D))
    cand = tanh(_slice_last(gates, 2 * D, 3 * D))
    o = sigmoid(_slice_last(gates, 3 * D, 4 * D))
    c = add(mul(f, c), mul(i, cand))
    h = mul(o, tanh(c))
    return h, c


def lstm_forward(g_seq: Sequence[Tensor], p: LSTM) -> list[Tensor]:
    """Run the LSTM from zero state over a nonempty sequence; returns every hidden state."""
    if len(g_seq) == 0:
        raise ContractError("lstm_forward of an empty sequence")
    h = c = _zeros_like_hidden(as_tensor(g_seq[0]), p.hidden)
    out = []
    for x in g_seq:
        h, c = lstm_cell(as_tensor(x), h, c, p)
        out.append(h)
    return out


def gru_cell(x: Tensor, h: Tensor, p: GRU) -> Tensor:
    D = p.hidden
    gi = add(matmul(x, transpose(p.weight_ih)), p.bias_ih)
    gh = add(matmul(h, transpose(p.weight_hh)), p.bias_hh)
    r = sigmoid(add(_slice_last(gi, 0, D), _slice_last(gh, 0, D)))
    z = sigmoid(add(_slice_last(gi, D, 2 * D), _slice_last(gh, D, 2 * D)))
    n = tanh(add(_slice_last(gi, 2 * D, 3 * D), mul(r, _slice_last(gh, 2 * D, 3 * D))))
    return add(mul(sub(1.0, z), n), mul(z, h))


def gru_forward(h_seq: Sequence[Tensor], p: GRU, h0: Tensor | None = None) -> Tensor:
    """Run the GRU over a nonempty sequence and return the final hidden state."""
    if len(h_seq) == 0:
        raise ContractError("gru_forward of an empty sequence")
    h = h0 if h0 is not None else _zeros_like_hidden(as_tensor(h_seq[0]), p.hidden)
    for x in h_seq:
        h = gru_cell(as_tensor(x), h, p)
    return h


# -- branch ------------------------------------------------------------------------------

class LandmarkBranch(Module):
    """GAT per frame -> mean per shot -> LSTM over shots -> GRU -> F_land.

    With ``center_shot`` each shot's coordinates are taken relative to that
    shot's mean shape, so the nodes carry motion (blinks, sway, jitter) rather
    than the face template every sample shares.  ``feature_scale`` multiplies
    all node features and ``velocity_scale`` the velocity channels on top.
    """

    def __init__(self, d_model: int, gat_dims: Sequence[int] = (32, 32), heads: int = 2,
                 rng: np.random.Generator | None = None, attn_slope: float = 0.2,
                 act: str = "leaky_relu", use_velocity: bool = True, velocity_scale: float = 1.0,
                 dtype=DEFAULT_DTYPE, center_shot: bool = False, feature_scale: float = 1.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.graph = build_facial_graph()
        self.use_velocity = use_velocity
        self.velocity_scale = velocity_scale
        self.center_shot = center_shot
        self.feature_scale = feature_scale
        d_in = 4 if use_velocity else 2
        self.encoder = LandmarkEncoder(d_in, gat_dims, heads, rng, attn_slope, act, dtype)
        self.lstm = LSTM(self.encoder.embed_dim, d_model, rng, dtype)
        self.gru = GRU(d_model, d_model, rng, dtype)

    def shot_features(self, coords) -> Tensor:
        coords = as_tensor(coords)
        if self.center_shot:
            coords = sub(coords, reduce_mean(coords, axis=0, keepdims=True))
        feats = node_features(coords, self.use_velocity)
        scale = np.full(feats.shape[-1], self.feature_scale, dtype=feats.dtype)
        if self.use_velocity:
            scale[2:] *= self.velocity_scale
        if np.any(scale != 1.0):
            feats = mul(feats, Tensor._wrap(scale))
        return feats

    def __call__(self, batch: Sequence[Sequence]) -> Tensor:
        """``batch[b]`` is the list of per-shot [F, 68, 2] coords of sample b -> [B, d_model]."""
        feats, spans = [], []
        start = 0
        for shots in batch:
            if len(shots) == 0:
                raise ContractError("sample without shots")
            sample_spans = []
            for coords in shots:
                f = self.shot_features(coords)
                feats.append(f)
                sample_spans.append((start, start + f.shape[0]))
                start += f.shape[0]
            spans.append(sample_spans)
        allfeats = feats[0] if len(feats) == 1 else concat(feats, axis=0)
        z = frame_embed(allfeats, self.graph, self.encoder)  # [sum F, E]
        g_seqs = [[shot_pool(getitem(z, slice(a, b))) for a, b in s] for s in spans]
        lengths = {len(s) for s in g_seqs}
        if len(lengths) == 1:
            steps = [stack([seq[k] for seq in g_seqs], axis=0) for k in range(lengths.pop())]
            return gru_forward(lstm_forward(steps, self.lstm), self.gru)
        outs = [gru_forward(lstm_forward(seq, self.lstm), self.gru) for seq in g_seqs]
        return stack(outs, axis=0)
