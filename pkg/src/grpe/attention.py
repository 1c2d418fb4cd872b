"""Attention variants and the transformer block.

Four score paths share one softmax/value pipeline:

* ``none``: plain scaled dot product;
* ``grpe_naive``: per-pair dot products against topology/edge encoding
  rows, the O(N^2 d) reference implementation;
* ``grpe_fast``: the same map assembled from precomputed node-feature x
  encoding-row products plus index lookups, an algebraic identity of the
  naive form (verified against it, never trusted on its own);
* ``graphormer``: feature-independent scalar bucket biases.

All kernels are batched over heads: matrices are split to (H, N, d_h) and
encoding tables to (H, R, d_h) column blocks, mirroring how q/k/v are
sliced. Every forward has a matching backward that accumulates into the
shared ``Parameter`` gradients; there is no tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (Parameter, Tensor, layer_norm_rows, layer_norm_rows_backward,
                     softmax_lastdim, softmax_lastdim_backward)

SCORE_KINDS = ("none", "grpe_naive", "grpe_fast", "graphormer")


class DotProductCounter:
    """Counts vector dot products spent assembling encoding score terms.

    Only the query/key-vs-encoding-row products are counted (the shared
    q . k term and the value path are excluded), so naive and fast paths
    can be compared on the work the precompute actually removes.
    """

    def __init__(self):
        self.total = 0

    def add(self, n: int):
        self.total += int(n)

    def reset(self):
        self.total = 0


score_dot_counter = DotProductCounter()


@dataclass
class AttentionParams:
    """Projection weights of one attention layer (no biases)."""

    w_query: Parameter   # (d_x, d_z)
    w_key: Parameter
    w_value: Parameter
    w_out: Parameter     # (d_z, d_z)
    heads: int

    def __post_init__(self):
        d_z = self.w_query.shape[1]
        if d_z % self.heads != 0:
            raise ConfigError(f"d_z={d_z} not divisible by heads={self.heads}")


@dataclass(frozen=True)
class PEMode:
    """Which score path to run and which encoding components to enable."""

    kind: str
    use_topology: bool = True
    use_edge: bool = True
    use_value: bool = True

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ConfigError(f"unknown attention mode {self.kind!r}; expected one of {SCORE_KINDS}")


@dataclass
class AttentionTrace:
    """Per-head attention map plus the raw (pre-scaling) score components."""

    attn: np.ndarray                  # (H, N, N), rows sum to 1
    dot: np.ndarray | None = None     # (H, N, N) q . k term
    topology: np.ndarray | None = None
    edge: np.ndarray | None = None

    def head_average(self) -> np.ndarray:
        return self.attn.mean(axis=0)


def split_heads(m: np.ndarray, heads: int) -> np.ndarray:
    """(rows, d_z) -> (H, rows, d_z / H), contiguous per head."""
    rows, d_z = m.shape
    return np.ascontiguousarray(m.reshape(rows, heads, d_z // heads).transpose(1, 0, 2))


def merge_heads(m3: np.ndarray) -> np.ndarray:
    """(H, rows, d_h) -> (rows, H * d_h); inverse of split_heads."""
    h, rows, dh = m3.shape
    return np.ascontiguousarray(m3.transpose(1, 0, 2).reshape(rows, h * dh))


def _as_np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _fold_table_grad(param: Parameter, d_split: np.ndarray):
    param.grad.data += merge_heads(d_split)


# ---------------------------------------------------------------------------
# score kernels (forward + backward), batched over heads
# ---------------------------------------------------------------------------

def _plain_scores_fwd(qh, kh, want_parts):
    dh = qh.shape[2]
    scale = 1.0 / math.sqrt(dh)
    dot = qh @ kh.transpose(0, 2, 1)
    cache = {"kind": "none", "qh": qh, "kh": kh, "scale": scale}
    parts = (dot, None, None) if want_parts else None
    return dot * scale, parts, cache


def _plain_scores_bwd(d_scores, cache):
    g = d_scores * cache["scale"]
    dqh = g @ cache["kh"]
    dkh = g.transpose(0, 2, 1) @ cache["qh"]
    return dqh, dkh


def _grpe_scores_naive_fwd(qh, kh, t_idx, e_idx, topology, edge, mode, want_parts):
    heads, n, dh = qh.shape
    scale = 1.0 / math.sqrt(dh)
    pq = split_heads(topology.query.value.data, heads) if mode.use_topology else None
    pk = split_heads(topology.key.value.data, heads) if mode.use_topology else None
    eq = split_heads(edge.query.value.data, heads) if mode.use_edge else None
    ek = split_heads(edge.key.value.data, heads) if mode.use_edge else None

    dot = np.zeros((heads, n, n))
    topo_term = np.zeros((heads, n, n)) if mode.use_topology else None
    edge_term = np.zeros((heads, n, n)) if mode.use_edge else None
    for h in range(heads):
        q, k = qh[h], kh[h]
        for i in range(n):
            for j in range(n):
                dot[h, i, j] = np.dot(q[i], k[j])
                if mode.use_topology:
                    t = t_idx[i, j]
                    topo_term[h, i, j] = np.dot(q[i], pq[h][t]) + np.dot(k[j], pk[h][t])
                if mode.use_edge:
                    e = e_idx[i, j]
                    edge_term[h, i, j] = np.dot(q[i], eq[h][e]) + np.dot(k[j], ek[h][e])
    if mode.use_topology:
        score_dot_counter.add(2 * heads * n * n)
    if mode.use_edge:
        score_dot_counter.add(2 * heads * n * n)

    scores = dot.copy()
    if topo_term is not None:
        scores += topo_term
    if edge_term is not None:
        scores += edge_term
    scores *= scale
    cache = {"kind": "grpe_naive", "qh": qh, "kh": kh, "t_idx": t_idx, "e_idx": e_idx,
             "topology": topology, "edge": edge, "mode": mode, "scale": scale,
             "pq": pq, "pk": pk, "eq": eq, "ek": ek}
    parts = (dot, topo_term, edge_term) if want_parts else None
    return scores, parts, cache


def _grpe_scores_naive_bwd(d_scores, cache):
    qh, kh = cache["qh"], cache["kh"]
    t_idx, e_idx, mode = cache["t_idx"], cache["e_idx"], cache["mode"]
    pq, pk, eq, ek = cache["pq"], cache["pk"], cache["eq"], cache["ek"]
    heads, n, _ = qh.shape
    dqh = np.zeros_like(qh)
    dkh = np.zeros_like(kh)
    dpq = np.zeros_like(pq) if mode.use_topology else None
    dpk = np.zeros_like(pk) if mode.use_topology else None
    deq = np.zeros_like(eq) if mode.use_edge else None
    dek = np.zeros_like(ek) if mode.use_edge else None
    for h in range(heads):
        q, k = qh[h], kh[h]
        for i in range(n):
            for j in range(n):
                g = d_scores[h, i, j] * cache["scale"]
                if g == 0.0:
                    continue
                dqh[h, i] += g * k[j]
                dkh[h, j] += g * q[i]
                if mode.use_topology:
                    t = t_idx[i, j]
                    dqh[h, i] += g * pq[h][t]
                    dkh[h, j] += g * pk[h][t]
                    dpq[h][t] += g * q[i]
                    dpk[h][t] += g * k[j]
                if mode.use_edge:
                    e = e_idx[i, j]
                    dqh[h, i] += g * eq[h][e]
                    dkh[h, j] += g * ek[h][e]
                    deq[h][e] += g * q[i]
                    dek[h][e] += g * k[j]
    if mode.use_topology:
        _fold_table_grad(cache["topology"].query, dpq)
        _fold_table_grad(cache["topology"].key, dpk)
    if mode.use_edge:
        _fold_table_grad(cache["edge"].query, deq)
        _fold_table_grad(cache["edge"].key, dek)
    return dqh, dkh


def _grpe_scores_fast_fwd(qh, kh, t_idx, e_idx, topology, edge, mode, want_parts):
    heads, n, dh = qh.shape
    scale = 1.0 / math.sqrt(dh)
    rows = np.arange(n)[:, None]  # broadcasts against (N, N) index matrices
    cols = np.arange(n)[None, :]

    dot = qh @ kh.transpose(0, 2, 1)
    scores = dot.copy()
    cache = {"kind": "grpe_fast", "qh": qh, "kh": kh, "t_idx": t_idx, "e_idx": e_idx,
             "topology": topology, "edge": edge, "mode": mode, "scale": scale}
    topo_term = edge_term = None
    if mode.use_topology:
        pq = split_heads(topology.query.value.data, heads)
        pk = split_heads(topology.key.value.data, heads)
        a_q = qh @ pq.transpose(0, 2, 1)   # (H, N, L + 4): q_i . P_b for all buckets
        a_k = kh @ pk.transpose(0, 2, 1)
        score_dot_counter.add(2 * heads * n * pq.shape[1])
        topo_term = a_q[:, rows, t_idx] + a_k[:, cols, t_idx]
        scores += topo_term
        cache.update(pq=pq, pk=pk)
    if mode.use_edge:
        eq = split_heads(edge.query.value.data, heads)
        ek = split_heads(edge.key.value.data, heads)
        b_q = qh @ eq.transpose(0, 2, 1)   # (H, N, E + 3)
        b_k = kh @ ek.transpose(0, 2, 1)
        score_dot_counter.add(2 * heads * n * eq.shape[1])
        edge_term = b_q[:, rows, e_idx] + b_k[:, cols, e_idx]
        scores += edge_term
        cache.update(eq=eq, ek=ek)
    scores *= scale
    parts = (dot, topo_term, edge_term) if want_parts else None
    return scores, parts, cache


def _scatter_rowwise(target, index2d, values, axis_index):
    """target[h][axis_index, index2d] += values[h] for every head."""
    for h in range(target.shape[0]):
        np.add.at(target[h], (axis_index, index2d), values[h])


def _grpe_scores_fast_bwd(d_scores, cache):
    qh, kh = cache["qh"], cache["kh"]
    t_idx, e_idx, mode = cache["t_idx"], cache["e_idx"], cache["mode"]
    heads, n, _ = qh.shape
    rows2d = np.broadcast_to(np.arange(n)[:, None], (n, n))
    cols2d = np.broadcast_to(np.arange(n)[None, :], (n, n))
    g = d_scores * cache["scale"]
    dqh = g @ kh
    dkh = g.transpose(0, 2, 1) @ qh
    if mode.use_topology:
        pq, pk = cache["pq"], cache["pk"]
        da_q = np.zeros((heads, n, pq.shape[1]))
        da_k = np.zeros((heads, n, pk.shape[1]))
        _scatter_rowwise(da_q, t_idx, g, rows2d)
        _scatter_rowwise(da_k, t_idx, g, cols2d)
        dqh += da_q @ pq
        dkh += da_k @ pk
        _fold_table_grad(cache["topology"].query, da_q.transpose(0, 2, 1) @ qh)
        _fold_table_grad(cache["topology"].key, da_k.transpose(0, 2, 1) @ kh)
    if mode.use_edge:
        eq, ek = cache["eq"], cache["ek"]
        db_q = np.zeros((heads, n, eq.shape[1]))
        db_k = np.zeros((heads, n, ek.shape[1]))
        _scatter_rowwise(db_q, e_idx, g, rows2d)
        _scatter_rowwise(db_k, e_idx, g, cols2d)
        dqh += db_q @ eq
        dkh += db_k @ ek
        _fold_table_grad(cache["edge"].query, db_q.transpose(0, 2, 1) @ qh)
        _fold_table_grad(cache["edge"].key, db_k.transpose(0, 2, 1) @ kh)
    return dqh, dkh


def _graphormer_scores_fwd(qh, kh, t_idx, e_idx, gbias, want_parts):
    heads, n, dh = qh.shape
    scale = 1.0 / math.sqrt(dh)
    dot = qh @ kh.transpose(0, 2, 1)
    b = gbias.b.value.data
    topo_term = b[t_idx].transpose(2, 0, 1)              # (H, N, N)
    ew = gbias.edge_emb.value.data @ gbias.w.value.data  # (E + 3, H or 1)
    edge_term = ew[e_idx].transpose(2, 0, 1)
    if gbias.shared_w:
        edge_term = np.broadcast_to(edge_term, (heads, n, n))
    # Only the dot term is scaled; the biases are added as-is.
    scores = dot * scale + topo_term + edge_term
    cache = {"kind": "graphormer", "qh": qh, "kh": kh, "t_idx": t_idx,
             "e_idx": e_idx, "gbias": gbias, "scale": scale}
    parts = (dot, np.array(topo_term), np.array(edge_term)) if want_parts else None
    return scores, parts, cache


def _graphormer_scores_bwd(d_scores, cache):
    qh, kh = cache["qh"], cache["kh"]
    t_idx, e_idx, gbias = cache["t_idx"], cache["e_idx"], cache["gbias"]
    heads = qh.shape[0]
    g = d_scores * cache["scale"]
    dqh = g @ kh
    dkh = g.transpose(0, 2, 1) @ qh
    for h in range(heads):
        np.add.at(gbias.b.grad.data[:, h], t_idx.ravel(), d_scores[h].ravel())
    w = gbias.w.value.data
    d_ew = np.zeros((gbias.edge_emb.shape[0], w.shape[1]))
    if gbias.shared_w:
        np.add.at(d_ew[:, 0], e_idx.ravel(), d_scores.sum(axis=0).ravel())
    else:
        for h in range(heads):
            np.add.at(d_ew[:, h], e_idx.ravel(), d_scores[h].ravel())
    gbias.edge_emb.grad.data += d_ew @ w.T
    gbias.w.grad.data += gbias.edge_emb.value.data.T @ d_ew
    return dqh, dkh


def _scores_fwd(mode, qh, kh, t_idx, e_idx, topology, edge, gbias, want_parts):
    if mode.kind == "none":
        return _plain_scores_fwd(qh, kh, want_parts)
    if mode.kind == "grpe_naive":
        return _grpe_scores_naive_fwd(qh, kh, t_idx, e_idx, topology, edge, mode, want_parts)
    if mode.kind == "grpe_fast":
        return _grpe_scores_fast_fwd(qh, kh, t_idx, e_idx, topology, edge, mode, want_parts)
    if mode.kind == "graphormer":
        return _graphormer_scores_fwd(qh, kh, t_idx, e_idx, gbias, want_parts)
    raise ConfigError(f"unknown attention mode {mode.kind!r}")


def _scores_bwd(d_scores, cache):
    kind = cache["kind"]
    if kind == "none":
        return _plain_scores_bwd(d_scores, cache)
    if kind == "grpe_naive":
        return _grpe_scores_naive_bwd(d_scores, cache)
    if kind == "grpe_fast":
        return _grpe_scores_fast_bwd(d_scores, cache)
    return _graphormer_scores_bwd(d_scores, cache)


# ---------------------------------------------------------------------------
# value kernels
# ---------------------------------------------------------------------------

def _values_plain_fwd(attn, vh):
    zh = attn @ vh
    return zh, {"kind": "plain", "attn": attn, "vh": vh}


def _values_plain_bwd(d_zh, cache):
    d_attn = d_zh @ cache["vh"].transpose(0, 2, 1)
    d_vh = cache["attn"].transpose(0, 2, 1) @ d_zh
    return d_attn, d_vh


def _grpe_values_fast_fwd(attn, vh, t_idx, e_idx, topology, edge):
    heads, n, _ = attn.shape
    rows2d = np.broadcast_to(np.arange(n)[:, None], (n, n))
    pv = split_heads(topology.value.value.data, heads)
    ev = split_heads(edge.value.value.data, heads)
    # Bucket masses: total attention each query spends on every bucket.
    mass_t = np.zeros((heads, n, pv.shape[1]))
    mass_e = np.zeros((heads, n, ev.shape[1]))
    _scatter_rowwise(mass_t, t_idx, attn, rows2d)
    _scatter_rowwise(mass_e, e_idx, attn, rows2d)
    zh = attn @ vh
    zh += mass_t @ pv
    zh += mass_e @ ev
    cache = {"kind": "grpe_fast", "attn": attn, "vh": vh, "t_idx": t_idx, "e_idx": e_idx,
             "topology": topology, "edge": edge, "pv": pv, "ev": ev,
             "mass_t": mass_t, "mass_e": mass_e}
    return zh, cache


def _grpe_values_fast_bwd(d_zh, cache):
    attn, vh = cache["attn"], cache["vh"]
    t_idx, e_idx = cache["t_idx"], cache["e_idx"]
    pv, ev = cache["pv"], cache["ev"]
    n = attn.shape[1]
    rows = np.arange(n)[:, None]
    d_attn = d_zh @ vh.transpose(0, 2, 1)
    d_vh = attn.transpose(0, 2, 1) @ d_zh
    d_mass_t = d_zh @ pv.transpose(0, 2, 1)
    d_mass_e = d_zh @ ev.transpose(0, 2, 1)
    d_attn += d_mass_t[:, rows, t_idx]
    d_attn += d_mass_e[:, rows, e_idx]
    _fold_table_grad(cache["topology"].value, cache["mass_t"].transpose(0, 2, 1) @ d_zh)
    _fold_table_grad(cache["edge"].value, cache["mass_e"].transpose(0, 2, 1) @ d_zh)
    return d_attn, d_vh


def _grpe_values_naive_fwd(attn, vh, t_idx, e_idx, topology, edge):
    heads, n, _ = attn.shape
    pv = split_heads(topology.value.value.data, heads)
    ev = split_heads(edge.value.value.data, heads)
    zh = np.zeros_like(vh)
    for h in range(heads):
        for i in range(n):
            acc = np.zeros(vh.shape[2])
            for j in range(n):
                acc += attn[h, i, j] * (vh[h, j] + pv[h][t_idx[i, j]] + ev[h][e_idx[i, j]])
            zh[h, i] = acc
    cache = {"kind": "grpe_naive", "attn": attn, "vh": vh, "t_idx": t_idx, "e_idx": e_idx,
             "topology": topology, "edge": edge, "pv": pv, "ev": ev}
    return zh, cache


def _grpe_values_naive_bwd(d_zh, cache):
    attn, vh = cache["attn"], cache["vh"]
    t_idx, e_idx = cache["t_idx"], cache["e_idx"]
    pv, ev = cache["pv"], cache["ev"]
    heads, n, _ = attn.shape
    d_attn = np.zeros_like(attn)
    d_vh = np.zeros_like(vh)
    dpv = np.zeros_like(pv)
    dev = np.zeros_like(ev)
    for h in range(heads):
        for i in range(n):
            g = d_zh[h, i]
            for j in range(n):
                t, e = t_idx[i, j], e_idx[i, j]
                d_attn[h, i, j] = np.dot(g, vh[h, j] + pv[h][t] + ev[h][e])
                a = attn[h, i, j]
                d_vh[h, j] += a * g
                dpv[h][t] += a * g
                dev[h][e] += a * g
    _fold_table_grad(cache["topology"].value, dpv)
    _fold_table_grad(cache["edge"].value, dev)
    return d_attn, d_vh


def _values_fwd(mode, attn, vh, t_idx, e_idx, topology, edge):
    if mode.kind in ("grpe_naive", "grpe_fast") and mode.use_value:
        if mode.kind == "grpe_naive":
            return _grpe_values_naive_fwd(attn, vh, t_idx, e_idx, topology, edge)
        return _grpe_values_fast_fwd(attn, vh, t_idx, e_idx, topology, edge)
    return _values_plain_fwd(attn, vh)


def _values_bwd(d_zh, cache):
    if cache["kind"] == "grpe_naive":
        return _grpe_values_naive_bwd(d_zh, cache)
    if cache["kind"] == "grpe_fast":
        return _grpe_values_fast_bwd(d_zh, cache)
    return _values_plain_bwd(d_zh, cache)


# ---------------------------------------------------------------------------
# public single-call surfaces
# ---------------------------------------------------------------------------

def grpe_scores_naive(q, k, topo_idx, edge_idx, topology, edge, heads: int = 1,
                      use_topology: bool = True, use_edge: bool = True) -> np.ndarray:
    """Reference per-pair score map; returns a (heads, N, N) array."""
    mode = PEMode("grpe_naive", use_topology, use_edge)
    qh, kh = split_heads(_as_np(q), heads), split_heads(_as_np(k), heads)
    scores, _, _ = _grpe_scores_naive_fwd(qh, kh, topo_idx, edge_idx, topology, edge, mode, False)
    return scores


def grpe_scores_fast(q, k, topo_idx, edge_idx, topology, edge, heads: int = 1,
                     use_topology: bool = True, use_edge: bool = True) -> np.ndarray:
    """Precompute-and-lookup score map; must match the naive path."""
    mode = PEMode("grpe_fast", use_topology, use_edge)
    qh, kh = split_heads(_as_np(q), heads), split_heads(_as_np(k), heads)
    scores, _, _ = _grpe_scores_fast_fwd(qh, kh, topo_idx, edge_idx, topology, edge, mode, False)
    return scores


def grpe_values(attn, v, topo_idx, edge_idx, topology, edge, heads: int = 1,
                fast: bool = True) -> np.ndarray:
    """Attention-weighted values with per-pair encoding rows added.

    ``attn`` is (heads, N, N) row-stochastic, ``v`` is (N, d_z); the result
    is (N, d_z) with heads merged.
    """
    attn = np.asarray(attn, dtype=np.float64)
    vh = split_heads(_as_np(v), heads)
    fwd = _grpe_values_fast_fwd if fast else _grpe_values_naive_fwd
    zh, _ = fwd(attn, vh, topo_idx, edge_idx, topology, edge)
    return merge_heads(zh)


def graphormer_scores(q, k, topo_idx, edge_idx, gbias, heads: int = 1) -> np.ndarray:
    """Scalar-bias score map: scaled dot plus bucket biases, per head."""
    qh, kh = split_heads(_as_np(q), heads), split_heads(_as_np(k), heads)
    scores, _, _ = _graphormer_scores_fwd(qh, kh, topo_idx, edge_idx, gbias, False)
    return scores


def plain_attention(x, params: AttentionParams, want_trace: bool = True):
    """Vanilla multi-head self-attention; returns (z, trace)."""
    return multi_head_attention(x, params, "none", want_trace=want_trace)


def multi_head_attention(x, params: AttentionParams, pe_mode, topo_idx=None, edge_idx=None,
                         topology=None, edge=None, graphormer=None, want_trace: bool = False):
    """One attention layer forward pass; returns (z, trace).

    ``pe_mode`` is a mode name or a ``PEMode``. The grpe modes require the
    index matrices and both table sets; graphormer requires the indices
    and its bias parameters.
    """
    mode = pe_mode if isinstance(pe_mode, PEMode) else PEMode(pe_mode)
    if mode.kind in ("grpe_naive", "grpe_fast") and (topo_idx is None or topology is None or edge is None):
        raise ConfigError("grpe modes need index matrices and encoding tables")
    if mode.kind == "graphormer" and (topo_idx is None or graphormer is None):
        raise ConfigError("graphormer mode needs index matrices and bias parameters")
    z, trace, _ = mha_forward(_as_np(x), params, mode, topo_idx, edge_idx,
                              topology, edge, graphormer, want_trace=want_trace)
    return Tensor(z), trace


# ---------------------------------------------------------------------------
# multi-head attention with cache (training path)
# ---------------------------------------------------------------------------

def mha_forward(x: np.ndarray, params: AttentionParams, mode: PEMode,
                topo_idx, edge_idx, topology, edge, gbias, want_trace: bool = False):
    if x.ndim != 2 or x.shape[1] != params.w_query.shape[0]:
        raise ShapeError(f"attention input {x.shape} does not match W ({params.w_query.shape})")
    q = x @ params.w_query.value.data
    k = x @ params.w_key.value.data
    v = x @ params.w_value.value.data
    h = params.heads
    qh, kh, vh = split_heads(q, h), split_heads(k, h), split_heads(v, h)

    scores, parts, s_cache = _scores_fwd(mode, qh, kh, topo_idx, edge_idx,
                                         topology, edge, gbias, want_trace)
    attn = softmax_lastdim(scores)
    zh, v_cache = _values_fwd(mode, attn, vh, topo_idx, edge_idx, topology, edge)
    z = merge_heads(zh)
    out = z @ params.w_out.value.data

    trace = None
    if want_trace:
        dot, topo_term, edge_term = parts
        trace = AttentionTrace(attn=attn, dot=dot, topology=topo_term, edge=edge_term)
    cache = {"x": x, "params": params, "attn": attn, "z": z,
             "s_cache": s_cache, "v_cache": v_cache}
    return out, trace, cache


def mha_backward(d_out: np.ndarray, cache) -> np.ndarray:
    params: AttentionParams = cache["params"]
    x, z, attn = cache["x"], cache["z"], cache["attn"]
    h = params.heads

    params.w_out.grad.data += z.T @ d_out
    d_z = d_out @ params.w_out.value.data.T
    d_zh = split_heads(d_z, h)

    d_attn, d_vh = _values_bwd(d_zh, cache["v_cache"])
    d_scores = softmax_lastdim_backward(d_attn, attn)
    d_qh, d_kh = _scores_bwd(d_scores, cache["s_cache"])

    d_q, d_k, d_v = merge_heads(d_qh), merge_heads(d_kh), merge_heads(d_vh)
    params.w_query.grad.data += x.T @ d_q
    params.w_key.grad.data += x.T @ d_k
    params.w_value.grad.data += x.T @ d_v
    d_x = d_q @ params.w_query.value.data.T
    d_x += d_k @ params.w_key.value.data.T
    d_x += d_v @ params.w_value.value.data.T
    return d_x


# ---------------------------------------------------------------------------
# transformer block (pre-norm)
# ---------------------------------------------------------------------------

@dataclass
class BlockParams:
    attn: AttentionParams
    ln1_gain: Parameter
    ln1_bias: Parameter
    ln2_gain: Parameter
    ln2_bias: Parameter
    ffn_w1: Parameter
    ffn_b1: Parameter
    ffn_w2: Parameter
    ffn_b2: Parameter


class TransformerBlock:
    """Pre-norm block: x + MHA(LN(x)), then + FFN(LN(.)).

    The FFN is a single hidden layer with relu. Encoding tables (and the
    scalar-bias parameters, when used) are shared across blocks by holding
    references to the same objects.
    """

    def __init__(self, params: BlockParams, topology=None, edge=None, graphormer=None):
        self.params = params
        self.topology = topology
        self.edge = edge
        self.graphormer = graphormer

    def forward(self, x: np.ndarray, mode: PEMode, topo_idx, edge_idx,
                want_trace: bool = False, dropout: float = 0.0, rng=None):
        p = self.params
        u = layer_norm_rows(x, p.ln1_gain.value.data, p.ln1_bias.value.data)
        a, trace, mha_cache = mha_forward(u, p.attn, mode, topo_idx, edge_idx,
                                          self.topology, self.edge, self.graphormer,
                                          want_trace=want_trace)
        mask_a = None
        if dropout > 0.0:
            mask_a = (rng.random(a.shape) >= dropout) / (1.0 - dropout)
            a = a * mask_a
        h = x + a

        w = layer_norm_rows(h, p.ln2_gain.value.data, p.ln2_bias.value.data)
        pre = w @ p.ffn_w1.value.data + p.ffn_b1.value.data
        act = np.maximum(pre, 0.0)
        f = act @ p.ffn_w2.value.data + p.ffn_b2.value.data
        mask_f = None
        if dropout > 0.0:
            mask_f = (rng.random(f.shape) >= dropout) / (1.0 - dropout)
            f = f * mask_f
        out = h + f

        cache = {"x": x, "u": u, "h": h, "w": w, "pre": pre, "act": act,
                 "mha_cache": mha_cache, "mask_a": mask_a, "mask_f": mask_f}
        return out, trace, cache

    def backward(self, d_out: np.ndarray, cache) -> np.ndarray:
        p = self.params
        d_f = d_out
        if cache["mask_f"] is not None:
            d_f = d_f * cache["mask_f"]
        p.ffn_b2.grad.data += d_f.sum(axis=0)
        p.ffn_w2.grad.data += cache["act"].T @ d_f
        d_act = d_f @ p.ffn_w2.value.data.T
        d_pre = d_act * (cache["pre"] > 0.0)
        p.ffn_b1.grad.data += d_pre.sum(axis=0)
        p.ffn_w1.grad.data += cache["w"].T @ d_pre
        d_w = d_pre @ p.ffn_w1.value.data.T
        d_h_ln, d_g2, d_b2 = layer_norm_rows_backward(d_w, cache["h"], p.ln2_gain.value.data)
        p.ln2_gain.grad.data += d_g2
        p.ln2_bias.grad.data += d_b2
        d_h = d_out + d_h_ln

        d_a = d_h
        if cache["mask_a"] is not None:
            d_a = d_a * cache["mask_a"]
        d_u = mha_backward(d_a, cache["mha_cache"])
        d_x_ln, d_g1, d_b1 = layer_norm_rows_backward(d_u, cache["x"], p.ln1_gain.value.data)
        p.ln1_gain.grad.data += d_g1
        p.ln1_bias.grad.data += d_b1
        return d_h + d_x_ln
