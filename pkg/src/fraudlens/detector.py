"""Heterogeneous attention fraud detector: forward passes, training, scoring.

Two forward implementations share one parameter set:

* a tape-based differentiable pass (training and mask optimization), built
  from autodiff primitives with constant 0/1 selection matrices doing the
  gather/scatter work, and
* a vectorized eval-only pass that scores many edge-coalition or feature
  variants of one subgraph in a single numpy batch (prediction, Shapley
  value functions, what-if queries).

A property test keeps the two numerically identical.
"""

from __future__ import annotations

import base64
import copy
import hashlib
import json
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TransactionRecord, engineer_deltas
from .errors import ConfigError, DataError, SchemaError
from .graph import (
    EDGE_TYPES,
    NODE_TYPES,
    FeatureStats,
    HeteroGraph,
    Subgraph,
    build_graph,
    encode_inputs,
    sample_neighborhood,
)
from .metrics import Metrics, compute_metrics

__all__ = [
    "Hyper",
    "RiskScore",
    "Checkpoint",
    "TrainResult",
    "init_params",
    "param_names",
    "prepare_subgraph",
    "conv_layer_forward",
    "forward_logits",
    "risk_head",
    "batched_fraud_probability",
    "train",
    "predict",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_hash",
]

CHECKPOINT_MAGIC = "FRAUDLENS-CKPT 1"


@dataclass(frozen=True)
class Hyper:
    """Detector hyperparameters. Width is the shared model/input width; the
    per-head key length is width // heads."""

    layers: int = 3
    heads: int = 4
    width: int = 32
    hidden: tuple[int, int] = (64, 32)
    dropout: float = 0.1
    epochs: int = 4
    batch_size: int = 64
    learning_rate: float = 2e-3
    class_weight: float = 1.0
    seed: int = 0
    single_weighting: bool = False
    use_deltas: bool = True
    sample_depth: int = 6
    sample_width: int = 16
    sample_cap: int = 96

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ConfigError("width must be divisible by heads")
        if self.width < 3:
            raise ConfigError("width must cover the three transaction features")
        if min(self.layers, self.heads, self.epochs, self.batch_size, *self.hidden) < 1:
            raise ConfigError("all sizes must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def d_k(self) -> int:
        return self.width // self.heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Hyper":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def param_names(hyper: Hyper) -> list[str]:
    names = []
    for kind in ("q", "k", "v"):
        for ntype in NODE_TYPES:
            names += [f"attn.{kind}.{ntype}.weight", f"attn.{kind}.{ntype}.bias"]
    names += [f"attn.w_att.{ntype}" for ntype in NODE_TYPES]
    names += ["embed.node_type", "embed.edge_type"]
    names += ["head.fc1.weight", "head.fc1.bias", "head.ln1.gamma", "head.ln1.beta",
              "head.fc2.weight", "head.fc2.bias", "head.ln2.gamma", "head.ln2.beta",
              "head.out.weight", "head.out.bias"]
    return names


def init_params(hyper: Hyper, seed: int | None = None) -> dict[str, Tensor]:
    """Xavier for projection weights, zeros for attention vectors and type
    embeddings, unit/zero layer-norm affines."""
    seed = hyper.seed if seed is None else seed
    ss = np.random.SeedSequence([seed, 0xD37EC])
    children = iter(ss.spawn(256))
    w, h, dk = hyper.width, hyper.heads, hyper.d_k
    params: dict[str, Tensor] = {}
    for kind in ("q", "k", "v"):
        for ntype in NODE_TYPES:
            blocks = [ad.xavier_init(w, dk, next(children)).data for _ in range(h)]
            params[f"attn.{kind}.{ntype}.weight"] = Tensor(np.concatenate(blocks, axis=1), requires_grad=True)
            params[f"attn.{kind}.{ntype}.bias"] = Tensor(np.zeros((1, h * dk)), requires_grad=True)
    for ntype in NODE_TYPES:
        params[f"attn.w_att.{ntype}"] = Tensor(np.zeros((1, dk)), requires_grad=True)
    params["embed.node_type"] = Tensor(np.zeros((len(NODE_TYPES), w)), requires_grad=True)
    params["embed.edge_type"] = Tensor(np.zeros((len(EDGE_TYPES), w)), requires_grad=True)

    h1, h2 = hyper.hidden
    head_dims = [(w + 3, h1, "fc1"), (h1, h2, "fc2"), (h2, 2, "out")]
    for rows, cols, name in head_dims:
        params[f"head.{name}.weight"] = Tensor(ad.xavier_init(rows, cols, next(children)).data, requires_grad=True)
        params[f"head.{name}.bias"] = Tensor(np.zeros((1, cols)), requires_grad=True)
    for name, size in (("ln1", h1), ("ln2", h2)):
        params[f"head.{name}.gamma"] = Tensor(np.ones((1, size)), requires_grad=True)
        params[f"head.{name}.beta"] = Tensor(np.zeros((1, size)), requires_grad=True)
    return params


class PreparedSubgraph:
    """Subgraph encoded as index arrays and small constants for both passes.

    Each undirected subgraph edge yields two directed messages; messages are
    sorted by target node so attention segments are contiguous runs. Messages
    into nodes the target cannot be influenced by within `layers` hops are
    dropped up front: by induction over layers, the representation of the
    target after L layers only reads messages into nodes at subgraph distance
    at most L-1, so the pruned pass is exact for the target while skipping
    roughly half the work on depth-6 neighborhoods.
    """

    def __init__(self, subgraph: Subgraph, hyper: Hyper):
        self.subgraph = subgraph
        self.hyper = hyper
        n = subgraph.n_nodes
        w = hyper.width
        enc = encode_inputs(subgraph, feature_width=w)
        self.n = n
        self.n_edges = len(subgraph.edges)

        selector = np.array([1.0, 1.0, 1.0]) if hyper.use_deltas else np.array([1.0, 0.0, 0.0])
        self.feats3 = np.zeros((n, 3))
        for i, ntype in enumerate(subgraph.node_types):
            if ntype == "Transaction":
                self.feats3[i] = subgraph.features[i] * selector
        self.feature_selector = selector
        self.type_index = np.array([NODE_TYPES.index(t) for t in subgraph.node_types])
        self.target_pos = 0
        self.target_positions = [0]
        self.node_type_onehot = enc.node_type_onehot

        # true subgraph distances from the target over member edges
        adj: list[list[int]] = [[] for _ in range(n)]
        for e in subgraph.edges:
            adj[e.src].append(e.dst)
            adj[e.dst].append(e.src)
        dist = np.full(n, n + 1, dtype=np.int64)
        dist[self.target_pos] = 0
        frontier = [self.target_pos]
        d = 0
        while frontier:
            d += 1
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if dist[v] > d:
                        dist[v] = d
                        nxt.append(v)
            frontier = nxt
        self.distance = dist

        msgs = []  # (src, tgt, etype_index, undirected_index)
        keep_depth = hyper.layers - 1
        for k, e in enumerate(subgraph.edges):
            et = EDGE_TYPES.index(e.etype)
            if dist[e.src] <= keep_depth:
                msgs.append((e.dst, e.src, et, k))  # entity -> transaction
            if dist[e.dst] <= keep_depth:
                msgs.append((e.src, e.dst, et, k))  # transaction -> entity
        msgs.sort(key=lambda t: (t[1], t[0], t[2]))
        m = len(msgs)
        self.m = m
        self.msg_src = np.array([a for a, _, _, _ in msgs], dtype=np.int64)
        self.msg_tgt = np.array([b for _, b, _, _ in msgs], dtype=np.int64)
        self.msg_etype = np.array([c for _, _, c, _ in msgs], dtype=np.int64)
        self.msg_uedge = np.array([d_ for _, _, _, d_ in msgs], dtype=np.int64)
        self._finish_init()

    def _finish_init(self):
        """Derived structure shared with UnionPrep: segments, per-type
        orders, gather plans, and tape constants."""
        n, m, hyper = self.n, self.m, self.hyper
        if m:
            change = np.flatnonzero(np.r_[True, np.diff(self.msg_tgt) != 0])
            self.seg_starts = change
            self.seg_nodes = self.msg_tgt[change]
            self.seg_counts = np.diff(np.r_[change, m])
        else:
            self.seg_starts = np.zeros(0, dtype=np.int64)
            self.seg_nodes = np.zeros(0, dtype=np.int64)
            self.seg_counts = np.zeros(0, dtype=np.int64)
        degree = np.zeros(n)
        np.add.at(degree, self.msg_tgt, 1.0)
        self.degree = degree
        self.seg_ids = self.msg_tgt

        # per-type row sets, in NODE_TYPES order
        self.node_rows: dict[str, np.ndarray] = {}
        for ti, ntype in enumerate(NODE_TYPES):
            rows = np.flatnonzero(self.type_index == ti)
            if rows.size:
                self.node_rows[ntype] = rows
        src_types = self.type_index[self.msg_src] if m else np.zeros(0, dtype=np.int64)
        self.msg_rows: dict[str, np.ndarray] = {}
        for ti, ntype in enumerate(NODE_TYPES):
            rows = np.flatnonzero(src_types == ti)
            if rows.size:
                self.msg_rows[ntype] = rows

        # positions of each node/message inside the type-blocked ordering
        node_order = np.concatenate([self.node_rows[t] for t in NODE_TYPES if t in self.node_rows])
        self.node_pos_in_blocks = np.empty(n, dtype=np.int64)
        self.node_pos_in_blocks[node_order] = np.arange(n)
        if m:
            msg_order = np.concatenate([self.msg_rows[t] for t in NODE_TYPES if t in self.msg_rows])
            self.msg_pos_in_blocks = np.empty(m, dtype=np.int64)
            self.msg_pos_in_blocks[msg_order] = np.arange(m)
        else:
            self.msg_pos_in_blocks = np.zeros(0, dtype=np.int64)

        # gather plans (backward scatter-add) for the hot index arrays
        self.adj_src_by_type = {t: ad.gather_adjoint(self.msg_src[rows], n)
                                for t, rows in self.msg_rows.items()}
        self.adj_msg_blocks = ad.gather_adjoint(self.msg_pos_in_blocks, m)
        qidx = self.node_pos_in_blocks[self.msg_tgt] if m else np.zeros(0, dtype=np.int64)
        self.q_score_index = qidx
        self.adj_q_scores = ad.gather_adjoint(qidx, n)
        self.adj_uedge = ad.gather_adjoint(self.msg_uedge, self.n_edges)

        # tape constants
        w = hyper.width
        self.pad_map = Tensor(np.eye(3, w))
        self.feats3_t = Tensor(self.feats3)
        self.node_onehot_t = Tensor(self.node_type_onehot)
        self.edge_onehot_by_type = {
            t: Tensor(np.eye(len(EDGE_TYPES))[self.msg_etype[rows]])
            for t, rows in self.msg_rows.items()
        }
        has_nb = (degree > 0).astype(float).reshape(n, 1)
        self.r_mask = Tensor(has_nb)
        self.r_inv = Tensor(1.0 - has_nb)
        h, dk = hyper.heads, hyper.d_k
        sumblk = np.zeros((h * dk, h))
        for i in range(h):
            sumblk[i * dk:(i + 1) * dk, i] = 1.0
        self.sum_block = Tensor(sumblk)
        self.expand_block = Tensor(sumblk.T.copy())
        self.inv_sqrt_dk = Tensor(np.full((1, 1), 1.0 / np.sqrt(dk)))


def prepare_subgraph(subgraph: Subgraph, hyper: Hyper) -> PreparedSubgraph:
    return PreparedSubgraph(subgraph, hyper)


class UnionPrep(PreparedSubgraph):
    """Several prepared subgraphs joined block-diagonally so one tape pass
    scores a whole minibatch; segments stay contiguous because node offsets
    increase across blocks."""

    def __init__(self, preps: list[PreparedSubgraph]):
        self.hyper = preps[0].hyper
        offsets = np.cumsum([0] + [p.n for p in preps])
        self.n = int(offsets[-1])
        self.m = int(sum(p.m for p in preps))
        self.n_edges = sum(p.n_edges for p in preps)
        eoffsets = np.cumsum([0] + [p.n_edges for p in preps])
        self.target_positions = [int(offsets[i] + p.target_pos) for i, p in enumerate(preps)]
        self.target_pos = self.target_positions[0]
        self.feature_selector = preps[0].feature_selector
        self.feats3 = np.concatenate([p.feats3 for p in preps], axis=0)
        self.type_index = np.concatenate([p.type_index for p in preps])
        self.node_type_onehot = np.concatenate([p.node_type_onehot for p in preps], axis=0)
        self.msg_src = np.concatenate([p.msg_src + off for p, off in zip(preps, offsets)])
        self.msg_tgt = np.concatenate([p.msg_tgt + off for p, off in zip(preps, offsets)])
        self.msg_etype = np.concatenate([p.msg_etype for p in preps])
        self.msg_uedge = np.concatenate([p.msg_uedge + eoff for p, eoff in zip(preps, eoffsets)])
        self._finish_init()


def _score_weights(params: dict[str, Tensor], kind: str, ntype: str, heads: int,
                   sum_block: Tensor) -> tuple[Tensor, Tensor]:
    """Fold one Q/K projection with the type attention vector into a tiny
    (width, heads) map: ((X W) * tile(w_att)) @ sum == X @ ((W * tile) @ sum)."""
    w = params[f"attn.{kind}.{ntype}.weight"]
    b = params[f"attn.{kind}.{ntype}.bias"]
    tile = ad.concat([params[f"attn.w_att.{ntype}"]] * heads, axis=1)
    return ad.matmul(ad.mul(w, tile), sum_block), ad.matmul(ad.mul(b, tile), sum_block)


def conv_layer_forward(prep: PreparedSubgraph, h_prev: Tensor, params: dict[str, Tensor],
                       layer: int, mode: str, rng: np.random.Generator | None = None,
                       edge_mask: Tensor | None = None,
                       collect: list | None = None) -> Tensor:
    """One heterogeneous attention layer over the prepared subgraph.

    Per head, the raw score of a message is
    ``(key . w_att[src type] + query . w_att[tgt type]) / sqrt(d_k)``;
    weights are the softmax of raw scores over each target's neighbors; a
    message is the value vector scaled by dropout(raw score), weighted again
    by the softmax weight, averaged over neighbors, relu'd, concatenated over
    heads. Nodes with no incoming messages pass h_prev through unchanged.
    """
    hyper = prep.hyper
    if prep.m == 0:
        return h_prev
    heads = hyper.heads

    # query-side scores per node, type-blocked then restored to node order
    q_blocks = []
    for ntype, rows in prep.node_rows.items():
        wq, bq = _score_weights(params, "q", ntype, heads, prep.sum_block)
        q_blocks.append(ad.add(ad.matmul(ad.gather_rows(h_prev, rows), wq), bq))
    q_scores = ad.gather_rows(ad.concat(q_blocks, axis=0), prep.node_pos_in_blocks,
                              adjoint=ad.gather_adjoint(prep.node_pos_in_blocks, prep.n))

    # key scores and value vectors per message, blocked by source node type
    k_blocks = []
    v_blocks = []
    for ntype, rows in prep.msg_rows.items():
        h_src = ad.gather_rows(h_prev, prep.msg_src[rows], adjoint=prep.adj_src_by_type[ntype])
        if layer == 1:
            h_src = ad.add(h_src, ad.matmul(prep.edge_onehot_by_type[ntype], params["embed.edge_type"]))
        wk, bk = _score_weights(params, "k", ntype, heads, prep.sum_block)
        k_blocks.append(ad.add(ad.matmul(h_src, wk), bk))
        v_blocks.append(ad.add(ad.matmul(h_src, params[f"attn.v.{ntype}.weight"]),
                               params[f"attn.v.{ntype}.bias"]))
    k_scores = ad.gather_rows(ad.concat(k_blocks, axis=0), prep.msg_pos_in_blocks,
                              adjoint=prep.adj_msg_blocks)
    v_all = ad.gather_rows(ad.concat(v_blocks, axis=0), prep.msg_pos_in_blocks,
                           adjoint=prep.adj_msg_blocks)

    raw = ad.mul(ad.add(k_scores, ad.gather_rows(q_scores, prep.q_score_index,
                                                 adjoint=prep.adj_q_scores)),
                 prep.inv_sqrt_dk)
    att = ad.softmax(raw, segments=prep.seg_ids)
    if collect is not None:
        collect.append(att.data.copy())

    # expand(a) * expand(b) == expand(a * b), so scale per head first
    if hyper.single_weighting:
        scale = ad.dropout(att, hyper.dropout, mode, rng)
    else:
        scale = ad.mul(ad.dropout(raw, hyper.dropout, mode, rng), att)
    weighted = ad.mul(v_all, ad.matmul(scale, prep.expand_block))
    if edge_mask is not None:
        weighted = ad.mul(weighted, ad.gather_rows(edge_mask, prep.msg_uedge,
                                                   adjoint=prep.adj_uedge))

    h_new = ad.relu(ad.segment_mean(weighted, prep.seg_starts, prep.seg_counts,
                                    prep.seg_nodes, prep.n))
    return ad.add(ad.mul(h_new, prep.r_mask), ad.mul(h_prev, prep.r_inv))


def risk_head(h_target: Tensor, target_feats: Tensor, params: dict[str, Tensor],
              hyper: Hyper, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """tanh of the final representation, joined with the original features,
    through two hidden layers into two logits."""
    x = ad.concat([ad.tanh(h_target), target_feats], axis=1)
    for name in ("fc1", "fc2"):
        x = ad.relu(ad.add(ad.matmul(x, params[f"head.{name}.weight"]), params[f"head.{name}.bias"]))
        x = ad.dropout(x, hyper.dropout, mode, rng)
        ln = "ln1" if name == "fc1" else "ln2"
        x = ad.layer_norm(x, params[f"head.{ln}.gamma"], params[f"head.{ln}.beta"])
    return ad.add(ad.matmul(x, params["head.out.weight"]), params["head.out.bias"])


def forward_logits(prep, params: dict[str, Tensor], mode: str,
                   rng: np.random.Generator | None = None,
                   edge_mask: Tensor | None = None,
                   feature_mask: Tensor | None = None,
                   collect: list | None = None) -> Tensor:
    """Forward pass to the class logits, one row per target transaction.

    ``prep`` is a single PreparedSubgraph (one logits row) or a UnionPrep
    (one row per member subgraph).
    """
    hyper = prep.hyper
    if feature_mask is not None:
        feats3 = ad.mul(prep.feats3_t, feature_mask)
        feats_pad = ad.matmul(feats3, prep.pad_map)
    else:
        feats3 = prep.feats3_t
        feats_pad = ad.matmul(prep.feats3_t, prep.pad_map)
    h = ad.add(feats_pad, ad.matmul(prep.node_onehot_t, params["embed.node_type"]))
    for layer in range(1, hyper.layers + 1):
        h = conv_layer_forward(prep, h, params, layer, mode, rng,
                               edge_mask=edge_mask, collect=collect)
    h_target = ad.gather_rows(h, prep.target_positions)
    target_feats = ad.gather_rows(feats3, prep.target_positions)
    return risk_head(h_target, target_feats, params, hyper, mode, rng)


# ---------------------------------------------------------------------------
# Vectorized eval-only forward: scores B variants of one subgraph at once.
# ---------------------------------------------------------------------------

def _np_params(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def batched_fraud_probability(prep: PreparedSubgraph, params: dict[str, Tensor],
                              edge_present: np.ndarray | None = None,
                              target_features: np.ndarray | None = None) -> np.ndarray:
    """Fraud probability for B variants of the prepared subgraph.

    ``edge_present``: optional (B, n_edges) boolean coalition matrix over the
    undirected subgraph edges; absent edges carry no messages in either
    direction and their targets renormalize or fall back to pass-through.
    ``target_features``: optional (B, 3) standardized replacement features
    for the target transaction. Eval mode only (dropout is identity).
    """
    p = _np_params(params)
    hyper = prep.hyper
    n, m, w = prep.n, prep.m, hyper.width
    heads, dk = hyper.heads, hyper.d_k

    if edge_present is None and target_features is None:
        b = 1
    else:
        b = edge_present.shape[0] if edge_present is not None else target_features.shape[0]
    if edge_present is not None and edge_present.shape != (b, prep.n_edges):
        raise ValueError("edge_present must be (B, n_edges)")
    if target_features is not None and target_features.shape != (b, 3):
        raise ValueError("target_features must be (B, 3)")

    feats3 = np.broadcast_to(prep.feats3, (b, n, 3)).copy()
    if target_features is not None:
        feats3[:, prep.target_pos, :] = target_features * prep.feature_selector

    node_emb = p["embed.node_type"][prep.type_index]           # (n, w)
    x = np.zeros((b, n, w))
    x[:, :, :3] = feats3
    h = x + node_emb

    if m == 0:
        return _head_probability(h[:, prep.target_pos, :], feats3[:, prep.target_pos, :], p, hyper)

    present = (np.ones((b, m)) if edge_present is None
               else edge_present[:, prep.msg_uedge].astype(float))
    starts = prep.seg_starts
    counts = prep.seg_counts
    type_rows = prep.node_rows
    msg_rows = prep.msg_rows
    w_att = np.concatenate([p[f"attn.w_att.{t}"] for t in NODE_TYPES], axis=0)  # (4, dk)
    w_src = w_att[src_types]        # (m, dk)
    w_node = w_att[prep.type_index]  # (n, dk)

    def rep(v):
        return np.repeat(v, counts, axis=1)

    for layer in range(1, hyper.layers + 1):
        q = np.zeros((b, n, heads * dk))
        for t, rows in type_rows.items():
            q[:, rows, :] = h[:, rows, :] @ p[f"attn.q.{t}.weight"] + p[f"attn.q.{t}.bias"]
        h_src = h[:, prep.msg_src, :]
        if layer == 1:
            h_src = h_src + p["embed.edge_type"][prep.msg_etype]
        k = np.zeros((b, m, heads * dk))
        v = np.zeros((b, m, heads * dk))
        for t, rows in msg_rows.items():
            k[:, rows, :] = h_src[:, rows, :] @ p[f"attn.k.{t}.weight"] + p[f"attn.k.{t}.bias"]
            v[:, rows, :] = h_src[:, rows, :] @ p[f"attn.v.{t}.weight"] + p[f"attn.v.{t}.bias"]

        k_scores = (k.reshape(b, m, heads, dk) * w_src[None, :, None, :]).sum(-1)
        q_scores = (q.reshape(b, n, heads, dk) * w_node[None, :, None, :]).sum(-1)
        raw = (k_scores + q_scores[:, prep.msg_tgt, :]) / np.sqrt(dk)

        mask3 = present[:, :, None]
        seg_max = np.maximum.reduceat(np.where(mask3 > 0, raw, -np.inf), starts, axis=1)
        seg_max = np.where(np.isfinite(seg_max), seg_max, 0.0)
        e = np.exp(raw - rep(seg_max)) * mask3
        denom = np.add.reduceat(e, starts, axis=1)
        att = e / rep(np.where(denom > 0, denom, 1.0))

        v4 = v.reshape(b, m, heads, dk)
        if hyper.single_weighting:
            weighted = v4 * att[:, :, :, None]
        else:
            weighted = v4 * raw[:, :, :, None] * att[:, :, :, None]
        weighted = (weighted * mask3[:, :, :, None]).reshape(b, m, heads * dk)

        seg_sum = np.add.reduceat(weighted, starts, axis=1)
        seg_present = np.add.reduceat(present, starts, axis=1)
        seg_mean = seg_sum / np.where(seg_present > 0, seg_present, 1.0)[:, :, None]

        h_new = np.zeros((b, n, heads * dk))
        h_new[:, prep.seg_nodes, :] = np.maximum(seg_mean, 0.0)
        has_nb = np.zeros((b, n), dtype=bool)
        has_nb[:, prep.seg_nodes] = seg_present > 0
        h = np.where(has_nb[:, :, None], h_new, h)

    return _head_probability(h[:, prep.target_pos, :], feats3[:, prep.target_pos, :], p, hyper)


def _head_probability(h_target: np.ndarray, feats: np.ndarray, p: dict[str, np.ndarray],
                      hyper: Hyper, eps: float = 1e-5) -> np.ndarray:
    x = np.concatenate([np.tanh(h_target), feats], axis=1)
    for name, ln in (("fc1", "ln1"), ("fc2", "ln2")):
        x = np.maximum(x @ p[f"head.{name}.weight"] + p[f"head.{name}.bias"], 0.0)
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        x = (x - mu) / np.sqrt(var + eps) * p[f"head.{ln}.gamma"] + p[f"head.{ln}.beta"]
    logits = x @ p["head.out.weight"] + p["head.out.bias"]
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez[:, 1] / ez.sum(axis=1)


# ---------------------------------------------------------------------------
# Training, prediction, evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RiskScore:
    p_fraud: float
    label: int


@dataclass
class Checkpoint:
    hyper: Hyper
    stats: FeatureStats
    params: dict[str, Tensor]
    train_seed: int

    def clone_params(self) -> dict[str, Tensor]:
        return {k: Tensor(v.data.copy(), requires_grad=False) for k, v in self.params.items()}


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    train_targets: list[tuple[str, int]]
    val_targets: list[tuple[str, int]]
    graph: HeteroGraph
    epoch_losses: list[float]
    val_average_precision: list[float]
    best_epoch: int


def stratified_split(targets: list[tuple[str, int]], val_fraction: float,
                     rng: np.random.Generator) -> tuple[list, list]:
    pos = [t for t in targets if t[1] == 1]
    neg = [t for t in targets if t[1] == 0]
    if not pos or not neg:
        raise ConfigError("training data must contain both classes")
    train, val = [], []
    for group in (neg, pos):
        idx = rng.permutation(len(group))
        n_val = max(1, int(round(len(group) * val_fraction)))
        val += [group[i] for i in idx[:n_val]]
        train += [group[i] for i in idx[n_val:]]
    return train, val


def _subgraph_cache(graph: HeteroGraph, hyper: Hyper):
    cache: dict[str, PreparedSubgraph] = {}

    def get(tid: str) -> PreparedSubgraph:
        prep = cache.get(tid)
        if prep is None:
            sub = sample_neighborhood(graph, tid, depth=hyper.sample_depth,
                                      width=hyper.sample_width, cap=hyper.sample_cap,
                                      seed=hyper.seed)
            prep = prepare_subgraph(sub, hyper)
            cache[tid] = prep
        return prep

    return get


def train(records: list[TransactionRecord], hyper: Hyper,
          val_fraction: float = 0.2, log=None) -> TrainResult:
    """Minibatch training with class-weighted cross-entropy.

    Deterministic per hyper.seed; the checkpoint returned is the parameter
    snapshot from the epoch with the best validation average precision.
    """
    if any(r.d_amount is None or r.d_time is None for r in records):
        records = engineer_deltas(records)
    targets = [(r.transaction_id, r.label) for r in records]
    rng_split = np.random.default_rng([hyper.seed, 1])
    train_targets, val_targets = stratified_split(targets, val_fraction, rng_split)

    train_ids = {t for t, _ in train_targets}
    stats = FeatureStats.fit([r for r in records if r.transaction_id in train_ids])
    graph = build_graph(records, stats)

    n_train = len(train_targets)
    n_pos = sum(1 for _, y in train_targets if y == 1)
    n_neg = n_train - n_pos
    weight_by_class = {
        0: n_train / (2.0 * n_neg),
        1: hyper.class_weight * n_train / (2.0 * n_pos),
    }

    params = init_params(hyper)
    names = param_names(hyper)
    leaves = [params[k] for k in names]
    opt = ad.Adam(leaves, lr=hyper.learning_rate)
    rng_order = np.random.default_rng([hyper.seed, 2])
    rng_dropout = np.random.default_rng([hyper.seed, 3])
    get_prep = _subgraph_cache(graph, hyper)

    epoch_losses: list[float] = []
    val_aps: list[float] = []
    best_ap = -1.0
    best_epoch = -1
    best_params = None

    for epoch in range(1, hyper.epochs + 1):
        order = rng_order.permutation(n_train)
        total_loss = 0.0
        for lo in range(0, n_train, hyper.batch_size):
            batch = [train_targets[i] for i in order[lo:lo + hyper.batch_size]]
            union = UnionPrep([get_prep(tid) for tid, _ in batch])
            labels = np.array([y for _, y in batch])
            weights = np.array([weight_by_class[y] for _, y in batch]).reshape(-1, 1)
            logits = forward_logits(union, params, "train", rng_dropout)
            ce = ad.cross_entropy(logits, labels)
            loss = ad.mean_rows(ad.mul(ce, Tensor(weights)))
            opt.zero_grad()
            ad.backward(loss, leaves=leaves)
            opt.step()
            total_loss += loss.item() * len(batch)
        epoch_losses.append(total_loss / n_train)

        val_scores = [float(batched_fraud_probability(get_prep(tid), params)[0])
                      for tid, _ in val_targets]
        val_labels = [y for _, y in val_targets]
        from .metrics import average_precision
        ap = average_precision(val_scores, val_labels)
        val_aps.append(ap)
        if log:
            log(f"epoch {epoch}: train loss {epoch_losses[-1]:.4f}, val AP {ap:.4f}")
        if ap > best_ap:
            best_ap = ap
            best_epoch = epoch
            best_params = {k: Tensor(v.data.copy(), requires_grad=False) for k, v in params.items()}

    ckpt = Checkpoint(hyper=hyper, stats=stats, params=best_params, train_seed=hyper.seed)
    return TrainResult(checkpoint=ckpt, train_targets=train_targets, val_targets=val_targets,
                       graph=graph, epoch_losses=epoch_losses, val_average_precision=val_aps,
                       best_epoch=best_epoch)


def predict(checkpoint: Checkpoint, graph: HeteroGraph, target: str,
            sample_seed: int | None = None, threshold: float = 0.5) -> RiskScore:
    """Eval-mode score for one transaction; pure in (checkpoint, graph,
    target, sampling seed)."""
    hyper = checkpoint.hyper
    seed = checkpoint.hyper.seed if sample_seed is None else sample_seed
    sub = sample_neighborhood(graph, target, depth=hyper.sample_depth,
                              width=hyper.sample_width, cap=hyper.sample_cap, seed=seed)
    prep = prepare_subgraph(sub, hyper)
    p = float(batched_fraud_probability(prep, checkpoint.params)[0])
    return RiskScore(p_fraud=p, label=int(p >= threshold))


def evaluate(checkpoint: Checkpoint, graph: HeteroGraph,
             targets: list[tuple[str, int]], sample_seed: int | None = None) -> Metrics:
    """Accuracy at 0.5, mean cross-entropy, average precision, and ROC-AUC
    over the given labeled targets."""
    scores = [predict(checkpoint, graph, tid, sample_seed).p_fraud for tid, _ in targets]
    labels = [y for _, y in targets]
    return compute_metrics(scores, labels)


# ---------------------------------------------------------------------------
# Checkpoint serialization: text container, magic line + canonical JSON.
# ---------------------------------------------------------------------------

def _encode_array(arr: np.ndarray) -> dict:
    payload = arr.astype("<f8").tobytes(order="C")
    return {"shape": list(arr.shape), "data": base64.b64encode(payload).decode("ascii")}


def _decode_array(spec: dict) -> np.ndarray:
    raw = base64.b64decode(spec["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(spec["shape"]).copy()


def _payload_dict(checkpoint: Checkpoint) -> dict:
    return {
        "format": 1,
        "hyper": checkpoint.hyper.to_dict(),
        "stats": checkpoint.stats.to_dict(),
        "train_seed": checkpoint.train_seed,
        "params": {name: _encode_array(t.data) for name, t in sorted(checkpoint.params.items())},
    }


def checkpoint_hash(checkpoint: Checkpoint) -> str:
    body = json.dumps(_payload_dict(checkpoint), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def save_checkpoint(checkpoint: Checkpoint, path) -> str:
    payload = _payload_dict(checkpoint)
    payload["sha256"] = checkpoint_hash(checkpoint)
    text = CHECKPOINT_MAGIC + "\n" + json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return payload["sha256"]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        magic = fh.readline().rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise SchemaError(f"not a checkpoint file (bad magic line {magic!r})")
        payload = json.loads(fh.read())
    declared = payload.pop("sha256", None)
    body = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    actual = hashlib.sha256(body.encode("utf-8")).hexdigest()
    if declared != actual:
        raise SchemaError("checkpoint content hash mismatch")
    hyper = Hyper.from_dict(payload["hyper"])
    params = {name: Tensor(_decode_array(spec), requires_grad=False)
              for name, spec in payload["params"].items()}
    expected = set(param_names(hyper))
    if set(params) != expected:
        raise SchemaError("checkpoint parameter set does not match hyperparameters")
    return Checkpoint(hyper=hyper, stats=FeatureStats.from_dict(payload["stats"]),
                      params=params, train_seed=payload["train_seed"])
