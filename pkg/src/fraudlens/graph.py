"""Heterogeneous transaction graph construction and neighborhood sampling.

Nodes are typed (Transaction, Account, User, Country) and every edge starts
at a Transaction node. Message flow is treated as undirected; the direction
only fixes which endpoint is the transaction. Explanations and the detector
both consume bounded neighborhoods: breadth-first expansion up to depth 6,
at most 16 new nodes per level, 96 nodes total.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import TransactionRecord
from .errors import DatasetError, RowError, TargetNotFoundError

__all__ = [
    "NODE_TYPES",
    "EDGE_TYPES",
    "FeatureStats",
    "HeteroGraph",
    "Subgraph",
    "SubEdge",
    "EncodedInputs",
    "build_graph",
    "sample_neighborhood",
    "encode_inputs",
    "dump_jsonl",
]

NODE_TYPES = ("Transaction", "Account", "User", "Country")
EDGE_TYPES = ("Executed_In", "Sent_To", "Sent_By", "Transferred_By", "Received_By")

FEATURE_NAMES = ("usd_amount", "d_amount", "d_time")


@dataclass(frozen=True)
class FeatureStats:
    """Z-score statistics for transaction features, fit on the training split."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    @classmethod
    def fit(cls, records: list[TransactionRecord]) -> "FeatureStats":
        if not records:
            raise DatasetError("cannot fit feature statistics on an empty split")
        if any(r.d_amount is None or r.d_time is None for r in records):
            raise DatasetError("records must have engineered deltas before fitting stats")
        raw = np.array([[r.usd_amount, r.d_amount, r.d_time] for r in records], dtype=np.float64)
        mean = raw.mean(axis=0)
        std = np.maximum(raw.std(axis=0), 1e-9)
        return cls(mean=tuple(map(float, mean)), std=tuple(map(float, std)))

    def transform(self, record: TransactionRecord) -> np.ndarray:
        raw = np.array([record.usd_amount, record.d_amount, record.d_time], dtype=np.float64)
        return (raw - np.asarray(self.mean)) / np.asarray(self.std)

    def transform_values(self, usd_amount: float, d_amount: float, d_time: float) -> np.ndarray:
        raw = np.array([usd_amount, d_amount, d_time], dtype=np.float64)
        return (raw - np.asarray(self.mean)) / np.asarray(self.std)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(mean=tuple(d["mean"]), std=tuple(d["std"]))


class HeteroGraph:
    """Immutable typed transaction graph with a bidirectional adjacency index."""

    def __init__(self):
        self.node_ids: list[str] = []
        self.node_index: dict[str, int] = {}
        self.node_type: list[str] = []
        self.features: list[np.ndarray] = []      # standardized, zeros for non-transactions
        self.timestamps: list[int | None] = []
        self.edges: list[tuple[int, int, str]] = []  # (transaction node, entity node, edge type)
        self.adjacency: list[list[int]] = []      # node -> incident edge indices
        self.records: dict[str, TransactionRecord] = {}

    def _add_node(self, node_id: str, node_type: str, features: np.ndarray | None = None,
                  timestamp: int | None = None) -> int:
        idx = self.node_index.get(node_id)
        if idx is not None:
            if self.node_type[idx] != node_type:
                raise DatasetError(
                    f"id {node_id!r} used as both {self.node_type[idx]} and {node_type}")
            return idx
        idx = len(self.node_ids)
        self.node_ids.append(node_id)
        self.node_index[node_id] = idx
        self.node_type.append(node_type)
        self.features.append(features if features is not None else np.zeros(3))
        self.timestamps.append(timestamp)
        self.adjacency.append([])
        return idx

    def _add_edge(self, src: int, dst: int, etype: str) -> None:
        eidx = len(self.edges)
        self.edges.append((src, dst, etype))
        self.adjacency[src].append(eidx)
        self.adjacency[dst].append(eidx)

    def neighbors(self, node: int) -> list[int]:
        out = []
        for eidx in self.adjacency[node]:
            s, d, _ = self.edges[eidx]
            out.append(d if s == node else s)
        return out

    def neighbor_arrays(self) -> list[np.ndarray]:
        """Per-node neighbor ids as int arrays, built once and cached."""
        cached = getattr(self, "_nb_arrays", None)
        if cached is None or len(cached) != self.n_nodes:
            cached = [np.array(self.neighbors(i), dtype=np.int64) for i in range(self.n_nodes)]
            self._nb_arrays = cached
        return cached

    def require(self, node_id: str) -> int:
        idx = self.node_index.get(node_id)
        if idx is None:
            raise TargetNotFoundError(f"unknown node id: {node_id}")
        return idx

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)


def build_graph(records: list[TransactionRecord], stats: FeatureStats) -> HeteroGraph:
    """One Transaction node per record plus shared Account/User/Country nodes.

    Features of transaction nodes are z-scored with ``stats``; the Executed_In
    edge connects the transaction to the sender country and, when distinct,
    the beneficiary country.
    """
    g = HeteroGraph()
    for i, r in enumerate(records):
        if r.d_amount is None or r.d_time is None:
            raise RowError(f"record {r.transaction_id}: deltas not engineered")
        has_sender = any([r.sender_id, r.sender_account, r.sender_country])
        has_bene = any([r.bene_id, r.bene_account, r.bene_country])
        if not has_sender and not has_bene:
            raise RowError(f"record {r.transaction_id} (row {i}): references no parties")
        t = g._add_node(r.transaction_id, "Transaction", stats.transform(r), r.timestamp)
        g.records[r.transaction_id] = r
        if r.sender_id:
            g._add_edge(t, g._add_node(r.sender_id, "User"), "Transferred_By")
        if r.sender_account:
            g._add_edge(t, g._add_node(r.sender_account, "Account"), "Sent_By")
        if r.bene_id:
            g._add_edge(t, g._add_node(r.bene_id, "User"), "Received_By")
        if r.bene_account:
            g._add_edge(t, g._add_node(r.bene_account, "Account"), "Sent_To")
        countries = []
        if r.sender_country:
            countries.append(r.sender_country)
        if r.bene_country and r.bene_country != r.sender_country:
            countries.append(r.bene_country)
        for c in countries:
            g._add_edge(t, g._add_node(c, "Country"), "Executed_In")
    return g


@dataclass(frozen=True)
class SubEdge:
    edge_id: str
    src: int          # position in Subgraph.nodes (transaction endpoint)
    dst: int          # position in Subgraph.nodes (entity endpoint)
    etype: str


@dataclass
class Subgraph:
    target_id: str
    nodes: list[str]                   # target first, then admission order
    node_types: list[str]
    hops: list[int]
    features: np.ndarray               # (n, 3) standardized, zeros for entities
    timestamps: list[int | None]
    edges: list[SubEdge]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def node_pos(self, node_id: str) -> int:
        try:
            return self.nodes.index(node_id)
        except ValueError:
            raise TargetNotFoundError(f"node {node_id!r} not in subgraph") from None

    def edge_ids(self) -> list[str]:
        return [e.edge_id for e in self.edges]


def _edge_key(g: HeteroGraph, eidx: int) -> str:
    s, d, etype = g.edges[eidx]
    return f"{g.node_ids[s]}|{etype}|{g.node_ids[d]}"


def sample_neighborhood(graph: HeteroGraph, target: str, depth: int = 6,
                        width: int = 16, cap: int = 96, seed: int = 0) -> Subgraph:
    """Bounded breadth-first neighborhood around a transaction.

    At each level at most ``width`` new nodes are admitted: transaction
    candidates closest in time to the target first, then entity candidates
    in seeded-uniform order. Deterministic per (graph, target, seed).
    """
    t_idx = graph.require(target)
    if graph.node_type[t_idx] != "Transaction":
        raise TargetNotFoundError(f"target {target!r} is a {graph.node_type[t_idx]}, not a Transaction")
    t_time = graph.timestamps[t_idx] or 0
    rng = np.random.default_rng([seed & 0x7FFFFFFF, t_idx])
    nb = graph.neighbor_arrays()
    is_txn = getattr(graph, "_is_txn", None)
    if is_txn is None or is_txn.shape[0] != graph.n_nodes:
        is_txn = np.array([t == "Transaction" for t in graph.node_type])
        times = np.array([ts if ts is not None else 0 for ts in graph.timestamps], dtype=np.int64)
        graph._is_txn = is_txn
        graph._times = times
    times = graph._times

    in_members = np.zeros(graph.n_nodes, dtype=bool)
    in_members[t_idx] = True
    order = [t_idx]
    hops_of = [0]
    frontier = np.array([t_idx], dtype=np.int64)
    for hop in range(1, depth + 1):
        if len(order) >= cap:
            break
        if frontier.size == 0:
            break
        cand = np.unique(np.concatenate([nb[int(v)] for v in frontier])) if frontier.size else frontier
        cand = cand[~in_members[cand]]
        if cand.size == 0:
            break
        txn = cand[is_txn[cand]]
        if txn.size:
            # closest in time to the target first; deterministic tie-break
            rank = np.lexsort((txn, -times[txn], np.abs(times[txn] - t_time)))
            txn = txn[rank]
        ent = np.sort(cand[~is_txn[cand]])
        if ent.size:
            ent = ent[rng.permutation(ent.size)]
        keep = np.concatenate([txn, ent])[: min(width, cap - len(order))]
        in_members[keep] = True
        order.extend(int(k) for k in keep)
        hops_of.extend([hop] * keep.size)
        frontier = keep

    pos = {node: i for i, node in enumerate(order)}
    sub_edges = []
    seen_edges: set[int] = set()
    for node in order:
        if not is_txn[node]:
            continue
        for eidx in graph.adjacency[node]:
            if eidx in seen_edges:
                continue
            s, d, etype = graph.edges[eidx]
            if in_members[s] and in_members[d]:
                seen_edges.add(eidx)
                sub_edges.append((eidx, SubEdge(_edge_key(graph, eidx), pos[s], pos[d], etype)))
    sub_edges = [e for _, e in sorted(sub_edges, key=lambda t: t[0])]

    return Subgraph(
        target_id=target,
        nodes=[graph.node_ids[i] for i in order],
        node_types=[graph.node_type[i] for i in order],
        hops=hops_of,
        features=np.array([graph.features[i] for i in order], dtype=np.float64),
        timestamps=[graph.timestamps[i] for i in order],
        edges=sub_edges,
    )


@dataclass
class EncodedInputs:
    node_inputs: np.ndarray        # (n, feature_width + 4): padded features then type one-hot
    feature_block: np.ndarray      # (n, feature_width) standardized features, zero for entities
    node_type_onehot: np.ndarray   # (n, 4)
    edge_type_onehot: np.ndarray   # (m, 5)


def encode_inputs(subgraph: Subgraph, feature_width: int = 3) -> EncodedInputs:
    """One-hot node/edge types and zero-padded feature rows.

    ``feature_width`` is the model input width; the three standardized
    transaction features occupy the first slots and entity rows stay zero.
    """
    if feature_width < 3:
        raise ValueError("feature_width must be >= 3")
    n = subgraph.n_nodes
    feat = np.zeros((n, feature_width))
    type_onehot = np.zeros((n, len(NODE_TYPES)))
    for i, ntype in enumerate(subgraph.node_types):
        type_onehot[i, NODE_TYPES.index(ntype)] = 1.0
        if ntype == "Transaction":
            feat[i, :3] = subgraph.features[i]
    edge_onehot = np.zeros((len(subgraph.edges), len(EDGE_TYPES)))
    for j, e in enumerate(subgraph.edges):
        edge_onehot[j, EDGE_TYPES.index(e.etype)] = 1.0
    return EncodedInputs(
        node_inputs=np.concatenate([feat, type_onehot], axis=1),
        feature_block=feat,
        node_type_onehot=type_onehot,
        edge_type_onehot=edge_onehot,
    )


def dump_jsonl(graph: HeteroGraph) -> str:
    """Graph dump as JSON lines: one object per node, then one per edge."""
    lines = []
    for i, node_id in enumerate(graph.node_ids):
        lines.append(json.dumps({
            "id": node_id,
            "type": graph.node_type[i],
            "features": [float(x) for x in graph.features[i]],
        }, sort_keys=True))
    for s, d, etype in graph.edges:
        lines.append(json.dumps({
            "src": graph.node_ids[s],
            "dst": graph.node_ids[d],
            "etype": etype,
        }, sort_keys=True))
    return "\n".join(lines) + "\n"
