"""Graph construction, neighborhood sampling, and input encoding tests."""

import io
import json

import numpy as np
import pytest

from fraudlens.data import TransactionRecord, engineer_deltas, GenConfig, generate_synthetic
from fraudlens.errors import RowError, TargetNotFoundError
from fraudlens.graph import (
    EDGE_TYPES,
    NODE_TYPES,
    FeatureStats,
    HeteroGraph,
    build_graph,
    dump_jsonl,
    encode_inputs,
    sample_neighborhood,
)


def rec(tid, sender=None, s_acct=None, s_ctry=None, bene=None, b_acct=None, b_ctry=None,
        amount=100.0, ts=0, label=0, ttype="MAKE-PAYMENT"):
    return TransactionRecord(
        transaction_id=tid, sender_id=sender, sender_account=s_acct, sender_country=s_ctry,
        bene_id=bene, bene_account=b_acct, bene_country=b_ctry, usd_amount=amount,
        transaction_type=ttype, timestamp=ts, label=label, d_amount=0.0, d_time=0.0)


UNIT_STATS = FeatureStats(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))


def payment_row():
    return rec("PAY-BILL-3589", sender="CLIENT-3566", s_acct="ACCOUNT-3578", s_ctry="USA",
               bene="COMPANY-3574", b_acct="ACCOUNT-3587", b_ctry="GERMANY", amount=492.67)


class TestBuildGraph:
    def test_full_payment_row_nodes_and_edges(self):
        g = build_graph([payment_row()], UNIT_STATS)
        assert g.n_nodes == 7
        types = {g.node_ids[i]: g.node_type[i] for i in range(g.n_nodes)}
        assert types["PAY-BILL-3589"] == "Transaction"
        assert types["CLIENT-3566"] == "User"
        assert types["COMPANY-3574"] == "User"
        assert types["ACCOUNT-3578"] == "Account"
        assert types["ACCOUNT-3587"] == "Account"
        assert types["USA"] == "Country"
        assert types["GERMANY"] == "Country"
        etypes = sorted(e[2] for e in g.edges)
        assert etypes == sorted(["Transferred_By", "Sent_By", "Received_By", "Sent_To",
                                 "Executed_In", "Executed_In"])
        assert all(g.node_type[s] == "Transaction" for s, _, _ in g.edges)

    def test_withdrawal_blank_bene(self):
        r = rec("WITHDRAWAL-3591", sender="CLIENT-3566", s_acct="ACCOUNT-3579", s_ctry="USA",
                amount=388.92, ttype="WITHDRAWAL")
        g = build_graph([r], UNIT_STATS)
        assert g.n_nodes == 4
        assert sorted(e[2] for e in g.edges) == ["Executed_In", "Sent_By", "Transferred_By"]

    def test_shared_client_single_user_node(self):
        rows = [
            rec("T1", sender="CLIENT-3566", s_acct="A1", s_ctry="USA"),
            rec("T2", sender="CLIENT-3566", s_acct="A2", s_ctry="USA", ts=10),
        ]
        g = build_graph(rows, UNIT_STATS)
        user = g.require("CLIENT-3566")
        incident = [e for e in g.edges if e[1] == user and e[2] == "Transferred_By"]
        assert len(incident) == 2
        assert g.node_type.count("User") == 1

    def test_node_count_formula(self):
        records = engineer_deltas(generate_synthetic(GenConfig(n_transactions=500, seed=3)))
        g = build_graph(records, FeatureStats.fit(records))
        accounts = {r.sender_account for r in records if r.sender_account}
        accounts |= {r.bene_account for r in records if r.bene_account}
        parties = {r.sender_id for r in records if r.sender_id}
        parties |= {r.bene_id for r in records if r.bene_id}
        countries = {r.sender_country for r in records if r.sender_country}
        countries |= {r.bene_country for r in records if r.bene_country}
        assert g.n_nodes == len(records) + len(accounts) + len(parties) + len(countries)

    def test_same_country_both_sides_single_edge(self):
        r = rec("T1", sender="C1", s_acct="A1", s_ctry="USA", bene="C2", b_acct="A2", b_ctry="USA")
        g = build_graph([r], UNIT_STATS)
        assert sum(1 for e in g.edges if e[2] == "Executed_In") == 1

    def test_partyless_record_rejected(self):
        bad = TransactionRecord(
            transaction_id="T0", sender_id=None, sender_account=None, sender_country=None,
            bene_id=None, bene_account=None, bene_country=None, usd_amount=1.0,
            transaction_type="EXCHANGE", timestamp=0, label=0, d_amount=0.0, d_time=0.0)
        with pytest.raises(RowError):
            build_graph([bad], UNIT_STATS)

    def test_features_standardized(self):
        stats = FeatureStats(mean=(100.0, 0.0, 50.0), std=(10.0, 1.0, 25.0))
        g = build_graph([rec("T1", sender="C", s_acct="A", s_ctry="USA", amount=120.0)], stats)
        f = g.features[g.require("T1")]
        assert np.allclose(f, [2.0, 0.0, -2.0])


def star_graph(n_neighbors):
    g = HeteroGraph()
    t = g._add_node("T0", "Transaction", np.zeros(3), timestamp=0)
    for i in range(n_neighbors):
        a = g._add_node(f"A{i}", "Account")
        g._add_edge(t, a, "Sent_To")
    return g


def chain_graph(n_hops):
    """Alternating Transaction/Account path with the target at one end."""
    g = HeteroGraph()
    prev = g._add_node("T0", "Transaction", np.zeros(3), timestamp=0)
    for h in range(1, n_hops + 1):
        if h % 2 == 1:
            node = g._add_node(f"N{h}", "Account")
            g._add_edge(prev, node, "Sent_By")
        else:
            node = g._add_node(f"N{h}", "Transaction", np.zeros(3), timestamp=h)
            g._add_edge(node, prev, "Sent_By")
        prev = node
    return g


class TestSampling:
    def test_star_width_truncation(self):
        g = star_graph(20)
        sub = sample_neighborhood(g, "T0", seed=1)
        assert sub.n_nodes == 17  # target + 16 kept
        assert max(sub.hops) == 1

    def test_depth_bound(self):
        g = chain_graph(8)
        sub = sample_neighborhood(g, "T0", seed=0)
        assert sorted(set(sub.hops)) == list(range(0, 7))
        assert sub.n_nodes == 7

    def test_isolated_target(self):
        g = HeteroGraph()
        g._add_node("T0", "Transaction", np.zeros(3), timestamp=0)
        sub = sample_neighborhood(g, "T0")
        assert sub.nodes == ["T0"]
        assert sub.edges == []

    def test_unknown_target(self):
        with pytest.raises(TargetNotFoundError):
            sample_neighborhood(star_graph(2), "NOPE")
        with pytest.raises(TargetNotFoundError):
            sample_neighborhood(star_graph(2), "A0")  # not a transaction

    def test_bounds_on_random_graphs(self):
        rng = np.random.default_rng(77)
        for trial in range(20):
            n = int(rng.integers(50, 400))
            records = engineer_deltas(generate_synthetic(
                GenConfig(n_transactions=n, seed=int(rng.integers(1000)))))
            g = build_graph(records, FeatureStats.fit(records))
            tid = records[int(rng.integers(len(records)))].transaction_id
            sub = sample_neighborhood(g, tid, seed=trial)
            assert sub.n_nodes <= 96
            assert max(sub.hops) <= 6
            for hop in range(1, max(sub.hops) + 1):
                assert sub.hops.count(hop) <= 16
            assert sub.nodes[0] == tid and sub.hops[0] == 0
            # member edges connect members only
            for e in sub.edges:
                assert 0 <= e.src < sub.n_nodes and 0 <= e.dst < sub.n_nodes

    def test_determinism_per_seed(self):
        records = engineer_deltas(generate_synthetic(GenConfig(n_transactions=300, seed=5)))
        g = build_graph(records, FeatureStats.fit(records))
        tid = records[17].transaction_id
        a = sample_neighborhood(g, tid, seed=9)
        b = sample_neighborhood(g, tid, seed=9)
        assert a.nodes == b.nodes and a.edge_ids() == b.edge_ids()
        c = sample_neighborhood(g, tid, seed=10)
        assert c.nodes[0] == tid  # target always included


class TestEncoding:
    def test_country_node_row(self):
        g = build_graph([payment_row()], UNIT_STATS)
        sub = sample_neighborhood(g, "PAY-BILL-3589")
        enc = encode_inputs(sub, feature_width=3)
        i = sub.node_pos("USA")
        assert np.allclose(enc.feature_block[i], 0.0)
        assert np.array_equal(enc.node_type_onehot[i], [0, 0, 0, 1])

    def test_sent_to_onehot(self):
        g = build_graph([payment_row()], UNIT_STATS)
        sub = sample_neighborhood(g, "PAY-BILL-3589")
        j = [k for k, e in enumerate(sub.edges) if e.etype == "Sent_To"][0]
        enc = encode_inputs(sub)
        assert np.array_equal(enc.edge_type_onehot[j], [0, 1, 0, 0, 0])

    def test_exactly_one_hot_everywhere(self):
        records = engineer_deltas(generate_synthetic(GenConfig(n_transactions=200, seed=2)))
        g = build_graph(records, FeatureStats.fit(records))
        sub = sample_neighborhood(g, records[0].transaction_id)
        enc = encode_inputs(sub, feature_width=8)
        assert np.array_equal(enc.node_type_onehot.sum(axis=1), np.ones(sub.n_nodes))
        assert np.array_equal(enc.edge_type_onehot.sum(axis=1), np.ones(len(sub.edges)))
        assert enc.node_inputs.shape == (sub.n_nodes, 12)
        # padding slots beyond the three features stay zero
        assert np.allclose(enc.node_inputs[:, 3:8], 0.0)

    def test_transaction_features_propagated(self):
        stats = FeatureStats(mean=(0, 0, 0), std=(1, 1, 1))
        r = rec("T1", sender="C", s_acct="A", s_ctry="USA", amount=7.0)
        g = build_graph([r], stats)
        sub = sample_neighborhood(g, "T1")
        enc = encode_inputs(sub, feature_width=4)
        assert np.allclose(enc.feature_block[0], [7.0, 0.0, 0.0, 0.0])


def test_dump_jsonl_shape():
    g = build_graph([payment_row()], UNIT_STATS)
    lines = dump_jsonl(g).strip().split("\n")
    objs = [json.loads(l) for l in lines]
    nodes = [o for o in objs if "id" in o]
    edges = [o for o in objs if "etype" in o]
    assert len(nodes) == 7 and len(edges) == 6
    assert {"id", "type", "features"} <= set(nodes[0])
    assert {"src", "dst", "etype"} == set(edges[0])
