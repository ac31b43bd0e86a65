import random
from collections import Counter
from fractions import Fraction

import networkx as nx
import pytest
from hypothesis import given, settings, strategies as st

from chaintrace.cluster import (
    ClusterSet, TagCategory, TagMap, build_relation_graph, change_cluster, multi_input_cluster,
    propagate_tags,
)
from chaintrace.dsu import DisjointSet
from chaintrace.errors import InputError, TagConflict
from chaintrace.evidence import LinkEvidence, LinkKind
from chaintrace.ledger import Address, JoinSplit, LedgerTx, TxIn, TxOut
from chaintrace.synth import coinjoin_suite, random_utxo_ledger

from builders import BTC, COIN, ZEC, spend, ts


def A(v, chain="BTC"):
    return Address(chain, v)


def cospend(txid, *addrs, chain=BTC):
    return spend(txid, 1, [(f"src{txid}", k, a, COIN) for k, a in enumerate(addrs)], [("sink", COIN)], chain=chain)


def components_oracle(txs):
    g = nx.Graph()
    for tx in txs:
        ins = [i.addr for i in tx.vin] + [z.addr for z in tx.zin]
        g.add_nodes_from(ins)
        g.add_edges_from(zip(ins, ins[1:]))
    return frozenset(frozenset(Address(BTC.symbol, a) for a in c) for c in nx.connected_components(g))


# -- disjoint sets -----------------------------------------------------------------

def test_dsu_basics():
    d = DisjointSet("abcde")
    d.union("a", "b")
    d.union_all(["c", "d", "e"])
    assert d.connected("a", "b") and not d.connected("a", "c")
    assert d.set_size("e") == 3
    assert sorted(sorted(g) for g in d.groups()) == [["a", "b"], ["c", "d", "e"]]
    assert "z" not in d and len(d) == 5


@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30)), max_size=80))
def test_dsu_matches_naive_partition(pairs):
    d = DisjointSet(range(31))
    naive = {i: {i} for i in range(31)}
    for a, b in pairs:
        d.union(a, b)
        if naive[a] is not naive[b]:
            merged = naive[a] | naive[b]
            for x in merged:
                naive[x] = merged
    assert {frozenset(g) for g in d.groups()} == {frozenset(s) for s in naive.values()}


# -- multi-input ---------------------------------------------------------------------

def test_multi_input_example():
    cs = multi_input_cluster([cospend("1", "A", "B"), cospend("2", "B", "C"), cospend("3", "D", "E")])
    assert cs.partition() == {frozenset({A("A"), A("B"), A("C")}), frozenset({A("D"), A("E")})}
    assert cs.members(0) == (A("A"), A("B"), A("C"))  # largest cluster gets id 0
    assert cs.sizes == [3, 2]


def test_empty_stream():
    cs = multi_input_cluster([])
    assert len(cs) == 0 and cs.n_addresses == 0


def test_single_input_gives_singleton():
    cs = multi_input_cluster([cospend("1", "A")])
    assert cs.partition() == {frozenset({A("A")})}


def test_ids_ordered_by_size_then_min_address():
    cs = multi_input_cluster([cospend("1", "z", "y"), cospend("2", "b", "c"), cospend("3", "q", "r", "s")])
    assert [cs.members(i) for i in range(3)] == [
        (A("q"), A("r"), A("s")), (A("b"), A("c")), (A("y"), A("z")),
    ]


def test_include_outputs_registers_every_address():
    cs = multi_input_cluster([cospend("1", "A", "B")], include_outputs=True)
    assert cs.partition() == {frozenset({A("A"), A("B")}), frozenset({A("sink")})}


def test_chains_never_mix():
    cs = multi_input_cluster([cospend("1", "A", "B"), cospend("2", "B", "C", chain=ZEC)])
    assert len(cs) == 2
    assert cs.cluster_of(A("B")) != cs.cluster_of(A("B", "ZEC"))


def test_coinjoins_are_not_merged():
    cj = [tx for tx, is_cj, _ in coinjoin_suite(1) if is_cj]
    cs = multi_input_cluster(cj)
    assert all(s == 1 for s in cs.sizes)
    merged = multi_input_cluster(cj, skip=None)
    assert max(merged.sizes) > 1


def test_ten_thousand_random_txs_match_components():
    led = random_utxo_ledger(random.Random(11), 10_000)
    assert multi_input_cluster(led).partition() == components_oracle(led)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 400), st.randoms(use_true_random=False))
def test_order_independent(seed, n, rnd):
    txs = list(random_utxo_ledger(random.Random(seed), n))
    shuffled = txs[:]
    rnd.shuffle(shuffled)
    a, b = multi_input_cluster(txs), multi_input_cluster(shuffled)
    assert a.partition() == b.partition()
    assert [a.members(i) for i in range(len(a))] == [b.members(i) for i in range(len(b))]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 400), st.floats(0, 1))
def test_confluence(seed, n, cut):
    txs = list(random_utxo_ledger(random.Random(seed), n))
    k = int(len(txs) * cut)
    merged = multi_input_cluster(txs[:k]).merge(multi_input_cluster(txs[k:]))
    assert merged.partition() == multi_input_cluster(txs).partition()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 400))
def test_sizes_sum_to_distinct_addresses(seed, n):
    led = random_utxo_ledger(random.Random(seed), n)
    cs = multi_input_cluster(led, include_outputs=True)
    seen = {a for tx in led for a in tx.input_addresses() + tx.output_addresses()}
    assert sum(cs.sizes) == cs.n_addresses == len(seen)


def test_cluster_csv_round_trip(tmp_path):
    cs = multi_input_cluster(random_utxo_ledger(random.Random(2), 300))
    cs.to_csv(tmp_path / "c.csv")
    again = ClusterSet.from_csv(tmp_path / "c.csv")
    assert again.partition() == cs.partition()


# -- change heuristic -------------------------------------------------------------------

def shielding(txid, ins, zouts):
    """Joinsplit tx spending ``ins`` with transparent pool outputs ``zouts``."""
    vin = tuple(TxIn(f"s{txid}", k, a, 10 * COIN) for k, a in enumerate(ins))
    return LedgerTx(txid, ZEC, 1, ts(1), False, vin, (),
                    (JoinSplit(zin=tuple(TxOut(a, 10 * COIN) for a in ins),
                               zout=tuple(TxOut(a, COIN) for a in zouts)),))


def Z(v):
    return Address("ZEC", v)


def test_change_single_output_joins_sender():
    txs = [shielding("t", ["A"], ["B"])]
    cs = change_cluster(txs, multi_input_cluster(txs))
    assert cs.cluster_of(Z("A")) == cs.cluster_of(Z("B"))


def test_change_two_outputs_no_union():
    txs = [shielding("t", ["A"], ["B", "C"])]
    cs = change_cluster(txs, multi_input_cluster(txs))
    assert cs.partition() == multi_input_cluster(txs).partition()


def test_change_excluded_operator():
    txs = [shielding("t", ["A"], ["W"])]
    cs = change_cluster(txs, multi_input_cluster(txs), excluded={Z("W")})
    assert cs.cluster_of(Z("W")) is None


def test_change_guard_refuses_exchange_merge():
    tags = TagMap()
    tags.add(Z("A"), "Kraken", TagCategory.EXCHANGE)
    tags.add(Z("B"), "Huobi", TagCategory.EXCHANGE)
    txs = [shielding("t", ["A"], ["B"])]
    cs = change_cluster(txs, multi_input_cluster(txs), tags=tags)
    assert cs.cluster_of(Z("A")) != cs.cluster_of(Z("B"))
    (v,) = cs.guard_violations
    assert v.txid == "t" and v.left == {"Kraken"} and v.right == {"Huobi"}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.lists(st.sampled_from("ABCDEFGH"), min_size=1, max_size=3, unique=True),
                          st.lists(st.sampled_from("ABCDEFGH"), min_size=1, max_size=2, unique=True)),
                min_size=1, max_size=12),
       st.dictionaries(st.sampled_from("ABCDEFGH"), st.sampled_from(["Kraken", "Huobi", "Bittrex"]), max_size=4))
def test_change_never_joins_two_exchanges(spec, labels):
    txs = [shielding(f"t{k}", ins, outs) for k, (ins, outs) in enumerate(spec)]
    tags = TagMap()
    for a, lab in labels.items():
        tags.add(Z(a), lab, TagCategory.EXCHANGE)
    base = multi_input_cluster(txs)
    cs = change_cluster(txs, base, tags=tags)
    # within a final cluster, all labelled base clusters carry the same label set
    for _, members in cs.clusters():
        sets = set()
        for cid in {base.cluster_of(a) for a in members} - {None}:
            labs = frozenset(labels[a.value] for a in base.members(cid) if a.value in labels)
            if labs:
                sets.add(labs)
        assert len(sets) <= 1


# -- tags -------------------------------------------------------------------------------------

def test_tag_conflicts_surface():
    t = TagMap()
    t.add(A("x"), "Kraken", "EXCHANGE")
    t.add(A("x"), "Kraken", TagCategory.EXCHANGE)  # identical is fine
    with pytest.raises(TagConflict):
        t.add(A("x"), "Huobi", TagCategory.EXCHANGE)
    other = TagMap()
    other.add(A("x"), "Poloniex", TagCategory.EXCHANGE)
    other.add(A("y"), "F2Pool", TagCategory.POOL)
    conflicts = t.merge(other)
    assert [c[0] for c in conflicts] == [A("x")]
    assert t.get(A("x")).label == "Kraken" and t.get(A("y")).label == "F2Pool"


def test_tag_csv_round_trip(tmp_path):
    t = TagMap()
    t.add(A("x"), "Kraken", TagCategory.EXCHANGE)
    t.add(Z("t1"), "F2Pool", TagCategory.POOL)
    t.save_csv(tmp_path / "tags.csv")
    assert dict(TagMap.load_csv(tmp_path / "tags.csv").items()) == dict(t.items())


def test_propagate_single_label_coverage():
    cs = multi_input_cluster([cospend("1", "A", "B")])
    t = TagMap()
    t.add(A("A"), "Bitfinex", TagCategory.EXCHANGE)
    (row,) = propagate_tags(cs, t).values()
    assert row.dominant == "Bitfinex" and row.coverage == Fraction(1, 2) and row.conflicts == ()


def test_propagate_majority_and_conflict():
    cs = multi_input_cluster([cospend("1", "A", "B", "C", "D")])
    t = TagMap()
    t.add(A("A"), "Kraken", TagCategory.EXCHANGE)
    t.add(A("B"), "Kraken", TagCategory.EXCHANGE)
    t.add(A("C"), "Huobi", TagCategory.EXCHANGE)
    (row,) = propagate_tags(cs, t).values()
    assert row.dominant == "Kraken" and row.conflicts == ("Huobi",)
    assert row.labels == Counter({"Kraken": 2, "Huobi": 1})


def test_propagate_on_ground_truth_entities():
    rng = random.Random(4)
    owners = {f"e{i}": [f"e{i}_{k}" for k in range(rng.randint(2, 6))] for i in range(30)}
    txs = []
    for ent, addrs in owners.items():
        for k in range(len(addrs) - 1):
            txs.append(cospend(f"{ent}_{k}", addrs[k], addrs[k + 1]))
    rng.shuffle(txs)
    cs = multi_input_cluster(txs)
    tags = TagMap()
    for ent, addrs in owners.items():
        for a in rng.sample(addrs, rng.randint(1, len(addrs))):
            tags.add(A(a), ent, TagCategory.SERVICE)
    rows = propagate_tags(cs, tags)
    assert len(rows) == 30
    for row in rows.values():
        assert not row.conflicts
        assert all(a.value.startswith(row.dominant + "_") for a in cs.members(row.cluster_id))


# -- relation graph -------------------------------------------------------------------------

def pt(src, dst):
    return LinkEvidence(LinkKind.PASS_THROUGH, src_txids=("d",), src_addrs=(src,), dst_txids=("p",),
                        dst_addrs=(dst,))


def test_relation_graph_input_cluster():
    x = Address("ETH", "X")
    g = build_relation_graph([pt(A("A"), x), pt(A("B"), x)])
    assert g.input_cluster(x) == {A("A"), A("B")}
    assert g.output_cluster(A("A")) == {x}
    assert g.rank_by_in_degree(1) == [(x, 2)]


def test_relation_graph_empty_and_shielded_source():
    assert len(build_relation_graph([])) == 0
    g = build_relation_graph([LinkEvidence(LinkKind.PASS_THROUGH, dst_addrs=(A("x"),))])
    assert len(g) == 0 and g.skipped == 1


def test_relation_graph_rejects_self_loop_and_bad_weight():
    g = build_relation_graph([])
    with pytest.raises(InputError):
        g.add(A("a"), A("a"))
    with pytest.raises(InputError):
        g.add(A("a"), A("b"), 0)


def test_relation_graph_degrees_match_recount():
    rng = random.Random(8)
    srcs = [A(f"s{i}") for i in range(80)]
    dsts = [Address("ETH", f"d{i}") for i in range(60)]
    links = [pt(rng.choice(srcs), rng.choice(dsts)) for _ in range(1000)]
    g = build_relation_graph(links)
    assert g.total_weight == 1000
    edges = Counter((l.src_addrs[0], l.dst_addrs[0]) for l in links)
    ins = Counter(v for (_, v) in edges)
    outs = Counter(u for (u, _) in edges)
    assert g.degree_histogram("in") == Counter(ins.values())
    assert g.degree_histogram("out") == Counter(outs.values())
    assert all(g.weight(u, v) == w for (u, v), w in edges.items())


@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), max_size=60))
def test_relation_graph_weight_total(pairs):
    g = build_relation_graph([pt(A(f"s{a}"), Address("ETH", f"d{b}")) for a, b in pairs])
    assert g.total_weight == len(pairs)
    assert all(w >= 1 for *_, w in g.edges())
