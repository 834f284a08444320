import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shifttrace.errors import UnknownNode, ValidationError
from shifttrace.flows import PassThrough
from shifttrace.model import FixedAmount, TagRecord, UtxoRef
from shifttrace.relgraph import (
    build_graph,
    cluster_report,
    edges_csv,
    graph_summary,
    input_cluster,
    output_cluster,
    top_by_degree,
)
from shifttrace.sim.builder import generate_world
from shifttrace.sim.config import HubSpec, Plants, WorldConfig

from conftest import InMemory


def pt(sid: str, src: str, dst: str, cur_in="BTC", cur_out="ETH", extra_inputs=()) -> PassThrough:
    return PassThrough(
        shift_id=sid,
        cur_in=cur_in,
        cur_out=cur_out,
        timestamp=int(sid),
        amt=FixedAmount(1, 8),
        out_coin=FixedAmount(1, 18),
        phase1=UtxoRef(f"d{sid}", 0),
        phase2=UtxoRef(f"w{sid}", 0),
        addr_s=f"s{sid}",
        addr_u=dst,
        input_addresses=(src, *extra_inputs),
        output_addresses=(dst,),
        withdraw_time=None,
    )


def test_two_shifts_between_the_same_pair_make_one_edge_of_weight_two():
    g = build_graph([pt("1", "u", "v"), pt("2", "u", "v")])
    assert g.edges() == [(("BTC", "u"), ("ETH", "v"), 2)]
    assert (g.node_count, g.edge_count, g.total_weight, g.consumed) == (2, 1, 2, 2)


def test_empty_input_gives_empty_graph():
    g = build_graph([])
    assert (g.node_count, g.edge_count, g.total_weight) == (0, 0, 0)
    assert edges_csv(g) == "src_chain,src_addr,dst_chain,dst_addr,weight\n"


def test_duplicate_passthrough_counts_once():
    g = build_graph([pt("1", "u", "v"), pt("1", "u", "v")])
    assert g.total_weight == g.consumed == 1


def test_multi_input_deposit_adds_one_edge_per_funding_address():
    g = build_graph([pt("1", "a", "v", extra_inputs=("b",))])
    assert g.edges() == [(("BTC", "a"), ("ETH", "v"), 1), (("BTC", "b"), ("ETH", "v"), 1)]
    assert g.consumed == 1 and g.total_weight == 2


def test_passthrough_without_endpoints_is_skipped():
    p = pt("1", "u", "v")
    bare = PassThrough(**{**p.__dict__, "input_addresses": ()})
    assert build_graph([bare]).consumed == 0


def test_same_address_on_two_chains_is_two_nodes():
    g = build_graph([pt("1", "x", "x", cur_in="ETH", cur_out="ETC")])
    assert g.node_count == 2
    assert output_cluster(g, ("ETH", "x")) == {("ETC", "x")}


def test_clusters_and_unknown_node():
    g = build_graph([pt("1", "a", "hub"), pt("2", "b", "hub"), pt("3", "a", "z")])
    assert input_cluster(g, ("ETH", "hub")) == {("BTC", "a"), ("BTC", "b")}
    assert output_cluster(g, ("BTC", "b")) == {("ETH", "hub")}
    assert input_cluster(g, ("BTC", "a")) == set()
    assert output_cluster(g, ("ETH", "hub")) == set()
    with pytest.raises(UnknownNode):
        input_cluster(g, ("ETH", "nobody"))
    with pytest.raises(UnknownNode):
        output_cluster(g, ("BTC", "hub"))
    with pytest.raises(UnknownNode):
        cluster_report(g, ("BTC", "nobody"))


def test_top_by_degree_ties_go_to_the_smaller_address():
    pts = [pt(str(i), s, d) for i, (s, d) in enumerate([("a", "m"), ("b", "m"), ("c", "m"), ("a", "k"), ("b", "k"), ("c", "k"), ("a", "z")], 1)]
    g = build_graph(pts)
    top = top_by_degree(g, "in", 3)
    assert [(n.address, n.degree) for n in top] == [("k", 3), ("m", 3), ("z", 1)]
    assert [n.address for n in top_by_degree(g, "out", 1)] == ["a"]


def test_top_by_degree_k_beyond_node_count_returns_all():
    g = build_graph([pt("1", "a", "b")])
    assert len(top_by_degree(g, "in", 50)) == g.node_count


def test_top_by_degree_rejects_bad_arguments():
    g = build_graph([pt("1", "a", "b")])
    with pytest.raises(ValidationError):
        top_by_degree(g, "in", 0)
    with pytest.raises(ValidationError):
        top_by_degree(g, "sideways", 1)


def test_cluster_report_lists_tags_and_neighbours():
    g = build_graph([pt("1", "a", "hub"), pt("2", "a", "hub")])
    tags = [TagRecord("ETH", "hub", "Exchange", "exchange", "manual")]
    r = cluster_report(g, ("ETH", "hub"), tags)
    assert r["in_degree"] == 1 and r["tags"][0]["tag"] == "Exchange"
    assert r["input_cluster"] == [{"chain": "BTC", "address": "a", "weight": 2, "tags": []}]


@pytest.fixture(scope="module")
def hub_world():
    spec = HubSpec(senders=20, in_chains=("LTC", "DOGE", "ETH"), out_chain="BTC")
    return InMemory(generate_world(WorldConfig(seed=6, duration=12 * 3600, background_rate=0.005, shift_rate=15, plants=Plants(hubs=(spec,)))))


def test_planted_hub_has_every_sender_in_its_input_cluster(hub_world):
    g = build_graph(hub_world.passthroughs)
    (hub,) = hub_world.world.ground_truth["hubs"]
    node = (hub["chain"], hub["address"])
    senders = {tuple(s) for s in hub["senders"]}
    assert len(senders) >= 20
    assert {c for c, _ in senders} == {"LTC", "DOGE", "ETH"}
    assert input_cluster(g, node) == senders
    assert g.in_degree(node) == len(senders)
    for s in senders:
        assert node in output_cluster(g, s)


def test_planted_hub_ranks_first_with_its_tag(hub_world):
    g = build_graph(hub_world.passthroughs)
    (hub,) = hub_world.world.ground_truth["hubs"]
    (top,) = top_by_degree(g, "in", 1, hub_world.world.tags)
    assert (top.chain, top.address) == (hub["chain"], hub["address"])
    assert [t.tag for t in top.tags] == ["CoinPayments"]


def test_weight_accounting_on_a_world(small):
    g = build_graph(small.passthroughs)
    linked = [p for p in small.passthroughs if p.input_addresses and p.output_addresses]
    assert g.consumed == len(linked)
    assert g.total_weight == sum(len(set(p.input_addresses)) * len(p.output_addresses) for p in linked)
    single = [p for p in linked if len(set(p.input_addresses)) == 1]
    assert build_graph(single).total_weight == len(single)
    assert graph_summary(g)["weight"] == g.total_weight


def test_clusters_match_brute_force_edge_scan(small):
    g = build_graph(small.passthroughs)
    edges = g.edges()
    nodes = sorted(g.succ)
    rng = random.Random(1)
    for n in rng.sample(nodes, min(200, len(nodes))):
        assert input_cluster(g, n) == {u for u, v, _ in edges if v == n}
        assert output_cluster(g, n) == {v for u, v, _ in edges if u == n}


endpoint = st.tuples(st.sampled_from("abcde"), st.sampled_from("vwxyz"), st.sampled_from(["BTC", "LTC"]))


@settings(max_examples=100, deadline=None)
@given(st.lists(endpoint, max_size=25), st.randoms(use_true_random=False))
def test_build_is_order_independent(rows, rng):
    pts = [pt(str(i + 1), s, d, cur_in=c) for i, (s, d, c) in enumerate(rows)]
    shuffled = list(pts)
    rng.shuffle(shuffled)
    a, b = build_graph(pts), build_graph(shuffled)
    assert a.edges() == b.edges()
    assert edges_csv(a) == edges_csv(b)
    assert a.total_weight == len(pts) == a.consumed
    assert all(w >= 1 for _, _, w in a.edges())
