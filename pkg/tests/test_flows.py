import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shifttrace.flows import (
    PassThrough,
    detect_roundtrips,
    detect_uturns,
    heatmap,
    heatmap_csv,
    link_passthroughs,
    roundtrip_table,
    uturn_table,
)
from shifttrace.model import FixedAmount, UtxoRef
from shifttrace.sim.builder import WorldBuilder, generate_world, plant_pattern
from shifttrace.sim.config import WorldConfig

from conftest import REGISTRY, InMemory, hierarchy_world, small_config, uturns_of


def pt(sid, cur_in, cur_out, t, amt, out_coin, inputs=(), addr_u="u") -> PassThrough:
    p_in, p_out = REGISTRY.precision(cur_in), REGISTRY.precision(cur_out)
    return PassThrough(
        shift_id=sid,
        cur_in=cur_in,
        cur_out=cur_out,
        timestamp=t,
        amt=FixedAmount(amt, p_in),
        out_coin=FixedAmount(out_coin, p_out),
        phase1=UtxoRef(f"d{sid}", 0),
        phase2=UtxoRef(f"w{sid}", 0),
        addr_s=f"s{sid}",
        addr_u=addr_u,
        input_addresses=tuple(inputs),
        output_addresses=(addr_u,) if addr_u else (),
        withdraw_time=t + 600,
    )


def pair_ids(items):
    return [(x.first, x.second) for x in items]


@pytest.fixture(scope="module")
def clean():
    """A collision-free world without deliberately ambiguous plants."""
    return InMemory(generate_world(small_config(seed=9, plants=dataclasses.replace(small_config().plants, bots=(), twins=0, reuse=0))))


def sid_map(world):
    return {t.key: t.shift_id for t in world.trades if t.published}


def test_no_matches_no_passthroughs():
    assert link_passthroughs([]) == []
    assert detect_uturns([]) == []
    assert detect_roundtrips([], []) == []


def test_collision_free_world_links_every_published_trade(clean):
    pub = clean.world.published()
    assert len(clean.passthroughs) == len(pub)
    assert {p.shift_id for p in clean.passthroughs} == {t.shift_id for t in pub}
    by_id = {t.shift_id: t for t in pub}
    for p in clean.passthroughs:
        t = by_id[p.shift_id]
        assert p.phase1 == UtxoRef(t.deposit_tx, t.deposit_n)
        assert p.addr_u == t.addr_u


def test_heatmap_totals_are_consistent(clean):
    counts = heatmap(clean.passthroughs)
    rows = [ln.split(",") for ln in heatmap_csv(counts).splitlines()]
    header, body, total = rows[0], rows[1:-1], rows[-1]
    for r in body:
        assert int(r[-1]) == sum(p.cur_in == r[0] for p in clean.passthroughs)
        assert sum(map(int, r[1:-1])) == int(r[-1])
    for j, cur in enumerate(header[1:-1], start=1):
        assert int(total[j]) == sum(p.cur_out == cur for p in clean.passthroughs)
    assert int(total[-1]) == len(clean.passthroughs)


def test_detected_uturns_equal_planted(clean):
    sid = sid_map(clean.world)
    want = {(sid[u["first"]], sid[u["second"]], tuple(u["variants"])) for u in clean.world.ground_truth["uturns"]}
    assert {(u.first, u.second, u.labels) for u in clean.uturns} == want
    kinds = {u["variants"][-1] for u in clean.world.ground_truth["uturns"]}
    assert kinds == {"basic", "address", "utxo"}


def test_planted_utxo_uturn_carries_all_three_labels(clean):
    sid = sid_map(clean.world)
    labels = {(u.first, u.second): u.labels for u in clean.uturns}
    utxo = [u for u in clean.world.ground_truth["uturns"] if "utxo" in u["variants"]]
    assert utxo
    for u in utxo:
        assert labels[(sid[u["first"]], sid[u["second"]])] == ("basic", "address", "utxo")


def test_address_uturn_with_local_hop_is_not_utxo(clean):
    sid = sid_map(clean.world)
    labels = {(u.first, u.second): u.labels for u in clean.uturns}
    hops = [u for u in clean.world.ground_truth["uturns"] if u["variants"] == ["basic", "address"]]
    assert hops
    for u in hops:
        got = labels[(sid[u["first"]], sid[u["second"]])]
        assert "address" in got and "utxo" not in got


def test_detected_roundtrips_equal_planted(clean):
    sid = sid_map(clean.world)
    want = {(sid[r["first"]], sid[r["second"]], r["same_address"]) for r in clean.world.ground_truth["roundtrips"]}
    assert {(r.first, r.second, r.same_address) for r in clean.roundtrips} == want
    assert {True, False} == {w[2] for w in want}
    table = roundtrip_table(clean.roundtrips)
    assert sum(r["regular"] for r in table.values()) == len(want)
    assert sum(r["same_address"] for r in table.values()) == sum(w[2] for w in want)


def test_roundtrips_embed_detected_uturns(clean):
    pairs = set(pair_ids(clean.uturns))
    for r in clean.roundtrips:
        assert r.uturn in pairs
        assert r.uturn == (r.first, r.second)


def test_same_address_roundtrip_on_dash():
    b = WorldBuilder(WorldConfig(seed=4, duration=6 * 3600, background_rate=0.005, shift_rate=4))
    same = plant_pattern(b, "roundtrip", same_address=True, chain_x="DASH", chain_y="BTC")
    pay = plant_pattern(b, "roundtrip", same_address=False, chain_x="DASH", chain_y="LTC")
    w = b.build()
    m = InMemory(w)
    sid = sid_map(w)
    planted = {r["id"]: r for r in w.ground_truth["roundtrips"]}
    flags = {(r.first, r.second): (r.cur_x, r.same_address) for r in m.roundtrips}
    assert flags[(sid[planted[same]["first"]], sid[planted[same]["second"]])] == ("DASH", True)
    assert flags[(sid[planted[pay]["first"]], sid[planted[pay]["second"]])] == ("DASH", False)


def test_uturn_table_counts_labels(clean):
    table = uturn_table(clean.uturns)
    assert sum(r["basic"] for r in table.values()) == len(clean.uturns)
    assert sum(r["utxo"] for r in table.values()) == sum(u.has("utxo") for u in clean.uturns)


# ---------------------------------------------------------------------------
# hand-built boundaries


def reversal(gap=600, second_amt=1_000_000, out_coin=1_000_000):
    return [pt("1", "BTC", "DASH", 1000, 50_000, out_coin), pt("2", "DASH", "BTC", 1000 + gap, second_amt, 49_000)]


def test_two_percent_gap_is_not_a_uturn():
    assert detect_uturns(reversal(second_amt=1_020_000)) == []
    assert detect_uturns(reversal(second_amt=980_000)) == []


@pytest.mark.parametrize("gap,found", [(1, True), (1799, True), (1800, True), (1801, False), (0, False)])
def test_uturn_window_is_half_open(gap, found):
    assert bool(detect_uturns(reversal(gap=gap))) is found


@pytest.mark.parametrize("amt,found", [(1_010_000, True), (990_000, True), (1_010_001, False), (989_999, False)])
def test_uturn_tolerance_boundary(amt, found):
    assert bool(detect_uturns(reversal(second_amt=amt))) is found


@pytest.mark.parametrize("amt,found", [(1_004_900, True), (995_100, True), (1_005_000, True), (1_005_100, False), (994_900, False)])
def test_roundtrip_tolerance_boundary(amt, found):
    pts = reversal(second_amt=amt)
    assert bool(detect_roundtrips(pts, detect_uturns(pts))) is found


@pytest.mark.parametrize("gap,found", [(1799, True), (1801, False)])
def test_roundtrip_window_boundary(gap, found):
    pts = reversal(gap=gap)
    assert bool(detect_roundtrips(pts, detect_uturns(pts, window=3600))) is found


def test_eight_tenths_percent_drift_is_uturn_but_not_roundtrip():
    pts = reversal(second_amt=1_008_000)
    uts = detect_uturns(pts)
    assert pair_ids(uts) == [("1", "2")]
    assert detect_roundtrips(pts, uts) == []


def test_same_address_flag():
    a = pt("1", "BTC", "DASH", 1000, 50_000, 1_000_000, inputs=("alice", "bob"))
    back = pt("2", "DASH", "BTC", 1300, 1_000_000, 49_000, addr_u="alice")
    pay = pt("3", "DASH", "BTC", 1300, 1_000_000, 49_000, addr_u="merchant")
    assert detect_roundtrips([a, back], detect_uturns([a, back]))[0].same_address
    assert not detect_roundtrips([a, pay], detect_uturns([a, pay]))[0].same_address


def test_greedy_pairing_is_earliest_first_and_exclusive():
    firsts = [pt(str(i), "BTC", "DASH", 1000 + i, 50_000, 1_000_000) for i in range(3)]
    seconds = [pt(str(10 + i), "DASH", "BTC", 1100 + i, 1_000_000, 49_000) for i in range(2)]
    uts = detect_uturns(firsts + seconds)
    assert pair_ids(uts) == [("0", "10"), ("1", "11")]


def test_chained_trade_is_never_claimed_twice():
    # 2 could close 1's reversal and also open its own; it is used once as a second leg
    pts = [
        pt("1", "BTC", "DASH", 1000, 50_000, 1_000_000),
        pt("2", "DASH", "BTC", 1100, 1_000_000, 50_000),
        pt("3", "BTC", "DASH", 1200, 50_000, 1_000_000),
    ]
    uts = detect_uturns(pts)
    assert pair_ids(uts) == [("1", "2")]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["BTC", "DASH", "LTC"]), st.sampled_from(["BTC", "DASH", "LTC"]), st.integers(0, 4000), st.integers(990, 1010)), max_size=30))
def test_greedy_pairing_never_reuses_a_trade(rows):
    pts = [pt(str(i), a, b, t, v * 1000, v * 1000) for i, (a, b, t, v) in enumerate(rows) if a != b]
    uts = detect_uturns(pts)
    seconds = [u.second for u in uts]
    firsts = [u.first for u in uts]
    assert len(set(seconds)) == len(seconds)
    assert len(set(firsts)) == len(firsts)
    assert len({u.tx1 for u in uts}) == len(uts)
    by_id = {p.shift_id: p for p in pts}
    for u in uts:
        a, b = by_id[u.first], by_id[u.second]
        assert (a.cur_in, a.cur_out) == (b.cur_out, b.cur_in)
        assert 0 < b.timestamp - a.timestamp <= 1800
        assert abs(b.amt.atoms - a.out_coin.atoms) * 100 <= a.out_coin.atoms
    pairs = set(pair_ids(uts))
    assert all(r.uturn in pairs for r in detect_roundtrips(pts, uts))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_label_hierarchy_holds_on_random_worlds(seed):
    for u in uturns_of(hierarchy_world(seed)):
        assert u.labels[0] == "basic"
        assert not u.has("utxo") or u.has("address")
