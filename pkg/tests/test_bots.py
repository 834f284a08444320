import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shifttrace.bots import TradingCluster, clusters_csv, corroborate, find_clusters, prune_outliers, validate_cluster, value_bands
from shifttrace.errors import DegenerateCluster
from shifttrace.model import FixedAmount, ShiftRecord
from shifttrace.relgraph import build_graph
from shifttrace.sim.builder import generate_world
from shifttrace.sim.config import BotSpec, Plants, WorldConfig

from conftest import InMemory

_ids = iter(range(10**6, 10**7))


def rec(cur_in: str, cur_out: str, atoms: int, t: int, sid: str | None = None) -> ShiftRecord:
    return ShiftRecord(cur_in, cur_out, FixedAmount(atoms, 8), t, sid or str(next(_ids)))


def burst(n: int, t0: int, step: int, pair=("BTC", "XMR"), atoms=10_000_000) -> list[ShiftRecord]:
    return [rec(*pair, atoms, t0 + i * step) for i in range(n)]


def members(clusters) -> list[set[str]]:
    return [set(c.members) for c in clusters]


def test_seventeen_member_burst_is_one_cluster():
    b = burst(17, 1000, 15)
    noise = [rec("ETH", "BTC", 10_000_000 + 7919 * i, 1000 + 20 * i) for i in range(40)]
    (c,) = find_clusters(b + noise)
    assert set(c.members) == {s.id for s in b}
    assert c.pairs == (("BTC", "XMR"),)
    assert c.bands == ((("BTC", "XMR"), FixedAmount(10_000_000, 8)),)


def test_fourteen_in_five_minutes_is_not_a_cluster():
    assert find_clusters(burst(14, 1000, 20)) == []


def test_values_within_one_percent_share_a_band():
    b = [rec("BTC", "XMR", 10_000_000 + 5_000 * (i % 3), 1000 + 10 * i) for i in range(15)]
    (c,) = find_clusters(b)
    assert c.size == 15
    assert find_clusters([rec("BTC", "XMR", 10_000_000 + 150_000 * (i % 2), 1000 + 10 * i) for i in range(15)]) == []


def test_value_bands_are_greedy_from_below():
    assert value_bands([100, 101, 102, 103], Fraction(1, 100)) == {100: 100, 101: 100, 102: 102, 103: 102}


def test_sparse_tail_joins_a_dense_core():
    core = burst(15, 10_000, 20)  # 15 trades inside 280 s
    before = burst(8, 10_000 - 8 * 250, 250)  # 250 s apart, chained into the core
    after = burst(7, core[-1].timestamp + 250, 250)
    stray = burst(1, after[-1].timestamp + 301, 1)  # beyond the chaining gap
    (c,) = find_clusters(before + core + after + stray)
    assert c.size == 30
    assert set(c.members) == {s.id for s in before + core + after}
    assert c.end - c.start >= 40 * 60 - 600


def test_overlapping_related_pairs_merge():
    a = burst(16, 1000, 10, pair=("ETH", "BTC"), atoms=100_000_000)
    b = burst(15, 1005, 10, pair=("ZEC", "BTC"), atoms=300_000_000)
    c = burst(15, 1005, 10, pair=("LTC", "DOGE"), atoms=300_000_000)
    out = find_clusters(a + b + c)
    assert members(out) == [{s.id for s in a + b}, {s.id for s in c}]
    assert out[0].pairs == (("ETH", "BTC"), ("ZEC", "BTC"))


def cluster_of(rows: list[ShiftRecord]) -> TradingCluster:
    rows = sorted(rows, key=lambda s: s.timestamp)
    pairs = tuple(sorted({s.pair for s in rows}))
    bands = tuple((p, next(s.amt for s in rows if s.pair == p)) for p in pairs)
    return TradingCluster(tuple(s.id for s in rows), pairs, bands, rows[0].timestamp, rows[-1].timestamp)


def test_prune_drops_the_odd_one_out():
    main = burst(19, 1000, 10, pair=("ETH", "BTC"))
    odd = [rec("LTC", "ZEC", 10_000_000, 1005)]
    shifts = {s.id: s for s in main + odd}
    c = prune_outliers(cluster_of(main + odd), shifts)
    assert set(c.members) == {s.id for s in main}
    assert c.pairs == (("ETH", "BTC"),)
    assert validate_cluster(c, shifts) == []


def test_prune_keeps_a_pair_sharing_cur_out():
    a = burst(12, 1000, 10, pair=("ETH", "BTC"))
    b = burst(6, 1003, 10, pair=("ZEC", "BTC"))
    shifts = {s.id: s for s in a + b}
    c = prune_outliers(cluster_of(a + b), shifts)
    assert c.size == 18
    assert c.pairs == (("ETH", "BTC"), ("ZEC", "BTC"))


def test_unrelated_split_is_degenerate():
    a = burst(10, 1000, 10, pair=("ETH", "BTC"))
    b = burst(9, 1003, 10, pair=("LTC", "ZEC"))
    with pytest.raises(DegenerateCluster):
        prune_outliers(cluster_of(a + b), {s.id: s for s in a + b})
    c = burst(10, 1003, 10, pair=("LTC", "ZEC"))
    with pytest.raises(DegenerateCluster):
        prune_outliers(cluster_of(a + c), {s.id: s for s in a + c})


def test_prune_below_min_size_is_degenerate():
    a = burst(15, 1000, 10, pair=("ETH", "BTC"))
    b = burst(2, 1003, 10, pair=("LTC", "ZEC"))
    with pytest.raises(DegenerateCluster):
        prune_outliers(cluster_of(a[:14] + b), {s.id: s for s in a + b})
    with pytest.raises(DegenerateCluster):
        prune_outliers(TradingCluster((), (), (), 0, 0), {})


def test_validate_cluster_reports_problems():
    a = burst(15, 1000, 10, pair=("ETH", "BTC"))
    shifts = {s.id: s for s in a}
    assert validate_cluster(cluster_of(a), shifts) == []
    sparse = burst(15, 1000, 60)
    assert "no dense window" in validate_cluster(cluster_of(sparse), {s.id: s for s in sparse})
    off = a[:14] + [rec("ETH", "BTC", 20_000_000, 1100)]
    bad = cluster_of(off)
    bad = TradingCluster(bad.members, bad.pairs, ((("ETH", "BTC"), FixedAmount(10_000_000, 8)),), bad.start, bad.end)
    assert any("outside" in p for p in validate_cluster(bad, {s.id: s for s in off}))


# ---------------------------------------------------------------------------
# brute-force oracle


def brute_clusters(shifts, window, min_size, tol):
    """Same definition, evaluated by exhaustive pairwise scans."""
    rows = {s.id: s for s in shifts}
    runs = []
    for pair in {s.pair for s in rows.values()}:
        ps = [s for s in rows.values() if s.pair == pair]
        centre = {}
        for v in sorted({s.amt.atoms for s in ps}):
            below = [c for c in centre.values() if c <= v]
            c = max(below) if below else None
            centre[v] = c if c is not None and v - c <= tol * c else v
        for band in set(centre.values()):
            bs = [s for s in ps if centre[s.amt.atoms] == band]
            comp = {s.id: {s.id} for s in bs}
            for x in bs:
                for y in bs:
                    if abs(x.timestamp - y.timestamp) <= window and comp[x.id] is not comp[y.id]:
                        merged = comp[x.id] | comp[y.id]
                        for k in merged:
                            comp[k] = merged
            for group in {frozenset(g) for g in comp.values()}:
                ts = [rows[k].timestamp for k in group]
                if any(sum(t <= u <= t + window for u in ts) >= min_size for t in ts):
                    runs.append((pair, group))
    span = [(min(rows[k].timestamp for k in g), max(rows[k].timestamp for k in g)) for _, g in runs]
    linked = {
        (i, j)
        for i, (pi, _) in enumerate(runs)
        for j, (pj, _) in enumerate(runs)
        if span[i][0] <= span[j][1] and span[j][0] <= span[i][1] and (pi[0] == pj[0] or pi[1] == pj[1])
    }
    reach = {i: {i} for i in range(len(runs))}
    for _ in runs:  # transitive closure by repeated expansion
        reach = {i: set().union(*(reach[j] for j in r), *({b for a, b in linked if a in r},)) for i, r in reach.items()}
    clusters = {frozenset(r) for r in reach.values()}
    clusters = [(None, set().union(*(runs[i][1] for i in c))) for c in clusters]
    return sorted((g for _, g in clusters), key=lambda g: sorted(g))


def random_archive(rng: random.Random, n: int, horizon: int) -> list[ShiftRecord]:
    pairs = [("BTC", "XMR"), ("ETH", "BTC"), ("ZEC", "BTC"), ("LTC", "DOGE")]
    values = [10_000_000, 10_050_000, 10_110_000, 20_000_000]
    return [rec(*rng.choice(pairs), rng.choice(values), rng.randrange(horizon)) for _ in range(n)]


@settings(max_examples=80, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(0, 120), st.integers(3, 8))
def test_find_clusters_equals_brute_force(rng, n, min_size):
    shifts = random_archive(rng, n, 3000)
    got = sorted((set(c.members) for c in find_clusters(shifts, window=300, min_size=min_size, tol=Fraction(1, 100))), key=lambda g: sorted(g))
    assert got == brute_clusters(shifts, 300, min_size, Fraction(1, 100))


def test_find_clusters_equals_brute_force_on_a_busy_archive():
    rng = random.Random(11)
    shifts = random_archive(rng, 1500, 86400)
    for t0 in (5000, 40_000, 70_000):
        shifts += burst(rng.randint(15, 25), t0, rng.randint(5, 19))
    got = sorted((set(c.members) for c in find_clusters(shifts)), key=lambda g: sorted(g))
    want = brute_clusters(shifts, 300, 15, Fraction(1, 100))
    assert len(want) >= 3
    assert got == want


@settings(max_examples=40, deadline=None)
@given(st.randoms(use_true_random=False))
def test_clusters_do_not_depend_on_archive_order(rng):
    shifts = random_archive(rng, 80, 2000) + burst(16, 500, 7)
    shuffled = list(shifts)
    rng.shuffle(shuffled)
    assert find_clusters(shifts, min_size=5) == find_clusters(shuffled, min_size=5)


def test_found_clusters_validate():
    rng = random.Random(4)
    shifts = random_archive(rng, 400, 6000)
    by_id = {s.id: s for s in shifts}
    for c in find_clusters(shifts, min_size=6):
        try:
            c = prune_outliers(c, by_id, min_size=6)
        except DegenerateCluster:
            continue
        assert validate_cluster(c, by_id, min_size=6) == []


# ---------------------------------------------------------------------------
# worlds


def test_planted_bot_recovered_and_corroborated(small):
    sid = {t.key: t.shift_id for t in small.world.trades}
    (bot,) = small.world.ground_truth["bots"]
    by_id = {s.id: s for s in small.shifts}
    (c,) = find_clusters(small.shifts)
    c = prune_outliers(c, by_id)
    assert set(c.members) == {sid[k] for k in bot["members"]}
    co = corroborate(c, build_graph(small.passthroughs), small.report, small.chains)
    assert co.shape == (len(bot["senders"]), len(bot["receivers"]))
    assert {a for _, a, _ in co.dominant} == set(bot["receivers"])
    csv = clusters_csv([c], by_id, {"BTC": Fraction(10000)})
    assert csv.splitlines()[1].split(",")[-2:] == ["BTC:1.6", "16000"]


def bot_world(spec: BotSpec) -> InMemory:
    return InMemory(generate_world(WorldConfig(seed=12, duration=6 * 3600, background_rate=0.005, shift_rate=4, plants=Plants(bots=(spec,)))))


def test_account_bot_reusing_one_sender_has_a_dominant_address():
    m = bot_world(BotSpec(16, "ETH", "BTC", "1.5", receivers=16, single_sender=True))
    (bot,) = m.world.ground_truth["bots"]
    (c,) = find_clusters(m.shifts)
    co = corroborate(c, None, m.report, m.chains)
    assert [(ch, a) for ch, a, _ in co.dominant] == [("ETH", a) for a in bot["senders"]]
    assert co.shape == (1, 16)


def test_distinct_endpoints_have_no_dominant_address():
    m = bot_world(BotSpec(16, "BTC", "XMR", "0.2", receivers=16, senders_per_deposit=1))
    (c,) = find_clusters(m.shifts)
    co = corroborate(c, None, m.report, m.chains)
    assert co.dominant == []
    assert co.shape == (16, 16)
