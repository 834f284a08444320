import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shifttrace.chainstore import block_nearest
from shifttrace.errors import MissingRate, UnknownChain, ValidationError
from shifttrace.feed import not_a_service_address
from shifttrace.match import (
    Classification,
    Grade,
    MatchResult,
    Validation,
    best_cell,
    match_shifts,
    phase1_augmented,
    phase1_basic,
    phase2_alternative,
    select_rate,
    sweep_params,
)
from shifttrace.model import FixedAmount, RateRecord, ShiftDetail, ShiftStatus, parse_amount
from shifttrace.sim.builder import generate_world
from shifttrace.sim.config import WorldConfig

from conftest import ETH, InMemory, coinbase, make_chain, shift, spend

T0 = 1_000_000


def btc_blocks() -> list[dict]:
    """Block 2 pays 0.5 BTC to the service and to a stranger; block 4 repeats the value."""
    blocks = [{"height": h, "time": T0 + 600 * h, "txs": [coinbase(f"cb{h}", "miner", "50")]} for h in range(6)]
    blocks[2]["txs"].append(spend("dep", [("cb0", 0)], [("svcA", "0.5"), ("user", "49.4")]))
    blocks[2]["txs"].append(spend("decoy", [("cb1", 0)], [("stranger", "0.5"), ("other", "49.3")]))
    blocks[4]["txs"].append(spend("late", [("cb3", 0)], [("svcB", "0.5"), ("x", "49.2")]))
    return blocks


def eth_blocks() -> list[dict]:
    return [
        {"height": 0, "time": T0 + 1000, "txs": [{"id": "w1", "from": "0xsvc", "to": "0xuser", "value": "7.25"}]},
        {"height": 1, "time": T0 + 1015, "txs": [{"id": "w2", "from": "0xsvc", "to": "0xother", "value": "7.25"}]},
    ]


class FakeService:
    def __init__(self, details: dict[str, ShiftDetail]):
        self.details = details
        self.calls: list[str] = []

    def tx_stats(self, addr):
        self.calls.append(addr)
        return self.details.get(addr) or not_a_service_address(addr)

    def now(self):
        return 0


def complete(addr: str, pair=("BTC", "ETH"), amount="0.5", tx="w1", withdraw="0xuser") -> ShiftDetail:
    return ShiftDetail(
        status=ShiftStatus.COMPLETE,
        address=addr,
        withdraw=withdraw,
        in_coin=parse_amount(amount, 8),
        in_type=pair[0],
        out_coin=parse_amount("7.25", 18),
        out_type=pair[1],
        tx=tx,
    )


@pytest.fixture
def chains():
    return {"BTC": make_chain(btc_blocks()), "ETH": make_chain(eth_blocks(), ETH)}


def test_unique_deposit_is_single(chains):
    s = shift("1", "BTC", "ETH", "49.4", T0 + 1200)
    cs = phase1_basic(s, chains["BTC"], 0, 0)
    assert cs.classification is Classification.SINGLE
    assert (cs.center, cs.lo, cs.hi, cs.clamped) == (2, 2, 2, False)


def test_decoy_in_window_is_multi(chains):
    cs = phase1_basic(shift("1", "BTC", "ETH", "0.5", T0 + 1200), chains["BTC"], 0, 0)
    assert cs.classification is Classification.MULTI
    assert [h.tx_id for h in cs.hits] == ["dep", "decoy"]


def test_absent_value_is_zero(chains):
    cs = phase1_basic(shift("1", "BTC", "ETH", "0.77", T0 + 1200), chains["BTC"], 0, 0)
    assert cs.classification is Classification.ZERO


def test_window_clamping_is_recorded(chains):
    cs = phase1_basic(shift("1", "BTC", "ETH", "0.5", T0), chains["BTC"], 3, 30)
    assert (cs.lo, cs.hi, cs.clamped) == (0, 5, True)


def test_wrong_chain(chains):
    with pytest.raises(UnknownChain):
        phase1_basic(shift("1", "ETH", "BTC", "1", T0), chains["BTC"], 0, 0)


def test_augmented_picks_the_service_owned_hit(chains):
    s = shift("1", "BTC", "ETH", "0.5", T0 + 1200)
    cs = phase1_basic(s, chains["BTC"], 0, 0)
    m = phase1_augmented(s, chains["BTC"], cs, FakeService({"svcA": complete("svcA")}), chains)
    assert m.grade is Grade.AUGMENTED
    assert (m.phase1_tx, m.phase1_index, m.addr_s) == ("dep", 0, "svcA")
    assert (m.phase2_tx, m.phase2_index, m.addr_u) == ("w1", 0, "0xuser")
    assert m.flags == ()


def test_reused_address_with_other_pair_is_discarded(chains):
    s = shift("1", "BTC", "ETH", "0.5", T0 + 1200)
    cs = phase1_basic(s, chains["BTC"], 0, 0)
    svc = FakeService({"svcA": complete("svcA", pair=("BTC", "LTC"))})
    assert phase1_augmented(s, chains["BTC"], cs, svc, chains) is None
    svc = FakeService({"svcA": complete("svcA", amount="0.6")})
    assert phase1_augmented(s, chains["BTC"], cs, svc, chains) is None


def test_out_of_window_hit_fails_timing(chains):
    s = shift("1", "BTC", "ETH", "0.5", T0 + 1200)
    cs = phase1_basic(s, chains["BTC"], 0, 2)
    assert [h.tx_id for h in cs.hits] == ["dep", "decoy", "late"]
    svc = FakeService({"svcA": complete("svcA"), "svcB": complete("svcB", tx="w2", withdraw="0xother")})
    assert phase1_augmented(s, chains["BTC"], cs, svc, chains) is None  # two survivors
    narrow = phase1_basic(s, chains["BTC"], 0, 0)
    assert phase1_augmented(s, chains["BTC"], narrow, svc, chains).addr_s == "svcA"


def test_twin_survivors_are_ambiguous(chains):
    s = shift("1", "BTC", "ETH", "0.5", T0 + 1200)
    svc = FakeService({"svcA": complete("svcA"), "stranger": complete("stranger", tx="w2", withdraw="0xother")})
    report = match_shifts([s], chains, svc, {"BTC": (0, 0)})
    assert "1" in report.ambiguous and "1" not in report.matches
    assert {x.hit.address for x in report.ambiguous["1"]} == {"svcA", "stranger"}


def test_unresolvable_withdrawal_keeps_match_with_flag(chains):
    s = shift("1", "BTC", "ETH", "0.5", T0 + 1200)
    cs = phase1_basic(s, chains["BTC"], 0, 0)
    m = phase1_augmented(s, chains["BTC"], cs, FakeService({"svcA": complete("svcA", tx="ghost")}), chains)
    assert m.grade is Grade.AUGMENTED
    assert m.phase2_tx is None
    assert m.flags == ("phase2_unresolved",)


def test_augmented_requires_passed_validation():
    with pytest.raises(ValidationError):
        MatchResult("1", "BTC", "ETH", 0, FixedAmount(1, 8), Grade.AUGMENTED, "t", 0, 0, "a", validation=Validation(True, False, True, True))


def test_match_shifts_reasons_and_csv(chains):
    shifts = [
        shift("1", "BTC", "ETH", "0.5", T0 + 1200),
        shift("2", "BTC", "ETH", "0.77", T0 + 1200),
        shift("3", "LTC", "ETH", "1", T0),
        shift("10", "BTC", "ETH", "49.4", T0 + 1200),
    ]
    svc = FakeService({"svcA": complete("svcA")})
    r = match_shifts(shifts, chains, svc, {"BTC": (0, 0)})
    assert r.unmatched == {"2": "zero_hits", "3": "no_chain", "10": "no_survivor"}
    lines = r.to_csv().splitlines()
    assert lines[0] == "shift_id,grade,phase1_tx,addr_s,phase2_tx,addr_u,flags"
    assert lines[1] == "1,augmented,dep:0,svcA,w1:0,0xuser,"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "2", "3", "10"]
    basic = match_shifts(shifts, chains, None, {"BTC": (0, 0)})
    assert basic.matches["10"].grade is Grade.BASIC_SINGLE
    assert basic.unmatched["1"] == "multi_hits"


def test_match_caches_service_lookups(chains):
    shifts = [shift(str(i), "BTC", "ETH", "0.5", T0 + 1200 + i) for i in range(5)]
    svc = FakeService({"svcA": complete("svcA")})
    match_shifts(shifts, chains, svc, {"BTC": (0, 0)})
    assert sorted(svc.calls) == ["stranger", "svcA"]


def brute_hits(chain, lo, hi, atoms):
    out = []
    for h in range(lo, hi + 1):
        for tx in chain.block(h).tx_ids:
            for n, (addr, v) in enumerate(chain.outputs_of(tx)):
                if v == atoms:
                    out.append((tx, n, addr))
    return out


def test_phase1_basic_equals_brute_force_scan(small, small_world):
    rng = random.Random(3)
    chains = small.chains
    ids = sorted(chains)
    for i in range(1000):
        cid = rng.choice(ids)
        c = chains[cid]
        h = rng.randrange(c.tip + 1)
        txs = c.block(h).tx_ids
        outs = c.outputs_of(rng.choice(txs)) if txs else []
        atoms = rng.choice(outs)[1] if rng.random() < 0.8 and outs else rng.randint(1, 10**9)
        if atoms == 0:
            continue
        t = small_world.block_times[cid][h] + rng.randint(-900, 900)
        db, da = rng.randint(0, 10), rng.randint(0, 10)
        s = shift(str(i), cid, "XMR", "1", t)
        s = type(s)(cid, "XMR", FixedAmount(atoms, c.config.precision), t, str(i))
        cs = phase1_basic(s, c, db, da)
        hb = block_nearest(c, t)
        assert [(x.tx_id, x.index, x.address) for x in cs.hits] == brute_hits(c, max(hb - db, 0), min(hb + da, c.tip), atoms)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10), st.integers(0, 10), st.integers(0, 5), st.integers(0, 5), st.integers(0, 10**6))
def test_enlarging_the_window_never_loses_hits(db, da, ddb, dda, seed):
    c = make_chain(btc_blocks())
    rng = random.Random(seed)
    s = shift("1", "BTC", "ETH", rng.choice(["0.5", "49.4", "50"]), T0 + rng.randint(-600, 4000))
    small_hits = set(phase1_basic(s, c, db, da).hits)
    assert small_hits <= set(phase1_basic(s, c, db + ddb, da + dda).hits)


def brute_sweep(shifts, chain, max_delta):
    table = np.zeros((max_delta + 1, max_delta + 1), np.int64)
    for s in shifts:
        for db in range(max_delta + 1):
            for da in range(max_delta + 1):
                table[db, da] += len(phase1_basic(s, chain, db, da).hits) == 1
    return table


def test_sweep_table_equals_brute_force_recount(small):
    for cid in ("BTC", "DASH"):
        shifts = [s for s in small.shifts if s.cur_in == cid][:25]
        res = sweep_params(shifts, small.chains[cid], max_delta=12)
        assert res.table.shape == (13, 13)
        assert (res.table == brute_sweep(shifts, small.chains[cid], 12)).all()
        assert res.argmax == best_cell(brute_sweep(shifts, small.chains[cid], 12))
        assert res.n_shifts == len(shifts)


def test_single_shift_sweep_counts_every_covering_window():
    c = make_chain(btc_blocks())
    s = shift("1", "BTC", "ETH", "49.4", T0 + 600 * 4)  # nearest block 4, deposit in block 2
    res = sweep_params([s], c, max_delta=30)
    assert res.table.shape == (31, 31)
    want = np.zeros((31, 31), np.int64)
    want[2:, :] = 1
    assert (res.table == want).all()
    assert res.argmax == (2, 0)


def test_sweep_needs_shifts():
    with pytest.raises(ValidationError):
        sweep_params([], make_chain(btc_blocks()))


def test_best_cell_tie_breaks():
    t = np.zeros((4, 4), np.int64)
    t[3, 0] = t[0, 3] = t[1, 2] = 5
    assert best_cell(t) == (0, 3)
    t[1, 1] = 5
    assert best_cell(t) == (1, 1)
    t[0, 0] = 6
    assert best_cell(t) == (0, 0)


def test_sweep_recovers_the_configured_btc_window():
    w = generate_world(WorldConfig(seed=8, duration=24 * 3600, background_rate=0.02, shift_rate=40, skew={"BTC": (0, 1)}))
    m = InMemory(w)
    assert sweep_params(m.shifts, m.chains["BTC"]).argmax == (0, 1)


@pytest.fixture(scope="module")
def dense():
    cfg = WorldConfig(seed=2, duration=6 * 3600, background_rate={"BTC": 1.0, "LTC": 0.05, "ETH": 0.05}, shift_rate=30)
    w = generate_world(cfg)
    m = InMemory(w)
    rates = [r for k in range(len(w.rate_ticks)) for r in w.rate_records(k)]
    trades = [t for t in w.published() if t.cur_out == "BTC" and t.withdraw_tx]
    return w, m, rates, trades


def test_alternative_phase2_contains_true_withdrawal(dense):
    w, m, rates, trades = dense
    assert trades
    for t in trades:
        s = w.shift_record(t)
        cs = phase2_alternative(s, select_rate(rates, s), m.chains["BTC"], 6, Fraction(5, 1000))
        assert any(h.tx_id == t.withdraw_tx and h.address == t.addr_u for h in cs.hits)


def test_alternative_phase2_zero_error_with_slippage_finds_nothing(dense):
    w, m, rates, trades = dense
    for t in trades:
        s = w.shift_record(t)
        assert phase2_alternative(s, select_rate(rates, s), m.chains["BTC"], 6, Fraction(0)).classification is Classification.ZERO


def test_alternative_phase2_wide_error_in_dense_traffic_is_multi(dense):
    w, m, rates, trades = dense
    multi = 0
    for t in trades:
        s = w.shift_record(t)
        multi += phase2_alternative(s, select_rate(rates, s), m.chains["BTC"], 6, Fraction(5, 100)).classification is Classification.MULTI
    assert multi > 0.9 * len(trades)


def test_alternative_phase2_hits_grow_with_error_rate(dense):
    w, m, rates, trades = dense
    for t in trades[:10]:
        s = w.shift_record(t)
        r = select_rate(rates, s)
        prev: set = set()
        for k in range(11):  # 0% to 1% in 0.1% steps
            hits = set(phase2_alternative(s, r, m.chains["BTC"], 6, Fraction(k, 1000)).hits)
            assert prev <= hits
            prev = hits


def test_alternative_phase2_needs_a_usable_rate(dense):
    w, m, rates, trades = dense
    s = w.shift_record(trades[0])
    with pytest.raises(MissingRate):
        phase2_alternative(s, None, m.chains["BTC"], 6, Fraction(1, 100))
    later = [r for r in rates if r.pair == s.pair and r.timestamp > s.timestamp]
    if later:
        with pytest.raises(MissingRate):
            phase2_alternative(s, later[0], m.chains["BTC"], 6, Fraction(1, 100))
    with pytest.raises(MissingRate):
        select_rate([], s)
    with pytest.raises(UnknownChain):
        phase2_alternative(s, select_rate(rates, s), m.chains["LTC"], 6, Fraction(1, 100))


def test_select_rate_takes_latest_at_or_before():
    s = shift("1", "BTC", "ETH", "1", 100)
    mk = lambda t, r: RateRecord("BTC", "ETH", Fraction(r), parse_amount("10", 8), parse_amount("0.001", 8), parse_amount("0.01", 18), t)
    assert select_rate([mk(50, 30), mk(100, 31), mk(101, 32)], s).rate == 31
