"""Deterministic multi-chain world generation with planted ground truth.

The builder works in two stages.  Planning places every trade and pattern as
transaction *intents* (height, creation order, explicit inputs and outputs)
while keeping value reservations that make planted deposits unambiguous.
Emission then walks each chain block by block, interleaves background
traffic, resolves the faucet and hot-wallet spend chains and renders the
ledger lines.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from bisect import bisect_left, bisect_right, insort
from contextlib import contextmanager
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

import numpy as np

from ..chainstore import ledger_header, render_index_dump
from ..errors import ConfigError, PlantingFailed, UnsupportedVariant
from ..model import (
    ChainRegistry,
    FixedAmount,
    RateRecord,
    ShiftDetail,
    ShiftRecord,
    ShiftStatus,
    TagRecord,
    format_atoms,
    format_fraction,
    parse_atoms,
    parse_fraction,
)
from .config import UTURN_VARIANTS, BotSpec, HubSpec, WorldConfig

# Reference USD prices (micro-dollars) and service miner fees per currency.
BASE_PRICE = {
    "BTC": 6_000_000_000,
    "BCH": 800_000_000,
    "LTC": 100_000_000,
    "DOGE": 4_000,
    "DASH": 400_000_000,
    "ETH": 500_000_000,
    "ETC": 15_000_000,
    "ZEC": 250_000_000,
    "XMR": 150_000_000,
    "SALT": 1_000_000,
}
MINER_FEE = {
    "BTC": "0.0005",
    "BCH": "0.0002",
    "LTC": "0.001",
    "DOGE": "2",
    "DASH": "0.002",
    "ETH": "0.001",
    "ETC": "0.01",
    "ZEC": "0.0001",
    "XMR": "0.01",
    "SALT": "1",
}
PREFIX = {"BTC": "1", "BCH": "q", "LTC": "L", "DOGE": "D", "DASH": "X", "ZEC": "t1", "ETH": "0x", "ETC": "0x", "XMR": "4", "SALT": "0x"}
SERVICE_SPREAD = Fraction(997, 1000)
PRICE_VOLATILITY = 0.002
DENOMINATIONS = ("0.01", "0.1", "1", "10")
FEE_INCREMENT = "0.0000001"
REVERSAL_WINDOW = 35 * 60
REVERSAL_MARGIN = Fraction(15, 1000)
BOT_AVOID = Fraction(2, 100)
MAX_ATTEMPTS = 400


class _Retry(Exception):
    """The current placement violates a constraint; undo and try again."""


@dataclass
class TxSpec:
    height: int
    order: int
    tx_id: str
    inputs: tuple = ()  # (tx_id, n) refs
    outputs: tuple = ()  # (address, atoms)
    wallet: str | None = None  # spend the wallet's current coin and return change to it
    pool_in: int | None = None
    pool_out: int | None = None
    sender: str | None = None  # account chains


@dataclass
class Trade:
    key: str
    kind: str
    cur_in: str
    cur_out: str
    amt: int
    out_coin: int
    feed_time: int
    addr_s: str
    addr_u: str
    tick: int
    deposit_height: int | None = None
    deposit_tx: str | None = None
    deposit_n: int | None = None
    withdraw_height: int | None = None
    withdraw_time: int = 0
    withdraw_tx: str = ""
    withdraw_n: int | None = 0
    funding: tuple[str, ...] = ()
    published: bool = True
    shift_id: str | None = None
    group: str | None = None
    expect: str = "unique"
    survivors: tuple[str, ...] = ()


class _ChainState:
    def __init__(self, cfg, times: list[int], window: tuple[int, int]):
        self.cfg = cfg
        self.id = cfg.chain_id
        self.times = times
        self.tip = len(times) - 1
        self.window = window
        self.reserved: set[int] = set()  # deposit values
        self.used: set[int] = set()  # every other planned output value
        self.intents: list[TxSpec] = []
        self.q = 10 ** max(cfg.precision - 8, 0)
        self.fee = 10 ** max(cfg.precision - 5, 0)
        self.offsets: list[int] = []
        self.offset_pos = 0

    def nearest(self, t: int) -> int:
        times = self.times
        i = bisect_left(times, t)
        if i == 0:
            return 0
        if i == len(times):
            return i - 1
        return i - 1 if t - times[i - 1] <= times[i] - t else i

    def region(self, h: int) -> tuple[int, int]:
        """Closed range of feed times whose nearest block is ``h``."""
        lo = -(10**12) if h == 0 else (self.times[h - 1] + self.times[h]) // 2 + 1
        hi = 10**12 if h == self.tip else (self.times[h] + self.times[h + 1]) // 2
        return lo, hi

    def first_at_or_after(self, t: int) -> int:
        return bisect_left(self.times, t)


@dataclass
class World:
    config: WorldConfig
    registry: ChainRegistry
    block_times: dict[str, list[int]]
    ledgers: dict[str, bytes]
    trades: list[Trade]
    abandoned: list[tuple[str, str, int]]  # (addr_s, cur_in, created)
    rate_ticks: list[int]
    rate_rows: dict[int, list[tuple]]
    tags: list[TagRecord]
    ground_truth: dict
    sim_indices: dict[str, bytes] = field(default_factory=dict)

    @property
    def end(self) -> int:
        return self.config.start + self.config.duration

    def published(self) -> list[Trade]:
        return [t for t in self.trades if t.published]

    def shift_record(self, t: Trade) -> ShiftRecord:
        return ShiftRecord(t.cur_in, t.cur_out, FixedAmount(t.amt, self.registry.precision(t.cur_in)), t.feed_time, t.shift_id or t.key)

    def detail(self, t: Trade) -> ShiftDetail:
        reg = self.registry
        return ShiftDetail(
            status=ShiftStatus.COMPLETE,
            address=t.addr_s,
            withdraw=t.addr_u,
            in_coin=FixedAmount(t.amt, reg.precision(t.cur_in)),
            in_type=t.cur_in,
            out_coin=FixedAmount(t.out_coin, reg.precision(t.cur_out)),
            out_type=t.cur_out,
            tx=t.withdraw_tx,
            tx_url=f"sim://{t.cur_out}/tx/{t.withdraw_tx}",
        )

    def rate_records(self, tick: int) -> list[RateRecord]:
        reg = self.registry
        out = []
        for cur_in, cur_out, rate, limit, minimum, fee in self.rate_rows.get(tick, []):
            p_in = reg.precision(cur_in)
            out.append(
                RateRecord(
                    cur_in,
                    cur_out,
                    parse_fraction(rate),
                    FixedAmount(parse_atoms(limit, p_in), p_in),
                    FixedAmount(parse_atoms(minimum, p_in), p_in),
                    FixedAmount(parse_atoms(fee, reg.precision(cur_out)), reg.precision(cur_out)),
                    self.rate_ticks[tick],
                )
            )
        return out


class WorldBuilder:
    """Plans trades and patterns, then emits ledgers and service records."""

    def __init__(self, config: WorldConfig):
        self.config = config
        self.registry = ChainRegistry(config.chains, config.off_ledger)
        self.rng = random.Random(f"world:{config.seed}")
        self.start = config.start
        self.end = config.start + config.duration
        self.t_lo = self.start + 3600
        self.t_hi = self.end - 2 * 3600
        self.chains: dict[str, _ChainState] = {}
        for idx, cfg in enumerate(config.chains):
            self.chains[cfg.chain_id] = _ChainState(cfg, self._schedule(cfg, idx), config.window(cfg.chain_id))
        self.ledger_ids = [c.chain_id for c in config.chains]
        for cur in self.registry.currencies():
            if cur not in self.chains and cur not in config.off_ledger:
                raise ConfigError(f"currency {cur} has no precision")
        self._order = 0
        self._tx_serial = 0
        self._addr_serial = 0
        self._journal: list | None = None
        self.trades: list[Trade] = []
        self.abandoned: list[tuple[str, str, int]] = []
        self._by_pair: dict[tuple[str, str], list[tuple[int, int]]] = {}
        self._bot_bands: list[tuple[str, str, int]] = []
        self._group_values: dict[tuple[str, int], str] = {}
        self._pattern_serial = 0
        self.tags: list[TagRecord] = []
        self._published = False
        self.gt: dict = {
            "uturns": [],
            "roundtrips": [],
            "coinjoins": [],
            "coinjoin_pre": [],
            "coinjoin_post": [],
            "coinjoin_hops": [],
            "pool": [],
            "bots": [],
            "hubs": [],
            "twins": [],
            "reuse": [],
            "decoys": [],
        }
        self._init_prices()

    # -- schedules and prices ------------------------------------------------

    def _schedule(self, cfg, idx: int) -> list[int]:
        n = self.config.duration // cfg.block_interval + 1
        j = int(self.config.jitter * cfg.block_interval)
        rng = np.random.default_rng([self.config.seed, 17, idx])
        noise = rng.integers(-j, j + 1, size=n) if j else np.zeros(n, dtype=np.int64)
        times = self.start + np.arange(n, dtype=np.int64) * cfg.block_interval + noise
        return [int(x) for x in times]

    def _init_prices(self) -> None:
        cfg = self.config
        self.n_ticks = cfg.duration // cfg.feed_tick
        self.tick_times = [self.start + i * cfg.feed_tick for i in range(self.n_ticks + 1)]
        self.currencies = list(self.ledger_ids) + [c for c in cfg.off_ledger if c not in self.chains]
        self.prices: dict[str, list[int]] = {}
        for idx, cur in enumerate(self.currencies):
            base = BASE_PRICE.get(cur, 10_000_000)
            rng = np.random.default_rng([cfg.seed, 29, idx])
            walk = np.exp(np.cumsum(rng.normal(0.0, PRICE_VOLATILITY, size=self.n_ticks + 1)))
            self.prices[cur] = [max(int(base * w), 1) for w in walk]
        self._rate_cache: dict[tuple[str, str, int], tuple[Fraction, str]] = {}
        self.used_pairs: set[tuple[str, str]] = {(a, b) for a in self.ledger_ids for b in self.ledger_ids if a != b}

    def tick_of(self, t: int) -> int:
        return min(max((t - self.start) // self.config.feed_tick, 0), self.n_ticks)

    def rate(self, cur_in: str, cur_out: str, tick: int) -> Fraction:
        key = (cur_in, cur_out, tick)
        hit = self._rate_cache.get(key)
        if hit is None:
            exact = Fraction(self.prices[cur_in][tick], self.prices[cur_out][tick]) * SERVICE_SPREAD
            text = format_fraction(exact, 16)
            hit = self._rate_cache[key] = (parse_fraction(text), text)
        return hit[0]

    def precision(self, cur: str) -> int:
        return self.registry.precision(cur)

    def fee_atoms(self, cur: str) -> int:
        return parse_atoms(MINER_FEE.get(cur, "0.001"), self.precision(cur))

    # -- identifiers ---------------------------------------------------------

    def _txid(self, chain: str) -> str:
        self._tx_serial += 1
        return hashlib.blake2b(f"{self.config.seed}:{chain}:tx:{self._tx_serial}".encode(), digest_size=16).hexdigest()

    def new_address(self, chain: str, shielded: bool = False) -> str:
        self._addr_serial += 1
        h = hashlib.blake2b(f"{self.config.seed}:{chain}:addr:{self._addr_serial}".encode(), digest_size=12).hexdigest()
        if shielded:
            return "zs" + h
        return PREFIX.get(chain, chain[:1]) + h

    def wallet_address(self, chain: str, role: str) -> str:
        h = hashlib.blake2b(f"{self.config.seed}:{chain}:{role}".encode(), digest_size=12).hexdigest()
        return PREFIX.get(chain, chain[:1]) + h

    def _pattern_id(self, kind: str) -> str:
        self._pattern_serial += 1
        return f"{kind}-{self._pattern_serial:04d}"

    # -- transactional planning --------------------------------------------

    def _undo(self, fn) -> None:
        if self._journal is not None:
            self._journal.append(fn)

    @contextmanager
    def _attempt(self) -> Iterator[None]:
        outer = self._journal
        self._journal = []
        try:
            yield
        except _Retry:
            for fn in reversed(self._journal):
                fn()
            self._journal = outer
            raise
        else:
            if outer is not None:
                outer.extend(self._journal)
            self._journal = outer

    def _retrying(self, what: str, fn):
        for _ in range(MAX_ATTEMPTS):
            try:
                with self._attempt():
                    return fn()
            except _Retry:
                continue
        raise PlantingFailed(f"could not place {what} after {MAX_ATTEMPTS} attempts")

    def _add(self, s: set, v) -> None:
        if v not in s:
            s.add(v)
            self._undo(lambda: s.discard(v))

    def _claim_deposit(self, chain: str, v: int, group: str | None = None) -> None:
        c = self.chains[chain]
        if v <= 0 or v in c.used:
            raise _Retry
        if v in c.reserved and (group is None or self._group_values.get((chain, v)) != group):
            raise _Retry
        self._add(c.reserved, v)

    def _claim_output(self, chain: str, v: int) -> int:
        c = self.chains[chain]
        if v <= 0 or v in c.reserved:
            raise _Retry
        self._add(c.used, v)
        return v

    def _free(self, chain: str, v: int) -> int:
        """Nudge a flexible output (change) off reserved values."""
        c = self.chains[chain]
        while v in c.reserved:
            v -= 1
        if v <= 0:
            raise _Retry
        self._add(c.used, v)
        return v

    def _tx(self, chain: str, height: int, *, inputs=(), outputs=(), wallet=None, pool_in=None, pool_out=None, sender=None) -> str:
        c = self.chains[chain]
        if not 1 <= height <= c.tip:
            raise _Retry
        self._order += 1
        tx_id = self._txid(chain)
        c.intents.append(TxSpec(height, self._order, tx_id, tuple(inputs), tuple(outputs), wallet, pool_in, pool_out, sender))
        self._undo(c.intents.pop)
        return tx_id

    # -- primitive transactions ---------------------------------------------

    def fund(self, chain: str, height: int, addr: str, value: int) -> tuple[str, int, str, int]:
        """Faucet payment creating a spendable coin for a user address."""
        value = self._free(chain, value)
        tx = self._tx(chain, height, outputs=[(addr, value)], wallet="faucet")
        return (tx, 0, addr, value)

    def spend(self, chain: str, height: int, coins, payments, change_addr: str | None, *, pool_in=None, pool_out=None, claim=True) -> str:
        """User transaction spending ``coins``; payments are claimed exactly, change absorbs fees."""
        c = self.chains[chain]
        total = sum(v for _, _, _, v in coins) + (pool_out or 0)
        paid = sum(v for _, v in payments) + (pool_in or 0)
        change = total - paid - c.fee
        if change < 0:
            raise _Retry
        outputs = list(payments)
        if change > 0 and change_addr is not None:
            outputs.append((change_addr, self._free(chain, change)))
        return self._tx(chain, height, inputs=[(tx, n) for tx, n, _, _ in coins], outputs=outputs, pool_in=pool_in, pool_out=pool_out)

    def _rand_amount(self, cur: str, t: int, usd_lo: float, usd_hi: float) -> int:
        usd = math.exp(self.rng.uniform(math.log(usd_lo), math.log(usd_hi)))
        p = self.precision(cur)
        atoms = int(usd * 10**6) * 10**p // self.prices[cur][self.tick_of(t)]
        q = 10 ** max(p - 8, 0)
        return atoms // q * q

    def _lag(self) -> int:
        cfg = self.config
        a, b, m = cfg.lag_min * 60, cfg.lag_max * 60, cfg.lag_mean * 60
        u = self.rng.random()
        return int(a - m * math.log(1 - u * (1 - math.exp(-(b - a) / m))))

    def _slip(self) -> Fraction:
        s = Fraction(self.rng.randint(500, 2000), 10**6)
        return 1 + s if self.rng.random() < 0.5 else 1 - s

    def out_coin(self, cur_in: str, cur_out: str, amt: int, tick: int) -> int:
        p_in, p_out = self.precision(cur_in), self.precision(cur_out)
        expected = Fraction(amt, 10**p_in) * self.rate(cur_in, cur_out, tick) * 10**p_out - self.fee_atoms(cur_out)
        out = math.floor(expected * self._slip())
        q = 10 ** max(p_out - 8, 0)
        out = out // q * q
        if out <= 0:
            raise _Retry
        return out

    def _next_offset(self, chain: str) -> int:
        c = self.chains[chain]
        if not c.offsets or c.offset_pos >= len(c.offsets):
            db, da = c.window
            c.offsets = list(range(-db, da + 1))
            self.rng.shuffle(c.offsets)
            c.offset_pos = 0
        k = c.offsets[c.offset_pos]
        c.offset_pos += 1
        return k

    # -- trades ----------------------------------------------------------------

    def _conflicts(self, tr: Trade, exempt: set[str]) -> bool:
        """Would ``tr`` pair with an existing trade as an unintended U-turn?"""
        rev = self._by_pair.get((tr.cur_out, tr.cur_in), [])
        i = bisect_left(rev, (tr.feed_time - REVERSAL_WINDOW, -1))
        j = bisect_right(rev, (tr.feed_time + REVERSAL_WINDOW, 1 << 60))
        for t, idx in rev[i:j]:
            other = self.trades[idx]
            if other.key in exempt:
                continue
            if t <= tr.feed_time and abs(tr.amt - other.out_coin) <= REVERSAL_MARGIN * other.out_coin:
                return True
            if t >= tr.feed_time and abs(other.amt - tr.out_coin) <= REVERSAL_MARGIN * tr.out_coin:
                return True
        return False

    def plan_trade(
        self,
        cur_in: str,
        cur_out: str,
        kind: str,
        *,
        t: int | None = None,
        amt: int | None = None,
        k: int | None = 0,
        lag: int | None = None,
        addr_s: str | None = None,
        addr_u: str | None = None,
        group: str | None = None,
        expect: str = "unique",
        exempt: set[str] | None = None,
        usd: tuple[float, float] = (50.0, 5000.0),
        deposit: bool = True,
    ) -> Trade:
        """Choose timing, amount and withdrawal of one trade and register it.

        The deposit and withdrawal transactions are created by the caller
        (plants need control over funding); only reservations happen here.
        """
        if cur_in not in self.chains:
            raise ConfigError(f"deposit chain {cur_in} is not simulated")
        if cur_out not in self.chains and cur_out not in self.config.off_ledger:
            raise ConfigError(f"unknown currency {cur_out}")
        cin = self.chains[cur_in]
        if t is None:
            t = self.rng.randint(self.t_lo, self.t_hi)
        if not self.start < t < self.end:
            raise _Retry
        h = cin.nearest(t)
        if k is None:
            k = self._next_offset(cur_in)
        h_d = h + k
        if not 1 <= h_d <= cin.tip:
            raise _Retry
        tick = self.tick_of(t)
        if amt is None:
            amt = self._rand_amount(cur_in, t, *usd)
            for a, b, v in self._bot_bands:
                if (a, b) == (cur_in, cur_out) and abs(amt - v) <= BOT_AVOID * v:
                    raise _Retry
        if deposit:
            self._claim_deposit(cur_in, amt, group)
        out = self.out_coin(cur_in, cur_out, amt, tick)
        if lag is None:
            lag = self._lag()
        w_time = max(cin.times[h_d], t) + lag
        h_w = None
        if cur_out in self.chains:
            cout = self.chains[cur_out]
            h_w = cout.first_at_or_after(w_time)
            if h_w > cout.tip or h_w < 1:
                raise _Retry
            w_time = cout.times[h_w]
        tr = Trade(
            key=f"T{len(self.trades) + 1:06d}",
            kind=kind,
            cur_in=cur_in,
            cur_out=cur_out,
            amt=amt,
            out_coin=out,
            feed_time=t,
            addr_s=addr_s or self.new_address(cur_in),
            addr_u=addr_u or self.new_address(cur_out),
            tick=tick,
            deposit_height=h_d if deposit else None,
            withdraw_height=h_w,
            withdraw_time=w_time,
            group=group,
            expect=expect,
        )
        if expect == "unique" and self._conflicts(tr, exempt or set()):
            raise _Retry
        self.trades.append(tr)
        self._undo(self.trades.pop)
        if expect == "unique":
            lst = self._by_pair.setdefault((cur_in, cur_out), [])
            entry = (t, len(self.trades) - 1)
            insort(lst, entry)
            self._undo(lambda: lst.remove(entry))
        return tr

    def deposit_standard(self, tr: Trade, *, inputs: int = 1, sender: str | None = None) -> None:
        """Faucet-funded deposit (one or more funding coins) or account transfer."""
        c = self.chains[tr.cur_in]
        h = tr.deposit_height
        if not c.cfg.is_utxo:
            sender = sender or self.new_address(tr.cur_in)
            tr.deposit_tx = self._tx(tr.cur_in, h, outputs=[(tr.addr_s, tr.amt)], sender=sender)
            tr.deposit_n = 0
            tr.funding = (sender,)
            return
        coins = []
        for _ in range(inputs):
            part = tr.amt // inputs + int(tr.amt * self.rng.uniform(0.05, 0.5)) + c.fee
            addr = self.new_address(tr.cur_in)
            coins.append(self.fund(tr.cur_in, max(h - self.rng.randint(0, 2), 1), addr, part))
        tr.deposit_tx = self.spend(tr.cur_in, h, coins, [(tr.addr_s, tr.amt)], coins[0][2])
        tr.deposit_n = 0
        tr.funding = tuple(dict.fromkeys(a for _, _, a, _ in coins))

    def deposit_from(self, tr: Trade, coins, change_addr: str | None = None) -> None:
        """Deposit spending given coins (U-turn seconds, CoinJoin outputs)."""
        tr.deposit_tx = self.spend(tr.cur_in, tr.deposit_height, coins, [(tr.addr_s, tr.amt)], change_addr or coins[0][2])
        tr.deposit_n = 0
        tr.funding = tuple(dict.fromkeys(a for _, _, a, _ in coins))

    def withdraw_standard(self, tr: Trade, *, pool_in: bool = False) -> None:
        if tr.cur_out not in self.chains:
            tr.withdraw_tx = hashlib.blake2b(f"{self.config.seed}:{tr.cur_out}:{tr.key}".encode(), digest_size=32).hexdigest()
            tr.withdraw_n = None
            return
        c = self.chains[tr.cur_out]
        if not c.cfg.is_utxo:
            self._claim_output(tr.cur_out, tr.out_coin)
            tr.withdraw_tx = self._tx(tr.cur_out, tr.withdraw_height, outputs=[(tr.addr_u, tr.out_coin)], sender=self.wallet_address(tr.cur_out, "hot"))
            tr.withdraw_n = 0
            return
        if pool_in:
            tr.withdraw_tx = self._tx(tr.cur_out, tr.withdraw_height, outputs=[], wallet="hot", pool_in=tr.out_coin)
            tr.withdraw_n = None
            return
        self._claim_output(tr.cur_out, tr.out_coin)
        tr.withdraw_tx = self._tx(tr.cur_out, tr.withdraw_height, outputs=[(tr.addr_u, tr.out_coin)], wallet="hot")
        tr.withdraw_n = 0

    def withdrawal_coin(self, tr: Trade) -> tuple[str, int, str, int]:
        return (tr.withdraw_tx, 0, tr.addr_u, tr.out_coin)

    def vanilla(self) -> Trade:
        def place():
            cin, cout = self.rng.sample(self.ledger_ids, 2)
            tr = self.plan_trade(cin, cout, "vanilla", k=None)
            multi = self.chains[cin].cfg.is_utxo and self.rng.random() < 0.25
            self.deposit_standard(tr, inputs=2 if multi else 1)
            self.withdraw_standard(tr)
            return tr

        return self._retrying("vanilla trade", place)

    # -- patterns ------------------------------------------------------------

    def _pair(self, need_utxo_out: bool = False, chain_in=None, chain_out=None) -> tuple[str, str]:
        ins = [chain_in] if chain_in else self.ledger_ids
        outs = [chain_out] if chain_out else [c for c in self.ledger_ids if not need_utxo_out or self.chains[c].cfg.is_utxo]
        pairs = [(a, b) for a in ins for b in outs if a != b]
        if not pairs:
            raise UnsupportedVariant("no chain pair supports this pattern")
        return self.rng.choice(pairs)

    def plant_uturn(
        self,
        variant: str,
        *,
        roundtrip: bool = False,
        same_address: bool = False,
        chain_x: str | None = None,
        chain_y: str | None = None,
        coinjoin_hop: bool = False,
        value_error: Fraction | None = None,
        gap: int | None = None,
    ) -> str:
        """X→Y then Y→X within 25 minutes; round-trips keep the value within 0.4%."""
        if variant not in UTURN_VARIANTS:
            raise UnsupportedVariant(f"unknown U-turn variant {variant!r}")
        if chain_y is not None and chain_y in self.chains and variant == "utxo" and not self.chains[chain_y].cfg.is_utxo:
            raise UnsupportedVariant(f"the UTXO variant needs a UTXO chain, {chain_y} is account-based")
        if coinjoin_hop and variant != "address":
            raise UnsupportedVariant("CoinJoin hops only produce address-variant U-turns")
        pid = self._pattern_id("roundtrip" if roundtrip else "uturn")

        def place():
            x, y = self._pair(variant == "utxo", chain_x, chain_y)
            if coinjoin_hop and not (self.chains[y].cfg.privatesend and self.chains[y].cfg.is_utxo):
                raise _Retry
            cy = self.chains[y]
            a = self.plan_trade(x, y, "roundtrip" if roundtrip else "uturn", lag=self.rng.randint(120, 300), usd=(200.0, 5000.0), group=None)
            self.deposit_standard(a)
            self.withdraw_standard(a)
            # the second leg deposits in the withdrawal block (or the next one)
            h2 = a.withdraw_height + self.rng.randint(0, 1)
            if h2 > cy.tip:
                raise _Retry
            lo, hi = cy.region(h2)
            horizon = gap if gap is not None else 1500
            lo, hi = max(lo, a.feed_time + 1), min(hi, a.feed_time + horizon)
            if gap is not None:
                lo = hi = a.feed_time + gap
                if cy.nearest(lo) != h2:
                    raise _Retry
            if lo > hi:
                raise _Retry
            t2 = self.rng.randint(lo, hi)
            if value_error is not None:
                err = value_error
            elif roundtrip:
                err = Fraction(self.rng.randint(1000, 3900), 10**6)
            else:
                err = Fraction(self.rng.randint(6000, 9000), 10**6)
            amt2 = math.floor(a.out_coin * (1 - err)) // cy.q * cy.q
            exempt = {a.key}
            b_addr_u = None
            if roundtrip and same_address:
                b_addr_u = a.funding[0]
            b = self.plan_trade(y, x, a.kind, t=t2, amt=amt2, k=h2 - cy.nearest(t2), lag=self.rng.randint(120, 600), addr_u=b_addr_u, exempt=exempt)
            coin = self.withdrawal_coin(a)
            hop_cj = None
            if not cy.cfg.is_utxo:
                sender = a.addr_u if variant == "address" else self.new_address(y)
                b.deposit_tx = self._tx(y, h2, outputs=[(b.addr_s, b.amt)], sender=sender)
                b.deposit_n = 0
                b.funding = (sender,)
            elif variant == "utxo":
                self.deposit_from(b, [coin])
            elif coinjoin_hop:
                hop_cj, cj_coin = self._coinjoin_hop(a, h2, b.amt)
                self.deposit_from(b, [cj_coin], a.addr_u)
            else:
                hop_addr = a.addr_u if variant == "address" else self.new_address(y)
                hop_val = coin[3] - cy.fee
                hop = self.spend(y, h2, [coin], [(hop_addr, self._free(y, hop_val))], None)
                hop_val = self.chains[y].intents[-1].outputs[0][1]
                self.deposit_from(b, [(hop, 0, hop_addr, hop_val)])
            self.withdraw_standard(b)
            if not b.amt < a.out_coin:
                raise _Retry
            return a, b, hop_cj

        a, b, hop_cj = self._retrying(pid, place)
        labels = ["basic"] + (["address"] if variant in ("address", "utxo") else []) + (["utxo"] if variant == "utxo" else [])
        self.gt["uturns"].append({"id": pid, "first": a.key, "second": b.key, "chain": b.cur_in, "variants": labels})
        if roundtrip:
            self.gt["roundtrips"].append({"id": pid, "first": a.key, "second": b.key, "same_address": bool(same_address)})
        if hop_cj is not None:
            self.gt["coinjoins"].append({"chain": b.cur_in, "tx": hop_cj})
            self.gt["coinjoin_post"].append(a.key)
            self.gt["coinjoin_pre"].append(b.key)
            self.gt["coinjoin_hops"].append({"first": a.key, "second": b.key, "tx": hop_cj})
        return pid

    def _denomination(self, chain: str, text: str, inc: bool) -> int:
        p = self.precision(chain)
        return parse_atoms(text, p) + (parse_atoms(FEE_INCREMENT, p) if inc else 0)

    def _coinjoin(self, chain: str, height: int, own: list, value: int, receivers: list[str]) -> str:
        """Three-party mix: ``own`` coins plus faucet-funded partners; one change output."""
        c = self.chains[chain]
        coins = list(own)
        while len(coins) < 3:
            partner = self.new_address(chain)
            coins.append(self.fund(chain, max(height - self.rng.randint(0, 1), 1), partner, value + value // 2 + c.fee))
        self._claim_output(chain, value)
        payments = [(r, value) for r in receivers]
        change_addr = coins[-1][2]
        total = sum(v for _, _, _, v in coins)
        change = total - value * len(receivers) - c.fee
        if change <= 0:
            raise _Retry
        return self._tx(chain, height, inputs=[(tx, n) for tx, n, _, _ in coins], outputs=payments + [(change_addr, self._free(chain, change))])

    def _coinjoin_hop(self, a: Trade, height: int, amt2: int):
        c = self.chains[a.cur_out]
        for text in DENOMINATIONS:
            d = self._denomination(a.cur_out, text, self.rng.random() < 0.5)
            if d >= amt2 + c.fee:
                break
        else:
            raise _Retry
        coin = self.withdrawal_coin(a)
        receivers = [a.addr_u, self.new_address(a.cur_out), self.new_address(a.cur_out)]
        cj = self._coinjoin(a.cur_out, height, [coin], d, receivers)
        return cj, (cj, 0, a.addr_u, d)

    def plant_coinjoin_pre(self, chain: str | None = None) -> str:
        pid = self._pattern_id("coinjoin_pre")
        chain = chain or self._privatesend_chain()

        def place():
            text = self.rng.choice(("1", "10"))
            d = self._denomination(chain, text, self.rng.random() < 0.5)
            c = self.chains[chain]
            amt = int(d * self.rng.uniform(0.3, 0.95)) // c.q * c.q
            cout = self.rng.choice([x for x in self.ledger_ids if x != chain])
            tr = self.plan_trade(chain, cout, "coinjoin_pre", amt=amt)
            user = self.new_address(chain)
            h_cj = max(tr.deposit_height - self.rng.randint(0, 2), 1)
            cj = self._coinjoin(chain, h_cj, [], d, [user, self.new_address(chain), self.new_address(chain)])
            self.deposit_from(tr, [(cj, 0, user, d)])
            self.withdraw_standard(tr)
            return tr, cj

        tr, cj = self._retrying(pid, place)
        self.gt["coinjoins"].append({"chain": chain, "tx": cj})
        self.gt["coinjoin_pre"].append(tr.key)
        return pid

    def plant_coinjoin_post(self, chain: str | None = None) -> str:
        pid = self._pattern_id("coinjoin_post")
        chain = chain or self._privatesend_chain()

        def place():
            cin = self.rng.choice([x for x in self.ledger_ids if x != chain])
            tr = self.plan_trade(cin, chain, "coinjoin_post")
            self.deposit_standard(tr)
            self.withdraw_standard(tr)
            denoms = [self._denomination(chain, t, self.rng.random() < 0.5) for t in DENOMINATIONS]
            fitting = [d for d in denoms if d < tr.out_coin]
            if not fitting:
                raise _Retry
            h_cj = tr.withdraw_height + self.rng.randint(0, 2)
            receivers = [self.new_address(chain) for _ in range(3)]
            cj = self._coinjoin(chain, h_cj, [self.withdrawal_coin(tr)], fitting[-1], receivers)
            return tr, cj

        tr, cj = self._retrying(pid, place)
        self.gt["coinjoins"].append({"chain": chain, "tx": cj})
        self.gt["coinjoin_post"].append(tr.key)
        return pid

    def _privatesend_chain(self) -> str:
        for cid in self.ledger_ids:
            if self.chains[cid].cfg.privatesend and self.chains[cid].cfg.is_utxo:
                return cid
        raise UnsupportedVariant("no CoinJoin-capable chain in this world")

    def _shielded_chain(self) -> str:
        for cid in self.ledger_ids:
            if self.chains[cid].cfg.shielded:
                return cid
        raise UnsupportedVariant("no shielded chain in this world")

    def plant_pool(self, kind: int, chain: str | None = None) -> str:
        if kind not in (1, 2, 3):
            raise UnsupportedVariant(f"pool interaction kind must be 1, 2 or 3, got {kind}")
        z = chain or self._shielded_chain()
        pid = self._pattern_id(f"pool{kind}")

        def place():
            other = self.rng.choice([x for x in self.ledger_ids if x != z])
            if kind == 3:
                tr = self.plan_trade(z, other, "pool")
                cz = self.chains[z]
                tr.deposit_tx = self._tx(z, tr.deposit_height, outputs=[(tr.addr_s, tr.amt)], pool_out=tr.amt + cz.fee)
                tr.deposit_n = 0
                tr.funding = ()
                self.withdraw_standard(tr)
                return tr, tr.amt
            addr_u = self.new_address(z, shielded=True) if kind == 1 else None
            tr = self.plan_trade(other, z, "pool", addr_u=addr_u)
            self.deposit_standard(tr)
            if kind == 1:
                self.withdraw_standard(tr, pool_in=True)
            else:
                self.withdraw_standard(tr)
                cz = self.chains[z]
                h = tr.withdraw_height + self.rng.randint(0, 3)
                self.spend(z, h, [self.withdrawal_coin(tr)], [], None, pool_in=tr.out_coin - cz.fee)
            return tr, tr.out_coin

        tr, value = self._retrying(pid, place)
        self.gt["pool"].append({"shift": tr.key, "kind": kind, "value": value, "chain": z})
        return pid

    def plant_bots(self, spec: BotSpec) -> str:
        """A burst of equal-value trades on one pair inside five minutes."""
        if spec.cur_in not in self.chains:
            raise ConfigError(f"bot deposit chain {spec.cur_in} is not simulated")
        if spec.size < 2:
            raise ConfigError("bot clusters need at least two members")
        pid = self._pattern_id("bots")
        value = parse_atoms(spec.value, self.precision(spec.cur_in))
        self._group_values[(spec.cur_in, value)] = pid
        self.used_pairs.add((spec.cur_in, spec.cur_out))
        c = self.chains[spec.cur_in]

        def place():
            receivers = [self.new_address(spec.cur_out) for _ in range(spec.receivers)]
            sender = self.new_address(spec.cur_in) if spec.single_sender else None
            times = self._paired_times(spec.cur_in, spec.size, 270)
            members = []
            for i, t in enumerate(times):
                tr = self.plan_trade(spec.cur_in, spec.cur_out, "bot", t=t, amt=value, group=pid, expect="group", addr_u=receivers[i % len(receivers)])
                if c.cfg.is_utxo:
                    coins = []
                    for _ in range(spec.senders_per_deposit):
                        addr = sender or self.new_address(spec.cur_in)
                        part = value // spec.senders_per_deposit + value // 10 + c.fee
                        coins.append(self.fund(spec.cur_in, max(tr.deposit_height - 1, 1), addr, part))
                    self.deposit_from(tr, coins)
                else:
                    self.deposit_standard(tr, sender=sender)
                self.withdraw_standard(tr)
                members.append(tr)
            return members, receivers

        members, receivers = self._retrying(pid, place)
        self._bot_bands.append((spec.cur_in, spec.cur_out, value))
        self.gt["bots"].append(
            {
                "id": pid,
                "members": [m.key for m in members],
                "pair": [spec.cur_in, spec.cur_out],
                "value": value,
                "receivers": receivers,
                "senders": sorted({a for m in members for a in m.funding}),
            }
        )
        return pid

    def _paired_times(self, chain: str, n: int, span: int) -> list[int]:
        """``n`` feed times within ``span`` seconds, grouped so every block holds two or more."""
        c = self.chains[chain]
        t0 = self.rng.randint(self.t_lo, self.t_hi)
        groups = [2] * (n // 2)
        if n % 2:
            groups[-1] += 1
        step = span // max(len(groups), 1)
        out = []
        for g, size in enumerate(groups):
            anchor = t0 + g * step + self.rng.randint(0, max(step // 4, 0))
            lo, hi = c.region(c.nearest(anchor))
            hi = min(hi, t0 + span)
            lo = max(lo, anchor)
            if lo > hi:
                raise _Retry
            out += sorted(self.rng.randint(lo, hi) for _ in range(size))
        if len(set(c.nearest(t) for t in out)) > len(groups):
            raise _Retry
        return sorted(out)

    def plant_hub(self, spec: HubSpec) -> str:
        pid = self._pattern_id("hub")
        for ch in (*spec.in_chains, spec.out_chain):
            if ch not in self.chains:
                raise ConfigError(f"hub chain {ch} is not simulated")
        hub = self.new_address(spec.out_chain)
        members = []
        for i in range(spec.senders):
            cin = spec.in_chains[i % len(spec.in_chains)]

            def place(cin=cin):
                tr = self.plan_trade(cin, spec.out_chain, "hub", addr_u=hub)
                self.deposit_standard(tr)
                self.withdraw_standard(tr)
                return tr

            members.append(self._retrying(pid, place))
        self.tags.append(TagRecord(spec.out_chain, hub, spec.tag, spec.category, "simulated"))
        self.gt["hubs"].append(
            {
                "id": pid,
                "chain": spec.out_chain,
                "address": hub,
                "tag": spec.tag,
                "members": [m.key for m in members],
                "senders": sorted([m.cur_in, a] for m in members for a in m.funding),
            }
        )
        return pid

    def plant_twins(self) -> str:
        pid = self._pattern_id("twins")

        def place():
            cin, cout = self.rng.sample(self.ledger_ids, 2)
            c = self.chains[cin]
            amt = self._rand_amount(cin, self.t_lo, 100, 2000)
            self._group_values[(cin, amt)] = pid
            first = self.plan_trade(cin, cout, "twin", amt=amt, group=pid, expect="group")
            lo, hi = c.region(first.deposit_height)
            lo = max(lo, first.feed_time)
            second = self.plan_trade(cin, cout, "twin", t=self.rng.randint(lo, hi), amt=amt, group=pid, expect="group")
            for tr in (first, second):
                self.deposit_standard(tr)
                self.withdraw_standard(tr)
            return first, second

        a, b = self._retrying(pid, place)
        self.gt["twins"].append({"id": pid, "members": [a.key, b.key]})
        return pid

    def plant_reuse(self) -> str:
        """Two trades through one deposit address with different pairs; the first is shadowed."""
        pid = self._pattern_id("reuse")

        def place():
            cin, c1 = self.rng.sample(self.ledger_ids, 2)
            c2 = self.rng.choice([x for x in self.ledger_ids if x not in (cin, c1)])
            first = self.plan_trade(cin, c1, "reuse", expect="shadowed")
            self.deposit_standard(first)
            self.withdraw_standard(first)
            t2 = first.feed_time + self.rng.randint(3600, 3 * 3600)
            second = self.plan_trade(cin, c2, "reuse", t=t2, addr_s=first.addr_s)
            self.deposit_standard(second)
            self.withdraw_standard(second)
            return first, second

        a, b = self._retrying(pid, place)
        self.gt["reuse"].append({"id": pid, "address": a.addr_s, "shadowed": a.key, "latest": b.key})
        return pid

    def plant_abandoned(self) -> str:
        cin = self.rng.choice(self.ledger_ids)
        addr = self.new_address(cin)
        self.abandoned.append((addr, cin, self.rng.randint(self.t_lo, self.t_hi)))
        return addr

    def plant_decoy(self, tr: Trade) -> None:
        """An unrelated payment of exactly the deposit value inside the trade's window."""
        c = self.chains[tr.cur_in]
        h = c.nearest(tr.feed_time)
        db, da = c.window
        lo, hi = max(h - db, 1), min(h + da, c.tip)
        height = self.rng.randint(lo, hi)
        dst = self.new_address(tr.cur_in)
        if c.cfg.is_utxo:
            tx = self._tx(tr.cur_in, height, outputs=[(dst, tr.amt)], wallet="faucet")
        else:
            tx = self._tx(tr.cur_in, height, outputs=[(dst, tr.amt)], sender=self.new_address(tr.cur_in))
        self.gt["decoys"].append({"chain": tr.cur_in, "tx": tx, "shift": tr.key, "height": height})

    # -- finishing -----------------------------------------------------------

    def publish(self) -> None:
        """Choose the dropped trades and number the published ones in feed order."""
        if self._published:
            return
        self._published = True
        cfg = self.config
        vanilla = [t for t in self.trades if t.kind == "vanilla"]
        n_drop = round(cfg.drop_fraction * len(vanilla))
        for tr in self.rng.sample(vanilla, n_drop):
            tr.published = False
        order = sorted((t for t in self.trades if t.published), key=lambda t: (t.feed_time, t.key))
        for i, tr in enumerate(order):
            tr.shift_id = str(100_000 + i + 1)

    def _expectations(self) -> None:
        """Predict the survivors of service validation per published trade.

        This is the simulator's own account of which deposits a correct
        matcher must accept, computed from planning data only.
        """
        latest: dict[str, Trade] = {}
        for tr in sorted(self.trades, key=lambda t: (t.feed_time, t.key)):
            latest[tr.addr_s] = tr
        deposits: dict[tuple[str, int], list[tuple[int, Trade | None]]] = {}
        for tr in self.trades:
            if tr.deposit_tx is not None:
                deposits.setdefault((tr.cur_in, tr.amt), []).append((tr.deposit_height, tr))
        amounts = {t.key: t.amt for t in self.trades}
        for d in self.gt["decoys"]:
            deposits.setdefault((d["chain"], amounts[d["shift"]]), []).append((d["height"], None))
        for tr in self.trades:
            if not tr.published:
                tr.expect = "unpublished"
                continue
            c = self.chains[tr.cur_in]
            h = c.nearest(tr.feed_time)
            db, da = c.window
            lo, hi = max(h - db, 0), min(h + da, c.tip)
            survivors = []
            for height, owner in deposits.get((tr.cur_in, tr.amt), []):
                if not lo <= height <= hi or owner is None:
                    continue
                d = latest[owner.addr_s]
                if (d.cur_in, d.cur_out, d.amt) == (tr.cur_in, tr.cur_out, tr.amt):
                    survivors.append(owner.key)
            tr.survivors = tuple(sorted(survivors))
            if len(survivors) == 1 and survivors[0] == tr.key:
                tr.expect = "unique"
            elif len(survivors) > 1:
                tr.expect = "ambiguous"
            elif not survivors:
                tr.expect = "unmatched"
            else:
                raise PlantingFailed(f"trade {tr.key} would match another trade's deposit")

    def build(self) -> World:
        self.publish()
        self._expectations()
        ledgers, indices = {}, {}
        for idx, cid in enumerate(self.ledger_ids):
            ledgers[cid], idx_dump = _Emitter(self, cid, idx).run()
            if idx_dump is not None:
                indices[cid] = idx_dump
        rate_rows = self._rate_rows()
        return World(
            config=self.config,
            registry=self.registry,
            block_times={cid: self.chains[cid].times for cid in self.ledger_ids},
            ledgers=ledgers,
            trades=self.trades,
            abandoned=self.abandoned,
            rate_ticks=self.tick_times,
            rate_rows=rate_rows,
            tags=self.tags,
            ground_truth=self._ground_truth(),
            sim_indices=indices,
        )

    def _rate_rows(self) -> dict[int, list[tuple]]:
        rows = {}
        pairs = sorted(self.used_pairs)
        for i in range(self.n_ticks + 1):
            out = []
            for a, b in pairs:
                self.rate(a, b, i)
                text = self._rate_cache[(a, b, i)][1]
                p_a = self.precision(a)
                unit = Fraction(10**6, self.prices[a][i])
                minimum = format_atoms(math.floor(unit * 5 * 10**p_a), p_a)
                limit = format_atoms(math.floor(unit * 50_000 * 10**p_a), p_a)
                out.append((a, b, text, limit, minimum, MINER_FEE.get(b, "0.001")))
            rows[i] = out
        return rows

    def _ground_truth(self) -> dict:
        trades = []
        for t in sorted(self.trades, key=lambda t: t.key):
            trades.append(
                {
                    "key": t.key,
                    "shift_id": t.shift_id,
                    "kind": t.kind,
                    "expect": t.expect,
                    "cur_in": t.cur_in,
                    "cur_out": t.cur_out,
                    "amt": format_atoms(t.amt, self.precision(t.cur_in)),
                    "out_coin": format_atoms(t.out_coin, self.precision(t.cur_out)),
                    "feed_time": t.feed_time,
                    "addr_s": t.addr_s,
                    "addr_u": t.addr_u,
                    "deposit": None if t.deposit_tx is None else {"tx": t.deposit_tx, "n": t.deposit_n, "height": t.deposit_height},
                    "withdrawal": {"tx": t.withdraw_tx, "n": t.withdraw_n, "height": t.withdraw_height},
                    "funding": list(t.funding),
                    "published": t.published,
                    "group": t.group,
                    "survivors": list(t.survivors),
                }
            )
        gt = {k: v for k, v in self.gt.items()}
        gt["pool"] = [{**p, "value": format_atoms(p["value"], self.precision(p["chain"]))} for p in gt["pool"]]
        gt["bots"] = [{**b, "value": format_atoms(b["value"], self.precision(b["pair"][0]))} for b in gt["bots"]]
        gt["trades"] = trades
        gt["abandoned"] = [{"address": a, "cur_in": c, "created": t} for a, c, t in self.abandoned]
        gt["dropped"] = sorted(t.key for t in self.trades if not t.published)
        gt["windows"] = {cid: list(self.chains[cid].window) for cid in self.ledger_ids}
        gt["skew_model"] = "deposit block offset k uniform over [-delta_before, delta_after] around the feed time's nearest block"
        return gt


class _Emitter:
    """Renders one chain: coinbase, background traffic and planned intents."""

    SUBSIDY = "12.5"

    def __init__(self, builder: WorldBuilder, chain: str, idx: int):
        self.b = builder
        self.c = builder.chains[chain]
        self.chain = chain
        self.cfg = self.c.cfg
        self.rng = random.Random(f"bg:{builder.config.seed}:{chain}")
        n = len(self.c.times)
        lam = builder.config.bg_rate(chain) * self.cfg.block_interval
        self.bg_counts = np.random.default_rng([builder.config.seed, 41, idx]).poisson(lam, size=n).tolist()
        self.serial = 0
        self.p = self.cfg.precision
        self.pool: list[tuple[str, int, int]] = []
        self.bg_addrs = [builder.wallet_address(chain, f"bg{i}") for i in range(max(64, min(4000, sum(self.bg_counts) // 4 + 64)))]
        self.track = builder.config.track_indices
        self.values: dict[int, list] = {}
        self.spent: dict[tuple[str, int], str] = {}
        self.addr_idx: dict[str, list[str]] = {}
        self.outputs: dict[str, list[tuple[str, int]]] = {}
        self.wallets: dict[str, tuple[str, int, int, str]] = {}

    def _id(self) -> str:
        self.serial += 1
        return hashlib.blake2b(f"{self.b.config.seed}:{self.chain}:bg:{self.serial}".encode(), digest_size=16).hexdigest()

    def _safe(self, v: int) -> int:
        reserved = self.c.reserved
        while v in reserved:
            v -= 1
        return v

    def _fmt(self, v: int) -> str:
        return format_atoms(v, self.p)

    def _record(self, height: int, tx_id: str, ins: list[tuple[str, int]], outs: list[tuple[str, int]], sender: str | None = None) -> None:
        if not self.track:
            return
        touched = []
        if sender is not None:
            touched.append(sender)
        for ref in ins:
            self.spent[ref] = tx_id
            touched.append(self.outputs[ref[0]][ref[1]][0])
        for n, (a, v) in enumerate(outs):
            self.values.setdefault(v, []).append([height, tx_id, n, a])
            touched.append(a)
        self.outputs[tx_id] = outs
        for a in touched:
            lst = self.addr_idx.get(a)
            if lst is None:
                self.addr_idx[a] = [tx_id]
            elif lst[-1] != tx_id:
                lst.append(tx_id)

    def _utxo_json(self, tx_id: str, ins, outs, pool_in=None, pool_out=None) -> dict:
        d = {
            "id": tx_id,
            "inputs": [{"tx": t, "n": n} for t, n in ins],
            "outputs": [{"addr": a, "value": self._fmt(v)} for a, v in outs],
        }
        if pool_in is not None:
            d["pool_in"] = self._fmt(pool_in)
        if pool_out is not None:
            d["pool_out"] = self._fmt(pool_out)
        return d

    def _background_utxo(self, height: int) -> dict | None:
        pool = self.pool
        if not pool:
            return None
        rng = self.rng
        k = 2 if rng.random() < 0.3 and len(pool) > 1 else 1
        ins, total = [], 0
        for _ in range(k):
            i = rng.randrange(len(pool))
            pool[i], pool[-1] = pool[-1], pool[i]
            t, n, v = pool.pop()
            ins.append((t, n))
            total += v
        fee = min(total // 1000, 10**self.p // 10**4)
        spend = total - fee
        r = rng.random()
        n_out = 1 if r < 0.3 or spend < 10 else (2 if r < 0.85 else 3)
        cuts = sorted(rng.randrange(1, spend) for _ in range(n_out - 1)) if spend > n_out else []
        parts = [b - a for a, b in zip([0] + cuts, cuts + [spend])] if cuts else [spend]
        tx_id = self._id()
        outs = []
        for v in parts:
            v = self._safe(v)
            if v <= 0:
                continue
            outs.append((self.bg_addrs[rng.randrange(len(self.bg_addrs))], v))
        if not outs:
            return None
        for n, (_, v) in enumerate(outs):
            pool.append((tx_id, n, v))
        self._record(height, tx_id, ins, outs)
        return self._utxo_json(tx_id, ins, outs)

    def _background_account(self, height: int) -> dict:
        rng = self.rng
        a = self.bg_addrs[rng.randrange(len(self.bg_addrs))]
        b = self.bg_addrs[rng.randrange(len(self.bg_addrs))]
        v = self._safe(rng.randrange(10 ** (self.p - 3), 10 ** (self.p + 2)))
        tx_id = self._id()
        self._record(height, tx_id, [], [(b, v)], sender=a)
        return {"id": tx_id, "from": a, "to": b, "value": self._fmt(v)}

    def _coinbase(self, height: int) -> dict:
        subsidy = self._safe(parse_atoms(self.SUBSIDY, self.p))
        outs = [(self.b.wallet_address(self.chain, "miner"), subsidy)]
        if height == 0:
            for role in ("faucet", "hot"):
                addr = self.b.wallet_address(self.chain, role)
                outs.append((addr, 10**12 * 10**self.p))
        tx_id = self._id()
        if height == 0:
            for n, role in enumerate(("faucet", "hot"), start=1):
                self.wallets[role] = (tx_id, n, outs[n][1], outs[n][0])
        self.pool.append((tx_id, 0, subsidy))
        self._record(height, tx_id, [], outs)
        return self._utxo_json(tx_id, [], outs)

    def _intent(self, spec: TxSpec) -> dict:
        if not self.cfg.is_utxo:
            sender = spec.sender or self.b.wallet_address(self.chain, spec.wallet or "hot")
            (to, v), = spec.outputs
            self._record(spec.height, spec.tx_id, [], [(to, v)], sender=sender)
            return {"id": spec.tx_id, "from": sender, "to": to, "value": self._fmt(v)}
        ins = list(spec.inputs)
        outs = list(spec.outputs)
        if spec.wallet is not None:
            wt, wn, wv, waddr = self.wallets[spec.wallet]
            ins.insert(0, (wt, wn))
            change = wv - sum(v for _, v in outs) - (spec.pool_in or 0) - self.c.fee
            if change <= 0:
                raise PlantingFailed(f"{self.chain} {spec.wallet} wallet exhausted")
            outs.append((waddr, change))
            self.wallets[spec.wallet] = (spec.tx_id, len(outs) - 1, change, waddr)
        self._record(spec.height, spec.tx_id, ins, outs)
        return self._utxo_json(spec.tx_id, ins, outs, spec.pool_in, spec.pool_out)

    def run(self) -> tuple[bytes, bytes | None]:
        intents = sorted(self.c.intents, key=lambda s: (s.height, s.order))
        pos = 0
        lines = [json.dumps(ledger_header(self.cfg), separators=(",", ":"))]
        utxo = self.cfg.is_utxo
        block_txs = []
        for h, t in enumerate(self.c.times):
            txs = []
            if utxo:
                txs.append(self._coinbase(h))
            mine = []
            while pos < len(intents) and intents[pos].height == h:
                mine.append(intents[pos])
                pos += 1
            n_bg = self.bg_counts[h] if h > 0 else 0
            slots = sorted(self.rng.sample(range(n_bg + len(mine)), len(mine))) if mine else []
            it = iter(mine)
            nxt = slots.pop(0) if slots else None
            for j in range(n_bg + len(mine)):
                if j == nxt:
                    txs.append(self._intent(next(it)))
                    nxt = slots.pop(0) if slots else None
                else:
                    tx = self._background_utxo(h) if utxo else self._background_account(h)
                    if tx is not None:
                        txs.append(tx)
            block_txs.append([tx["id"] for tx in txs])
            lines.append(json.dumps({"height": h, "time": t, "txs": txs}, separators=(",", ":")))
        if pos != len(intents):
            raise PlantingFailed(f"{self.chain}: intents beyond the chain tip")
        data = ("\n".join(lines) + "\n").encode()
        dump = None
        if self.track:
            dump = render_index_dump(self.chain, self.c.times, block_txs, self.values, self.spent, self.addr_idx)
        return data, dump


# ---------------------------------------------------------------------------
# public entry points


def plant_pattern(builder: WorldBuilder, kind: str, **params) -> str:
    """Plant one pattern and return its id.

    ``kind`` is one of ``uturn`` (``variant``), ``roundtrip`` (``same_address``),
    ``coinjoin_pre``, ``coinjoin_post``, ``pool_interaction`` (``type``),
    ``bot_cluster`` (``size``, ``pair``, ``value``), ``hub``, ``twins``,
    ``reuse`` and ``abandoned``.
    """
    if kind == "uturn":
        return builder.plant_uturn(params.pop("variant", "basic"), **params)
    if kind == "roundtrip":
        same = params.pop("same_address", False)
        return builder.plant_uturn(params.pop("variant", "basic"), roundtrip=True, same_address=same, **params)
    if kind == "coinjoin_pre":
        return builder.plant_coinjoin_pre(**params)
    if kind == "coinjoin_post":
        return builder.plant_coinjoin_post(**params)
    if kind == "pool_interaction":
        return builder.plant_pool(int(params.pop("type")), **params)
    if kind == "bot_cluster":
        cur_in, cur_out = params.pop("pair")
        return builder.plant_bots(BotSpec(int(params.pop("size")), cur_in, cur_out, str(params.pop("value")), **params))
    if kind == "hub":
        return builder.plant_hub(HubSpec(**params))
    if kind == "twins":
        return builder.plant_twins()
    if kind == "reuse":
        return builder.plant_reuse()
    if kind == "abandoned":
        return builder.plant_abandoned()
    raise UnsupportedVariant(f"unknown pattern kind {kind!r}")


def generate_world(config: WorldConfig) -> World:
    """Plan every configured pattern plus vanilla traffic and emit the world."""
    b = WorldBuilder(config)
    p = config.plants
    for spec in p.bots:
        b.plant_bots(spec)
    for spec in p.hubs:
        b.plant_hub(spec)
    for _ in range(p.twins):
        b.plant_twins()
    for _ in range(p.reuse):
        b.plant_reuse()
    variants = [v for v in UTURN_VARIANTS for _ in range(int(p.uturns.get(v, 0)))]
    unknown = set(p.uturns) - set(UTURN_VARIANTS)
    if unknown:
        raise ConfigError(f"unknown U-turn variants {sorted(unknown)}")
    for v in variants:
        b.plant_uturn(v)
    for i in range(p.roundtrips_regular + p.roundtrips_same):
        same = i >= p.roundtrips_regular
        b.plant_uturn(UTURN_VARIANTS[i % 3], roundtrip=True, same_address=same)
    for _ in range(p.coinjoin_hops):
        b.plant_uturn("address", coinjoin_hop=True, chain_y=b._privatesend_chain())
    for _ in range(p.coinjoin_pre):
        b.plant_coinjoin_pre()
    for _ in range(p.coinjoin_post):
        b.plant_coinjoin_post()
    for kind in (1, 2, 3):
        for _ in range(int(p.pool.get(kind, 0))):
            b.plant_pool(kind)
    for _ in range(p.abandoned):
        b.plant_abandoned()
    n_vanilla = round(config.shift_rate * config.duration / 3600)
    for _ in range(n_vanilla):
        b.vanilla()
    b.publish()
    if config.collision_rate > 0:
        for tr in list(b.trades):
            if tr.published and tr.deposit_tx is not None and b.rng.random() < config.collision_rate:
                b.plant_decoy(tr)
    return b.build()
