"""Shared fixtures: hand-built ledgers and small simulated worlds."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import pytest

from shifttrace.chainstore import ChainHandle, ingest_bytes, ledger_header
from shifttrace.flows import PassThrough, RoundTrip, UTurn, detect_roundtrips, detect_uturns, link_passthroughs
from shifttrace.match import MatchReport, match_shifts
from shifttrace.model import ChainConfig, Consensus, ShiftRecord, default_registry, parse_amount
from shifttrace.sim.backend import SimServiceBackend
from shifttrace.sim.builder import World, generate_world
from shifttrace.sim.config import Plants, WorldConfig, small_plants
from shifttrace.sim.writer import write_world

REGISTRY = default_registry()
BTC = REGISTRY["BTC"]
ETH = REGISTRY["ETH"]
DASH = REGISTRY["DASH"]
ZEC = REGISTRY["ZEC"]


def ledger_bytes(config: ChainConfig, blocks: list[dict]) -> bytes:
    lines = [json.dumps(ledger_header(config))] + [json.dumps(b) for b in blocks]
    return ("\n".join(lines) + "\n").encode()


def make_chain(blocks: list[dict], config: ChainConfig = BTC, engine: str = "columnar") -> ChainHandle:
    return ingest_bytes(ledger_bytes(config, blocks), config, engine)


def coinbase(tx_id: str, addr: str, value: str) -> dict:
    return {"id": tx_id, "inputs": [], "outputs": [{"addr": addr, "value": value}]}


def spend(tx_id: str, refs: list[tuple[str, int]], outputs: list[tuple[str, str]]) -> dict:
    return {"id": tx_id, "inputs": [{"tx": t, "n": n} for t, n in refs], "outputs": [{"addr": a, "value": v} for a, v in outputs]}


def shift(sid: str, cur_in: str, cur_out: str, amount: str, t: int) -> ShiftRecord:
    return ShiftRecord(cur_in, cur_out, parse_amount(amount, REGISTRY.precision(cur_in)), t, sid)


def small_config(seed: int = 5, **changes) -> WorldConfig:
    """Twelve hours of light traffic with a few of every pattern."""
    cfg = WorldConfig(seed=seed, duration=12 * 3600, background_rate=0.02, shift_rate=20, plants=small_plants())
    return cfg.with_(**changes) if changes else cfg


@dataclass
class InMemory:
    """Detector stages over a generated world without touching disk."""

    world: World

    @cached_property
    def chains(self) -> dict[str, ChainHandle]:
        return {c: ingest_bytes(b, self.world.registry[c]) for c, b in self.world.ledgers.items()}

    @cached_property
    def shifts(self) -> list[ShiftRecord]:
        return [self.world.shift_record(t) for t in self.world.published()]

    @cached_property
    def backend(self) -> SimServiceBackend:
        return SimServiceBackend(self.world)

    @cached_property
    def windows(self) -> dict[str, tuple[int, int]]:
        return {c: self.world.config.window(c) for c in self.chains}

    @cached_property
    def report(self) -> MatchReport:
        return match_shifts(self.shifts, self.chains, self.backend, self.windows)

    @cached_property
    def passthroughs(self) -> list[PassThrough]:
        return link_passthroughs(self.report.matches.values(), self.chains)

    @cached_property
    def uturns(self) -> list[UTurn]:
        return detect_uturns(self.passthroughs, self.chains)

    @cached_property
    def roundtrips(self) -> list[RoundTrip]:
        return detect_roundtrips(self.passthroughs, self.uturns)

    def shift_id(self, key: str) -> str:
        return next(t.shift_id for t in self.world.trades if t.key == key)


@pytest.fixture(scope="session")
def small_world() -> World:
    return generate_world(small_config())


@pytest.fixture(scope="session")
def small(small_world) -> InMemory:
    return InMemory(small_world)


@pytest.fixture(scope="session")
def small_dir(small_world, tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("small_world")
    write_world(small_world, out)
    return out


__all__ = ["BTC", "DASH", "ETH", "ZEC", "REGISTRY", "Consensus", "InMemory", "coinbase", "ledger_bytes", "make_chain", "shift", "small_config", "spend"]


def coinjoin_oracle(n_inputs: int, outputs: list[int], accepted: dict[int, int], min_inputs: int = 3) -> set[int]:
    """Every accepted value that makes the transaction a CoinJoin, by direct reading of the rule.

    The rule holds for value ``v`` when there are enough inputs and every
    output but at most one carries ``v``.  An empty result means no CoinJoin.
    """
    if n_inputs < min_inputs:
        return set()
    return {v for v in accepted if outputs.count(v) >= 1 and len(outputs) - outputs.count(v) <= 1}


HIER_CHAINS = tuple(REGISTRY[c] for c in ("BTC", "DASH", "ETH", "LTC"))


def hierarchy_world(seed: int) -> World:
    """Six quiet hours on four chains with zero to two U-turns of each variant."""
    rng = random.Random(seed)
    plants = Plants(uturns={k: rng.randint(0, 2) for k in ("basic", "address", "utxo")})
    return generate_world(WorldConfig(seed=seed, chains=HIER_CHAINS, duration=6 * 3600, background_rate=0.002, shift_rate=2, plants=plants))


def uturns_of(world: World) -> list[UTurn]:
    chains = {c: ingest_bytes(d, world.registry[c]) for c, d in world.ledgers.items()}
    report = match_shifts([world.shift_record(t) for t in world.published()], chains, SimServiceBackend(world), {c: world.config.window(c) for c in chains})
    return detect_uturns(link_passthroughs(report.matches.values(), chains), chains)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
