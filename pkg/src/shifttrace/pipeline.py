"""Glue between a world directory on disk and the analysis stages."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping

from .bots import Corroboration, TradingCluster, corroborate, find_clusters, prune_outliers
from .chainstore import ChainHandle, ingest_chain
from .errors import ArchiveError, ConfigError, DegenerateCluster, UnknownChain
from .feed import FeedArchive, ReplayBackend, absorb_recent
from .flows import PassThrough, RoundTrip, UTurn, detect_roundtrips, detect_uturns, link_passthroughs
from .match import MatchReport, SweepResult, match_shifts, sweep_params
from .model import ChainRegistry, ShiftRecord, TagRecord, Thresholds
from .privacy import PoolInteraction, Provenance, classify_pool_interactions, coinjoin_asymmetry, coinjoin_provenance, find_coinjoins
from .relgraph import RelationGraph, build_graph
from .sim.config import WorldConfig
from .sim.writer import FEED_DIR, GROUND_TRUTH, LEDGER_DIR, TAGS, WORLD_CONFIG

ARCHIVE = "archive.ndjson"


def replay_archive(feed_dir: str | Path, registry: ChainRegistry) -> FeedArchive:
    """Scrape every fixture tick into an in-memory archive."""
    backend = ReplayBackend(feed_dir, registry)
    archive = FeedArchive(registry=registry)
    while not backend.exhausted:
        absorb_recent(backend.recent(), archive)
        archive.add_rates(backend.rates())
        archive.commit_tick()
        backend.advance()
    return archive


@dataclass
class Workspace:
    """A world directory: ledgers, feed fixtures, tags and (for simulated worlds) ground truth."""

    root: Path
    config: WorldConfig
    engine: str = "columnar"
    archive_path: Path | None = None
    _chains: dict[str, ChainHandle] = field(default_factory=dict)

    @classmethod
    def open(cls, root: str | Path, archive: str | Path | None = None, engine: str = "columnar") -> "Workspace":
        root = Path(root)
        cfg_path = root / WORLD_CONFIG
        try:
            with open(cfg_path, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
        except FileNotFoundError:
            raise FileNotFoundError(f"{root} is not a world directory (no {WORLD_CONFIG})") from None
        except ValueError as exc:
            raise ConfigError(f"{cfg_path}: {exc}") from exc
        return cls(root=root, config=WorldConfig.from_json(obj), engine=engine, archive_path=None if archive is None else Path(archive))

    @cached_property
    def registry(self) -> ChainRegistry:
        return ChainRegistry(self.config.chains, self.config.off_ledger)

    @property
    def ledger_ids(self) -> list[str]:
        return sorted(p.stem for p in (self.root / LEDGER_DIR).glob("*.ndjson"))

    def ledger_path(self, chain: str) -> Path:
        return self.root / LEDGER_DIR / f"{chain}.ndjson"

    def chain(self, chain_id: str) -> ChainHandle:
        if chain_id not in self._chains:
            if chain_id not in self.registry or not self.ledger_path(chain_id).exists():
                raise UnknownChain(f"no ledger for {chain_id}")
            self._chains[chain_id] = ingest_chain(self.ledger_path(chain_id), self.registry[chain_id], self.engine)
        return self._chains[chain_id]

    def chains(self) -> dict[str, ChainHandle]:
        return {c: self.chain(c) for c in self.ledger_ids}

    @cached_property
    def archive(self) -> FeedArchive:
        path = self.archive_path or (self.root / ARCHIVE)
        if path.exists():
            return FeedArchive.load(path, self.registry)
        if self.archive_path is not None:
            raise ArchiveError(f"archive {path} does not exist")
        return replay_archive(self.root / FEED_DIR, self.registry)

    def shifts(self) -> list[ShiftRecord]:
        return list(self.archive.shifts)

    def backend(self) -> ReplayBackend:
        return ReplayBackend(self.root / FEED_DIR, self.registry)

    def tags(self) -> list[TagRecord]:
        path = self.root / TAGS
        if not path.exists():
            return []
        with open(path, "r", encoding="utf-8") as fh:
            return [TagRecord.from_json(o) for o in json.load(fh)]

    def ground_truth(self) -> dict:
        path = self.root / GROUND_TRUTH
        if not path.exists():
            raise ConfigError(f"{self.root} has no ground truth")
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    def windows(self) -> dict[str, tuple[int, int]]:
        """Configured block windows for every ledger chain."""
        return {c: self.config.window(c) for c in self.ledger_ids}


def load_params(path: str | Path) -> dict[str, tuple[int, int]]:
    """Windows from a sweep summary (``{chain: {"argmax": [db, da]}}``) or a plain mapping."""
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    out = {}
    for chain, v in obj.items():
        pair = v["argmax"] if isinstance(v, dict) else v
        out[chain] = (int(pair[0]), int(pair[1]))
    return out


@dataclass
class Analysis:
    """Every detector stage over one workspace, computed lazily and cached."""

    ws: Workspace
    params: Mapping[str, tuple[int, int]] | None = None
    thresholds: Thresholds = field(default_factory=Thresholds)
    use_api: bool = True

    @cached_property
    def chains(self) -> dict[str, ChainHandle]:
        return self.ws.chains()

    @cached_property
    def windows(self) -> dict[str, tuple[int, int]]:
        out = self.ws.windows()
        out.update(self.params or {})
        return out

    @cached_property
    def shifts(self) -> list[ShiftRecord]:
        return self.ws.shifts()

    @cached_property
    def shift_index(self) -> dict[str, ShiftRecord]:
        return {s.id: s for s in self.shifts}

    @cached_property
    def report(self) -> MatchReport:
        backend = self.ws.backend() if self.use_api else None
        return match_shifts(self.shifts, self.chains, backend, self.windows)

    def sweep(self, chain: str, max_delta: int = 30) -> SweepResult:
        return sweep_params(self.shifts, self.chains[chain], max_delta)

    @cached_property
    def passthroughs(self) -> list[PassThrough]:
        return link_passthroughs(self.report.matches.values(), self.chains)

    @cached_property
    def uturns(self) -> list[UTurn]:
        th = self.thresholds
        return detect_uturns(self.passthroughs, self.chains, th.uturn_window, th.uturn_tolerance)

    @cached_property
    def roundtrips(self) -> list[RoundTrip]:
        th = self.thresholds
        return detect_roundtrips(self.passthroughs, self.uturns, th.roundtrip_window, th.roundtrip_tolerance)

    @cached_property
    def graph(self) -> RelationGraph:
        return build_graph(self.passthroughs)

    @cached_property
    def shielded_chains(self) -> list[str]:
        return [c for c, h in self.chains.items() if h.config.shielded]

    @cached_property
    def mixing_chains(self) -> list[str]:
        return [c for c, h in self.chains.items() if h.config.privatesend and h.config.is_utxo]

    @cached_property
    def pool(self) -> dict[str, list[PoolInteraction]]:
        return {c: classify_pool_interactions(self.report.matches.values(), self.chains[c]) for c in self.shielded_chains}

    @cached_property
    def coinjoins(self) -> dict[str, list[str]]:
        return {c: find_coinjoins(self.chains[c], self.thresholds) for c in self.mixing_chains}

    @cached_property
    def provenance(self) -> dict[str, Provenance]:
        return {c: coinjoin_provenance(self.report.matches.values(), self.chains[c], self.coinjoins[c], self.thresholds) for c in self.mixing_chains}

    @cached_property
    def asymmetry(self) -> dict[str, dict]:
        return coinjoin_asymmetry(self.uturns, self.chains, self.thresholds)

    @cached_property
    def raw_clusters(self) -> list[TradingCluster]:
        th = self.thresholds
        return find_clusters(self.shifts, th.bot_window, th.bot_min_size, th.bot_tolerance)

    @cached_property
    def clusters(self) -> tuple[list[TradingCluster], list[tuple[TradingCluster, str]]]:
        """``(kept, rejected-with-reason)`` after outlier pruning."""
        th = self.thresholds
        kept, rejected = [], []
        for c in self.raw_clusters:
            try:
                kept.append(prune_outliers(c, self.shift_index, th.bot_min_size, th.bot_max_prune, th.bot_window))
            except DegenerateCluster as exc:
                rejected.append((c, str(exc)))
        return kept, rejected

    @cached_property
    def corroborations(self) -> list[Corroboration]:
        return [corroborate(c, self.graph, self.report, self.chains) for c in self.clusters[0]]
