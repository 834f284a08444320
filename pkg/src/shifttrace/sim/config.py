"""World configuration for the ledger simulator."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

from ..errors import ConfigError
from ..model import DEFAULT_CHAINS, DEFAULT_OFF_LEDGER, ChainConfig

UTURN_VARIANTS = ("basic", "address", "utxo")


@dataclass(frozen=True)
class BotSpec:
    size: int
    cur_in: str
    cur_out: str
    value: str  # exact cur_in amount of every member
    receivers: int = 2
    senders_per_deposit: int = 2  # UTXO chains; account chains reuse one sender when single_sender
    single_sender: bool = False


@dataclass(frozen=True)
class HubSpec:
    senders: int = 20
    in_chains: tuple[str, ...] = ("LTC", "DOGE", "ETH")
    out_chain: str = "BTC"
    tag: str = "CoinPayments"
    category: str = "processor"


@dataclass(frozen=True)
class Plants:
    uturns: Mapping[str, int] = field(default_factory=dict)  # variant -> count
    roundtrips_regular: int = 0
    roundtrips_same: int = 0
    coinjoin_pre: int = 0
    coinjoin_post: int = 0
    coinjoin_hops: int = 0  # DASH address-variant U-turns whose hop is a CoinJoin
    pool: Mapping[int, int] = field(default_factory=dict)  # kind -> count
    bots: tuple[BotSpec, ...] = ()
    hubs: tuple[HubSpec, ...] = ()
    twins: int = 0
    reuse: int = 0
    abandoned: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["uturns"] = dict(self.uturns)
        d["pool"] = {str(k): v for k, v in self.pool.items()}
        d["bots"] = [asdict(b) for b in self.bots]
        d["hubs"] = [{**asdict(h), "in_chains": list(h.in_chains)} for h in self.hubs]
        return d

    @classmethod
    def from_json(cls, obj: Mapping) -> "Plants":
        obj = dict(obj)
        try:
            return cls(
                uturns={str(k): int(v) for k, v in obj.pop("uturns", {}).items()},
                pool={int(k): int(v) for k, v in obj.pop("pool", {}).items()},
                bots=tuple(BotSpec(**b) for b in obj.pop("bots", [])),
                hubs=tuple(HubSpec(**{**h, "in_chains": tuple(h.get("in_chains", HubSpec.in_chains))}) for h in obj.pop("hubs", [])),
                **{k: int(v) for k, v in obj.items()},
            )
        except TypeError as exc:
            raise ConfigError(f"bad plants section: {exc}") from exc


@dataclass(frozen=True)
class WorldConfig:
    chains: tuple[ChainConfig, ...] = DEFAULT_CHAINS
    off_ledger: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_OFF_LEDGER))
    seed: int = 1
    start: int = 1_514_764_800
    duration: int = 3 * 86400
    background_rate: float | Mapping[str, float] = 0.1  # tx per second per chain
    shift_rate: float = 60.0  # published-or-dropped vanilla trades per hour
    collision_rate: float = 0.0
    lag_min: int = 2  # minutes
    lag_max: int = 60
    lag_mean: float = 10.0
    jitter: float = 0.25
    feed_tick: int = 300
    drop_fraction: float = 0.0
    skew: Mapping[str, tuple[int, int]] = field(default_factory=dict)  # chain -> (delta_before, delta_after)
    plants: Plants = field(default_factory=Plants)
    track_indices: bool = False

    def __post_init__(self) -> None:
        ids = [c.chain_id for c in self.chains]
        if not ids:
            raise ConfigError("world needs at least one chain")
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate chain ids")
        if not 0.0 <= self.collision_rate <= 1.0:
            raise ConfigError(f"collision_rate {self.collision_rate} outside [0, 1]")
        if not 0.0 <= self.drop_fraction < 1.0:
            raise ConfigError(f"drop_fraction {self.drop_fraction} outside [0, 1)")
        if not 0 < self.lag_min <= self.lag_max:
            raise ConfigError("need 0 < lag_min <= lag_max")
        if not 0.0 <= self.jitter < 0.5:
            raise ConfigError("jitter must be in [0, 0.5)")
        if self.duration < 6 * 3600:
            raise ConfigError("duration must be at least six hours")
        if self.feed_tick <= 0:
            raise ConfigError("feed_tick must be positive")
        if self.shift_rate < 0:
            raise ConfigError("shift_rate must be >= 0")
        for chain, (db, da) in self.skew.items():
            if chain not in ids:
                raise ConfigError(f"skew for unknown chain {chain}")
            if db < 0 or da < 0:
                raise ConfigError(f"skew for {chain} must be non-negative")
        rates = self.background_rate.values() if isinstance(self.background_rate, Mapping) else [self.background_rate]
        if any(r < 0 for r in rates):
            raise ConfigError("background_rate must be >= 0")

    def chain(self, chain_id: str) -> ChainConfig:
        for c in self.chains:
            if c.chain_id == chain_id:
                return c
        raise ConfigError(f"unknown chain {chain_id}")

    def window(self, chain_id: str) -> tuple[int, int]:
        if chain_id in self.skew:
            db, da = self.skew[chain_id]
            return int(db), int(da)
        c = self.chain(chain_id)
        return c.default_delta_before, c.default_delta_after

    def bg_rate(self, chain_id: str) -> float:
        if isinstance(self.background_rate, Mapping):
            return float(self.background_rate.get(chain_id, 0.0))
        return float(self.background_rate)

    def with_(self, **changes) -> "WorldConfig":
        return replace(self, **changes)

    def to_json(self) -> dict:
        return {
            "chains": [c.to_json() for c in self.chains],
            "off_ledger": dict(self.off_ledger),
            "seed": self.seed,
            "start": self.start,
            "duration": self.duration,
            "background_rate": dict(self.background_rate) if isinstance(self.background_rate, Mapping) else self.background_rate,
            "shift_rate": self.shift_rate,
            "collision_rate": self.collision_rate,
            "lag_min": self.lag_min,
            "lag_max": self.lag_max,
            "lag_mean": self.lag_mean,
            "jitter": self.jitter,
            "feed_tick": self.feed_tick,
            "drop_fraction": self.drop_fraction,
            "skew": {k: list(v) for k, v in self.skew.items()},
            "plants": self.plants.to_json(),
            "track_indices": self.track_indices,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "WorldConfig":
        if not isinstance(obj, Mapping):
            raise ConfigError("world config must be a JSON object")
        obj = dict(obj)
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown world config keys {sorted(unknown)}")
        kwargs = dict(obj)
        try:
            if "chains" in kwargs:
                kwargs["chains"] = tuple(ChainConfig.from_json(c) for c in kwargs["chains"])
            if "skew" in kwargs:
                kwargs["skew"] = {k: (int(v[0]), int(v[1])) for k, v in kwargs["skew"].items()}
            if "plants" in kwargs:
                kwargs["plants"] = Plants.from_json(kwargs["plants"])
            for key in ("seed", "start", "duration", "lag_min", "lag_max", "feed_tick"):
                if key in kwargs:
                    kwargs[key] = int(kwargs[key])
            return cls(**kwargs)
        except (TypeError, ValueError, KeyError, IndexError) as exc:
            raise ConfigError(f"bad world config: {exc}") from exc

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def acceptance_plants() -> Plants:
    """The plant mix of the full-size oracle-recovery world."""
    return Plants(
        uturns={"basic": 100, "address": 100, "utxo": 100},
        roundtrips_regular=75,
        roundtrips_same=75,
        coinjoin_pre=20,
        coinjoin_post=20,
        coinjoin_hops=0,
        pool={1: 10, 2: 10, 3: 10},
        bots=(
            BotSpec(17, "BTC", "XMR", "0.1"),
            BotSpec(18, "BTC", "XMR", "0.1"),
            BotSpec(20, "BTC", "SALT", "0.1"),
            BotSpec(16, "ETH", "BTC", "2.5", receivers=1, single_sender=True),
            BotSpec(19, "LTC", "ZEC", "3"),
            BotSpec(15, "DASH", "XMR", "1.5"),
        ),
        hubs=(HubSpec(),),
        twins=3,
        reuse=5,
        abandoned=10,
    )


def small_plants() -> Plants:
    """A few of every pattern, sized for a half-day world."""
    return Plants(
        uturns={"basic": 3, "address": 3, "utxo": 3},
        roundtrips_regular=2,
        roundtrips_same=2,
        coinjoin_pre=2,
        coinjoin_post=2,
        coinjoin_hops=2,
        pool={1: 2, 2: 2, 3: 2},
        bots=(BotSpec(16, "BTC", "XMR", "0.1"),),
        hubs=(HubSpec(senders=6),),
        twins=1,
        reuse=1,
        abandoned=2,
    )
