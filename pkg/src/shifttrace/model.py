"""Chain-agnostic domain types and exact fixed-point amount arithmetic.

Amounts are integers of the smallest unit of a currency (``atoms``) tagged with
the number of decimal places that unit represents.  Nothing in this module
rounds silently: mixing precisions raises :class:`PrecisionMismatch`, and
ratios are returned as :class:`fractions.Fraction`.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import Iterable, Iterator, Mapping, Union

from .errors import (
    ConfigError,
    NegativeAmount,
    PrecisionMismatch,
    TooManyDecimals,
    ValidationError,
    ZeroReference,
)

MAX_PRECISION = 18

_DECIMAL_RE = re.compile(r"^(-?)([0-9]+)(?:\.([0-9]+))?$")


class Consensus(str, enum.Enum):
    UTXO = "utxo"
    ACCOUNT = "account"


@dataclass(frozen=True)
class ChainConfig:
    chain_id: str
    consensus: Consensus
    block_interval: int
    precision: int
    default_delta_before: int = 0
    default_delta_after: int = 0
    shielded: bool = False  # transactions may carry pool_in / pool_out values
    privatesend: bool = False  # denominated CoinJoins exist on this chain

    def __post_init__(self) -> None:
        if not self.chain_id:
            raise ConfigError("chain_id must be non-empty")
        if not isinstance(self.consensus, Consensus):
            object.__setattr__(self, "consensus", Consensus(self.consensus))
        if not 0 <= self.precision <= MAX_PRECISION:
            raise ConfigError(f"{self.chain_id}: precision {self.precision} outside 0..{MAX_PRECISION}")
        if self.block_interval <= 0:
            raise ConfigError(f"{self.chain_id}: block_interval must be positive")
        if self.default_delta_before < 0 or self.default_delta_after < 0:
            raise ConfigError(f"{self.chain_id}: block-window defaults must be >= 0")

    @property
    def is_utxo(self) -> bool:
        return self.consensus is Consensus.UTXO

    def to_json(self) -> dict:
        return {
            "chain_id": self.chain_id,
            "consensus": self.consensus.value,
            "block_interval": self.block_interval,
            "precision": self.precision,
            "default_delta_before": self.default_delta_before,
            "default_delta_after": self.default_delta_after,
            "shielded": self.shielded,
            "privatesend": self.privatesend,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ChainConfig":
        try:
            return cls(
                chain_id=obj["chain_id"],
                consensus=Consensus(obj["consensus"]),
                block_interval=int(obj["block_interval"]),
                precision=int(obj["precision"]),
                default_delta_before=int(obj.get("default_delta_before", 0)),
                default_delta_after=int(obj.get("default_delta_after", 0)),
                shielded=bool(obj.get("shielded", False)),
                privatesend=bool(obj.get("privatesend", False)),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad chain config {obj!r}: {exc}") from exc


class ChainRegistry(Mapping[str, ChainConfig]):
    """Chain configs keyed by ticker, plus precisions for off-ledger currencies.

    Off-ledger tickers show up in the shift feed (e.g. XMR) but have no ledger
    the tracer can ingest.
    """

    def __init__(self, chains: Iterable[ChainConfig] = (), off_ledger: Mapping[str, int] | None = None):
        self._chains: dict[str, ChainConfig] = {}
        for cfg in chains:
            self.add(cfg)
        self.off_ledger: dict[str, int] = dict(off_ledger or {})

    def add(self, cfg: ChainConfig) -> None:
        if cfg.chain_id in self._chains:
            raise ConfigError(f"duplicate chain_id {cfg.chain_id}")
        self._chains[cfg.chain_id] = cfg

    def __getitem__(self, key: str) -> ChainConfig:
        return self._chains[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._chains)

    def __len__(self) -> int:
        return len(self._chains)

    def precision(self, ticker: str) -> int:
        if ticker in self._chains:
            return self._chains[ticker].precision
        if ticker in self.off_ledger:
            return self.off_ledger[ticker]
        raise ConfigError(f"unknown currency {ticker!r}")

    def currencies(self) -> list[str]:
        return list(self._chains) + [t for t in self.off_ledger if t not in self._chains]


# Block windows are the per-currency optimum reported for the real ledgers.
DEFAULT_CHAINS: tuple[ChainConfig, ...] = (
    ChainConfig("ETH", Consensus.ACCOUNT, 15, 18, 5, 0),
    ChainConfig("BTC", Consensus.UTXO, 600, 8, 0, 1),
    ChainConfig("LTC", Consensus.UTXO, 150, 8, 1, 2),
    ChainConfig("BCH", Consensus.UTXO, 600, 8, 9, 4),
    ChainConfig("DOGE", Consensus.UTXO, 60, 8, 1, 4),
    ChainConfig("DASH", Consensus.UTXO, 150, 8, 5, 5, privatesend=True),
    ChainConfig("ETC", Consensus.ACCOUNT, 15, 18, 5, 0),
    ChainConfig("ZEC", Consensus.UTXO, 150, 8, 1, 3, shielded=True),
)

DEFAULT_OFF_LEDGER = {"XMR": 12, "SALT": 8}


def default_registry() -> ChainRegistry:
    return ChainRegistry(DEFAULT_CHAINS, DEFAULT_OFF_LEDGER)


# ---------------------------------------------------------------------------
# fixed-point amounts


@dataclass(frozen=True, slots=True)
class FixedAmount:
    atoms: int
    precision: int

    def __post_init__(self) -> None:
        if self.atoms < 0:
            raise NegativeAmount(f"amount must be non-negative, got {self.atoms} atoms")
        if not 0 <= self.precision <= MAX_PRECISION:
            raise ValidationError(f"precision {self.precision} outside 0..{MAX_PRECISION}")

    def _same(self, other: "FixedAmount") -> None:
        if not isinstance(other, FixedAmount):
            raise TypeError(f"expected FixedAmount, got {type(other).__name__}")
        if other.precision != self.precision:
            raise PrecisionMismatch(f"precision {self.precision} vs {other.precision}")

    def __add__(self, other: "FixedAmount") -> "FixedAmount":
        self._same(other)
        return FixedAmount(self.atoms + other.atoms, self.precision)

    def __sub__(self, other: "FixedAmount") -> "FixedAmount":
        self._same(other)
        return FixedAmount(self.atoms - other.atoms, self.precision)

    def __lt__(self, other: "FixedAmount") -> bool:
        self._same(other)
        return self.atoms < other.atoms

    def __le__(self, other: "FixedAmount") -> bool:
        self._same(other)
        return self.atoms <= other.atoms

    def __gt__(self, other: "FixedAmount") -> bool:
        self._same(other)
        return self.atoms > other.atoms

    def __ge__(self, other: "FixedAmount") -> bool:
        self._same(other)
        return self.atoms >= other.atoms

    def __bool__(self) -> bool:
        return self.atoms != 0

    def to_fraction(self) -> Fraction:
        return Fraction(self.atoms, 10**self.precision)

    def __str__(self) -> str:
        return format_amount(self)

    @classmethod
    def zero(cls, precision: int) -> "FixedAmount":
        return cls(0, precision)


def parse_atoms(text: str, precision: int) -> int:
    """Scale a non-negative decimal string by ``10**precision`` without rounding."""
    m = _DECIMAL_RE.match(text.strip()) if isinstance(text, str) else None
    if m is None:
        raise ValidationError(f"not a decimal string: {text!r}")
    sign, whole, frac = m.groups()
    frac = frac or ""
    if sign and (int(whole) or frac.strip("0")):
        raise NegativeAmount(f"negative amount {text!r}")
    digits = frac.rstrip("0")
    if len(digits) > precision:
        raise TooManyDecimals(f"{text!r} has more than {precision} fractional digits")
    return int(whole) * 10**precision + (int(digits.ljust(precision, "0")) if precision else 0)


def parse_amount(text: str, precision: int) -> FixedAmount:
    return FixedAmount(parse_atoms(text, precision), precision)


def format_atoms(atoms: int, precision: int) -> str:
    """Canonical decimal form: no trailing fractional zeros, no bare point."""
    if precision == 0:
        return str(atoms)
    whole, frac = divmod(atoms, 10**precision)
    frac_s = str(frac).rjust(precision, "0").rstrip("0")
    return f"{whole}.{frac_s}" if frac_s else str(whole)


def format_amount(amount: FixedAmount) -> str:
    return format_atoms(amount.atoms, amount.precision)


def amount_from_json(value: Union[str, int, float], precision: int) -> FixedAmount:
    """Accept the number shapes that appear in service JSON bodies.

    Floats are converted through their shortest repr, which is exact for the
    decimal literals the service emits.
    """
    if isinstance(value, bool):
        raise ValidationError(f"not an amount: {value!r}")
    if isinstance(value, int):
        return FixedAmount(value * 10**precision, precision)
    if isinstance(value, float):
        text = repr(value)
        if "e" in text or "E" in text:
            text = format(Decimal(text), "f")
        return parse_amount(text, precision)
    return parse_amount(value, precision)


def relative_diff(a: FixedAmount, b: FixedAmount) -> Fraction:
    """``|a - b| / b`` as an exact rational; ``b`` is the reference value."""
    a._same(b)
    if b.atoms == 0:
        raise ZeroReference("reference amount is zero")
    return Fraction(abs(a.atoms - b.atoms), b.atoms)


def within_relative(value: int, reference: Fraction | int, tol: Fraction) -> bool:
    """``|value - reference| <= tol * reference`` on exact rationals (atoms)."""
    reference = Fraction(reference)
    if reference <= 0:
        raise ZeroReference("reference amount must be positive")
    return abs(value - reference) <= tol * reference


def parse_fraction(text: Union[str, int, float]) -> Fraction:
    """Exact rational from a decimal literal (rates, thresholds)."""
    if isinstance(text, Fraction):
        return text
    if isinstance(text, float):
        text = repr(text)
    try:
        return Fraction(Decimal(str(text)))
    except (InvalidOperation, ValueError) as exc:
        raise ValidationError(f"not a decimal: {text!r}") from exc


def format_fraction(value: Fraction, digits: int = 12) -> str:
    """Decimal rendering of a rational to ``digits`` significant digits."""
    from decimal import Context

    ctx = Context(prec=digits)
    d = ctx.divide(Decimal(value.numerator), Decimal(value.denominator))
    s = format(d.normalize(ctx), "f")
    return s


# ---------------------------------------------------------------------------
# ledger objects


@dataclass(frozen=True, slots=True)
class UtxoRef:
    tx_id: str
    index: int

    def __str__(self) -> str:
        return f"{self.tx_id}:{self.index}"


@dataclass(frozen=True, slots=True)
class AccountInput:
    address: str
    value: FixedAmount


TxInput = Union[UtxoRef, AccountInput]


@dataclass(frozen=True, slots=True)
class TxOutput:
    address: str
    value: FixedAmount


@dataclass(frozen=True)
class Block:
    chain_id: str
    height: int
    timestamp: int
    tx_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.height < 0:
            raise ValidationError("block height must be >= 0")


@dataclass(frozen=True)
class Transaction:
    tx_id: str
    chain_id: str
    inputs: tuple[TxInput, ...]
    outputs: tuple[TxOutput, ...]
    timestamp: int
    height: int
    pool_in: FixedAmount | None = None
    pool_out: FixedAmount | None = None

    @property
    def is_account(self) -> bool:
        return bool(self.inputs) and isinstance(self.inputs[0], AccountInput)

    @property
    def enters_pool(self) -> bool:
        return self.pool_in is not None and self.pool_in.atoms > 0

    @property
    def leaves_pool(self) -> bool:
        return self.pool_out is not None and self.pool_out.atoms > 0


def is_shielded_address(address: str) -> bool:
    """Shielded (z-) addresses; transparent ones use the ``t`` prefix."""
    return address.startswith("z")


# ---------------------------------------------------------------------------
# service-side records


class ShiftStatus(str, enum.Enum):
    COMPLETE = "complete"
    ERROR = "error"
    NO_DEPOSITS = "no_deposits"


@dataclass(frozen=True)
class ShiftRecord:
    cur_in: str
    cur_out: str
    amt: FixedAmount
    timestamp: int
    id: str

    def __post_init__(self) -> None:
        if self.cur_in == self.cur_out:
            raise ValidationError(f"shift {self.id}: cur_in equals cur_out ({self.cur_in})")
        if self.amt.atoms <= 0:
            raise ValidationError(f"shift {self.id}: amount must be positive")

    @property
    def pair(self) -> tuple[str, str]:
        return (self.cur_in, self.cur_out)

    def to_json(self) -> dict:
        return {
            "curIn": self.cur_in,
            "curOut": self.cur_out,
            "amount": format_amount(self.amt),
            "timestamp": self.timestamp,
            "id": self.id,
        }

    @classmethod
    def from_json(cls, obj: Mapping, registry: ChainRegistry) -> "ShiftRecord":
        try:
            cur_in = obj["curIn"]
            return cls(
                cur_in=cur_in,
                cur_out=obj["curOut"],
                amt=amount_from_json(obj["amount"], registry.precision(cur_in)),
                timestamp=int(obj["timestamp"]),  # sub-second resolution truncated
                id=str(obj["id"]),
            )
        except KeyError as exc:
            raise ValidationError(f"shift record missing field {exc}") from exc


@dataclass(frozen=True)
class ShiftDetail:
    status: ShiftStatus
    address: str
    withdraw: str | None = None
    in_coin: FixedAmount | None = None
    in_type: str | None = None
    out_coin: FixedAmount | None = None
    out_type: str | None = None
    tx: str | None = None
    tx_url: str | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.status, ShiftStatus):
            object.__setattr__(self, "status", ShiftStatus(self.status))
        if self.status is ShiftStatus.COMPLETE and (
            self.tx is None or self.withdraw is None or self.out_coin is None
        ):
            raise ValidationError("complete detail needs tx, withdraw and out_coin")
        if self.status is ShiftStatus.ERROR and not self.error:
            raise ValidationError("error detail needs an error message")

    def to_json(self) -> dict:
        out: dict = {"status": self.status.value, "address": self.address}
        if self.withdraw is not None:
            out["withdraw"] = self.withdraw
        if self.in_coin is not None:
            out["inCoin"] = format_amount(self.in_coin)
        if self.in_type is not None:
            out["inType"] = self.in_type
        if self.out_coin is not None:
            out["outCoin"] = format_amount(self.out_coin)
        if self.out_type is not None:
            out["outType"] = self.out_type
        if self.tx is not None:
            out["tx"] = self.tx
        if self.tx_url is not None:
            out["txURL"] = self.tx_url
        if self.error is not None:
            out["error"] = self.error
        return out

    @classmethod
    def from_json(cls, obj: Mapping, registry: ChainRegistry) -> "ShiftDetail":
        in_type = obj.get("inType")
        out_type = obj.get("outType")
        in_coin = obj.get("inCoin")
        out_coin = obj.get("outCoin")
        return cls(
            status=ShiftStatus(obj["status"]),
            address=obj.get("address", ""),
            withdraw=obj.get("withdraw"),
            in_coin=None if in_coin is None else amount_from_json(in_coin, registry.precision(in_type)),
            in_type=in_type,
            out_coin=None if out_coin is None else amount_from_json(out_coin, registry.precision(out_type)),
            out_type=out_type,
            tx=obj.get("tx"),
            tx_url=obj.get("txURL"),
            error=obj.get("error"),
        )


@dataclass(frozen=True)
class RateRecord:
    cur_in: str
    cur_out: str
    rate: Fraction
    limit: FixedAmount
    minimum: FixedAmount
    miner_fee: FixedAmount  # denominated in cur_out
    timestamp: int

    def __post_init__(self) -> None:
        if self.rate <= 0:
            raise ValidationError(f"rate for {self.cur_in}_{self.cur_out} must be positive")
        if self.minimum > self.limit:
            raise ValidationError(f"minimum exceeds limit for {self.cur_in}_{self.cur_out}")

    @property
    def pair(self) -> tuple[str, str]:
        return (self.cur_in, self.cur_out)

    def to_json(self) -> dict:
        return {
            "pair": f"{self.cur_in.lower()}_{self.cur_out.lower()}",
            "rate": format_fraction(self.rate, 16),
            "limit": format_amount(self.limit),
            "minimum": format_amount(self.minimum),
            "minerFee": format_amount(self.miner_fee),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, obj: Mapping, registry: ChainRegistry) -> "RateRecord":
        cur_in, cur_out = (s.upper() for s in obj["pair"].split("_", 1))
        p_in = registry.precision(cur_in)
        return cls(
            cur_in=cur_in,
            cur_out=cur_out,
            rate=parse_fraction(obj["rate"]),
            limit=amount_from_json(obj["limit"], p_in),
            minimum=amount_from_json(obj["minimum"], p_in),
            miner_fee=amount_from_json(obj["minerFee"], registry.precision(cur_out)),
            timestamp=int(obj["timestamp"]),
        )


@dataclass(frozen=True)
class TagRecord:
    chain_id: str
    address: str
    tag: str
    category: str = ""
    source: str = ""

    def to_json(self) -> dict:
        return {"chain": self.chain_id, "address": self.address, "tag": self.tag, "category": self.category, "source": self.source}

    @classmethod
    def from_json(cls, obj: Mapping) -> "TagRecord":
        try:
            return cls(obj["chain"], obj["address"], obj["tag"], obj.get("category", ""), obj.get("source", ""))
        except KeyError as exc:
            raise ValidationError(f"tag record missing field {exc}") from exc


def tags_by_node(tags: Iterable[TagRecord]) -> dict[tuple[str, str], list[TagRecord]]:
    out: dict[tuple[str, str], list[TagRecord]] = {}
    for t in tags:
        out.setdefault((t.chain_id, t.address), []).append(t)
    return out


@dataclass(frozen=True)
class Thresholds:
    """Tunable detector constants with the default cut-offs."""

    uturn_window: int = 1800
    uturn_tolerance: Fraction = field(default=Fraction(1, 100))
    roundtrip_window: int = 1800
    roundtrip_tolerance: Fraction = field(default=Fraction(1, 200))
    bot_window: int = 300
    bot_min_size: int = 15
    bot_tolerance: Fraction = field(default=Fraction(1, 100))
    bot_max_prune: Fraction = field(default=Fraction(1, 5))
    coinjoin_min_inputs: int = 3
    coinjoin_denominations: tuple[str, ...] = ("0.01", "0.1", "1", "10")
    coinjoin_fee_increment: str = "0.0000001"

    def to_json(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            if isinstance(v, Fraction):
                out[k] = format_fraction(v)
            elif isinstance(v, tuple):
                out[k] = list(v)
            else:
                out[k] = v
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "Thresholds":
        base = cls()
        kwargs = {}
        for k, v in obj.items():
            if not hasattr(base, k):
                raise ConfigError(f"unknown threshold {k!r}")
            cur = getattr(base, k)
            if isinstance(cur, Fraction):
                kwargs[k] = parse_fraction(v)
            elif isinstance(cur, tuple):
                kwargs[k] = tuple(str(x) for x in v)
            elif isinstance(cur, str):
                kwargs[k] = str(v)
            else:
                kwargs[k] = int(v)
        return cls(**{**base.__dict__, **kwargs})
