"""Ledger ingestion and the lookup indices the tracing heuristics rely on.

A ledger file is newline-delimited JSON: one header line followed by one
object per block.  Two ingest routes build the same :class:`ChainHandle`:

* ``columnar``: pyarrow parses the file and every index is built with
  vectorized numpy operations.  This is the default and the fast one.
* ``reference``: a line-by-line pure Python validator.  It defines the
  accepted format and produces precise ``line N`` diagnostics; the columnar
  route falls back to it whenever its own checks reject an input.

Indices are stored as flat arrays (CSR offsets, sorted keys) rather than
per-entry Python objects so that a million-transaction chain stays compact.
"""

from __future__ import annotations

import io
import json
from bisect import bisect_left
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .errors import (
    DanglingInput,
    DoubleSpend,
    EmptyChain,
    FormatError,
    IngestError,
    OrderingError,
    PrecisionMismatch,
    RangeOutOfBounds,
    UnknownUtxo,
)
from .model import (
    AccountInput,
    Block,
    ChainConfig,
    Consensus,
    FixedAmount,
    Transaction,
    TxOutput,
    UtxoRef,
)

LEDGER_FORMAT = 1
_I64_MAX = np.iinfo(np.int64).max


class Candidate(NamedTuple):
    tx_id: str
    index: int
    address: str
    height: int


@dataclass(frozen=True)
class IngestStats:
    blocks: int
    txs: int
    utxos_created: int
    utxos_spent: int


class _SortedStrings:
    """Binary-search lookup over an immutable list of distinct strings."""

    def __init__(self, values, order: np.ndarray):
        self._values = values  # pyarrow StringArray or list
        self._order = order
        self._sorted = values.take(order) if hasattr(values, "take") else [values[i] for i in order]

    def find(self, key: str) -> int:
        arr = self._sorted
        lo, hi = 0, len(self._order)
        while lo < hi:
            mid = (lo + hi) // 2
            v = arr[mid]
            v = v.as_py() if hasattr(v, "as_py") else v
            if v < key:
                lo = mid + 1
            elif v > key:
                hi = mid
            else:
                return int(self._order[mid])
        return -1


def _str_at(values, i: int) -> str:
    v = values[i]
    return v.as_py() if hasattr(v, "as_py") else v


class ChainHandle:
    """Indexed, read-only view of one ingested chain.

    Transactions, outputs and inputs are numbered in chain order (height,
    then position in block).  ``out_off``/``in_off`` are CSR offsets from a
    transaction number into the flat output and input arrays.
    """

    def __init__(
        self,
        config: ChainConfig,
        *,
        times: np.ndarray,
        blk_off: np.ndarray,
        tx_ids,
        out_off: np.ndarray,
        out_addr: np.ndarray,
        out_hi: np.ndarray,
        out_lo: np.ndarray,
        in_off: np.ndarray,
        in_src: np.ndarray,
        acct_from: np.ndarray,
        pools: dict[int, tuple[int | None, int | None]],
        addresses,
    ):
        self.config = config
        self.times = times
        self._times_list = times.tolist()
        self.blk_off = blk_off
        self.tx_ids = tx_ids
        self.out_off = out_off
        self.out_addr = out_addr
        self.out_hi = out_hi
        self.out_lo = out_lo
        self.in_off = in_off
        self.in_src = in_src
        self.acct_from = acct_from
        self.pools = pools
        self.addresses = addresses
        self._scale = 10**config.precision

        ntx = len(out_off) - 1
        nout = len(out_addr)
        self.tx_height = np.repeat(np.arange(len(times), dtype=np.int64), np.diff(blk_off))
        self.out_tx = np.repeat(np.arange(ntx, dtype=np.int64), np.diff(out_off))
        self.out_height = self.tx_height[self.out_tx] if nout else np.zeros(0, np.int64)

        self.spender = np.full(nout, -1, dtype=np.int64)
        if len(in_src):
            in_tx = np.repeat(np.arange(ntx, dtype=np.int64), np.diff(in_off))
            self.spender[in_src] = in_tx
        else:
            in_tx = np.zeros(0, np.int64)

        # value index: outputs sorted by (hi, lo, chain order)
        order = np.lexsort((np.arange(nout), out_lo, out_hi)) if nout else np.zeros(0, np.int64)
        self._v_order = order
        self._v_hi = out_hi[order]
        self._v_lo = out_lo[order]
        self._v_height = self.out_height[order]

        # address index: distinct (address, tx) pairs in chain order
        if config.consensus is Consensus.ACCOUNT:
            codes = np.concatenate([acct_from, out_addr])
            txn = np.concatenate([np.arange(ntx, dtype=np.int64), self.out_tx])
        else:
            codes = np.concatenate([out_addr[in_src], out_addr]) if nout else np.zeros(0, np.int64)
            txn = np.concatenate([in_tx, self.out_tx]) if nout else np.zeros(0, np.int64)
        naddr = len(addresses)
        if len(codes):
            keys = np.unique(codes.astype(np.int64) * max(ntx, 1) + txn)
            a_codes = keys // max(ntx, 1)
            self._addr_tx = keys % max(ntx, 1)
            self._addr_off = np.searchsorted(a_codes, np.arange(naddr + 1))
        else:
            self._addr_tx = np.zeros(0, np.int64)
            self._addr_off = np.zeros(naddr + 1, np.int64)

        self._id_lookup = _SortedStrings(tx_ids, _string_order(tx_ids))
        self._addr_lookup = _SortedStrings(addresses, _string_order(addresses))
        self.stats = IngestStats(len(times), ntx, nout, len(in_src))

    # -- basic accessors -------------------------------------------------

    @property
    def chain_id(self) -> str:
        return self.config.chain_id

    @property
    def is_account(self) -> bool:
        return self.config.consensus is Consensus.ACCOUNT

    @property
    def tip(self) -> int:
        if not len(self.times):
            raise EmptyChain(f"{self.chain_id}: no blocks")
        return len(self.times) - 1

    def __len__(self) -> int:
        return len(self.times)

    @property
    def n_txs(self) -> int:
        return len(self.out_off) - 1

    def _check_height(self, height: int) -> None:
        if not len(self.times):
            raise EmptyChain(f"{self.chain_id}: no blocks")
        if not 0 <= height < len(self.times):
            raise RangeOutOfBounds(f"{self.chain_id}: height {height} outside 0..{len(self.times) - 1}")

    def tx_num(self, tx_id: str) -> int:
        """Chain-order number of a transaction, or -1 when unknown."""
        return self._id_lookup.find(tx_id)

    def tx_id_at(self, num: int) -> str:
        return _str_at(self.tx_ids, num)

    def address_at(self, code: int) -> str:
        return _str_at(self.addresses, code)

    def has_tx(self, tx_id: str) -> bool:
        return self.tx_num(tx_id) >= 0

    def _require_tx(self, tx_id: str) -> int:
        num = self.tx_num(tx_id)
        if num < 0:
            raise KeyError(f"{self.chain_id}: unknown transaction {tx_id}")
        return num

    def atoms_at(self, out_index: int) -> int:
        return int(self.out_hi[out_index]) * self._scale + int(self.out_lo[out_index])

    def block(self, height: int) -> Block:
        self._check_height(height)
        lo, hi = int(self.blk_off[height]), int(self.blk_off[height + 1])
        return Block(self.chain_id, height, self._times_list[height], tuple(self.tx_id_at(i) for i in range(lo, hi)))

    def tx_height_of(self, tx_id: str) -> int:
        return int(self.tx_height[self._require_tx(tx_id)])

    def outputs_of(self, tx_id: str) -> list[tuple[str, int]]:
        num = self._require_tx(tx_id)
        return self._outputs_num(num)

    def _outputs_num(self, num: int) -> list[tuple[str, int]]:
        lo, hi = int(self.out_off[num]), int(self.out_off[num + 1])
        return [(self.address_at(int(self.out_addr[k])), self.atoms_at(k)) for k in range(lo, hi)]

    def input_refs(self, tx_id: str) -> tuple[UtxoRef, ...]:
        if self.is_account:
            return ()
        num = self._require_tx(tx_id)
        return tuple(self._ref_of(int(k)) for k in self.in_src[self.in_off[num] : self.in_off[num + 1]])

    def _ref_of(self, out_index: int) -> UtxoRef:
        tx = int(self.out_tx[out_index])
        return UtxoRef(self.tx_id_at(tx), out_index - int(self.out_off[tx]))

    def input_addresses(self, tx_id: str) -> tuple[str, ...]:
        """Distinct addresses funding a transaction, in input order."""
        num = self._require_tx(tx_id)
        if self.is_account:
            return (self.address_at(int(self.acct_from[num])),)
        seen: dict[str, None] = {}
        for k in self.in_src[self.in_off[num] : self.in_off[num + 1]]:
            seen.setdefault(self.address_at(int(self.out_addr[k])), None)
        return tuple(seen)

    def input_count(self, tx_id: str) -> int:
        num = self._require_tx(tx_id)
        if self.is_account:
            return 1
        return int(self.in_off[num + 1] - self.in_off[num])

    def pool_of(self, tx_id: str) -> tuple[int | None, int | None]:
        return self.pools.get(self._require_tx(tx_id), (None, None))

    def get_tx(self, tx_id: str) -> Transaction:
        num = self._require_tx(tx_id)
        return self._tx_at(num)

    def _tx_at(self, num: int) -> Transaction:
        p = self.config.precision
        outs = self._outputs_num(num)
        if self.is_account:
            ins: tuple = (AccountInput(self.address_at(int(self.acct_from[num])), FixedAmount(outs[0][1], p)),)
        else:
            ins = tuple(self._ref_of(int(k)) for k in self.in_src[self.in_off[num] : self.in_off[num + 1]])
        pool_in, pool_out = self.pools.get(num, (None, None))
        height = int(self.tx_height[num])
        return Transaction(
            tx_id=self.tx_id_at(num),
            chain_id=self.chain_id,
            inputs=ins,
            outputs=tuple(TxOutput(a, FixedAmount(v, p)) for a, v in outs),
            timestamp=self._times_list[height],
            height=height,
            pool_in=None if pool_in is None else FixedAmount(pool_in, p),
            pool_out=None if pool_out is None else FixedAmount(pool_out, p),
        )

    def output(self, ref: UtxoRef) -> tuple[str, int]:
        k = self._out_index(ref)
        return self.address_at(int(self.out_addr[k])), self.atoms_at(k)

    def _out_index(self, ref: UtxoRef) -> int:
        num = self.tx_num(ref.tx_id)
        if num < 0 or not 0 <= ref.index < int(self.out_off[num + 1] - self.out_off[num]):
            raise UnknownUtxo(f"{self.chain_id}: no output {ref}")
        return int(self.out_off[num]) + ref.index

    # -- lookups -----------------------------------------------------------

    def block_nearest(self, t: int) -> int:
        return block_nearest(self, t)

    def candidates_by_value(self, h_lo: int, h_hi: int, amount: FixedAmount | int) -> list[Candidate]:
        return candidates_by_value(self, h_lo, h_hi, amount)

    def value_heights(self, atoms: int, h_lo: int, h_hi: int) -> np.ndarray:
        """Heights of every output equal to ``atoms`` inside ``[h_lo, h_hi]`` (clipped)."""
        a, b = self._value_run(atoms)
        hs = self._v_height[a:b]
        i = np.searchsorted(hs, h_lo, "left")
        j = np.searchsorted(hs, h_hi, "right")
        return hs[i:j]

    def _value_run(self, atoms: int) -> tuple[int, int]:
        hi, lo = divmod(atoms, self._scale)
        if hi > _I64_MAX:
            return 0, 0
        a = int(np.searchsorted(self._v_hi, hi, "left"))
        b = int(np.searchsorted(self._v_hi, hi, "right"))
        if a == b:
            return a, a
        sub = self._v_lo[a:b]
        return a + int(np.searchsorted(sub, lo, "left")), a + int(np.searchsorted(sub, lo, "right"))

    def spending_tx(self, ref: UtxoRef) -> str | None:
        return spending_tx(self, ref)

    def address_txs(self, address: str) -> list[str]:
        return address_txs(self, address)

    def scan_range(self, h_lo: int, h_hi: int) -> Iterator[tuple[int, int]]:
        """Yield ``(height, tx_number)`` for every transaction in ``[h_lo, h_hi]``."""
        self._check_height(h_lo)
        self._check_height(h_hi)
        for h in range(h_lo, h_hi + 1):
            for num in range(int(self.blk_off[h]), int(self.blk_off[h + 1])):
                yield h, num

    # -- accounting --------------------------------------------------------

    def address_balances(self) -> dict[str, int]:
        """Received minus spent per address (UTXO chains)."""
        vals = [self.atoms_at(k) for k in range(len(self.out_addr))]
        bal: dict[int, int] = {}
        for k, v in enumerate(vals):
            c = int(self.out_addr[k])
            bal[c] = bal.get(c, 0) + v
        for k in self.in_src.tolist():
            c = int(self.out_addr[k])
            bal[c] -= vals[k]
        return {self.address_at(c): v for c, v in bal.items()}

    def unspent_total(self) -> int:
        return sum(self.atoms_at(int(k)) for k in np.flatnonzero(self.spender < 0))

    def dump_indices(self) -> bytes:
        return dump_indices(self)


def _string_order(values) -> np.ndarray:
    if hasattr(values, "type"):
        import pyarrow.compute as pc

        return pc.sort_indices(values).to_numpy()
    return np.array(sorted(range(len(values)), key=values.__getitem__), dtype=np.int64)


# ---------------------------------------------------------------------------
# header


def ledger_header(config: ChainConfig) -> dict:
    return {
        "ledger_format": LEDGER_FORMAT,
        "chain": config.chain_id,
        "precision": config.precision,
        "consensus": config.consensus.value,
    }


def _check_header(obj, config: ChainConfig) -> None:
    if not isinstance(obj, dict) or obj.get("ledger_format") != LEDGER_FORMAT:
        raise FormatError(f"missing or unsupported ledger header (want ledger_format={LEDGER_FORMAT})", 1)
    if obj.get("chain") != config.chain_id:
        raise FormatError(f"header chain {obj.get('chain')!r} != {config.chain_id!r}", 1)
    if obj.get("precision") != config.precision:
        raise FormatError(f"header precision {obj.get('precision')!r} != {config.precision}", 1)
    if obj.get("consensus") != config.consensus.value:
        raise FormatError(f"header consensus {obj.get('consensus')!r} != {config.consensus.value!r}", 1)


# ---------------------------------------------------------------------------
# reference route


class ReferenceIngestor:
    """Pure Python validator and indexer; defines the accepted ledger format.

    Besides producing a :class:`ChainHandle`, it keeps plain dict indices that
    :func:`render_index_dump` can serialize, which makes it usable as an
    oracle for the columnar route.
    """

    def __init__(self, config: ChainConfig):
        self.config = config
        self.precision = config.precision
        self.scale = 10**config.precision
        self.pow10 = [10**i for i in range(config.precision + 1)]
        self.account = config.consensus is Consensus.ACCOUNT
        self.times: list[int] = []
        self.block_txs: list[list[str]] = []
        self.txs: dict[str, tuple] = {}  # tx_id -> (height, inputs, outputs, pool_in, pool_out)
        self.values: dict[int, list[list]] = {}
        self.spent: dict[tuple[str, int], str] = {}
        self.addr: dict[str, list[str]] = {}

    def atoms(self, s, line: int | None) -> int:
        if type(s) is str:
            w, _, f = s.partition(".")
            if w.isdigit() and w.isascii() and (not f or (f.isdigit() and f.isascii())):
                f = f.rstrip("0") if len(f) > self.precision else f
                if len(f) <= self.precision and len(w) <= 18:
                    if f:
                        return int(w) * self.scale + int(f) * self.pow10[self.precision - len(f)]
                    return int(w) * self.scale
        raise FormatError(f"bad amount {s!r} for precision {self.precision}", line)

    def block(self, obj, line: int | None) -> None:
        if not isinstance(obj, dict):
            raise FormatError("block line must be a JSON object", line)
        try:
            height = obj["height"]
            time = obj["time"]
            txs = obj["txs"]
        except KeyError:
            raise FormatError("block needs height, time and txs", line) from None
        if type(height) is not int or type(time) is not int or type(txs) is not list:
            raise FormatError("height/time must be integers and txs a list", line)
        if height != len(self.times):
            raise OrderingError(f"expected height {len(self.times)}, got {height}", line)
        if self.times and time <= self.times[-1]:
            raise OrderingError(f"timestamp {time} not after {self.times[-1]}", line)
        ids: list[str] = []
        add = self._account_tx if self.account else self._utxo_tx
        for tx in txs:
            if not isinstance(tx, dict):
                raise FormatError("transaction must be a JSON object", line)
            try:
                ids.append(add(tx, height, line))
            except (KeyError, TypeError, AttributeError) as exc:
                raise FormatError(f"malformed transaction: {exc!r}", line) from None
        self.times.append(time)
        self.block_txs.append(ids)

    def _new_id(self, tx: dict, line) -> str:
        tx_id = tx["id"]
        if type(tx_id) is not str or not tx_id:
            raise FormatError("transaction id must be a non-empty string", line)
        if tx_id in self.txs:
            raise FormatError(f"duplicate transaction id {tx_id}", line)
        return tx_id

    def _utxo_tx(self, tx: dict, height: int, line) -> str:
        extra = set(tx) - {"id", "inputs", "outputs", "pool_in", "pool_out"}
        if extra:
            raise FormatError(f"unexpected transaction fields {sorted(extra)}", line)
        tx_id = self._new_id(tx, line)
        txs = self.txs
        spent = self.spent
        touched: list[str] = []
        ins = []
        total_in = 0
        if type(tx["inputs"]) is not list or type(tx["outputs"]) is not list:
            raise FormatError(f"{tx_id}: inputs and outputs must be lists", line)
        for i in tx["inputs"]:
            prev = i["tx"]
            n = i["n"]
            row = txs.get(prev) if type(prev) is str else None
            if row is None or type(n) is not int or not 0 <= n < len(row[2]):
                raise DanglingInput(f"{tx_id} spends unknown output {prev}:{n}", line)
            key = (prev, n)
            if key in spent:
                raise DoubleSpend(f"{tx_id} spends {prev}:{n} already spent by {spent[key]}", line)
            spent[key] = tx_id
            addr, v = row[2][n]
            total_in += v
            touched.append(addr)
            ins.append(key)
        outs = []
        total_out = 0
        for n, o in enumerate(tx["outputs"]):
            addr = o["addr"]
            if type(addr) is not str:
                raise FormatError("output address must be a string", line)
            v = self.atoms(o["value"], line)
            total_out += v
            outs.append((addr, v))
            touched.append(addr)
            self.values.setdefault(v, []).append([height, tx_id, n, addr])
        pool_in = tx.get("pool_in")
        pool_out = tx.get("pool_out")
        if pool_in is not None:
            pool_in = self.atoms(pool_in, line)
        if pool_out is not None:
            pool_out = self.atoms(pool_out, line)
        if ins or pool_out is not None:
            if total_in + (pool_out or 0) < total_out + (pool_in or 0):
                raise IngestError(f"{tx_id} creates value: inputs {total_in} < outputs {total_out}", line)
        txs[tx_id] = (height, tuple(ins), tuple(outs), pool_in, pool_out)
        self._index(tx_id, touched)
        return tx_id

    def _account_tx(self, tx: dict, height: int, line) -> str:
        extra = set(tx) - {"id", "from", "to", "value"}
        if extra:
            raise FormatError(f"unexpected transaction fields {sorted(extra)}", line)
        tx_id = self._new_id(tx, line)
        src = tx["from"]
        dst = tx["to"]
        if type(src) is not str or type(dst) is not str:
            raise FormatError(f"{tx_id}: account tx needs from and to addresses", line)
        v = self.atoms(tx["value"], line)
        self.values.setdefault(v, []).append([height, tx_id, 0, dst])
        self.txs[tx_id] = (height, ((src, v),), ((dst, v),), None, None)
        self._index(tx_id, (src, dst))
        return tx_id

    def _index(self, tx_id: str, touched) -> None:
        idx = self.addr
        for a in touched:
            lst = idx.get(a)
            if lst is None:
                idx[a] = [tx_id]
            elif lst[-1] != tx_id:
                lst.append(tx_id)

    def render(self) -> bytes:
        return render_index_dump(self.config.chain_id, self.times, self.block_txs, self.values, self.spent, self.addr)

    def to_handle(self) -> ChainHandle:
        ids: list[str] = [t for blk in self.block_txs for t in blk]
        num = {t: i for i, t in enumerate(ids)}
        addr_code: dict[str, int] = {}
        addresses: list[str] = []

        def code(a: str) -> int:
            c = addr_code.get(a)
            if c is None:
                c = addr_code[a] = len(addresses)
                addresses.append(a)
            return c

        out_off = [0]
        in_off = [0]
        out_addr: list[int] = []
        out_vals: list[int] = []
        in_src: list[int] = []
        acct_from: list[int] = []
        pools: dict[int, tuple] = {}
        for i, t in enumerate(ids):
            _, ins, outs, pin, pout = self.txs[t]
            if self.account:
                acct_from.append(code(ins[0][0]))
            else:
                for prev, n in ins:
                    in_src.append(out_off[num[prev]] + n)
            for a, v in outs:
                out_addr.append(code(a))
                out_vals.append(v)
            out_off.append(len(out_addr))
            in_off.append(len(in_src))
            if pin is not None or pout is not None:
                pools[i] = (pin, pout)
        blk_off = np.cumsum([0] + [len(b) for b in self.block_txs], dtype=np.int64)
        hi_lo = [divmod(v, self.scale) for v in out_vals]
        return ChainHandle(
            self.config,
            times=np.array(self.times, dtype=np.int64),
            blk_off=blk_off,
            tx_ids=ids,
            out_off=np.array(out_off, dtype=np.int64),
            out_addr=np.array(out_addr, dtype=np.int64),
            out_hi=np.array([h for h, _ in hi_lo], dtype=np.int64),
            out_lo=np.array([l for _, l in hi_lo], dtype=np.int64),
            in_off=np.array(in_off, dtype=np.int64),
            in_src=np.array(in_src, dtype=np.int64),
            acct_from=np.array(acct_from, dtype=np.int64),
            pools=pools,
            addresses=addresses,
        )


def _reference_lines(lines: Iterable[str], config: ChainConfig) -> ReferenceIngestor:
    ing = ReferenceIngestor(config)
    header_seen = False
    for lineno, text in enumerate(lines, 1):
        if not text.strip():
            continue
        try:
            obj = json.loads(text)
        except ValueError as exc:
            raise FormatError(f"invalid JSON: {exc}", lineno) from None
        if not header_seen:
            _check_header(obj, config)
            header_seen = True
            continue
        ing.block(obj, lineno)
    if not header_seen:
        raise FormatError("empty ledger file", 1)
    return ing


# ---------------------------------------------------------------------------
# columnar route


class _Reject(Exception):
    """The columnar route cannot vouch for this input; use the reference route."""


def _arrow_schema(account: bool):
    import pyarrow as pa

    if account:
        tx = pa.struct([("id", pa.string()), ("from", pa.string()), ("to", pa.string()), ("value", pa.string())])
    else:
        ref = pa.struct([("tx", pa.string()), ("n", pa.int64())])
        out = pa.struct([("addr", pa.string()), ("value", pa.string())])
        tx = pa.struct(
            [
                ("id", pa.string()),
                ("inputs", pa.list_(ref)),
                ("outputs", pa.list_(out)),
                ("pool_in", pa.string()),
                ("pool_out", pa.string()),
            ]
        )
    return pa.schema([("height", pa.int64()), ("time", pa.int64()), ("txs", pa.list_(tx))])


def _split_amounts(values, precision: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized decimal-string to (whole, fractional atoms) split.

    Accepts 1 to 18 ASCII whole digits, optionally followed by a point and at
    least one digit; digits past ``precision`` must all be zero.  Anything
    else is left to the reference route.
    """
    import pyarrow as pa
    import pyarrow.compute as pc

    if values.null_count:
        raise _Reject
    parts = pc.split_pattern(values, ".", max_splits=1)
    whole = pc.list_element(parts, 0)
    frac = pc.list_flatten(pc.list_slice(parts, 1, 2))  # rows with a point only
    ok = pc.and_(pc.ascii_is_decimal(whole), pc.less_equal(pc.utf8_length(whole), 18))
    if not pc.all(ok).as_py():
        raise _Reject
    lo = np.zeros(len(values), np.int64)
    if len(frac):
        tail = pc.utf8_slice_codeunits(frac, precision)
        ok = pc.and_(pc.ascii_is_decimal(frac), pc.equal(pc.utf8_length(pc.utf8_ltrim(tail, "0")), 0))
        if not pc.all(ok).as_py():
            raise _Reject
        if precision:
            head = pc.utf8_slice_codeunits(pc.utf8_rpad(frac, precision, "0"), 0, precision)
            has_frac = pc.equal(pc.list_value_length(parts), 2).to_numpy(zero_copy_only=False)
            lo[has_frac] = pc.cast(head, pa.int64()).to_numpy(zero_copy_only=False)
    try:
        hi = pc.cast(whole, pa.int64()).to_numpy(zero_copy_only=False)
    except pa.ArrowInvalid:
        raise _Reject from None
    return hi, lo


def _segment_sum(values: np.ndarray, off: np.ndarray) -> np.ndarray:
    """Per-segment sums for CSR offsets (empty segments give 0)."""
    if not len(values):
        return np.zeros(len(off) - 1, np.int64)
    starts = off[:-1]
    out = np.add.reduceat(values, np.minimum(starts, len(values) - 1))
    out[starts == off[1:]] = 0
    return out


def _columnar(body: bytes, config: ChainConfig) -> ChainHandle:
    import pyarrow as pa
    import pyarrow.compute as pc
    import pyarrow.json as pj

    account = config.consensus is Consensus.ACCOUNT
    p = config.precision
    scale = 10**p
    if not body.strip():
        return ReferenceIngestor(config).to_handle()
    try:
        table = pj.read_json(
            io.BytesIO(body),
            read_options=pj.ReadOptions(block_size=max(1 << 20, len(body) + 1)),
            parse_options=pj.ParseOptions(explicit_schema=_arrow_schema(account), unexpected_field_behavior="error"),
        )
    except (pa.ArrowInvalid, pa.ArrowTypeError, pa.ArrowNotImplementedError):
        raise _Reject from None
    for name in ("height", "time", "txs"):
        if table.column(name).null_count:
            raise _Reject
    heights = table.column("height").to_numpy()
    times = table.column("time").to_numpy()
    if not np.array_equal(heights, np.arange(len(heights))):
        raise _Reject
    if len(times) > 1 and not (np.diff(times) > 0).all():
        raise _Reject
    txcol = table.column("txs")
    per_block = pc.list_value_length(txcol).to_numpy(zero_copy_only=False).astype(np.int64)
    chunks = [pc.list_flatten(c) for c in txcol.chunks]
    txs = pa.concat_arrays(chunks) if len(chunks) != 1 else chunks[0]
    if txs.null_count:
        raise _Reject
    ntx = len(txs)
    blk_off = np.concatenate([[0], np.cumsum(per_block)]).astype(np.int64)
    ids = txs.field("id")
    if ids.null_count or (ntx and pc.min(pc.utf8_length(ids)).as_py() == 0):
        raise _Reject
    tx_num = np.arange(ntx, dtype=np.int64)
    pools: dict[int, tuple] = {}

    if account:
        src, dst, val = txs.field("from"), txs.field("to"), txs.field("value")
        if src.null_count or dst.null_count:
            raise _Reject
        if pc.count_distinct(ids).as_py() != ntx:
            raise _Reject
        hi, lo = _split_amounts(val, p)
        enc = pc.dictionary_encode(pa.concat_arrays([src, dst]))
        codes = enc.indices.to_numpy(zero_copy_only=False).astype(np.int64)
        addresses = enc.dictionary
        acct_from = codes[:ntx]
        out_addr = codes[ntx:]
        out_off = np.arange(ntx + 1, dtype=np.int64)
        in_off = np.zeros(ntx + 1, np.int64)
        in_src = np.zeros(0, np.int64)
    else:
        outs = txs.field("outputs")
        ins = txs.field("inputs")
        if outs.null_count or ins.null_count:
            raise _Reject
        out_off = np.concatenate([[0], np.cumsum(pc.list_value_length(outs).to_numpy(zero_copy_only=False))]).astype(np.int64)
        in_off = np.concatenate([[0], np.cumsum(pc.list_value_length(ins).to_numpy(zero_copy_only=False))]).astype(np.int64)
        fo = pc.list_flatten(outs)
        fi = pc.list_flatten(ins)
        if fo.null_count or fi.null_count or fo.field("addr").null_count:
            raise _Reject
        hi, lo = _split_amounts(fo.field("value"), p)
        enc = pc.dictionary_encode(fo.field("addr"))
        out_addr = enc.indices.to_numpy(zero_copy_only=False).astype(np.int64)
        addresses = enc.dictionary
        prev = fi.field("tx")
        n = fi.field("n")
        if prev.null_count or n.null_count:
            raise _Reject
        # one hash pass: ids come first, so they are unique exactly when they
        # encode to 0..ntx-1, and an input naming an unknown id encodes past ntx
        codes = pc.dictionary_encode(pa.concat_arrays([ids, prev])).indices.to_numpy(zero_copy_only=False).astype(np.int64)
        if not np.array_equal(codes[:ntx], tx_num):
            raise _Reject  # duplicate transaction id
        prev_num = codes[ntx:]
        n = n.to_numpy(zero_copy_only=False).astype(np.int64)
        in_tx = np.repeat(tx_num, np.diff(in_off))
        if len(prev_num):
            if (prev_num < 0).any() or (prev_num >= in_tx).any():
                raise _Reject  # unknown or not-yet-created output
            width = out_off[prev_num + 1] - out_off[prev_num]
            if (n < 0).any() or (n >= width).any():
                raise _Reject
        in_src = out_off[prev_num] + n if len(prev_num) else np.zeros(0, np.int64)
        if len(in_src) and len(np.unique(in_src)) != len(in_src):
            raise _Reject  # double spend
        acct_from = np.zeros(0, np.int64)

        # conservation: inputs + pool_out >= outputs + pool_in
        # sums are kept as (whole, fractional atoms) pairs so large coins stay in int64
        widest = max(int(np.diff(out_off).max(initial=1)), int(np.diff(in_off).max(initial=1))) + 2
        if len(hi) and int(hi.max()) > _I64_MAX // (2 * widest):
            raise _Reject  # would overflow int64 sums; the reference route uses big ints
        out_hi, out_lo = _segment_sum(hi, out_off), _segment_sum(lo, out_off)
        if len(in_src):
            in_hi, in_lo = _segment_sum(hi[in_src], in_off), _segment_sum(lo[in_src], in_off)
        else:
            in_hi, in_lo = np.zeros(ntx, np.int64), np.zeros(ntx, np.int64)
        pin_col, pout_col = txs.field("pool_in"), txs.field("pool_out")
        has_pout = np.zeros(ntx, bool)
        if pin_col.null_count != ntx or pout_col.null_count != ntx:
            pin_l = pin_col.to_pylist()
            pout_l = pout_col.to_pylist()
            ref = ReferenceIngestor(config)
            for i in np.flatnonzero(pc.or_(pc.is_valid(pin_col), pc.is_valid(pout_col)).to_numpy(zero_copy_only=False)):
                try:
                    a = None if pin_l[i] is None else ref.atoms(pin_l[i], None)
                    b = None if pout_l[i] is None else ref.atoms(pout_l[i], None)
                except FormatError:
                    raise _Reject from None
                pools[int(i)] = (a, b)
                has_pout[i] = b is not None
        checked = np.flatnonzero((np.diff(in_off) > 0) | has_pout)
        plain = np.array([i not in pools for i in checked.tolist()], dtype=bool) if pools else np.ones(len(checked), bool)
        c = checked[plain]
        # carry fractional parts into whole units, then compare lexicographically
        ih = in_hi[c] + in_lo[c] // scale
        il = in_lo[c] % scale
        oh = out_hi[c] + out_lo[c] // scale
        ol = out_lo[c] % scale
        if ((ih < oh) | ((ih == oh) & (il < ol))).any():
            raise _Reject
        for i in checked[~plain].tolist():
            a, b = pools[i]
            total_in = int(in_hi[i]) * scale + int(in_lo[i]) + (b or 0)
            total_out = int(out_hi[i]) * scale + int(out_lo[i]) + (a or 0)
            if total_in < total_out:
                raise _Reject

    return ChainHandle(
        config,
        times=times.astype(np.int64),
        blk_off=blk_off,
        tx_ids=ids,
        out_off=out_off,
        out_addr=out_addr,
        out_hi=hi.astype(np.int64),
        out_lo=lo.astype(np.int64),
        in_off=in_off,
        in_src=in_src.astype(np.int64),
        acct_from=acct_from,
        pools=pools,
        addresses=addresses,
    )


# ---------------------------------------------------------------------------
# public ingest API


def ingest_bytes(data: bytes, config: ChainConfig, engine: str = "columnar") -> ChainHandle:
    if engine not in ("columnar", "reference"):
        raise ValueError(f"unknown ingest engine {engine!r}")
    if engine == "columnar":
        nl = data.find(b"\n")
        head = data if nl < 0 else data[:nl]
        try:
            header = json.loads(head)
        except ValueError:
            header = None
        if header is not None:
            _check_header(header, config)
            try:
                return _columnar(b"" if nl < 0 else data[nl + 1 :], config)
            except _Reject:
                pass
    text = data.decode("utf-8", errors="strict").splitlines()
    return _reference_lines(text, config).to_handle()


def ingest_chain(path: str | Path, config: ChainConfig, engine: str = "columnar") -> ChainHandle:
    """Parse and index one ledger file.

    Raises :class:`FormatError`, :class:`OrderingError`, :class:`DanglingInput`
    (or its :class:`DoubleSpend` subclass) with the offending line number.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    return ingest_bytes(data, config, engine)


def reference_dump(path: str | Path, config: ChainConfig) -> bytes:
    """Index dump produced by the pure Python route (oracle for the fast one)."""
    with open(path, "r", encoding="utf-8") as fh:
        return _reference_lines(fh, config).render()


def ingest_records(blocks: Iterable[dict], config: ChainConfig) -> ChainHandle:
    """Index already-decoded block objects (same schema as the file lines)."""
    ing = ReferenceIngestor(config)
    for i, obj in enumerate(blocks):
        ing.block(obj, i + 2)
    return ing.to_handle()


# ---------------------------------------------------------------------------
# lookups


def block_nearest(chain: ChainHandle, t: int) -> int:
    """Height whose timestamp is closest to ``t``; ties go to the lower height."""
    times = chain._times_list
    if not times:
        raise EmptyChain(f"{chain.chain_id}: no blocks")
    i = bisect_left(times, t)
    if i == 0:
        return 0
    if i == len(times):
        return i - 1
    # times[i-1] < t <= times[i]
    return i - 1 if t - times[i - 1] <= times[i] - t else i


def candidates_by_value(chain: ChainHandle, h_lo: int, h_hi: int, amount: FixedAmount | int) -> list[Candidate]:
    """Outputs in blocks ``[h_lo, h_hi]`` carrying exactly ``amount``, in chain order."""
    if h_lo > h_hi:
        raise RangeOutOfBounds(f"empty range {h_lo}..{h_hi}")
    chain._check_height(h_lo)
    chain._check_height(h_hi)
    if isinstance(amount, FixedAmount):
        if amount.precision != chain.config.precision:
            raise PrecisionMismatch(f"{chain.chain_id}: amount precision {amount.precision}")
        atoms = amount.atoms
    else:
        atoms = int(amount)
    a, b = chain._value_run(atoms)
    if a == b:
        return []
    hs = chain._v_height[a:b]
    i = a + int(np.searchsorted(hs, h_lo, "left"))
    j = a + int(np.searchsorted(hs, h_hi, "right"))
    out = []
    for k in chain._v_order[i:j].tolist():
        tx = int(chain.out_tx[k])
        out.append(
            Candidate(
                chain.tx_id_at(tx),
                k - int(chain.out_off[tx]),
                chain.address_at(int(chain.out_addr[k])),
                int(chain.out_height[k]),
            )
        )
    return out


def spending_tx(chain: ChainHandle, ref: UtxoRef) -> str | None:
    """The unique transaction spending ``ref``, or ``None`` while unspent."""
    k = chain._out_index(ref)
    s = int(chain.spender[k])
    return None if s < 0 else chain.tx_id_at(s)


def address_txs(chain: ChainHandle, address: str) -> list[str]:
    """Transactions touching ``address`` as input or output, in chain order."""
    code = chain._addr_lookup.find(address)
    if code < 0:
        return []
    lo, hi = int(chain._addr_off[code]), int(chain._addr_off[code + 1])
    return [chain.tx_id_at(int(t)) for t in chain._addr_tx[lo:hi]]


# ---------------------------------------------------------------------------
# canonical dumps


def dump_indices(chain: ChainHandle) -> bytes:
    """Canonical serialization of every index, for determinism comparisons."""
    ids = chain.tx_ids.to_pylist() if hasattr(chain.tx_ids, "to_pylist") else list(chain.tx_ids)
    addrs = chain.addresses.to_pylist() if hasattr(chain.addresses, "to_pylist") else list(chain.addresses)
    off = chain.blk_off.tolist()
    block_txs = [ids[off[h] : off[h + 1]] for h in range(len(chain.times))]
    out_tx = chain.out_tx.tolist()
    out_off = chain.out_off.tolist()
    out_h = chain.out_height.tolist()
    out_addr = chain.out_addr.tolist()
    scale = chain._scale
    values: dict[int, list] = {}
    for k, (h, l) in enumerate(zip(chain.out_hi.tolist(), chain.out_lo.tolist())):
        t = out_tx[k]
        values.setdefault(h * scale + l, []).append([out_h[k], ids[t], k - out_off[t], addrs[out_addr[k]]])
    spent = {}
    for k, s in enumerate(chain.spender.tolist()):
        if s >= 0:
            t = out_tx[k]
            spent[(ids[t], k - out_off[t])] = ids[s]
    addr_off = chain._addr_off.tolist()
    addr_tx = chain._addr_tx.tolist()
    addr = {a: [ids[t] for t in addr_tx[addr_off[c] : addr_off[c + 1]]] for c, a in enumerate(addrs)}
    return render_index_dump(chain.chain_id, chain.times.tolist(), block_txs, values, spent, addr)


def render_index_dump(chain_id, times, block_txs, values, spent, addr) -> bytes:
    parts = [json.dumps({"chain": chain_id}, sort_keys=True)]
    for h, (t, ids) in enumerate(zip(times, block_txs)):
        parts.append(json.dumps(["b", h, t, list(ids)]))
    for v in sorted(values):
        parts.append(json.dumps(["v", str(v), [list(e) for e in values[v]]]))
    for tx, n in sorted(spent):
        parts.append(json.dumps(["s", tx, n, spent[(tx, n)]]))
    for a in sorted(addr):
        if addr[a]:
            parts.append(json.dumps(["a", a, list(addr[a])]))
    return ("\n".join(parts) + "\n").encode()
