"""Privacy-feature probes: shielded pools and denominated CoinJoins."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .chainstore import ChainHandle
from .errors import NotAShieldedChain, WrongChainModel
from .flows import UTurn
from .match import Grade, MatchResult, shift_sort_key
from .model import FixedAmount, Thresholds, Transaction, UtxoRef, format_atoms, format_fraction, is_shielded_address, parse_atoms

# ---------------------------------------------------------------------------
# shielded pool


class PoolKind(int, enum.Enum):
    DIRECT_IN = 1  # the service paid a shielded address
    TADDR_THEN_POOL = 2  # the transparent withdrawal was next spent into the pool
    FROM_POOL = 3  # the deposit came straight out of the pool


@dataclass(frozen=True)
class PoolInteraction:
    shift_id: str
    kind: PoolKind
    value: FixedAmount  # the trade's value on the shielded chain
    tx: str | None  # the transaction that touched the pool, when it is on the ledger
    pool_value: FixedAmount | None  # amount that entered or left the pool on-chain


def classify_pool_interactions(matches: Iterable[MatchResult], zchain: ChainHandle) -> list[PoolInteraction]:
    """At most one interaction per match touching ``zchain``."""
    if not zchain.config.shielded:
        raise NotAShieldedChain(f"{zchain.chain_id} has no shielded pool")
    p = zchain.config.precision
    z = zchain.chain_id
    out = []
    for m in _augmented(matches):
        if m.cur_out == z and m.out_coin is not None:
            if m.addr_u is not None and is_shielded_address(m.addr_u):
                pin = zchain.pool_of(m.phase2_tx)[0] if m.phase2_tx and zchain.has_tx(m.phase2_tx) else None
                out.append(PoolInteraction(m.shift_id, PoolKind.DIRECT_IN, m.out_coin, m.phase2_tx, _amt(pin, p)))
            elif m.phase2_tx is not None and m.phase2_index is not None and zchain.has_tx(m.phase2_tx):
                spender = zchain.spending_tx(UtxoRef(m.phase2_tx, m.phase2_index))
                if spender is not None:
                    pin = zchain.pool_of(spender)[0]
                    if pin is not None:
                        out.append(PoolInteraction(m.shift_id, PoolKind.TADDR_THEN_POOL, m.out_coin, spender, _amt(pin, p)))
        elif m.cur_in == z and zchain.has_tx(m.phase1_tx):
            pout = zchain.pool_of(m.phase1_tx)[1]
            if pout is not None:
                out.append(PoolInteraction(m.shift_id, PoolKind.FROM_POOL, m.amt, m.phase1_tx, _amt(pout, p)))
    return out


def _amt(atoms: int | None, precision: int) -> FixedAmount | None:
    return None if atoms is None else FixedAmount(atoms, precision)


def _augmented(matches: Iterable[MatchResult]) -> list[MatchResult]:
    seen: dict[str, MatchResult] = {}
    for m in matches:
        if m.grade is Grade.AUGMENTED:
            seen.setdefault(m.shift_id, m)
    return [seen[k] for k in sorted(seen, key=shift_sort_key)]


def pool_report(interactions: Sequence[PoolInteraction], matches: Iterable[MatchResult], zchain: ChainHandle) -> dict:
    """Counts and values per kind, with each value as a share of pass-through volume.

    Kinds 1 and 2 are measured against everything the service paid out on
    the shielded chain, kind 3 against everything deposited there.
    """
    z, p = zchain.chain_id, zchain.config.precision
    ms = _augmented(matches)
    received = sum(m.out_coin.atoms for m in ms if m.cur_out == z and m.out_coin is not None)
    sent = sum(m.amt.atoms for m in ms if m.cur_in == z)
    kinds = {}
    for kind in PoolKind:
        rows = [i for i in interactions if i.kind is kind]
        total = sum(i.value.atoms for i in rows)
        base = sent if kind is PoolKind.FROM_POOL else received
        kinds[kind.name.lower()] = {
            "kind": int(kind),
            "count": len(rows),
            "value": format_atoms(total, p),
            "fraction": format_fraction(Fraction(total, base)) if base else "0",
        }
    return {
        "chain": z,
        "passthroughs_out": sum(1 for m in ms if m.cur_out == z),
        "passthroughs_in": sum(1 for m in ms if m.cur_in == z),
        "received": format_atoms(received, p),
        "sent": format_atoms(sent, p),
        "kinds": kinds,
        "note": "shielded recipients may be refused by the live service",
    }


# ---------------------------------------------------------------------------
# CoinJoins


@dataclass(frozen=True)
class CoinJoinVerdict:
    tx_id: str
    is_coinjoin: bool
    denomination: FixedAmount | None  # the base denomination (without fee increment)
    value: FixedAmount | None  # the common output value actually seen
    reasons: tuple[str, ...] = ()


def denomination_values(precision: int, th: Thresholds | None = None) -> dict[int, int]:
    """Accepted output value (atoms) -> base denomination (atoms)."""
    th = th or Thresholds()
    inc = parse_atoms(th.coinjoin_fee_increment, precision)
    out = {}
    for text in th.coinjoin_denominations:
        d = parse_atoms(text, precision)
        out[d] = d
        out[d + inc] = d
    return out


def coinjoin_verdict(tx_id: str, n_inputs: int, outputs: Sequence[int], precision: int, th: Thresholds | None = None) -> CoinJoinVerdict:
    """Apply the CoinJoin rule to raw input count and output values (atoms)."""
    th = th or Thresholds()
    accepted = denomination_values(precision, th)
    reasons = []
    if n_inputs < th.coinjoin_min_inputs:
        reasons.append("too_few_inputs")
    counts: dict[int, int] = {}
    for v in outputs:
        if v in accepted:
            counts[v] = counts.get(v, 0) + 1
    best = None
    if counts:
        top = max(counts.values())
        best = min(v for v, c in counts.items() if c == top)
    if best is None:
        reasons.append("no_denomination")
    elif len(outputs) - counts[best] > 1:
        reasons.append("mixed_outputs")
    ok = not reasons
    denom = FixedAmount(accepted[best], precision) if best is not None else None
    value = FixedAmount(best, precision) if best is not None else None
    return CoinJoinVerdict(tx_id, ok, denom if ok else None, value if ok else None, tuple(reasons))


def is_coinjoin(tx: Transaction, th: Thresholds | None = None) -> CoinJoinVerdict:
    if tx.is_account:
        raise WrongChainModel(f"{tx.tx_id}: account transactions cannot be CoinJoins")
    precision = tx.outputs[0].value.precision if tx.outputs else 8
    return coinjoin_verdict(tx.tx_id, len(tx.inputs), [o.value.atoms for o in tx.outputs], precision, th)


def find_coinjoins(chain: ChainHandle, th: Thresholds | None = None) -> list[str]:
    """Every CoinJoin on a UTXO chain, in chain order."""
    if chain.is_account:
        raise WrongChainModel(f"{chain.chain_id} is account-based")
    th = th or Thresholds()
    n_in = np.diff(chain.in_off)
    out = []
    for num in np.flatnonzero(n_in >= th.coinjoin_min_inputs).tolist():
        vals = [v for _, v in chain._outputs_num(num)]
        if coinjoin_verdict("", int(n_in[num]), vals, chain.config.precision, th).is_coinjoin:
            out.append(chain.tx_id_at(num))
    return out


@dataclass(frozen=True)
class Provenance:
    chain: str
    pre: tuple[str, ...]  # shifts whose deposit spent a CoinJoin output
    post: tuple[str, ...]  # shifts whose withdrawal was spent by a CoinJoin
    pre_value: FixedAmount
    post_value: FixedAmount
    pre_candidates: int
    post_candidates: int
    in_value: FixedAmount  # all deposits into the chain's currency
    out_value: FixedAmount  # all withdrawals in the chain's currency

    def to_json(self) -> dict:
        def frac(a: FixedAmount, b: FixedAmount) -> str:
            return format_fraction(Fraction(a.atoms, b.atoms)) if b.atoms else "0"

        return {
            "chain": self.chain,
            "pre_shift": {"count": len(self.pre), "candidates": self.pre_candidates, "value": str(self.pre_value), "fraction": frac(self.pre_value, self.in_value), "shifts": list(self.pre)},
            "post_shift": {"count": len(self.post), "candidates": self.post_candidates, "value": str(self.post_value), "fraction": frac(self.post_value, self.out_value), "shifts": list(self.post)},
        }


def coinjoin_provenance(matches: Iterable[MatchResult], chain: ChainHandle, coinjoins: Iterable[str] | None = None, th: Thresholds | None = None) -> Provenance:
    cj = set(find_coinjoins(chain, th) if coinjoins is None else coinjoins)
    c, p = chain.chain_id, chain.config.precision
    pre, post = [], []
    pre_v = post_v = in_v = out_v = 0
    pre_n = post_n = 0
    for m in _augmented(matches):
        if m.cur_in == c and chain.has_tx(m.phase1_tx):
            pre_n += 1
            in_v += m.amt.atoms
            if any(r.tx_id in cj for r in chain.input_refs(m.phase1_tx)):
                pre.append(m.shift_id)
                pre_v += m.amt.atoms
        if m.cur_out == c and m.phase2_tx is not None and m.phase2_index is not None and chain.has_tx(m.phase2_tx):
            post_n += 1
            value = m.out_coin.atoms if m.out_coin is not None else 0
            out_v += value
            if chain.spending_tx(UtxoRef(m.phase2_tx, m.phase2_index)) in cj:
                post.append(m.shift_id)
                post_v += value
    return Provenance(c, tuple(pre), tuple(post), FixedAmount(pre_v, p), FixedAmount(post_v, p), pre_n, post_n, FixedAmount(in_v, p), FixedAmount(out_v, p))


def hop_path(chain: ChainHandle, start_tx: str, target: UtxoRef, max_depth: int = 4) -> list[str] | None:
    """Intermediate transactions linking ``target`` to ``start_tx`` through spent outputs.

    Walks the inputs of ``start_tx`` backwards; returns the transactions
    strictly between the two ends on the first path found, or ``None``.
    """

    def walk(tx: str, depth: int) -> list[str] | None:
        refs = chain.input_refs(tx)
        if target in refs:
            return []
        if depth == 0:
            return None
        for r in refs:
            sub = walk(r.tx_id, depth - 1)
            if sub is not None:
                return [r.tx_id, *sub]
        return None

    return walk(start_tx, max_depth)


def coinjoin_asymmetry(uturns: Iterable[UTurn], chains: Mapping[str, ChainHandle], th: Thresholds | None = None, max_depth: int = 4) -> dict[str, dict]:
    """For address-only U-turns on CoinJoin chains, how many mixed in between."""
    out: dict[str, dict] = {}
    cj_cache: dict[str, set[str]] = {}
    for u in uturns:
        chain = chains.get(u.cur_y)
        if chain is None or not chain.config.privatesend or not chain.config.is_utxo:
            continue
        row = out.setdefault(u.cur_y, {"uturns": 0, "utxo": 0, "address": 0, "address_only": 0, "via_coinjoin": 0, "shifts": []})
        row["uturns"] += 1
        row["utxo"] += int(u.has("utxo"))
        row["address"] += int(u.has("address"))
        if not u.has("address") or u.has("utxo") or u.tx1 is None or u.tx1.index < 0:
            continue
        row["address_only"] += 1
        if u.cur_y not in cj_cache:
            cj_cache[u.cur_y] = set(find_coinjoins(chain, th))
        path = hop_path(chain, u.tx2.tx_id, u.tx1, max_depth)
        if path and any(t in cj_cache[u.cur_y] for t in path):
            row["via_coinjoin"] += 1
            row["shifts"].append([u.first, u.second])
    for row in out.values():
        row["fraction"] = format_fraction(Fraction(row["via_coinjoin"], row["address_only"])) if row["address_only"] else "0"
    return dict(sorted(out.items()))
