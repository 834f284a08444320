"""Comparison of detector output with a simulated world's ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .match import Grade
from .pipeline import Analysis


@dataclass(frozen=True)
class Check:
    name: str
    ok: bool
    expected: int
    found: int
    missing: tuple = ()
    extra: tuple = ()

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "ok": self.ok,
            "expected": self.expected,
            "found": self.found,
            "missing": [list(x) if isinstance(x, tuple) else x for x in self.missing[:20]],
            "extra": [list(x) if isinstance(x, tuple) else x for x in self.extra[:20]],
        }


def compare(name: str, expected, found) -> Check:
    expected, found = set(expected), set(found)
    return Check(name, expected == found, len(expected), len(found), tuple(sorted(expected - found, key=repr)), tuple(sorted(found - expected, key=repr)))


@dataclass
class Verification:
    checks: list[Check] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def get(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_json(self) -> dict:
        return {"ok": self.ok, "checks": [c.to_json() for c in self.checks]}


def precision_recall(expected: set, found: set) -> tuple[Fraction, Fraction]:
    tp = len(expected & found)
    precision = Fraction(tp, len(found)) if found else Fraction(1)
    recall = Fraction(tp, len(expected)) if expected else Fraction(1)
    return precision, recall


def verify(an: Analysis, include_sweep: bool = False) -> Verification:
    """Every detector output against the world's ground truth, as exact set comparisons."""
    gt = an.ws.ground_truth()
    trades = {t["key"]: t for t in gt["trades"]}
    sid = {k: t["shift_id"] for k, t in trades.items() if t["published"]}
    published = [t for t in gt["trades"] if t["published"]]
    v = Verification()

    rep = an.report
    want_match = {(t["shift_id"], t["deposit"]["tx"], t["deposit"]["n"], t["withdrawal"]["tx"]) for t in published if t["expect"] == "unique"}
    got_match = {(m.shift_id, m.phase1_tx, m.phase1_index, m.phase2_tx) for m in rep.matches.values() if m.grade is Grade.AUGMENTED}
    v.checks.append(compare("matches", want_match, got_match))
    v.checks.append(compare("ambiguous", {t["shift_id"] for t in published if t["expect"] == "ambiguous"}, rep.ambiguous))
    v.checks.append(compare("unmatched", {t["shift_id"] for t in published if t["expect"] == "unmatched"}, rep.unmatched))
    v.checks.append(compare("passthroughs", {m[0] for m in want_match}, {p.shift_id for p in an.passthroughs}))

    v.checks.append(
        compare(
            "uturns",
            {(sid[u["first"]], sid[u["second"]], tuple(u["variants"])) for u in gt["uturns"] if u["first"] in sid and u["second"] in sid},
            {(u.first, u.second, u.labels) for u in an.uturns},
        )
    )
    v.checks.append(
        compare(
            "roundtrips",
            {(sid[r["first"]], sid[r["second"]], bool(r["same_address"])) for r in gt["roundtrips"] if r["first"] in sid and r["second"] in sid},
            {(r.first, r.second, r.same_address) for r in an.roundtrips},
        )
    )

    mixing = set(an.mixing_chains)
    v.checks.append(compare("coinjoins", {(c["chain"], c["tx"]) for c in gt["coinjoins"] if c["chain"] in mixing}, {(c, tx) for c, txs in an.coinjoins.items() for tx in txs}))
    v.checks.append(compare("coinjoin_pre", {sid[k] for k in gt["coinjoin_pre"] if k in sid}, {s for p in an.provenance.values() for s in p.pre}))
    v.checks.append(compare("coinjoin_post", {sid[k] for k in gt["coinjoin_post"] if k in sid}, {s for p in an.provenance.values() for s in p.post}))

    v.checks.append(
        compare(
            "pool",
            {(sid[p["shift"]], int(p["kind"]), p["value"]) for p in gt["pool"] if p["shift"] in sid},
            {(i.shift_id, int(i.kind), str(i.value)) for rows in an.pool.values() for i in rows},
        )
    )

    kept, _ = an.clusters
    v.checks.append(
        compare(
            "bots",
            {frozenset(sid[k] for k in b["members"] if k in sid) for b in gt["bots"]},
            {frozenset(c.members) for c in kept},
        )
    )
    want_shape = {(frozenset(sid[k] for k in b["members"] if k in sid), len(b["senders"]), len(b["receivers"])) for b in gt["bots"]}
    got_shape = {(frozenset(c.members), *co.shape) for c, co in zip(kept, an.corroborations)}
    v.checks.append(compare("bot_endpoints", want_shape, got_shape))

    g = an.graph
    want_hub, got_hub = set(), set()
    for h in gt["hubs"]:
        node = (h["chain"], h["address"])
        want_hub.add((node, frozenset(tuple(s) for s in h["senders"])))
        if node in g:
            got_hub.add((node, frozenset(g.pred[node])))
    v.checks.append(compare("hubs", want_hub, got_hub))

    if include_sweep:
        windows = {c: tuple(w) for c, w in gt["windows"].items()}
        got = {}
        for c in windows:
            if c in an.chains and any(s.cur_in == c for s in an.shifts):
                got[c] = an.sweep(c).argmax
        v.checks.append(compare("sweep", set(windows.items()), set(got.items())))
    return v
