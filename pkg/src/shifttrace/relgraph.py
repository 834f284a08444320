"""Common-relationship graph over pass-through endpoints.

Nodes are chain-scoped addresses.  An edge ``u -> v`` records that address
``u`` funded a trade whose proceeds went to ``v``; its weight counts those
trades.  Deposits funded by several addresses contribute one edge per
funding address.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping

from .errors import UnknownNode, ValidationError
from .flows import PassThrough
from .model import TagRecord, tags_by_node

Node = tuple[str, str]  # (chain, address)


@dataclass
class RelationGraph:
    succ: dict[Node, dict[Node, int]] = field(default_factory=dict)
    pred: dict[Node, dict[Node, int]] = field(default_factory=dict)
    consumed: int = 0  # pass-throughs that contributed edges

    def add(self, u: Node, v: Node, weight: int = 1) -> None:
        self.succ.setdefault(u, {})
        self.succ.setdefault(v, {})
        self.pred.setdefault(u, {})
        self.pred.setdefault(v, {})
        self.succ[u][v] = self.succ[u].get(v, 0) + weight
        self.pred[v][u] = self.pred[v].get(u, 0) + weight

    @property
    def node_count(self) -> int:
        return len(self.succ)

    @property
    def edge_count(self) -> int:
        return sum(len(d) for d in self.succ.values())

    @property
    def total_weight(self) -> int:
        return sum(sum(d.values()) for d in self.succ.values())

    def weight(self, u: Node, v: Node) -> int:
        return self.succ.get(u, {}).get(v, 0)

    def edges(self) -> list[tuple[Node, Node, int]]:
        return sorted((u, v, w) for u, d in self.succ.items() for v, w in d.items())

    def __contains__(self, node: Node) -> bool:
        return node in self.succ

    def in_degree(self, v: Node) -> int:
        return len(self.pred.get(v, {}))

    def out_degree(self, u: Node) -> int:
        return len(self.succ.get(u, {}))


def build_graph(passthroughs: Iterable[PassThrough]) -> RelationGraph:
    """Edges from every deposit funding address to the trade's recipient.

    Pass-throughs missing either endpoint (no loaded deposit ledger, or no
    recipient address) are skipped.
    """
    g = RelationGraph()
    seen: set[str] = set()
    for p in sorted(passthroughs, key=lambda p: p.shift_id):
        if p.shift_id in seen or not p.input_addresses or not p.output_addresses:
            continue
        seen.add(p.shift_id)
        g.consumed += 1
        for a in p.input_addresses:
            for b in p.output_addresses:
                g.add((p.cur_in, a), (p.cur_out, b))
    return g


def _require(g: RelationGraph, node: Node) -> None:
    if node not in g:
        raise UnknownNode(f"{node[0]}:{node[1]} is not in the graph")


def input_cluster(g: RelationGraph, v: Node) -> set[Node]:
    """Every address that sent money through the service to ``v``."""
    _require(g, v)
    return set(g.pred[v])


def output_cluster(g: RelationGraph, u: Node) -> set[Node]:
    """Every address that received money through the service from ``u``."""
    _require(g, u)
    return set(g.succ[u])


@dataclass(frozen=True)
class RankedNode:
    chain: str
    address: str
    degree: int
    weight: int
    tags: tuple[TagRecord, ...]


def top_by_degree(
    g: RelationGraph,
    direction: Literal["in", "out"],
    k: int,
    tags: Iterable[TagRecord] = (),
) -> list[RankedNode]:
    """Nodes ranked by distinct neighbours in ``direction``; ties go to the smaller node."""
    if k < 1:
        raise ValidationError("k must be at least 1")
    if direction not in ("in", "out"):
        raise ValidationError(f"direction must be 'in' or 'out', not {direction!r}")
    adj = g.pred if direction == "in" else g.succ
    index = tags_by_node(tags)
    ranked = sorted(adj, key=lambda n: (-len(adj[n]), n))[:k]
    return [RankedNode(n[0], n[1], len(adj[n]), sum(adj[n].values()), tuple(index.get(n, ()))) for n in ranked]


def edges_csv(g: RelationGraph) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["src_chain", "src_addr", "dst_chain", "dst_addr", "weight"])
    for (uc, ua), (vc, va), wt in g.edges():
        w.writerow([uc, ua, vc, va, wt])
    return buf.getvalue()


def cluster_report(g: RelationGraph, node: Node, tags: Iterable[TagRecord] = ()) -> dict:
    """JSON-ready description of one address's neighbourhood."""
    _require(g, node)
    index = tags_by_node(tags)

    def entry(n: Node, w: int) -> dict:
        return {"chain": n[0], "address": n[1], "weight": w, "tags": [t.tag for t in index.get(n, ())]}

    return {
        "chain": node[0],
        "address": node[1],
        "tags": [t.to_json() for t in index.get(node, ())],
        "in_degree": g.in_degree(node),
        "out_degree": g.out_degree(node),
        "input_cluster": [entry(n, w) for n, w in sorted(g.pred[node].items())],
        "output_cluster": [entry(n, w) for n, w in sorted(g.succ[node].items())],
    }


def degree_table(nodes: Iterable[RankedNode]) -> list[dict]:
    return [
        {"chain": n.chain, "address": n.address, "degree": n.degree, "weight": n.weight, "tags": ";".join(t.tag for t in n.tags)}
        for n in nodes
    ]


def graph_summary(g: RelationGraph) -> Mapping[str, int]:
    return {"nodes": g.node_count, "edges": g.edge_count, "weight": g.total_weight, "passthroughs": g.consumed}


__all__ = [
    "Node",
    "RankedNode",
    "RelationGraph",
    "build_graph",
    "cluster_report",
    "degree_table",
    "edges_csv",
    "graph_summary",
    "input_cluster",
    "output_cluster",
    "top_by_degree",
]
