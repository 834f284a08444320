"""Command-line entry point: ``shifttrace <command> [options]``.

Exit codes: 0 on success, 1 on invalid input or a failed verification,
2 on I/O errors.  Diagnostics go to standard error; every artifact is
written atomically and every command leaves a run manifest next to its
outputs (``<command>.manifest.json``) plus a wall-time sidecar
(``<command>.timing.json``) kept apart so manifests stay reproducible.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .bots import clusters_csv
from .chainstore import dump_indices, ingest_chain
from .errors import ArchiveError, BackendUnavailable, ConfigError, ShiftTraceError, UnknownChain, ValidationError
from .feed import ReplayBackend, run_scraper
from .flows import UTURN_LABELS, heatmap, heatmap_csv, roundtrip_table, series_csv, table_csv, uturn_series, uturn_table
from .fsutil import atomic_write, dumps, sha256_bytes, sha256_file, write_json
from .model import ChainRegistry, Thresholds, parse_fraction
from .pipeline import ARCHIVE, Analysis, Workspace, load_params
from .privacy import pool_report
from .relgraph import cluster_report, degree_table, edges_csv, graph_summary, top_by_degree
from .sim import WorldConfig, acceptance_plants, generate_world, small_plants, write_world
from .sim.writer import FEED_DIR, MANIFEST, WORLD_CONFIG
from .verify import verify

log = logging.getLogger("shifttrace")

COMMANDS = ("simulate", "scrape", "ingest", "sweep", "match", "patterns", "clusters", "privacy", "bots", "report")


# ---------------------------------------------------------------------------
# run bookkeeping


@dataclass
class Run:
    """Collects a command's outputs and writes its manifest."""

    command: str
    out_dir: Path
    options: dict
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    started: float = field(default_factory=time.perf_counter)

    def write(self, name: str, data: bytes | str) -> Path:
        if isinstance(data, str):
            data = data.encode("utf-8")
        path = atomic_write(self.out_dir / name, data)
        self.outputs[name] = sha256_bytes(data)
        return path

    def write_json(self, name: str, obj) -> Path:
        return self.write(name, json.dumps(obj, sort_keys=True, indent=1) + "\n")

    def add_input(self, label: str, path: Path) -> None:
        if path.exists() and path.is_file():
            self.inputs[label] = sha256_file(path)

    def manifest(self) -> dict:
        versions = {"shifttrace": __version__, "python": ".".join(platform.python_version_tuple()[:2])}
        for mod in ("numpy", "pyarrow"):
            try:
                versions[mod] = __import__(mod).__version__
            except ImportError:
                pass
        return {
            "command": self.command,
            "config_hash": sha256_bytes(dumps(self.options).encode()),
            "options": self.options,
            "seed": self.seed,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "versions": versions,
        }

    def finish(self) -> dict:
        m = self.manifest()
        write_json(self.out_dir / f"{self.command}.manifest.json", m, pretty=True)
        write_json(self.out_dir / f"{self.command}.timing.json", {"command": self.command, "wall_time": round(time.perf_counter() - self.started, 3)})
        return m


def table_bytes(header: Sequence[str], rows: Sequence[Sequence], fmt: str) -> tuple[str, str]:
    """``(extension, text)`` for a table in the requested format."""
    if fmt == "json":
        return "json", json.dumps([dict(zip(header, r)) for r in rows], sort_keys=True, indent=1) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return "csv", buf.getvalue()


def csv_rows(text: str) -> tuple[list[str], list[list[str]]]:
    rows = list(csv.reader(io.StringIO(text)))
    return rows[0], rows[1:]


def emit_table(run: Run, stem: str, csv_text: str, fmt: str) -> None:
    header, rows = csv_rows(csv_text)
    ext, text = table_bytes(header, rows, fmt)
    run.write(f"{stem}.{ext}", text)


# ---------------------------------------------------------------------------
# option helpers


def load_json(path: str | Path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except ValueError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def thresholds_from(args) -> Thresholds:
    th = Thresholds()
    if getattr(args, "config", None):
        obj = load_json(args.config)
        th = Thresholds.from_json(obj.get("thresholds", obj) if isinstance(obj, dict) else {})
    overrides = {
        "uturn_window": args.uturn_window,
        "uturn_tolerance": args.uturn_tol,
        "roundtrip_window": args.roundtrip_window,
        "roundtrip_tolerance": args.roundtrip_tol,
        "bot_window": args.bot_window,
        "bot_min_size": args.bot_min_size,
        "bot_tolerance": args.bot_tol,
    }
    changes = {k: v for k, v in overrides.items() if v is not None}
    if changes:
        th = Thresholds.from_json({**th.to_json(), **{k: (str(v) if isinstance(v, Fraction) else v) for k, v in changes.items()}})
    return th


def out_dir_for(args, ws: Workspace | None = None) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    if ws is not None:
        return ws.root / "out"
    return Path.cwd()


def open_workspace(args) -> Workspace:
    if not args.world:
        raise ConfigError("--world is required")
    return Workspace.open(args.world, archive=args.archive, engine=getattr(args, "engine", "columnar"))


def analysis_from(args, ws: Workspace) -> Analysis:
    params: dict[str, tuple[int, int]] = {}
    if getattr(args, "params", None):
        params.update(load_params(args.params))
    db, da = getattr(args, "db", None), getattr(args, "da", None)
    if (db is None) != (da is None):
        raise ConfigError("--db and --da go together")
    if db is not None:
        if args.chain in (None, "all"):
            raise ConfigError("--db/--da need a single --chain")
        params[args.chain] = (db, da)
    return Analysis(ws, params=params, thresholds=thresholds_from(args), use_api=not getattr(args, "no_api", False))


def base_run(args, command: str, ws: Workspace | None, out: Path, extra: dict | None = None) -> Run:
    options = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out_dir", "verbose", "quiet") and not callable(v)}
    options = json.loads(json.dumps(options, default=str))
    if extra:
        options.update(extra)
    run = Run(command, out, options)
    if ws is not None:
        run.seed = ws.config.seed
        run.add_input(WORLD_CONFIG, ws.root / WORLD_CONFIG)
        run.add_input(MANIFEST, ws.root / MANIFEST)
        if ws.archive_path is not None:
            run.add_input("archive", ws.archive_path)
        elif (ws.root / ARCHIVE).exists():
            run.add_input("archive", ws.root / ARCHIVE)
    for flag in ("config", "params"):
        p = getattr(args, flag, None)
        if p:
            run.add_input(flag, Path(p))
    return run


def selected_chains(args, an: Analysis) -> list[str]:
    if args.chain in (None, "all"):
        return sorted(an.chains)
    if args.chain not in an.chains:
        raise UnknownChain(f"no ledger for {args.chain}")
    return [args.chain]


# ---------------------------------------------------------------------------
# commands


PRESETS = {
    "default": lambda: WorldConfig(plants=acceptance_plants()),
    "small": lambda: WorldConfig(duration=12 * 3600, background_rate=0.02, shift_rate=20, plants=small_plants()),
    "acceptance": lambda: WorldConfig(seed=1, background_rate=0.1, shift_rate=55, plants=acceptance_plants()),
}


def cmd_simulate(args) -> int:
    cfg = PRESETS[args.preset]()
    if args.config:
        cfg = WorldConfig.from_json(load_json(args.config))
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    if args.collision_rate is not None:
        cfg = cfg.with_(collision_rate=args.collision_rate)
    out = Path(args.out_dir or "world")
    world = generate_world(cfg)
    write_world(world, out)
    run = base_run(args, "simulate", None, out, {"world_config_hash": cfg.digest()})
    run.seed = cfg.seed
    run.outputs[MANIFEST] = sha256_file(out / MANIFEST)
    run.finish()
    print(f"world written to {out}: {len(world.trades)} trades, {sum(len(t) for t in world.block_times.values())} blocks", file=sys.stderr)
    return 0


def cmd_scrape(args) -> int:
    if args.feed:
        feed, registry_src = Path(args.feed), args.world
    else:
        if not args.world:
            raise ConfigError("scrape needs --world or --feed")
        feed, registry_src = Path(args.world) / FEED_DIR, args.world
    registry = Workspace.open(registry_src).registry if registry_src else ChainRegistry(WorldConfig().chains, WorldConfig().off_ledger)
    archive = Path(args.archive) if args.archive else (Path(args.world) / ARCHIVE if args.world else Path("archive.ndjson"))
    backend = ReplayBackend(feed, registry)
    summary = run_scraper(backend, archive, registry, interval=args.interval, max_ticks=args.max_ticks, sleep=time.sleep if args.realtime else (lambda s: None))
    out = Path(args.out_dir) if args.out_dir else archive.parent
    run = base_run(args, "scrape", None, out)
    run.inputs["feed"] = sha256_bytes(dumps(sorted(p.name for p in feed.glob("*.json"))).encode())
    run.write_json("scrape.json", {"ticks": summary.ticks, "records": summary.records, "rates": summary.rates, "gaps": summary.gaps, "failures": summary.failures})
    run.outputs[archive.name] = sha256_file(archive)
    run.finish()
    return 0


def cmd_ingest(args) -> int:
    ws = open_workspace(args)
    out = out_dir_for(args, ws)
    run = base_run(args, "ingest", ws, out)
    chains = ws.ledger_ids if args.chain in (None, "all") else [args.chain]
    stats = {}
    timing = {}
    for c in chains:
        path = ws.ledger_path(c)
        if c not in ws.registry:
            raise UnknownChain(f"no ledger for {c}")
        if not path.exists():
            raise FileNotFoundError(f"ledger file {path} is missing")
        run.add_input(f"ledgers/{c}", path)
        t0 = time.perf_counter()
        h = ingest_chain(path, ws.registry[c], args.engine)
        timing[c] = time.perf_counter() - t0
        stats[c] = {"blocks": h.stats.blocks, "txs": h.stats.txs, "utxos_created": h.stats.utxos_created, "utxos_spent": h.stats.utxos_spent, "tip": h.tip}
        if args.dump:
            run.write(f"indices/{c}.json", dump_indices(h))
    run.write_json("ingest.json", stats)
    run.finish()
    total = sum(s["txs"] for s in stats.values())
    secs = sum(timing.values())
    print(f"ingested {total} transactions in {secs:.2f}s ({total / secs if secs else 0:,.0f} tx/s)", file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    ws = open_workspace(args)
    an = analysis_from(args, ws)
    out = out_dir_for(args, ws)
    run = base_run(args, "sweep", ws, out)
    summary = {}
    for c in selected_chains(args, an):
        if not any(s.cur_in == c for s in an.shifts):
            continue
        res = an.sweep(c, args.max_delta)
        emit_table(run, f"sweep/{c}", res.to_csv(), args.format)
        summary[c] = {"argmax": list(res.argmax), "single_hits": res.best, "shifts": res.n_shifts}
    run.write_json("sweep.json", summary)
    run.finish()
    return 0


def cmd_match(args) -> int:
    ws = open_workspace(args)
    an = analysis_from(args, ws)
    out = out_dir_for(args, ws)
    run = base_run(args, "match", ws, out)
    chains = set(selected_chains(args, an))
    rep = an.report
    rows = [r for r in rep.rows() if rep.shifts[r["shift_id"]].cur_in in chains]
    header = ["shift_id", "grade", "phase1_tx", "addr_s", "phase2_tx", "addr_u", "flags"]
    ext, text = table_bytes(header, [[r[h] for h in header] for r in rows], args.format)
    run.write(f"matches.{ext}", text)
    summary = {}
    for c in sorted(chains):
        ids = [s for s, sh in rep.shifts.items() if sh.cur_in == c]
        counts = rep.classification_counts(c)
        summary[c] = {
            "window": list(an.windows.get(c, (0, 0))),
            "shifts": len(ids),
            "candidates": counts,
            "single_hit_rate": str(rep.single_hit_rate(c)),
            "augmented": sum(1 for s in ids if s in rep.matches and rep.matches[s].grade.value == "augmented"),
            "basic_single": sum(1 for s in ids if s in rep.matches and rep.matches[s].grade.value == "basic_single"),
            "ambiguous": sum(1 for s in ids if s in rep.ambiguous),
            "unmatched": sum(1 for s in ids if s in rep.unmatched),
        }
    run.write_json("match.json", summary)
    run.finish()
    return 0


def cmd_patterns(args) -> int:
    ws = open_workspace(args)
    an = analysis_from(args, ws)
    out = out_dir_for(args, ws)
    run = base_run(args, "patterns", ws, out)
    pts = an.passthroughs
    run.write("heatmap.csv", heatmap_csv(heatmap(pts)))
    ext, text = table_bytes(
        ["first", "second", "cur_x", "cur_y", "tx1", "tx2", "labels", "gap"],
        [[u.first, u.second, u.cur_x, u.cur_y, "" if u.tx1 is None else str(u.tx1), str(u.tx2), ";".join(u.labels), u.gap] for u in an.uturns],
        args.format,
    )
    run.write(f"uturns.{ext}", text)
    ext, text = table_bytes(
        ["first", "second", "cur_x", "cur_y", "same_address"],
        [[r.first, r.second, r.cur_x, r.cur_y, int(r.same_address)] for r in an.roundtrips],
        args.format,
    )
    run.write(f"roundtrips.{ext}", text)
    run.write("uturn_table.csv", table_csv(uturn_table(an.uturns), UTURN_LABELS))
    run.write("roundtrip_table.csv", table_csv(roundtrip_table(an.roundtrips), ("regular", "same_address")))
    run.write("uturn_series.csv", series_csv(uturn_series(an.uturns, pts, ws.config.start)))
    run.write_json("patterns.json", {"passthroughs": len(pts), "uturns": uturn_table(an.uturns), "roundtrips": roundtrip_table(an.roundtrips)})
    run.finish()
    return 0


def parse_node(text: str) -> tuple[str, str]:
    chain, sep, addr = text.partition(":")
    if not sep or not chain or not addr:
        raise ValidationError(f"expected CHAIN:ADDRESS, got {text!r}")
    return chain, addr


def cmd_clusters(args) -> int:
    ws = open_workspace(args)
    an = analysis_from(args, ws)
    out = out_dir_for(args, ws)
    run = base_run(args, "clusters", ws, out)
    g = an.graph
    tags = ws.tags()
    emit_table(run, "edges", edges_csv(g), args.format)
    top = {d: degree_table(top_by_degree(g, d, args.top, tags)) for d in ("in", "out")}
    reports = [cluster_report(g, parse_node(a), tags) for a in args.address or ()]
    run.write_json("clusters.json", {"summary": dict(graph_summary(g)), "top": top, "queries": reports})
    run.finish()
    return 0


def cmd_privacy(args) -> int:
    ws = open_workspace(args)
    an = analysis_from(args, ws)
    out = out_dir_for(args, ws)
    run = base_run(args, "privacy", ws, out)
    matches = an.report.matches.values()
    doc = {
        "pool": {c: pool_report(rows, matches, an.chains[c]) for c, rows in an.pool.items()},
        "pool_interactions": {c: [{"shift_id": i.shift_id, "kind": int(i.kind), "value": str(i.value), "tx": i.tx} for i in rows] for c, rows in an.pool.items()},
        "coinjoins": {c: {"count": len(txs), "txs": txs} for c, txs in an.coinjoins.items()},
        "provenance": {c: p.to_json() for c, p in an.provenance.items()},
        "uturn_asymmetry": an.asymmetry,
    }
    run.write_json("privacy.json", doc)
    run.finish()
    return 0


def cmd_bots(args) -> int:
    ws = open_workspace(args)
    an = analysis_from(args, ws)
    out = out_dir_for(args, ws)
    run = base_run(args, "bots", ws, out)
    kept, rejected = an.clusters
    prices = None
    if args.prices:
        prices = {k: parse_fraction(v) for k, v in load_json(args.prices).items()}
    emit_table(run, "bots", clusters_csv(kept, an.shift_index, prices), args.format)
    doc = {
        "clusters": [
            {"pairs": [list(p) for p in c.pairs], "size": c.size, "start": c.start, "end": c.end, "members": list(c.members), "corroboration": co.to_json()}
            for c, co in zip(kept, an.corroborations)
        ],
        "rejected": [{"pairs": [list(p) for p in c.pairs], "size": c.size, "reason": why} for c, why in rejected],
    }
    run.write_json("bots.json", doc)
    run.finish()
    return 0


def cmd_report(args) -> int:
    ws = open_workspace(args)
    an = analysis_from(args, ws)
    out = out_dir_for(args, ws)
    run = base_run(args, "report", ws, out)
    kept, _ = an.clusters
    summary = {
        "shifts": len(an.shifts),
        "matches": len(an.report.matches),
        "ambiguous": len(an.report.ambiguous),
        "unmatched": len(an.report.unmatched),
        "passthroughs": len(an.passthroughs),
        "uturns": uturn_table(an.uturns),
        "roundtrips": roundtrip_table(an.roundtrips),
        "graph": dict(graph_summary(an.graph)),
        "coinjoins": {c: len(t) for c, t in an.coinjoins.items()},
        "pool": {c: len(r) for c, r in an.pool.items()},
        "bots": len(kept),
    }
    run.write_json("report.json", summary)
    code = 0
    if args.verify:
        v = verify(an, include_sweep=args.sweep)
        run.write_json("verify.json", v.to_json())
        for c in v.checks:
            print(f"{'PASS' if c.ok else 'FAIL'} {c.name}: expected {c.expected}, found {c.found}", file=sys.stderr)
        code = 0 if v.ok else 1
    run.finish()
    return code


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", help="directory for artifacts")
    common.add_argument("--seed", type=int, help="world seed (simulate)")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="format of tabular outputs")
    common.add_argument("--config", help="JSON config (world for simulate, thresholds otherwise)")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")

    world = argparse.ArgumentParser(add_help=False)
    world.add_argument("--world", help="world directory")
    world.add_argument("--archive", help="scraped feed archive (default: <world>/archive.ndjson, else replay fixtures)")
    world.add_argument("--engine", choices=("columnar", "reference"), default="columnar")

    analysis = argparse.ArgumentParser(add_help=False)
    analysis.add_argument("--chain", default="all")
    analysis.add_argument("--params", help="per-chain windows (sweep.json)")
    analysis.add_argument("--db", type=int, help="blocks before the feed time")
    analysis.add_argument("--da", type=int, help="blocks after the feed time")
    analysis.add_argument("--no-api", action="store_true", help="basic matching only, no service lookups")
    analysis.add_argument("--uturn-window", type=int)
    analysis.add_argument("--uturn-tol", type=parse_fraction)
    analysis.add_argument("--roundtrip-window", type=int)
    analysis.add_argument("--roundtrip-tol", type=parse_fraction)
    analysis.add_argument("--bot-window", type=int)
    analysis.add_argument("--bot-min-size", type=int)
    analysis.add_argument("--bot-tol", type=parse_fraction)

    p = argparse.ArgumentParser(prog="shifttrace", description="Trace trades of a cross-currency exchange service across ledgers.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic world")
    s.add_argument("--preset", choices=sorted(PRESETS), default="default")
    s.add_argument("--collision-rate", type=float)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("scrape", parents=[common, world], help="poll feed fixtures into an archive")
    s.add_argument("--feed", help="fixture directory (default: <world>/feed)")
    s.add_argument("--max-ticks", type=int)
    s.add_argument("--interval", type=float, default=5.0, help="seconds between polls")
    s.add_argument("--realtime", action="store_true", help="actually wait between polls (fixtures replay instantly otherwise)")
    s.set_defaults(func=cmd_scrape)

    s = sub.add_parser("ingest", parents=[common, world], help="parse and index ledgers")
    s.add_argument("--chain", default="all")
    s.add_argument("--dump", action="store_true", help="write canonical index dumps")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("sweep", parents=[common, world, analysis], help="single-hit counts over block windows")
    s.add_argument("--max-delta", type=int, default=30)
    s.set_defaults(func=cmd_sweep)

    for name, func, text in (
        ("match", cmd_match, "find deposits and withdrawals"),
        ("patterns", cmd_patterns, "pass-throughs, U-turns and round-trips"),
        ("privacy", cmd_privacy, "shielded-pool and CoinJoin probes"),
    ):
        s = sub.add_parser(name, parents=[common, world, analysis], help=text)
        s.set_defaults(func=func)

    s = sub.add_parser("clusters", parents=[common, world, analysis], help="relationship graph queries")
    s.add_argument("--top", type=int, default=10)
    s.add_argument("--address", action="append", help="CHAIN:ADDRESS to report on (repeatable)")
    s.set_defaults(func=cmd_clusters)

    s = sub.add_parser("bots", parents=[common, world, analysis], help="automated trading bursts")
    s.add_argument("--prices", help="JSON {currency: USD price} for the value column")
    s.set_defaults(func=cmd_bots)

    s = sub.add_parser("report", parents=[common, world, analysis], help="summary, optionally verified against ground truth")
    s.add_argument("--verify", action="store_true", help="compare with ground truth; exit 1 on any mismatch")
    s.add_argument("--sweep", action="store_true", help="also check sweep argmaxes against the configured windows")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return 1 if exc.code not in (0, None) else 0
    level = logging.DEBUG if args.verbose else logging.ERROR if args.quiet else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    handler: Callable[[argparse.Namespace], int] = args.func
    try:
        return handler(args)
    except (ArchiveError, BackendUnavailable, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ShiftTraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
