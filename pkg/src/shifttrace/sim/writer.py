"""Serialize a generated world: ledgers, feed fixtures, ground truth and manifest."""

from __future__ import annotations

import json
from bisect import bisect_right
from pathlib import Path

from ..feed import RECENT_LIMIT
from ..fsutil import atomic_write, dumps, hash_tree, write_json
from ..model import ShiftDetail, ShiftStatus
from .builder import World

LEDGER_DIR = "ledgers"
FEED_DIR = "feed"
GROUND_TRUTH = "ground_truth.json"
TAGS = "tags.json"
WORLD_CONFIG = "world_config.json"
MANIFEST = "manifest.json"
# run manifests and timing sidecars of later commands live beside the world files
NOT_WORLD = (MANIFEST, "*.manifest.json", "*.timing.json", "archive.ndjson", "out/*")


def _json_lines(rows) -> str:
    return "[" + ",".join(dumps(r) for r in rows) + "]\n"


def write_feed_fixtures(world: World, feed_dir: str | Path) -> None:
    """One ``recent_<tick>``/``rates_<tick>`` pair per feed tick plus ``stats/<addr>``."""
    feed_dir = Path(feed_dir)
    pub = sorted(world.published(), key=lambda t: (t.feed_time, t.shift_id))
    times = [t.feed_time for t in pub]
    rec_json = [dumps(world.shift_record(t).to_json()) for t in pub]
    for i in range(1, len(world.rate_ticks)):
        now = world.rate_ticks[i]
        j = bisect_right(times, now)
        page = rec_json[max(j - RECENT_LIMIT, 0) : j][::-1]
        atomic_write(feed_dir / f"recent_{i}.json", "[" + ",".join(page) + "]\n")
        rows = [
            {"pair": f"{a.lower()}_{b.lower()}", "rate": rate, "limit": limit, "minimum": minimum, "minerFee": fee, "timestamp": now}
            for a, b, rate, limit, minimum, fee in world.rate_rows[i]
        ]
        atomic_write(feed_dir / f"rates_{i}.json", _json_lines(rows))
    latest = {}
    for t in sorted(world.trades, key=lambda t: (t.feed_time, t.key)):
        latest[t.addr_s] = t
    stats = feed_dir / "stats"
    for addr, t in latest.items():
        write_json(stats / f"{addr}.json", world.detail(t).to_json())
    for addr, _, _ in world.abandoned:
        if addr not in latest:
            write_json(stats / f"{addr}.json", ShiftDetail(status=ShiftStatus.NO_DEPOSITS, address=addr).to_json())


def write_world(world: World, out_dir: str | Path) -> dict:
    """Write every artifact of ``world`` under ``out_dir`` and return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / WORLD_CONFIG, world.config.to_json(), pretty=True)
    for cid, data in world.ledgers.items():
        atomic_write(out / LEDGER_DIR / f"{cid}.ndjson", data)
    write_feed_fixtures(world, out / FEED_DIR)
    write_json(out / TAGS, [t.to_json() for t in world.tags])
    write_json(out / GROUND_TRUTH, world.ground_truth)
    manifest = {
        "generator": "shifttrace.sim",
        "seed": world.config.seed,
        "config_hash": world.config.digest(),
        "skew_model": world.ground_truth.get("skew_model"),
        "jitter": world.config.jitter,
        "files": hash_tree(out, exclude=NOT_WORLD),
    }
    write_json(out / MANIFEST, manifest, pretty=True)
    return manifest


def load_ground_truth(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
