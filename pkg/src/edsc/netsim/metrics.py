"""Latency statistics and the CSV / JSON run outputs."""
from __future__ import annotations

import csv
import io
import json
import os
import statistics
import tempfile
from typing import Iterable

from .engine import MetricsRecord, SimResult

CSV_COLUMNS = ("model", "trigger_id", "emit_time_s", "inclusion_time_s", "latency_s", "block_number")


def percentile(xs: list[float], q: float) -> float:
    """Linear-interpolation percentile (``q`` in [0, 100])."""
    if not xs:
        return float("nan")
    if len(xs) == 1:
        return xs[0]
    return statistics.quantiles(xs, n=100, method="inclusive")[int(q) - 1] if 0 < q < 100 else \
        (min(xs) if q <= 0 else max(xs))


def summarize(result: SimResult) -> dict:
    lat = result.latencies()
    return {
        "model": result.config.model,
        "seed": result.config.seed,
        "samples": len(lat),
        "missing": result.missing,
        "mean": statistics.fmean(lat) if lat else float("nan"),
        "p50": statistics.median(lat) if lat else float("nan"),
        "p95": percentile(lat, 95),
        "stale_rate": result.stale_rate,
        "blocks": len(result.chain) - 1,
        "block_interval": result.config.block_interval,
    }


def records_csv(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([r.model, r.trigger_id, f"{r.emit_time:.6f}", f"{r.inclusion_time:.6f}",
                    f"{r.latency:.6f}", r.block_number])
    return buf.getvalue()


def read_records(path: str) -> list[MetricsRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(r["model"], r["trigger_id"], float(r["emit_time_s"]), float(r["inclusion_time_s"]),
                          int(r["block_number"])) for r in rows]


def atomic_write(path: str, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_outputs(result: SimResult, out_dir: str, stem: str | None = None) -> tuple[str, str]:
    stem = stem or result.config.model
    csv_path = os.path.join(out_dir, f"{stem}_metrics.csv")
    json_path = os.path.join(out_dir, f"{stem}_summary.json")
    atomic_write(csv_path, records_csv(result.records))
    atomic_write(json_path, json.dumps(summarize(result), sort_keys=True, indent=2) + "\n")
    return csv_path, json_path
