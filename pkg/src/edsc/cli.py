"""Command-line entry point: single runs, parameter sweeps, replay validation and reports.

Exit codes: 0 success, 1 runtime failure or rejected block, 2 configuration or
input error.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import io
import json
import logging
import os
import statistics
import sys
import time
from dataclasses import dataclass
from typing import Optional, Sequence

from .ledger import BlockLogError, read_block_log, validate_chain, write_block_log
from .netsim.config import ConfigError, SimConfig, from_mapping
from .netsim.engine import run_simulation
from .netsim.metrics import atomic_write, records_csv, summarize

log = logging.getLogger("edsc")

# sweep axis name -> SimConfig field
AXES = {
    "block_interval": "block_interval",
    "block_delay": "block_delay",
    "msg_delay": "msg_delay_ms",
    "block_capacity": "block_gas_limit",
}
DEFAULT_VALUES = {
    "block_interval": (8.0, 12.42, 20.0, 30.0, 45.0, 60.0),
    "block_delay": (0.5, 2.3, 5.0, 10.0),
    "msg_delay": (10.0, 100.0, 500.0, 2000.0),
    "block_capacity": (8_000_000.0, 4_000_000.0, 2_000_000.0),
}
REPORT_COLUMNS = ("axis", "value", "runs", "edsc_mean", "edsc_p50", "edsc_p95",
                  "baseline_mean", "baseline_p50", "baseline_p95", "ratio")


class UsageError(Exception):
    """Bad input: reported on stderr with exit code 2."""


# -- scenario loading ----------------------------------------------------------------

def load_scenario(path: Optional[str]) -> SimConfig:
    if path is None:
        return SimConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise UsageError(f"{path}: {err.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}:{err.lineno}:{err.colno}: {err.msg}") from None
    try:
        return from_mapping(SimConfig, data)
    except ConfigError as err:
        raise UsageError(f"{path}: {err}") from None


def resolve_seed(arg: Optional[int], cfg: SimConfig) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("EDSC_SIM_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"EDSC_SIM_SEED must be an integer, got {env!r}") from None
    return cfg.seed


def output_dir(out: Optional[str]) -> str:
    """An explicit --out, or a fresh timestamped directory under ./runs."""
    if out:
        os.makedirs(out, exist_ok=True)
        return out
    base = os.path.join("runs", time.strftime("%Y%m%d-%H%M%S"))
    path, n = base, 1
    while os.path.exists(path):
        n += 1
        path = f"{base}-{n}"
    os.makedirs(path)
    return path


def models_for(choice: str) -> tuple[str, ...]:
    return ("edsc", "baseline") if choice == "both" else (choice,)


# -- running -------------------------------------------------------------------------------

@dataclass(frozen=True)
class Job:
    config: SimConfig
    out_dir: str
    axis: Optional[str] = None
    value: Optional[float] = None
    block_log: bool = False


def run_job(job: Job) -> dict:
    """Run one simulation and write its CSV, summary and optional block log."""
    res = run_simulation(job.config)
    model = job.config.model
    summary = summarize(res)
    summary["axis"] = job.axis
    summary["value"] = job.value
    os.makedirs(job.out_dir, exist_ok=True)
    atomic_write(os.path.join(job.out_dir, f"{model}_metrics.csv"), records_csv(res.records))
    atomic_write(os.path.join(job.out_dir, f"{model}_summary.json"),
                 json.dumps(summary, sort_keys=True, indent=2) + "\n")
    if job.block_log:
        write_block_log(os.path.join(job.out_dir, f"{model}_blocks.ndjson"), res.chain[0], res.genesis_state,
                        res.params, res.chain[1:])
    return summary


def run_jobs(jobs: Sequence[Job], workers: int) -> list[dict]:
    if workers <= 1 or len(jobs) <= 1:
        return [run_job(j) for j in jobs]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_job, jobs))


# -- reporting -------------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def aggregate(summaries: Sequence[dict]) -> list[dict]:
    """One row per (axis, value): per-model latency stats averaged over runs, plus the ratio."""
    groups: dict[tuple, dict[str, list[dict]]] = {}
    for s in summaries:
        key = (s.get("axis"), s.get("value"))
        groups.setdefault(key, {}).setdefault(s["model"], []).append(s)
    rows = []
    for (axis, value), by_model in groups.items():
        row = {"axis": axis, "value": value, "runs": sum(len(v) for v in by_model.values())}
        for model in ("edsc", "baseline"):
            runs = by_model.get(model, [])
            for stat in ("mean", "p50", "p95"):
                row[f"{model}_{stat}"] = statistics.fmean(r[stat] for r in runs) if runs else None
        e, b = row["edsc_mean"], row["baseline_mean"]
        row["ratio"] = b / e if e and b is not None else None
        rows.append(row)
    rows.sort(key=lambda r: (r["axis"] or "", r["value"] if r["value"] is not None else float("-inf")))
    return rows


def rows_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def rows_table(rows: Sequence[dict]) -> str:
    head = ("axis", "value", "runs", "edsc mean", "edsc p50", "edsc p95",
            "base mean", "base p50", "base p95", "ratio")
    body = []
    for r in rows:
        cells = [r["axis"] or "-", "-" if r["value"] is None else f"{r['value']:g}", str(r["runs"])]
        for c in REPORT_COLUMNS[3:]:
            cells.append("-" if r[c] is None else f"{r[c]:.2f}")
        body.append(cells)
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(head, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def collect_summaries(directory: str) -> list[dict]:
    found = []
    for root, dirs, files in os.walk(directory):
        dirs.sort()
        for name in sorted(files):
            if name.endswith("_summary.json"):
                with open(os.path.join(root, name), encoding="utf-8") as fh:
                    found.append(json.load(fh))
    return found


# -- commands --------------------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = load_scenario(args.scenario)
    cfg = cfg.replace(seed=resolve_seed(args.seed, cfg))
    out = output_dir(args.out)
    jobs = [Job(cfg.replace(model=m), out, block_log=args.block_log) for m in models_for(args.model)]
    summaries = run_jobs(jobs, args.workers)
    for s in summaries:
        print(f"{s['model']}: samples={s['samples']} mean={s['mean']:.3f}s p50={s['p50']:.3f}s "
              f"p95={s['p95']:.3f}s stale_rate={s['stale_rate']:.4f}")
    by_model = {s["model"]: s for s in summaries}
    if len(by_model) == 2:
        print(f"ratio baseline/edsc = {by_model['baseline']['mean'] / by_model['edsc']['mean']:.3f}")
    print(f"outputs in {out}")
    return 0


def parse_values(text: Optional[str], axis: str) -> tuple[float, ...]:
    if text is None:
        return DEFAULT_VALUES[axis]
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {text!r}") from None
    if not values or any(v <= 0 for v in values):
        raise UsageError("--values must be a nonempty list of positive numbers")
    return values


def cmd_sweep(args) -> int:
    cfg = load_scenario(args.scenario)
    seed = resolve_seed(args.seed, cfg)
    values = parse_values(args.values, args.axis)
    if args.repeats < 1:
        raise UsageError("--repeats must be at least 1")
    field_name = AXES[args.axis]
    out = output_dir(args.out)
    jobs = []
    try:
        for i, v in enumerate(values):
            point = int(v) if field_name == "block_gas_limit" else v
            for r in range(args.repeats):
                for m in models_for(args.model):
                    c = cfg.replace(model=m, seed=seed + r, **{field_name: point})
                    jobs.append(Job(c, os.path.join(out, f"point{i:02d}", f"seed{seed + r}"), args.axis, v))
    except ConfigError as err:
        raise UsageError(str(err)) from None
    summaries = run_jobs(jobs, args.workers)
    rows = aggregate(summaries)
    atomic_write(os.path.join(out, "sweep.csv"), rows_csv(rows))
    print(rows_table(rows))
    print(f"outputs in {out}")
    return 0


def cmd_validate(args) -> int:
    try:
        genesis, state, params, blocks = read_block_log(args.block_log)
    except OSError as err:
        raise UsageError(f"{args.block_log}: {err.strerror}") from None
    except BlockLogError as err:
        raise UsageError(f"{args.block_log}: {err}") from None
    result, bad = validate_chain(genesis, state, params, blocks)
    if not result.ok:
        detail = f" ({result.detail})" if result.detail else ""
        print(f"block {bad.number}: {result.reason}{detail}")
        return 1
    print(f"ok: {len(blocks)} blocks valid")
    return 0


def cmd_report(args) -> int:
    if not os.path.isdir(args.dir):
        raise UsageError(f"{args.dir}: not a directory")
    summaries = collect_summaries(args.dir)
    if not summaries:
        raise UsageError(f"{args.dir}: no run outputs found")
    rows = aggregate(summaries)
    out = args.out or os.path.join(args.dir, "report.csv")
    atomic_write(out, rows_csv(rows))
    print(rows_table(rows))
    return 0


# -- argument parsing ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edsc", description="Event-driven smart contract simulator.")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("scenario", nargs="?", help="scenario JSON file (defaults apply when omitted)")
        sp.add_argument("--model", choices=["edsc", "baseline", "both"], default="both")
        sp.add_argument("--seed", type=int, help="RNG seed (falls back to EDSC_SIM_SEED, then the scenario)")
        sp.add_argument("--out", help="output directory (default: a new runs/<timestamp> directory)")
        sp.add_argument("--workers", type=int, default=1, help="parallel simulations")

    r = sub.add_parser("run", help="run one scenario")
    common(r)
    r.add_argument("--block-log", action="store_true", help="also export the final chain as a block log")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="sweep one parameter")
    common(s)
    s.add_argument("--axis", choices=sorted(AXES), default="block_interval")
    s.add_argument("--values", help="comma-separated axis values (msg_delay in ms, block_capacity in gas)")
    s.add_argument("--repeats", type=int, default=1, help="seeds per point")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate", help="replay and validate a block log")
    v.add_argument("block_log")
    v.set_defaults(func=cmd_validate)

    rp = sub.add_parser("report", help="tabulate run outputs in a directory")
    rp.add_argument("dir")
    rp.add_argument("--out", help="summary CSV path (default: <dir>/report.csv)")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # any failure inside a run
        log.debug("run failed", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
