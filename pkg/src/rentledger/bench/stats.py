"""Aggregation of raw load-test samples into per-(function, concurrency) stats
and the three CSV sheets (error %, median latency, throughput)."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from statistics import median
from typing import Iterable, Optional

FUNCTIONS = (
    "createHouse", "createDocument", "createProposal", "acceptProposal",
    "requestAccess", "acceptAccess", "getDocument", "getHistoricData",
)
LEVELS = (50, 100, 250, 500, 750, 1000)


class NoSamples(Exception):
    code = "NoSamples"


def percentile(values: list[float], pct: float) -> float:
    """Nearest-rank percentile over a non-empty sample list."""
    ordered = sorted(values)
    rank = max(0, math.ceil(pct / 100.0 * len(ordered)) - 1)
    return ordered[rank]


def aggregate(rounds: Iterable[dict]) -> dict:
    """Pool rounds into {(function, concurrency): stats}.

    Each round is {"function", "concurrency", "wall_clock_s", "samples":
    [{"latency_ms", "ok", "error_code", "status"}]}. Repeated rounds of the
    same cell pool their samples; wall-clock times add, so throughput stays
    completed / total wall-clock.
    """
    cells: dict[tuple[str, int], dict] = {}
    for round_ in rounds:
        key = (round_["function"], int(round_["concurrency"]))
        cell = cells.setdefault(key, {"latencies": [], "ok": 0, "failed": 0,
                                      "wall_clock_s": 0.0, "errors_by_code": {}})
        cell["wall_clock_s"] += float(round_["wall_clock_s"])
        for sample in round_["samples"]:
            cell["latencies"].append(float(sample["latency_ms"]))
            if sample["ok"]:
                cell["ok"] += 1
            else:
                cell["failed"] += 1
                code = sample.get("error_code") or "unknown"
                cell["errors_by_code"][code] = cell["errors_by_code"].get(code, 0) + 1
    if not cells:
        raise NoSamples("no rounds to aggregate")

    report = {}
    for key, cell in cells.items():
        total = cell["ok"] + cell["failed"]
        latencies = cell["latencies"]
        report[key] = {
            "function": key[0],
            "concurrency": key[1],
            "total": total,
            "completed": cell["ok"],
            "failed": cell["failed"],
            "error_percent": (cell["failed"] / total * 100.0) if total else 0.0,
            "median_ms": median(latencies) if latencies else 0.0,
            "p95_ms": percentile(latencies, 95.0) if latencies else 0.0,
            "max_ms": max(latencies) if latencies else 0.0,
            "throughput_rps": (cell["ok"] / cell["wall_clock_s"]) if cell["wall_clock_s"] else 0.0,
            "wall_clock_s": cell["wall_clock_s"],
            "errors_by_code": dict(sorted(cell["errors_by_code"].items())),
        }
    return report


def _grid_csv(report: dict, field: str, fmt: str = "{:.2f}") -> str:
    """Rows = concurrency levels in Table order, columns = functions."""
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["concurrency", *FUNCTIONS])
    levels = sorted({k[1] for k in report}, key=lambda n: (LEVELS.index(n) if n in LEVELS else 99, n))
    for level in levels:
        row = [level]
        for function in FUNCTIONS:
            cell = report.get((function, level))
            row.append(fmt.format(cell[field]) if cell else "")
        writer.writerow(row)
    return out.getvalue()


def emit_csv(report: dict, errors_path: str | Path,
             latency_path: Optional[str | Path] = None,
             throughput_path: Optional[str | Path] = None) -> None:
    errors_path = Path(errors_path)
    errors_path.write_text(_grid_csv(report, "error_percent"))
    stem = errors_path.with_suffix("")
    latency_path = Path(latency_path) if latency_path else Path(f"{stem}_latency.csv")
    throughput_path = Path(throughput_path) if throughput_path else Path(f"{stem}_throughput.csv")
    latency_path.write_text(_grid_csv(report, "median_ms"))
    throughput_path.write_text(_grid_csv(report, "throughput_rps"))


def load_rounds(directory: str | Path) -> list[dict]:
    rounds = []
    for path in sorted(Path(directory).glob("*.json")):
        rounds.append(json.loads(path.read_text()))
    if not rounds:
        raise NoSamples(f"no sample files under {directory}")
    return rounds


def save_round(directory: str | Path, round_: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    existing = len(list(directory.glob(f"{round_['function']}_{round_['concurrency']}_*.json")))
    path = directory / f"{round_['function']}_{round_['concurrency']}_{existing:02d}.json"
    path.write_text(json.dumps(round_))
    return path
