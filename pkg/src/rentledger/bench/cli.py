"""Load-test command line: one scenario, the full sweep, or report aggregation."""

from __future__ import annotations

from pathlib import Path

import click

from .harness import LoadHarness
from .stats import FUNCTIONS, LEVELS, aggregate, emit_csv, load_rounds

_ORG1 = "http://127.0.0.1:8081"
_ORG2 = "http://127.0.0.1:8082"


def _summary(round_: dict) -> str:
    samples = round_["samples"]
    failed = sum(1 for s in samples if not s["ok"])
    latencies = sorted(s["latency_ms"] for s in samples)
    med = latencies[len(latencies) // 2] if latencies else 0.0
    return (f"{round_['function']} @ {round_['concurrency']}: "
            f"{len(samples) - failed}/{len(samples)} ok, median {med:.1f} ms, "
            f"wall {round_['wall_clock_s']:.2f} s"
            + (f", {failed} errors" if failed else ""))


@click.group()
def main():
    """Concurrent load harness for the rental ledger gateways."""


@main.command()
@click.option("--function", required=True, type=click.Choice(FUNCTIONS))
@click.option("--concurrency", required=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--org1-url", default=_ORG1, show_default=True)
@click.option("--org2-url", default=_ORG2, show_default=True)
@click.option("--timeout", type=float, default=30.0, show_default=True)
def run(function: str, concurrency: int, out_dir: str, org1_url: str,
        org2_url: str, timeout: float):
    """Bench one function at one concurrency level (fixtures built unmeasured)."""
    harness = LoadHarness(org1_url, org2_url, timeout_s=timeout)
    round_ = harness.run_function(function, concurrency, out_dir=out_dir, log=click.echo)
    click.echo(_summary(round_))


@main.command()
@click.option("--all", "all_levels", is_flag=True,
              help="Sweep the full grid (default when --levels is not given).")
@click.option("--levels", default=None,
              help="Comma-separated concurrency levels, e.g. 50,100,250.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--org1-url", default=_ORG1, show_default=True)
@click.option("--org2-url", default=_ORG2, show_default=True)
@click.option("--timeout", type=float, default=30.0, show_default=True)
@click.option("--repeats", type=int, default=1, show_default=True,
              help="Repeat the whole sweep, pooling samples per cell.")
def sweep(all_levels: bool, levels: str, out_dir: str, org1_url: str,
          org2_url: str, timeout: float, repeats: int):
    """Bench all eight functions across concurrency levels."""
    del all_levels  # --all is the default; kept as an explicit spelling
    chosen = LEVELS if not levels else tuple(int(x) for x in levels.split(","))
    harness = LoadHarness(org1_url, org2_url, timeout_s=timeout)
    for _ in range(repeats):
        for round_ in harness.sweep(chosen, out_dir=out_dir):
            click.echo(_summary(round_))


@main.command()
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True))
@click.option("--csv", "csv_path", required=True, type=click.Path())
def report(in_dir: str, csv_path: str):
    """Aggregate saved rounds into error/latency/throughput CSV sheets."""
    table = aggregate(load_rounds(in_dir))
    emit_csv(table, csv_path)
    stem = Path(csv_path).with_suffix("")
    click.echo(f"wrote {csv_path}, {stem}_latency.csv, {stem}_throughput.csv")
    header = ["concurrency"] + [f.replace("Proposal", "Prop")[:14] for f in FUNCTIONS]
    click.echo("error % grid:")
    click.echo("  ".join(f"{h:>14}" for h in header))
    for level in sorted({k[1] for k in table}):
        row = [str(level)]
        for function in FUNCTIONS:
            cell = table.get((function, level))
            row.append(f"{cell['error_percent']:.2f}" if cell else "-")
        click.echo("  ".join(f"{c:>14}" for c in row))


if __name__ == "__main__":
    main()
