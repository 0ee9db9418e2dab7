import functools
import logging
import sys
from pathlib import Path

import click

from . import exceptions, serialization
from .analysis import CategoryCounts
from .harness import analyze_table, blocklist_table, run_experiment, scan_rows
from .references import CELL_FIELDS, compare_to_reference

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_COMPARISON_FAILED = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3

USAGE_ERRORS = (
    exceptions.ConfigError,
    exceptions.InvalidOptionsError,
    exceptions.InvalidAdversaryError,
    exceptions.UnknownReferenceTableError,
)


def _handle_errors(command):
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except USAGE_ERRORS as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_USAGE)
        except exceptions.ModeKaczmarzError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_RUNTIME)

    return wrapper


def _report(report, output: Path | None) -> None:
    if output is not None:
        serialization.write_json(output, report.as_dict())
    for cell in report.cells:
        flag = "ok  " if cell.passed else "FAIL"
        actual = "no data" if cell.actual is None else f"{cell.actual:.6g}"
        click.echo(f"{flag} {report.table} {cell.row:<14} {cell.column:<8} expected {cell.expected:.6g} got {actual}")
    click.echo(f"{report.table}: {'PASS' if report.passed else 'FAIL'} ({len(report.failures)} failing cell(s))")


def _finish(reports) -> None:
    if any(not r.passed for r in reports):
        sys.exit(EXIT_COMPARISON_FAILED)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.option("-q", "--quiet", is_flag=True, help="Warnings and errors only.")
@click.version_option(package_name="modekaczmarz", message="%(prog)s %(version)s")
def main(verbose: bool, quiet: bool) -> None:
    """Mode-aggregated distributed randomized Kaczmarz: solve, analyze, reproduce."""

    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--seed", type=int, help="Override the master seed.")
@click.option("--trials", type=click.IntRange(min=1), help="Override the number of trials per sweep point.")
@click.option("--output", type=click.Path(file_okay=False, path_type=Path), help="Override the output directory.")
@click.option("--threads", type=int, help="Trial-level worker count (joblib n_jobs).")
@_handle_errors
def solve(config: Path, seed, trials, output, threads) -> None:
    """Run the experiment described by CONFIG (YAML)."""

    from .config import load_config

    cfg = load_config(config).with_overrides(seed=seed, trials=trials, output=output, n_jobs=threads)
    result = run_experiment(cfg)
    click.echo(f"{len(result.outcomes)} trial(s), {result.failed} failed -> {result.output}")
    if result.comparison is not None:
        _report(result.comparison, None)
        _finish([result.comparison])


@main.command()
@click.option("--table", "tables", multiple=True, type=click.Choice(["table1", "table4", "table5"]), default=("table1", "table4", "table5"))
@click.option("--output", type=click.Path(file_okay=False, path_type=Path), default=Path("analysis"), show_default=True)
@click.option("--digits", type=click.IntRange(min=1), default=12, show_default=True, help="Significant digits of exact values.")
@click.option("--compare/--no-compare", default=False, help="Compare against the stored tables.")
@_handle_errors
def analyze(tables, output: Path, digits: int, compare: bool) -> None:
    """Write closed-form probability and constant tables as cell CSVs."""

    reports = []
    for table in tables:
        cells = analyze_table(table, digits)
        path = serialization.write_csv(output / f"{table}.csv", (*CELL_FIELDS, "exact"), cells)
        click.echo(f"{table}: {len(cells)} cell(s) -> {path}")
        if compare:
            report = compare_to_reference(cells, table)
            _report(report, output / f"{table}.comparison.json")
            reports.append(report)
    _finish(reports)


@main.command("blocklist-mc")
@click.option("--sizes", default="3,2", show_default=True, help="Workers per category, reliable first.")
@click.option("--n", "n", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--S", "S_values", type=click.IntRange(min=1), multiple=True, default=(5, 10, 50, 100), show_default=True)
@click.option("--trials", type=click.IntRange(min=1), default=10_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--output", type=click.Path(file_okay=False, path_type=Path), default=Path("blocklist"), show_default=True)
@click.option("--compare/--no-compare", default=False, help="Compare against table3.")
@_handle_errors
def blocklist_mc(sizes: str, n: int, S_values, trials: int, seed: int, threads: int, output: Path, compare: bool) -> None:
    """Monte Carlo block-list membership probabilities per update cycle S."""

    try:
        parsed = tuple(int(s) for s in sizes.split(","))
    except ValueError as e:
        raise click.BadParameter(f"expected comma-separated integers, got {sizes!r}", param_hint="--sizes") from e
    rows, cells = blocklist_table(parsed, n, S_values, trials, seed, threads)
    serialization.write_csv(output / "blocklist.csv", ("S", "category", "estimate", "std_err", "conditional", "trials"), rows)
    serialization.write_csv(output / "table3.csv", CELL_FIELDS, cells)
    for row in rows:
        click.echo(f"S={row['S']:<5} category {row['category']}: {row['estimate']} (se {row['std_err']})")
    if compare:
        report = compare_to_reference(cells, "table3")
        _report(report, output / "table3.comparison.json")
        _finish([report])


@main.command()
@click.argument("results", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("table")
@click.option("--row", "rows", multiple=True, help="Restrict to these reference rows.")
@click.option("--output", type=click.Path(dir_okay=False, path_type=Path), help="Write the JSON report here.")
@_handle_errors
def compare(results: Path, table: str, rows, output) -> None:
    """Compare a (row, column, value) CSV against a stored reference TABLE."""

    report = compare_to_reference(results, table, rows=list(rows) or None)
    _report(report, output)
    _finish([report])


@main.command("scan-d0")
@click.option("--N", "N", type=click.IntRange(min=1), required=True)
@click.option("--n", "n", type=click.IntRange(min=1), required=True)
@click.option("--k", type=click.IntRange(min=0), required=True)
@click.option("--p", type=str, required=True, help="Adversarial rate, e.g. 0.6 or 3/5.")
@click.option("--d1", type=click.IntRange(min=1), required=True)
@click.option("--sigma", type=float, required=True, help="Smallest singular value of the row-normalized matrix.")
@click.option("--d0-min", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--d0-max", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--output", type=click.Path(dir_okay=False, path_type=Path))
@_handle_errors
def scan_d0(N: int, n: int, k: int, p: str, d1: int, sigma: float, d0_min: int, d0_max: int, output) -> None:
    """Contraction factor alpha(d0) over a range of rows per iteration."""

    counts = CategoryCounts.homogeneous(N, n, k, p)
    rows = scan_rows(counts, d1, sigma, range(d0_min, min(d0_max, d1) + 1))
    if output is not None:
        serialization.write_csv(output, tuple(rows[0]), rows)
    for row in rows:
        marker = " <- best" if row["best"] else ""
        click.echo(f"d0={row['d0']:<3} Q={row['Q']:<16} alpha={row['alpha']:.10f} slope={row['slope']:+.3e}{marker}")
    if rows[0]["continuous_minimizer"] is not None:
        click.echo(f"continuous minimizer d0* = {rows[0]['continuous_minimizer']:.6f}")


if __name__ == "__main__":  # pragma: no cover
    main()
