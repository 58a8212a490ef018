"""Command line interface for agscl."""
import functools
import logging
import pathlib

import click

from . import __version__, runner
from .checkpoint import load_checkpoint
from .config import load_config
from .exceptions import CheckpointError, ConfigurationError, DataError, NumericError

secho_inprog = functools.partial(click.secho, nl=False, fg="yellow")
secho_complete = functools.partial(click.secho, fg="blue")


def _exit_codes(f):
    """Turn library errors into a red message and a documented exit code."""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except ConfigurationError as e:
            code, err = 1, e
        except (DataError, CheckpointError, OSError) as e:
            code, err = 2, e
        except NumericError as e:
            code, err = 3, e
        click.secho(f"\nError: {err}", fg="red", err=True)
        click.get_current_context().exit(code)

    return wrapper


def _parse_fractions(ctx, param, value):
    if value is None:
        return None
    try:
        fractions = [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter("expected comma-separated numbers") from None
    if not fractions or fractions[0] != 0.0:
        raise click.BadParameter("fractions must start at 0")
    if fractions != sorted(fractions) or fractions[-1] > 1:
        raise click.BadParameter("fractions must ascend within [0, 1]")
    return fractions


def _finished(report: runner.RunReport, where: pathlib.Path) -> None:
    accuracy = report.final_average_accuracy
    shown = "n/a" if accuracy is None else f"{accuracy:.4f}"
    secho_complete(f" ---> {where} (final average accuracy {shown})")


@click.group(context_settings={"auto_envvar_prefix": "AGSCL"})
@click.version_option(version=__version__)
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default="WARNING",
    show_default=True,
    help="Verbosity of library logging.",
)
def main(log_level: str) -> None:
    """Agscl learns task streams without forgetting by sparsifying nodes."""
    logging.basicConfig(
        level=log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.argument(
    "config_path",
    metavar="CONFIG",
    type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path),
)
@click.option(
    "--output-root",
    envvar="AGSCL_OUTPUT_ROOT",
    type=click.Path(file_okay=False, writable=True, path_type=pathlib.Path),
    help="Directory for results. Overrides output_dir from the config.",
)
@click.option(
    "--seed",
    "seeds",
    multiple=True,
    type=int,
    help="Seed to run; may be repeated. Defaults to the seeds in the config.",
)
@click.option(
    "--rho",
    "rhos",
    multiple=True,
    type=click.FloatRange(0, 1, min_open=True),
    help="Run a sweep over these re-initialization probabilities.",
)
@click.option(
    "--no-ledger", is_flag=True, help="Do not record the runs in ledger.db."
)
@_exit_codes
def run(config_path, output_root, seeds, rhos, no_ledger) -> None:
    """Run an experiment described by a YAML CONFIG file."""
    config = load_config(config_path)
    root = output_root or config.output_dir
    reports = []
    for seed in seeds or config.seeds:
        if rhos:
            secho_inprog(f"Sweeping rho for {config.name}, seed {seed}...")
            swept = runner.run_rho_sweep(config, rhos, seed, output_root=root)
            for report in swept:
                _finished(report, runner.run_directory(root, report.name, seed))
            reports.extend(swept)
            continue

        secho_inprog(f"Running {config.name} ({config.method}), seed {seed}...")
        where = runner.run_directory(root, config.name, seed)
        if config.method == "finetune":
            report = runner.run_finetune(config, seed, output_dir=where)
        else:
            report = runner.run_agscl(config, seed, output_dir=where)
        _finished(report, where)
        reports.append(report)

    if not no_ledger:
        from agscl.db.actions import ledger_session, record_report

        LedgerSession = ledger_session(pathlib.Path(root) / "ledger.db")
        with LedgerSession() as session:
            for report in reports:
                record_report(session, report)
            session.commit()


@main.command()
@click.argument(
    "checkpoint",
    type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path),
)
@click.option(
    "-o",
    "--output-dir",
    type=click.Path(file_okay=False, writable=True, path_type=pathlib.Path),
    help="Where to write results. Defaults to the checkpoint's run directory.",
)
@_exit_codes
def resume(checkpoint, output_dir) -> None:
    """Continue a run from a CHECKPOINT written at a task boundary."""
    secho_inprog(f"Resuming from {checkpoint}...")
    output_dir = output_dir or runner.checkpoint_run_directory(checkpoint)
    report = runner.resume_run(checkpoint, output_dir=output_dir)
    _finished(report, output_dir)


@main.command()
@click.argument(
    "checkpoint",
    type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path),
)
@click.option(
    "--fractions",
    callback=_parse_fractions,
    help="Comma-separated pruning fractions, starting at 0.",
)
@click.option(
    "--data-dir",
    type=click.Path(exists=True, file_okay=False, path_type=pathlib.Path),
    help="Directory with the IDX files, if they have moved since the run.",
)
@click.option(
    "-o",
    "--output",
    type=click.Path(dir_okay=False, writable=True, path_type=pathlib.Path),
    help="CSV file to write. Prints the curves when omitted.",
)
@_exit_codes
def aopc(checkpoint, fractions, data_dir, output) -> None:
    """Prune nodes of a CHECKPOINT by importance and report accuracy."""
    curves = runner.aopc_from_checkpoint(checkpoint, fractions, data_dir)
    frame = runner.aopc_frame(curves)
    if output is None:
        click.echo(frame.to_string(index=False))
        for curve in curves:
            click.echo(f"{curve.mode}: area {curve.area:.4f}")
        return
    output.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(output, index=False)
    secho_complete(f"Wrote {output}")


@main.command()
@click.argument(
    "checkpoint",
    type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path),
)
@click.option(
    "-o",
    "--output-dir",
    type=click.Path(file_okay=False, writable=True, path_type=pathlib.Path),
    help="Where to write results. Defaults to the checkpoint's run directory.",
)
@_exit_codes
def report(checkpoint, output_dir) -> None:
    """Re-emit result files from a CHECKPOINT."""
    state = load_checkpoint(checkpoint)
    output_dir = output_dir or runner.checkpoint_run_directory(checkpoint)
    secho_inprog(f"Writing results of {checkpoint}...")
    runner.emit_results(runner.report_from_state(state), output_dir)
    secho_complete(f" ---> {output_dir}")


@main.command()
@click.argument("name")
@click.option(
    "--output-root",
    envvar="AGSCL_OUTPUT_ROOT",
    default="results",
    show_default=True,
    type=click.Path(file_okay=False, path_type=pathlib.Path),
    help="Directory holding ledger.db.",
)
@_exit_codes
def summarize(name, output_root) -> None:
    """Summarize every recorded seed of the experiment NAME."""
    from agscl.db.actions import ledger_session, seed_summary

    ledger = output_root / "ledger.db"
    if not ledger.exists():
        raise DataError(f"No ledger at {ledger}")
    with ledger_session(ledger)() as session:
        summary = seed_summary(session, name)
    if summary.empty:
        click.secho(f"No runs recorded for {name}", fg="yellow")
        return
    click.echo(summary.to_string(index=False))
