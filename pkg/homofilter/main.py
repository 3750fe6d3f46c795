"""Command-line interface for homofilter."""

import logging
import sys
from pathlib import Path
from typing import Optional

import typer

from homofilter.config import settings
from homofilter.models.reports import ErrorResponse
from homofilter.services.orchestration.factory import create_study_orchestrator
from homofilter.utils.json_encoder import dumps

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)

app = typer.Typer(
    name=settings.APP_NAME,
    help="Homogenized filtering lab: full vs reduced filters of a multiscale, correlated model.",
    no_args_is_help=True,
    add_completion=False,
)

ConfigOption = typer.Option(..., "--config", "-c", help="Experiment JSON file")
WorkersOption = typer.Option(None, "--workers", "-w", help="Worker threads (fallback HOMOFILTER_WORKERS)")
OutOption = typer.Option(None, "--out", "-o", help="Output directory")


def _finish(result) -> None:
    """Print the result as JSON; errors go to stderr with their exit code."""
    if isinstance(result, ErrorResponse):
        typer.echo(dumps(result), err=True, nl=False)
        raise typer.Exit(code=result.exit_code)
    typer.echo(dumps(result), nl=False)


@app.command()
def run(
        config: Path = ConfigOption,
        seed: Optional[int] = typer.Option(None, "--seed", "-s", help="Override the experiment seed"),
        workers: Optional[int] = WorkersOption,
        out: Optional[Path] = OutOption,
):
    """Run the epsilon sweep and write errors.csv, fit.json, manifest.json and plot.svg."""
    orchestrator = create_study_orchestrator()
    _finish(orchestrator.run_study(config, seed=seed, workers=workers, out=out))


@app.command("check-model")
def check_model(config: Path = ConfigOption):
    """Validate the model and spot-check recurrence, ellipticity and boundedness."""
    orchestrator = create_study_orchestrator()
    _finish(orchestrator.check_model(config))


@app.command()
def homogenize(
        config: Path = ConfigOption,
        workers: Optional[int] = WorkersOption,
        out: Optional[Path] = OutOption,
):
    """Average the slow coefficients and persist the lattice cache."""
    orchestrator = create_study_orchestrator()
    _finish(orchestrator.homogenize(config, workers=workers, out=out))


@app.command("dual-check")
def dual_check(
        config: Path = ConfigOption,
        workers: Optional[int] = WorkersOption,
        out: Optional[Path] = OutOption,
):
    """Check the filter/dual pairing, boundary influence and corrector scaling."""
    orchestrator = create_study_orchestrator()
    _finish(orchestrator.dual_check(config, workers=workers, out=out))


def cli() -> None:
    """Console-script entry point."""
    try:
        app()
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        sys.exit(130)


if __name__ == "__main__":
    cli()
