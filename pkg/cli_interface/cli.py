#!/usr/bin/env python3
"""
Multi-task Regularization Networks - Command Line Interface
===========================================================

Loads a JSON experiment config, dispatches the verification suite, rate
experiments and single solves, and writes CSV/JSON reports.

Exit codes: 0 success, 1 check or bound failure, 2 config or input error,
3 violated theorem hypothesis (non-universal kernel, kappa < 1, delta too large).
"""

import sys
from pathlib import Path
from typing import Callable, Optional

import click
import numpy as np
import structlog
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from main.config_manager import ExperimentConfig, RuntimeSettings, build_kernel, build_space, load_config, spec_hash
from main.exceptions import ArgumentError, HypothesisViolation, MultitaskError, NumericalError
from main.kernels import check_universal_on_discrete, kappa_estimate, matrix_norm_bound_report
from main.rates import approximation_sweep, run_rate_experiment
from main.reporting import (
    write_approximation_sweep,
    write_eigenvalues,
    write_json,
    write_predictions,
    write_rate_report,
)
from main.rkhs import model_to_dict, solve_regularization_network
from main.spectral import eigendecompose
from main.synth import read_dataset_csv
from main.verification import run_verification
from utils.logging_setup import setup_logging

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INPUT = 2
EXIT_HYPOTHESIS = 3


class RegularizationNetworkCLI:
    """Runs one subcommand against a loaded config and reports an exit status."""

    def __init__(self, config_path: Path, out_dir: Path, seed: Optional[int], quiet: bool, workers: int):
        self.config_path = config_path
        self.out_dir = out_dir
        self.seed = seed
        self.quiet = quiet
        self.workers = workers
        self.console = Console()

    def _load(self) -> ExperimentConfig:
        return load_config(self.config_path).with_seed(self.seed)

    def _echo(self, message: str) -> None:
        if not self.quiet:
            self.console.print(message)

    def guarded(self, action: Callable[[], int]) -> int:
        """Run ``action`` and translate library errors into exit codes."""
        try:
            return action()
        except ValidationError as exc:
            click.echo(f"config error: {exc}", err=True)
            return EXIT_INPUT
        except HypothesisViolation as exc:
            click.echo(f"hypothesis violated ({exc.hypothesis}): {exc}", err=True)
            return EXIT_HYPOTHESIS
        except NumericalError as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            return EXIT_FAILED
        except MultitaskError as exc:
            click.echo(f"input error: {exc}", err=True)
            return EXIT_INPUT

    # -- subcommands -------------------------------------------------------

    def verify(self) -> int:
        config = self._load()
        report = run_verification(config)
        path = write_json(self.out_dir / "verify_report.json", report.to_dict())

        if not self.quiet:
            table = Table(title="Identity checks")
            table.add_column("Check", style="cyan")
            table.add_column("Status")
            table.add_column("Discrepancy", justify="right")
            table.add_column("Tolerance", justify="right")
            for check in report.checks:
                status = "[green]PASS[/green]" if check.passed else "[red]FAIL[/red]"
                table.add_row(check.name, status, f"{check.discrepancy:.3e}", f"{check.tolerance:.1e}")
            self.console.print(table)
        self._echo(f"report written to {path}")
        return EXIT_OK if report.passed else EXIT_FAILED

    def rate(self) -> int:
        config = self._load().rate_experiment()
        report = run_rate_experiment(config, workers=self.workers)
        paths = write_rate_report(report, self.out_dir)

        if not self.quiet:
            table = Table(title="Rate experiment")
            for column in ("n", "m", "lambda", "median err_rho", "q err_rho", "bound_rho", "viol rho", "viol sampling"):
                table.add_column(column, justify="right")
            for summary in report.summaries:
                table.add_row(
                    str(summary.n),
                    str(summary.m),
                    f"{summary.lam:.4g}",
                    f"{summary.err_rho.median:.4g}",
                    f"{summary.err_rho.upper:.4g}",
                    f"{summary.bound_rho:.4g}",
                    f"{summary.violation_rho:.3f}",
                    f"{summary.violation_sampling:.3f}",
                )
            self.console.print(table)
            for slope in report.slopes:
                if slope.statistic == "upper":
                    self._echo(f"slope in {slope.axis} [{slope.key}]: {slope.slope:.4f} (bound {slope.bound_slope:.4f})")
        self._echo(f"reports written to {', '.join(str(path) for path in paths)}")
        return EXIT_OK if report.passed else EXIT_FAILED

    def solve(self) -> int:
        config = self._load()
        section = config.solve
        space = build_space(config.space)
        kernel = build_kernel(config.kernel, config.m, space)
        datasets = read_dataset_csv(config.dataset_path(), space, bound=section.bound)
        if section.trial not in datasets:
            raise ArgumentError(f"dataset has no trial {section.trial}; found {sorted(datasets)}")
        sample = datasets[section.trial]

        model = solve_regularization_network(kernel, sample, section.lam, space=space, method=section.method)
        write_json(self.out_dir / "model.json", model_to_dict(model, spec_hash(config.kernel, config.m), space))

        nodes = np.arange(space.size) if section.predict_nodes is None else np.array(section.predict_nodes, dtype=int)
        if np.any(nodes < 0) or np.any(nodes >= space.size):
            raise ArgumentError("prediction node index outside the space")
        values = model.evaluate_many(space.nodes[nodes]) if len(nodes) else np.zeros((0, kernel.m))
        path = write_predictions(nodes, values, self.out_dir / "predictions.csv")
        self._echo(f"solved n={sample.n}, m={kernel.m}, lambda={section.lam}; predictions written to {path}")
        return EXIT_OK

    def spectral(self) -> int:
        config = self._load()
        space = build_space(config.space)
        kernel = build_kernel(config.kernel, config.m, space)
        dec = eigendecompose(kernel, space)
        norms = matrix_norm_bound_report(kernel, space.nodes)
        universality = check_universal_on_discrete(kernel, space)
        write_eigenvalues(dec, self.out_dir / "eigenvalues.csv")
        write_json(
            self.out_dir / "spectral_summary.json",
            {
                "nodes": space.size,
                "m": kernel.m,
                "rank": dec.rank,
                "universal": universality.universal,
                "min_gram_eigenvalue": universality.min_eigenvalue,
                "kappa": kappa_estimate(kernel, space.nodes),
                "max_block_norm": norms.max_norm,
                "bound_m_kappa": norms.bound_m_kappa,
                "bound_m_kappa_squared": norms.bound_m_kappa_squared,
                "m_kappa_holds": norms.m_kappa_holds,
                "m_kappa_squared_holds": norms.m_kappa_squared_holds,
            },
        )
        self._echo(f"{dec.eigenvalues.size} eigenvalues, rank {dec.rank}, top {dec.eigenvalues[0]:.6g}")
        return EXIT_OK

    def approx(self) -> int:
        config = self._load()
        section = config.approx
        space = build_space(config.space)
        kernel = build_kernel(config.kernel, config.m, space)
        dec = eigendecompose(kernel, space)
        rows = approximation_sweep(dec, section.r_values, section.lambdas, section.targets, config.seed, section.target_modes)
        path = write_approximation_sweep(rows, self.out_dir / "approx_sweep.csv")
        violations = sum(row.violated for row in rows)
        self._echo(f"{len(rows)} sweep rows, {violations} violations; written to {path}")
        return EXIT_OK if violations == 0 else EXIT_FAILED


def _command(name: str, help_text: str):
    """Subcommand sharing the config/out/seed/quiet/workers options."""

    @click.option("--config", "config_path", required=True, type=click.Path(path_type=Path), help="JSON config file")
    @click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None, help="Output directory")
    @click.option("--seed", type=click.IntRange(min=0, max=2 ** 64 - 1), default=None, help="Master seed override")
    @click.option("--quiet", is_flag=True, help="Only report warnings and errors")
    @click.option("--workers", type=click.IntRange(min=1), default=None, help="Threads for rate-experiment trials")
    @click.pass_context
    def command(ctx, config_path, out_dir, seed, quiet, workers):
        settings: RuntimeSettings = ctx.obj["settings"]
        setup_logging(settings.log_level, quiet=quiet, log_file=settings.log_file)
        runner = RegularizationNetworkCLI(
            config_path=config_path,
            out_dir=out_dir if out_dir is not None else settings.output_dir,
            seed=seed,
            quiet=quiet,
            workers=workers if workers is not None else settings.workers,
        )
        sys.exit(runner.guarded(getattr(runner, name)))

    return cli.command(name=name, help=help_text)(command)


@click.group()
@click.pass_context
def cli(ctx):
    """Multi-task regularization networks: identity checks and learning-rate experiments"""
    ctx.ensure_object(dict)
    ctx.obj["settings"] = RuntimeSettings()


_command("verify", "Run every exact identity check and write verify_report.json")
_command("rate", "Run the Monte Carlo rate experiment and write the trial CSV and summary JSON")
_command("solve", "Fit a regularization network to a dataset CSV and predict at the space nodes")
_command("spectral", "Dump the eigenvalues of the integral operator")
_command("approx", "Sweep the approximation error against its bound")


def main():
    cli()


if __name__ == "__main__":
    main()
