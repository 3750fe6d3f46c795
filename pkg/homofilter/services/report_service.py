"""Writes study outputs: error tables, fits, manifest, plot and filter traces."""

import hashlib
import json
import logging
import platform
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pydantic
import scipy

from homofilter.config import settings
from homofilter.models.experiment import ExperimentConfig
from homofilter.models.reports import ConvergenceReport, DualCheckReport
from homofilter.services.filter_service import FilterRun, write_filter_trace
from homofilter.utils.csv_utils import write_csv
from homofilter.utils.json_encoder import dumps

logger = logging.getLogger(__name__)


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 over the canonical experiment document and the model file bytes."""
    digest = hashlib.sha256()
    digest.update(json.dumps(cfg.model_dump(mode="json"), sort_keys=True).encode("utf-8"))
    try:
        digest.update(cfg.model_path.read_bytes())
    except OSError:
        pass
    return digest.hexdigest()


def versions() -> Dict[str, str]:
    return {
        "homofilter": settings.APP_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pydantic": pydantic.VERSION,
    }


class ReportService:
    """Emits the files of a convergence study or a dual check into a directory."""

    def __init__(self, output_dir: Optional[str] = None):
        self.output_dir = Path(output_dir or settings.OUTPUT_DIR)

    def _directory(self, directory: Optional[Path]) -> Path:
        path = Path(directory) if directory is not None else self.output_dir
        path.mkdir(parents=True, exist_ok=True)
        return path

    def emit_report(
            self,
            report: ConvergenceReport,
            cfg: ExperimentConfig,
            directory: Optional[Path] = None,
            traces: Sequence[Tuple[float, FilterRun, FilterRun]] = (),
    ) -> List[Path]:
        """errors.csv, summary.csv, fit.json, manifest.json, plot.svg and traces."""
        out = self._directory(directory)
        written = [
            self._write_errors(report, out / "errors.csv"),
            self._write_summary(report, out / "summary.csv"),
            self._write_json(out / "fit.json", self._fit_document(report)),
            self._write_json(out / "manifest.json", self._manifest(report, cfg)),
        ]
        if cfg.plot and report.per_epsilon:
            plot = self._write_plot(report, out / "plot.svg")
            if plot is not None:
                written.append(plot)
        for epsilon, full, reduced in traces:
            written.append(write_filter_trace(full, out / "traces" / f"full_eps{epsilon:g}.csv"))
            written.append(write_filter_trace(reduced, out / "traces" / f"reduced_eps{epsilon:g}.csv"))
        logger.info(f"Report written to {out} ({len(written)} files{', partial' if report.partial else ''})")
        return written

    def emit_dual_check(self, report: DualCheckReport, directory: Optional[Path] = None) -> Path:
        out = self._directory(directory)
        return self._write_json(out / "dual_check.json", report.model_dump(mode="json"))

    @staticmethod
    def _write_errors(report: ConvergenceReport, path: Path) -> Path:
        rows = (
            [row.epsilon, row.phi_id, row.mean_err, row.stderr, row.metric_d_mean]
            for row in report.rows
        )
        return write_csv(path, ["epsilon", "phi_id", "mean_err", "stderr", "metric_d_mean"], rows)

    @staticmethod
    def _write_summary(report: ConvergenceReport, path: Path) -> Path:
        header = [
            "epsilon", "mean_err", "stderr", "metric_d_mean", "metric_d_stderr",
            f"moment_p{report.error_moment:g}", "rho_mean_err",
            "inverse_rho1_full", "inverse_rho1_reduced", "replications",
        ]
        rows = []
        for s in report.per_epsilon:
            phi_rows = [r for r in report.rows if r.epsilon == s.epsilon]
            rows.append([
                s.epsilon, s.mean_err, s.stderr, s.metric_d_mean, s.metric_d_stderr,
                float(np.mean([r.moment_p for r in phi_rows])) if phi_rows else float("nan"),
                float(np.mean([r.rho_mean_err for r in phi_rows])) if phi_rows else float("nan"),
                s.inverse_rho1_full, s.inverse_rho1_reduced, s.replications,
            ])
        return write_csv(path, header, rows)

    @staticmethod
    def _fit_document(report: ConvergenceReport) -> Dict[str, Any]:
        return {
            "fit": report.fit,
            "metric_fit": report.metric_fit,
            "phi_fits": {str(k): v for k, v in report.phi_fits.items()},
            "fit_refused": report.fit_refused,
            "bias_budget": report.bias_budget,
            "acceptance": report.acceptance,
        }

    @staticmethod
    def _manifest(report: ConvergenceReport, cfg: ExperimentConfig) -> Dict[str, Any]:
        return {
            "config_hash": report.config_hash,
            "seed": report.seed,
            "streams": "SeedSequence(seed, spawn_key=(replication, purpose, sub)); "
                       "purposes path, full, reduced",
            "epsilons": cfg.epsilons,
            "replications": cfg.replications,
            "particles": cfg.particles,
            "n_steps": cfg.n_steps,
            "versions": versions(),
            "partial": report.partial,
            "failures": report.failures,
        }

    @staticmethod
    def _write_json(path: Path, document: Any) -> Path:
        try:
            path.write_text(dumps(document))
        except OSError as e:
            raise OSError(f"failed writing {path}: {e}") from e
        return path

    @staticmethod
    def _write_plot(report: ConvergenceReport, path: Path) -> Optional[Path]:
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            logger.warning("matplotlib is not installed; skipping plot.svg")
            return None

        plt.rcParams["svg.hashsalt"] = "homofilter"
        eps = np.array([s.epsilon for s in report.per_epsilon])
        err = np.array([s.mean_err for s in report.per_epsilon])
        se = np.array([s.stderr for s in report.per_epsilon])
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.errorbar(eps, err, yerr=se, fmt="o", capsize=3, label="mean paired error")
        if report.fit is not None:
            grid = np.geomspace(eps.min(), eps.max(), 50)
            ax.plot(grid, np.exp(report.fit.intercept) * grid ** report.fit.slope,
                    label=f"slope {report.fit.slope:.2f}")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("epsilon")
        ax.set_ylabel("E|pi_full(phi) - pi_reduced(phi)|")
        ax.legend()
        fig.tight_layout()
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
        return path
