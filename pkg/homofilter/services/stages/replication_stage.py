import logging

from homofilter.exceptions import FitError
from homofilter.models.reports import ConvergenceReport
from homofilter.services.report_service import config_hash
from homofilter.services.study_service import aggregate_epsilon, run_replications, study_grid

logger = logging.getLogger(__name__)


class ReplicationStage:
    """Stage for running the paired replications at every epsilon of the sweep."""

    def execute(self, context):
        """Execute the replication stage."""
        context.start_stage("replications")
        cfg = context.cfg
        grid = study_grid(cfg)
        report = ConvergenceReport(
            seed=cfg.seed,
            config_hash=config_hash(cfg),
            error_moment=cfg.error_moment,
        )

        for epsilon in cfg.epsilons:
            model = context.model.with_epsilon(epsilon)
            logger.info(
                f"epsilon={epsilon:g}: {cfg.replications} replications, {cfg.particles} particles, "
                f"{grid.n_steps} steps x {grid.fast_substeps(epsilon)} fast substeps"
            )
            results, failures = run_replications(model, context.homog, cfg, grid, context.workers)
            for failure in failures:
                context.add_error("replications", RuntimeError(
                    f"epsilon={failure.epsilon:g} replication {failure.replication}: {failure.error.message}"
                ))
            report.failures.extend(failures)
            try:
                rows, summary = aggregate_epsilon(epsilon, results, cfg.error_moment)
            except FitError as e:
                logger.error(f"Skipping epsilon={epsilon:g}: {e.message}")
                continue
            report.rows.extend(rows)
            report.per_epsilon.append(summary)
            if cfg.traces:
                kept = next((r.runs for r in results if r.runs is not None), None)
                if kept is not None:
                    context.traces.append((epsilon, kept[0], kept[1]))
            logger.info(f"epsilon={epsilon:g}: mean error {summary.mean_err:.4g} +- {summary.stderr:.2g}")

        context.report = report
        result = {"epsilons": len(report.per_epsilon), "failures": len(report.failures)}
        context.complete_stage("replications", result)
        return result
