import logging
from pathlib import Path
from typing import Optional, Union

from homofilter.config import settings
from homofilter.exceptions import AcceptanceGateFailure, ConfigError, HomofilterError
from homofilter.models.experiment import ExperimentConfig
from homofilter.models.reports import (
    AssumptionReport,
    ConvergenceReport,
    DualCheckReport,
    ErrorDetail,
    ErrorResponse,
)
from homofilter.services.orchestration.context import StudyContext

logger = logging.getLogger(__name__)


class StudyOrchestrator:
    """Runs the stages behind each CLI command and turns failures into error responses."""

    def __init__(
            self,
            model_loading_stage,
            homogenization_stage,
            cache_stage,
            replication_stage,
            bias_budget_stage,
            fit_stage,
            report_stage,
            dual_check_stage,
    ):
        self.model_loading_stage = model_loading_stage
        self.homogenization_stage = homogenization_stage
        self.cache_stage = cache_stage
        self.replication_stage = replication_stage
        self.bias_budget_stage = bias_budget_stage
        self.fit_stage = fit_stage
        self.report_stage = report_stage
        self.dual_check_stage = dual_check_stage

    @staticmethod
    def _context(
            command: str,
            config_path: Optional[Union[str, Path]] = None,
            cfg: Optional[ExperimentConfig] = None,
            seed: Optional[int] = None,
            workers: Optional[int] = None,
            out: Optional[Union[str, Path]] = None,
    ) -> StudyContext:
        overrides = {"seed": seed} if seed is not None else {}
        if cfg is not None and seed is not None:
            cfg = cfg.model_copy(update={"seed": seed})
        return StudyContext(
            command=command,
            config_path=Path(config_path) if config_path is not None else None,
            cfg=cfg,
            workers=settings.resolve_workers(workers),
            out_dir=Path(out) if out is not None else None,
            metadata={"overrides": overrides},
        )

    @staticmethod
    def _resolve_out(context: StudyContext) -> None:
        if context.out_dir is None:
            configured = context.cfg.resolve(context.cfg.output_dir) if context.cfg else None
            context.out_dir = configured or Path(settings.OUTPUT_DIR)

    def _run(self, context: StudyContext, pipeline):
        logger.info(f"Starting '{context.command}' run {context.run_id} with {context.workers} worker(s)")
        try:
            result = pipeline(context)
            logger.info(f"Run summary: {context.get_summary()}")
            return result
        except HomofilterError as e:
            logger.error(f"{type(e).__name__} in stage '{context.current_stage}': {e.message}")
            context.add_error(context.current_stage, e)
            logger.info(f"Run summary: {context.get_summary()}")
            return self._create_error_response(context, e)
        except Exception as e:
            logger.exception(f"Unhandled error in stage '{context.current_stage}': {str(e)}")
            context.add_error(context.current_stage, e)
            logger.info(f"Run summary: {context.get_summary()}")
            return self._create_general_error_response(context)

    def check_model(self, config_path: Union[str, Path]) -> Union[AssumptionReport, ErrorResponse]:
        """Load the model and report the assumption diagnostics."""
        context = self._context("check-model", config_path)

        def pipeline(ctx):
            return self.model_loading_stage.execute(ctx)

        return self._run(context, pipeline)

    def homogenize(
            self,
            config_path: Union[str, Path],
            workers: Optional[int] = None,
            out: Optional[Union[str, Path]] = None,
    ) -> Union[dict, ErrorResponse]:
        """Build the homogenized model and persist the lattice cache."""
        context = self._context("homogenize", config_path, workers=workers, out=out)

        def pipeline(ctx):
            self.model_loading_stage.execute(ctx)
            self._resolve_out(ctx)
            return self.cache_stage.execute(ctx)

        return self._run(context, pipeline)

    def run_convergence_study(
            self,
            cfg: ExperimentConfig,
            workers: Optional[int] = None,
            out: Optional[Union[str, Path]] = None,
    ) -> Union[ConvergenceReport, ErrorResponse]:
        """Study from an already validated experiment document."""
        context = self._context("run", cfg=cfg, workers=workers, out=out)
        return self._run(context, self._study_pipeline)

    def run_study(
            self,
            config_path: Union[str, Path],
            seed: Optional[int] = None,
            workers: Optional[int] = None,
            out: Optional[Union[str, Path]] = None,
    ) -> Union[ConvergenceReport, ErrorResponse]:
        """Study from an experiment file, with CLI overrides."""
        context = self._context("run", config_path, seed=seed, workers=workers, out=out)
        return self._run(context, self._study_pipeline)

    def _study_pipeline(self, context: StudyContext) -> ConvergenceReport:
        self.model_loading_stage.execute(context)
        self._resolve_out(context)
        self.homogenization_stage.execute(context)
        self.replication_stage.execute(context)
        logger.debug(f"Replications completed with {len(context.report.failures)} failure(s)")
        self.bias_budget_stage.execute(context)
        self.fit_stage.execute(context)
        self.report_stage.execute(context)

        report = context.report
        if report.acceptance is not None and not report.acceptance.passed:
            raise AcceptanceGateFailure(
                "acceptance gate failed: " + "; ".join(report.acceptance.reasons),
                location=str(context.out_dir),
            )
        logger.info(f"Study {context.run_id} completed{' (partial)' if report.partial else ''}")
        return report

    def dual_check(
            self,
            config_path: Union[str, Path],
            workers: Optional[int] = None,
            out: Optional[Union[str, Path]] = None,
    ) -> Union[DualCheckReport, ErrorResponse]:
        """Duality identity, boundary influence and corrector scaling at the dual epsilon."""
        context = self._context("dual-check", config_path, workers=workers, out=out)

        def pipeline(ctx):
            self.model_loading_stage.execute(ctx)
            if not ctx.cfg.dual.enabled:
                raise ConfigError(
                    "dual checks are disabled in this experiment",
                    suggestion="set dual.enabled to true",
                )
            self._resolve_out(ctx)
            self.homogenization_stage.execute(ctx)
            report = self.dual_check_stage.execute(ctx)
            if not report.passed:
                raise AcceptanceGateFailure(
                    "dual check failed; see dual_check.json",
                    location=str(ctx.out_dir),
                )
            return report

        return self._run(context, pipeline)

    def _create_error_response(self, context: StudyContext, error: HomofilterError) -> ErrorResponse:
        """Create error response for a classified failure."""
        return ErrorResponse(
            error=f"{context.command} failed in stage '{context.current_stage}'",
            details=[error.detail],
            run_id=context.run_id,
            exit_code=error.exit_code,
        )

    def _create_general_error_response(self, context: StudyContext) -> ErrorResponse:
        """Create error response for general failures."""
        error_message = "Unknown error"
        if context.errors:
            error_message = context.errors[-1].get("message", error_message)

        return ErrorResponse(
            error=f"{context.command} failed",
            details=[
                ErrorDetail(
                    code="PROCESSING_ERROR",
                    message=error_message,
                    location=context.current_stage,
                    suggestion="rerun with HOMOFILTER_LOG_LEVEL=DEBUG for details"
                )
            ],
            run_id=context.run_id,
            exit_code=3,
        )
