import logging

from homofilter.services.study_service import evaluate_acceptance, fit_report

logger = logging.getLogger(__name__)


class FitStage:
    """Stage for the log-log fits and the optional acceptance gate."""

    def execute(self, context):
        """Execute the fit stage."""
        context.start_stage("fit")
        report = fit_report(context.report)

        gate = context.cfg.acceptance
        if gate is not None:
            report.acceptance = evaluate_acceptance(report, gate)
            if report.acceptance.passed:
                logger.info("Acceptance gate passed")
            else:
                logger.warning(f"Acceptance gate failed: {'; '.join(report.acceptance.reasons)}")

        context.complete_stage("fit", report.acceptance)
        return report.acceptance
