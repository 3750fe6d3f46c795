import logging

logger = logging.getLogger(__name__)


class ReportStage:
    """Stage for writing the report files."""

    def __init__(self, report_service):
        self.report_service = report_service

    def execute(self, context):
        """Execute the report stage."""
        context.start_stage("report")

        written = self.report_service.emit_report(
            context.report,
            context.cfg,
            context.out_dir,
            traces=context.traces,
        )
        context.metadata["written"] = [str(p) for p in written]

        context.complete_stage("report", written)
        return written
