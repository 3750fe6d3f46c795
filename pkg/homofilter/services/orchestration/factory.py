from typing import Optional

from homofilter.services.report_service import ReportService

from homofilter.services.stages.model_loading_stage import ModelLoadingStage
from homofilter.services.stages.homogenization_stage import HomogenizationStage
from homofilter.services.stages.replication_stage import ReplicationStage
from homofilter.services.stages.bias_budget_stage import BiasBudgetStage
from homofilter.services.stages.fit_stage import FitStage
from homofilter.services.stages.report_stage import ReportStage
from homofilter.services.stages.dual_check_stage import DualCheckStage
from homofilter.services.orchestration.orchestrator import StudyOrchestrator


def create_study_orchestrator(output_dir: Optional[str] = None) -> StudyOrchestrator:
    """Create and return a configured study orchestrator."""
    report_service = ReportService(output_dir)

    return StudyOrchestrator(
        model_loading_stage=ModelLoadingStage(),
        homogenization_stage=HomogenizationStage(),
        cache_stage=HomogenizationStage(persist=True),
        replication_stage=ReplicationStage(),
        bias_budget_stage=BiasBudgetStage(),
        fit_stage=FitStage(),
        report_stage=ReportStage(report_service),
        dual_check_stage=DualCheckStage(report_service),
    )
