import pytest
from unittest.mock import Mock

from homofilter.exceptions import ConfigError, FilterError
from homofilter.models.experiment import ExperimentConfig
from homofilter.models.reports import (
    AcceptanceResult,
    ConvergenceReport,
    DualCheckReport,
    ErrorResponse,
)
from homofilter.services.orchestration.orchestrator import StudyOrchestrator


def experiment(**changes) -> ExperimentConfig:
    doc = {"model": "model.json", "epsilons": [0.5, 0.25, 0.125], "output_dir": None}
    doc.update(changes)
    return ExperimentConfig.model_validate(doc)


class TestStudyOrchestrator:
    @pytest.fixture
    def mock_model_loading_stage(self):
        """Loading stage that installs an experiment on the context."""
        stage = Mock()

        def load(context):
            context.cfg = context.cfg or experiment(**context.metadata.get("overrides", {}))
            return Mock(flags=[])

        stage.execute.side_effect = load
        return stage

    @pytest.fixture
    def mock_replication_stage(self):
        stage = Mock()

        def replicate(context):
            context.report = ConvergenceReport(seed=context.cfg.seed, config_hash="abc")
            return context.report

        stage.execute.side_effect = replicate
        return stage

    @pytest.fixture
    def mock_stages(self):
        return {
            name: Mock()
            for name in (
                "homogenization_stage", "cache_stage", "bias_budget_stage",
                "fit_stage", "report_stage", "dual_check_stage",
            )
        }

    @pytest.fixture
    def orchestrator(self, mock_model_loading_stage, mock_replication_stage, mock_stages):
        """Create orchestrator with mock stages."""
        return StudyOrchestrator(
            model_loading_stage=mock_model_loading_stage,
            replication_stage=mock_replication_stage,
            **mock_stages,
        )

    def test_run_study_returns_report(self, orchestrator, mock_stages, tmp_path):
        # Act
        result = orchestrator.run_study("experiment.json", seed=11, workers=2, out=tmp_path)

        # Assert
        assert isinstance(result, ConvergenceReport)
        assert result.seed == 11
        mock_stages["homogenization_stage"].execute.assert_called_once()
        mock_stages["report_stage"].execute.assert_called_once()
        context = mock_stages["report_stage"].execute.call_args.args[0]
        assert context.workers == 2
        assert context.out_dir == tmp_path

    def test_config_error_maps_to_exit_code_2(self, orchestrator, mock_model_loading_stage):
        # Arrange
        mock_model_loading_stage.execute.side_effect = ConfigError("bad epsilon list", location="experiment.json")

        # Act
        result = orchestrator.run_study("experiment.json")

        # Assert
        assert isinstance(result, ErrorResponse)
        assert result.exit_code == 2
        assert result.details[0].code == "CONFIG_ERROR"
        assert result.details[0].location == "experiment.json"

    def test_numerical_abort_maps_to_exit_code_3(self, orchestrator, mock_stages):
        mock_stages["homogenization_stage"].execute.side_effect = FilterError("nan", step=4)

        result = orchestrator.run_study("experiment.json")

        assert result.exit_code == 3
        assert result.details[0].location == "step 4"

    def test_unhandled_exception_is_a_general_error(self, orchestrator, mock_stages):
        # Arrange
        mock_stages["fit_stage"].execute.side_effect = RuntimeError("Unexpected error")

        # Act
        result = orchestrator.run_study("experiment.json")

        # Assert
        assert isinstance(result, ErrorResponse)
        assert result.exit_code == 3
        assert result.details[0].message == "Unexpected error"
        assert result.run_id is not None

    def test_acceptance_failure_still_writes_report(self, orchestrator, mock_stages, mock_replication_stage):
        # Arrange
        def fit(context):
            context.report.acceptance = AcceptanceResult(passed=False, reasons=["slope 0.2 outside [0.7, 1.3]"])

        mock_stages["fit_stage"].execute.side_effect = fit

        # Act
        result = orchestrator.run_study("experiment.json")

        # Assert
        mock_stages["report_stage"].execute.assert_called_once()
        assert result.exit_code == 4
        assert "slope 0.2" in result.details[0].message

    def test_convergence_study_from_config(self, orchestrator, mock_model_loading_stage):
        cfg = experiment(seed=5)

        result = orchestrator.run_convergence_study(cfg)

        assert result.seed == 5
        context = mock_model_loading_stage.execute.call_args.args[0]
        assert context.cfg is cfg

    def test_check_model_runs_only_loading(self, orchestrator, mock_stages):
        result = orchestrator.check_model("experiment.json")

        assert result.flags == []
        mock_stages["homogenization_stage"].execute.assert_not_called()

    def test_homogenize_uses_cache_stage(self, orchestrator, mock_stages):
        mock_stages["cache_stage"].execute.return_value = {"kind": "lattice", "cache": "results/cache"}

        result = orchestrator.homogenize("experiment.json")

        assert result == {"kind": "lattice", "cache": "results/cache"}
        mock_stages["homogenization_stage"].execute.assert_not_called()

    def test_dual_check_disabled_is_config_error(self, orchestrator, mock_model_loading_stage):
        mock_model_loading_stage.execute.side_effect = lambda context: setattr(
            context, "cfg", experiment(dual={"enabled": False})
        )

        result = orchestrator.dual_check("experiment.json")

        assert result.exit_code == 2

    def test_failed_dual_check_exits_with_4(self, orchestrator, mock_stages):
        mock_stages["dual_check_stage"].execute.return_value = DualCheckReport(
            epsilon=0.25, boundary_influence={"averaged": 0.1}, boundary_tolerance=0.005
        )

        result = orchestrator.dual_check("experiment.json")

        assert result.exit_code == 4

    def test_passing_dual_check_returns_report(self, orchestrator, mock_stages):
        mock_stages["dual_check_stage"].execute.return_value = DualCheckReport(epsilon=0.25)

        result = orchestrator.dual_check("experiment.json")

        assert isinstance(result, DualCheckReport)
