import json

import pytest

from homofilter.models.experiment import ExperimentConfig
from homofilter.models.reports import ConvergenceReport
from homofilter.services.orchestration.factory import create_study_orchestrator


@pytest.fixture
def cfg(configs_dir):
    """A small z-free sweep that runs every study stage."""
    return ExperimentConfig(
        model=str(configs_dir / "zfree_model.json"),
        epsilons=[0.5, 0.25, 0.125],
        replications=2,
        particles=100,
        horizon=0.2,
        dt=0.01,
        test_functions=2,
        metric_size=4,
        seed=3,
        plot=False,
        bias_budget={"enabled": False},
        dual={"enabled": False},
    )


class TestStudyPipeline:
    def test_study_writes_reports(self, cfg, tmp_path):
        # Act
        report = create_study_orchestrator().run_convergence_study(cfg, out=tmp_path)

        # Assert
        assert isinstance(report, ConvergenceReport)
        assert [s.epsilon for s in report.per_epsilon] == cfg.epsilons
        assert not report.partial
        assert report.fit is not None
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["seed"] == 3
        assert (tmp_path / "errors.csv").exists()

    def test_errors_csv_does_not_depend_on_workers(self, cfg, tmp_path):
        orchestrator = create_study_orchestrator()

        orchestrator.run_convergence_study(cfg, workers=1, out=tmp_path / "serial")
        orchestrator.run_convergence_study(cfg, workers=3, out=tmp_path / "threaded")

        serial = (tmp_path / "serial" / "errors.csv").read_bytes()
        assert serial == (tmp_path / "threaded" / "errors.csv").read_bytes()
