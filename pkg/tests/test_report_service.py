import json

import pytest

from homofilter.models.experiment import ExperimentConfig
from homofilter.models.reports import (
    ConvergenceReport,
    DualCheckReport,
    EpsilonSummary,
    ErrorRow,
)
from homofilter.services.report_service import ReportService, config_hash
from homofilter.services.study_service import fit_report

EPSILONS = [0.5, 0.25, 0.125]


@pytest.fixture
def cfg(configs_dir):
    return ExperimentConfig(model=str(configs_dir / "ou_model.json"), epsilons=EPSILONS, plot=False)


@pytest.fixture
def report():
    rows = [
        ErrorRow(
            epsilon=e, phi_id=k, mean_err=0.1 * e * k, stderr=0.01, metric_d_mean=0.05 * e,
            moment_p=0.1 * e * k, rho_mean_err=0.2 * e, replications=10,
        )
        for e in EPSILONS
        for k in (1, 2)
    ]
    per_epsilon = [
        EpsilonSummary(
            epsilon=e, mean_err=0.15 * e, stderr=0.01, metric_d_mean=0.05 * e, metric_d_stderr=0.001,
            inverse_rho1_full=1.0, inverse_rho1_reduced=1.1, replications=10,
        )
        for e in EPSILONS
    ]
    return fit_report(ConvergenceReport(seed=7, config_hash="deadbeef", rows=rows, per_epsilon=per_epsilon))


class TestReportService:
    def test_emits_expected_files(self, report, cfg, tmp_path):
        # Act
        written = ReportService().emit_report(report, cfg, tmp_path)

        # Assert
        names = sorted(p.name for p in written)
        assert names == ["errors.csv", "fit.json", "manifest.json", "summary.csv"]
        errors = (tmp_path / "errors.csv").read_text().splitlines()
        assert errors[0] == "epsilon,phi_id,mean_err,stderr,metric_d_mean"
        assert len(errors) == 1 + len(report.rows)
        summary = (tmp_path / "summary.csv").read_text().splitlines()
        assert summary[0].split(",")[5] == "moment_p1"

    def test_errors_csv_is_byte_identical_across_emits(self, report, cfg, tmp_path):
        service = ReportService()

        service.emit_report(report, cfg, tmp_path / "a")
        service.emit_report(report, cfg, tmp_path / "b")

        assert (tmp_path / "a" / "errors.csv").read_bytes() == (tmp_path / "b" / "errors.csv").read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()

    def test_manifest_records_reproduction_inputs(self, report, cfg, tmp_path):
        ReportService().emit_report(report, cfg, tmp_path)

        manifest = json.loads((tmp_path / "manifest.json").read_text())

        assert manifest["seed"] == 7
        assert manifest["config_hash"] == "deadbeef"
        assert manifest["epsilons"] == EPSILONS
        assert manifest["partial"] is False
        assert "numpy" in manifest["versions"]
        assert not any("time" in key for key in manifest)

    def test_fit_document(self, report, cfg, tmp_path):
        ReportService().emit_report(report, cfg, tmp_path)

        fit = json.loads((tmp_path / "fit.json").read_text())

        assert fit["fit"]["slope"] == pytest.approx(1.0)
        assert set(fit["phi_fits"]) == {"1", "2"}

    def test_plot_is_written_when_enabled(self, report, cfg, tmp_path):
        pytest.importorskip("matplotlib")
        plotted = cfg.model_copy(update={"plot": True})

        written = ReportService().emit_report(report, plotted, tmp_path)

        assert (tmp_path / "plot.svg") in written
        assert (tmp_path / "plot.svg").read_text().lstrip().startswith("<?xml")

    def test_dual_check_document(self, tmp_path):
        check = DualCheckReport(epsilon=0.25, boundary_influence={"averaged": 0.001}, boundary_tolerance=0.005)

        path = ReportService().emit_dual_check(check, tmp_path)

        document = json.loads(path.read_text())
        assert path.name == "dual_check.json"
        assert document["boundary_influence"] == {"averaged": 0.001}


class TestConfigHash:
    def test_hash_is_stable_and_sensitive(self, cfg):
        same = ExperimentConfig(model=cfg.model, epsilons=EPSILONS, plot=False)
        other = ExperimentConfig(model=cfg.model, epsilons=EPSILONS, plot=False, seed=1)

        assert config_hash(cfg) == config_hash(same)
        assert config_hash(cfg) != config_hash(other)
        assert len(config_hash(cfg)) == 64
