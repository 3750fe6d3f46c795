import logging

from homofilter.models.experiment import load_experiment
from homofilter.services.model_service import check_assumptions, load_model_file, normalize_correlation
from homofilter.services.random_streams import RngStream

logger = logging.getLogger(__name__)


class ModelLoadingStage:
    """Stage for reading the experiment, building and normalizing the model."""

    def __init__(self, assumption_checks: bool = True):
        self.assumption_checks = assumption_checks

    def execute(self, context):
        """Execute the model loading stage."""
        context.start_stage("model_loading")

        if context.cfg is None:
            overrides = context.metadata.get("overrides", {})
            context.cfg = load_experiment(context.config_path, overrides)
        cfg = context.cfg

        raw = load_model_file(cfg.model_path)
        # Study runs at the sweep values; the file epsilon is only a default
        model = normalize_correlation(raw)
        context.model = model

        report = None
        if self.assumption_checks:
            rng = RngStream.for_replication(cfg.seed, 0, purpose="assumptions").generator()
            report = check_assumptions(model, cfg.assumptions, rng)
            context.metadata["assumption_flags"] = report.flags

        logger.info(
            f"Model {cfg.model_path} ready: m={model.m} n={model.n} d={model.d}, "
            f"z_free={model.z_free}"
        )
        context.complete_stage("model_loading", report)
        return report
