import logging

from homofilter.services.averaging_service import LatticeHomogenized, homogenize
from homofilter.services.stages.homogenization_stage import HomogenizationStage
from homofilter.services.study_service import aggregate_epsilon, bias_budget, run_replications, study_grid

logger = logging.getLogger(__name__)


class BiasBudgetStage:
    """Stage for rerunning the largest epsilon at refined resolution."""

    def execute(self, context):
        """Execute the bias budget stage."""
        context.start_stage("bias_budget")
        cfg = context.cfg
        budget_cfg = cfg.bias_budget
        epsilon = cfg.epsilons[0]
        baseline = context.summary_at(epsilon)

        if not budget_cfg.enabled or baseline is None:
            logger.info("Bias budget skipped")
            context.complete_stage("bias_budget")
            return None

        homog = context.homog
        if isinstance(homog, LatticeHomogenized) and budget_cfg.sample_factor > 1:
            sampler = cfg.sampler.model_copy(
                update={"retained": cfg.sampler.retained * budget_cfg.sample_factor}
            )
            homog = homogenize(
                context.model,
                sampler,
                HomogenizationStage.stream(cfg.seed).child("refined"),
                lattice=cfg.lattice,
                workers=context.workers,
            )

        grid = study_grid(cfg, budget_cfg.step_factor)
        particles = cfg.particles * budget_cfg.particle_factor
        logger.info(
            f"Bias budget at epsilon={epsilon:g}: {particles} particles, {grid.n_steps} steps"
        )
        results, failures = run_replications(
            context.model.with_epsilon(epsilon), homog, cfg, grid, context.workers, particles
        )
        for failure in failures:
            context.add_error("bias_budget", RuntimeError(failure.error.message))
        _, refined = aggregate_epsilon(epsilon, results, cfg.error_moment)

        budget = bias_budget(
            epsilon, baseline, refined, budget_cfg.threshold, particles, grid.n_steps
        )
        context.report.bias_budget = budget
        context.complete_stage("bias_budget", budget)
        return budget
