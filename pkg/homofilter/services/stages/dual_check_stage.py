import logging
from pathlib import Path

from homofilter.models.reports import DualCheckReport
from homofilter.services.corrector_service import corrector_scaling, write_corrector_trace
from homofilter.services.dual_service import (
    DualGridConfig,
    boundary_influence,
    duality_drift,
    solve_averaged_dual,
    solve_full_dual,
    write_dual_snapshots,
)
from homofilter.services.filter_service import run_full_filter, run_reduced_filter
from homofilter.services.function_family import metric_family
from homofilter.services.random_streams import RngStream
from homofilter.services.simulation_service import simulate_joint
from homofilter.services.study_service import study_grid

logger = logging.getLogger(__name__)


class DualCheckStage:
    """Stage for the filter/dual pairing identity, boundary influence and corrector scaling."""

    def __init__(self, report_service):
        self.report_service = report_service

    def execute(self, context):
        """Execute the dual check stage."""
        context.start_stage("dual_check")
        cfg = context.cfg
        dual_cfg = cfg.dual
        out = Path(context.out_dir)

        model = context.model.with_epsilon(dual_cfg.epsilon)
        homog = context.homog
        grid = study_grid(cfg)
        dual_grid = DualGridConfig.from_config(dual_cfg)
        family = metric_family(max(cfg.metric_size, dual_cfg.phi_id), cfg.metric_scale)
        phi = family[dual_cfg.phi_id - 1]
        stream = RngStream.for_replication(cfg.seed, 0, purpose="dual_check")
        steps = sorted({grid.step_of(f * cfg.horizon) for f in dual_cfg.check_fractions})

        bundle = simulate_joint(model, grid, stream.child("path"))
        report = DualCheckReport(epsilon=dual_cfg.epsilon)
        options = dict(
            checkpoints=steps,
            resampling=cfg.resampling,
            threshold=cfg.resample_threshold,
            record_clouds=steps,
        )

        v0 = solve_averaged_dual(homog, model.alpha, phi, bundle.dY, grid, dual_grid)
        reduced = run_reduced_filter(
            homog, model.alpha, bundle.dY, grid, dual_cfg.particles, stream.child("reduced"),
            model.initial_law, family, **options,
        )
        report.duality.append(duality_drift(v0, reduced, steps, model.initial_law, dual_cfg.tolerance))
        write_dual_snapshots(v0, out / "dual_averaged.csv", steps)

        probes = dual_cfg.corrector.probe_points
        probe_x = [p[0] for p in probes]
        if dual_cfg.boundary_check:
            report.boundary_tolerance = dual_cfg.boundary_tolerance
            report.boundary_influence["averaged"] = boundary_influence(
                lambda g: solve_averaged_dual(homog, model.alpha, phi, bundle.dY, grid, g),
                dual_grid, probe_x, tolerance=dual_cfg.boundary_tolerance,
            )

        if dual_cfg.full_dual:
            vfull = solve_full_dual(model, phi, bundle.dY, grid, dual_grid)
            full = run_full_filter(
                model, bundle.dY, grid, dual_cfg.particles, stream.child("full"), family, **options,
            )
            report.duality.append(duality_drift(vfull, full, steps, model.initial_law, dual_cfg.tolerance))
            write_dual_snapshots(vfull, out / "dual_full.csv", [0])

        if dual_cfg.corrector.enabled:
            sampler = None if model.z_free else cfg.sampler
            scaling, traces = corrector_scaling(
                model, homog, phi, grid, dual_grid, dual_cfg.corrector, stream.child("corrector"),
                sampler=sampler, with_residual=dual_cfg.full_dual, workers=context.workers,
            )
            report.corrector = scaling
            for i, trace in enumerate(traces):
                write_corrector_trace(trace, out / "corrector" / f"psi_eps{trace.epsilon:g}_p{i % len(probes)}.csv")

        self.report_service.emit_dual_check(report, out)
        for check in report.duality:
            logger.info(f"Duality drift ({check.label}): max {check.max_abs_drift:.3%}")
        context.complete_stage("dual_check", report)
        return report
