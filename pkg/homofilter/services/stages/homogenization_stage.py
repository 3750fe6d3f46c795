import logging
from pathlib import Path
from typing import Optional

from homofilter.services.averaging_service import LatticeHomogenized, cache_key, homogenize
from homofilter.services.random_streams import RngStream

logger = logging.getLogger(__name__)


class HomogenizationStage:
    """Stage for realizing the averaged coefficients, optionally through the cache."""

    def __init__(self, persist: bool = False):
        self.persist = persist

    @staticmethod
    def stream(seed: int) -> RngStream:
        return RngStream.for_replication(seed, 0, purpose="homogenize")

    def execute(self, context):
        """Execute the homogenization stage."""
        context.start_stage("homogenization")
        cfg = context.cfg
        model = context.model

        cache_dir: Optional[Path] = cfg.resolve(cfg.cache_dir)
        homog = None
        if cache_dir is not None and not self.persist and cfg.closed_form is None and not model.z_free:
            if (cache_dir / "homogenized.json").exists():
                expected = None
                if cfg.lattice is not None:
                    expected = cache_key(model, cfg.sampler, cfg.lattice, cfg.seed)
                homog = LatticeHomogenized.load_cache(model, cache_dir, expected)
            else:
                logger.warning(f"No homogenization cache in {cache_dir}; averaging from scratch")

        if homog is None:
            homog = homogenize(
                model,
                cfg.sampler,
                self.stream(cfg.seed),
                lattice=cfg.lattice,
                closed_form=cfg.closed_form,
                workers=context.workers,
            )

        saved = None
        if self.persist:
            if isinstance(homog, LatticeHomogenized):
                target = cache_dir or Path(context.out_dir) / "cache"
                saved = str(homog.save_cache(target))
            else:
                logger.info(f"Homogenized model is {homog.kind}; nothing to cache")

        context.homog = homog
        result = {"kind": homog.kind, "cache": saved}
        context.complete_stage("homogenization", result)
        return result
