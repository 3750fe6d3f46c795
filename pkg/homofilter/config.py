"""Process-level settings for homofilter."""

from enum import Enum
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Environment(str, Enum):
    """Execution environment."""
    DEVELOPMENT = "development"
    TESTING = "testing"
    PRODUCTION = "production"


class Settings(BaseSettings):
    """Settings read from HOMOFILTER_* environment variables and .env."""

    model_config = SettingsConfigDict(
        env_prefix="HOMOFILTER_",
        env_file=".env",
        extra="ignore",
    )

    # Application Settings
    APP_NAME: str = "homofilter"
    APP_VERSION: str = "0.1.0"
    ENV: Environment = Environment.DEVELOPMENT
    LOG_LEVEL: str = "INFO"

    # Execution
    WORKERS: Optional[int] = None
    OUTPUT_DIR: str = "./results"

    # Numerical tolerances
    FAST_FACTOR: float = 0.1
    PSD_TOLERANCE: float = 1e-8
    SQRT_CLAMP_TOLERANCE: float = 1e-10
    NORMALIZATION_TOLERANCE: float = 1e-12
    CENTERING_TOLERANCE: float = 0.05

    # Filters
    RESAMPLE_THRESHOLD: float = 0.5

    # Dual solvers: nodes x substeps allowed for one full-dual solve
    DUAL_COST_BUDGET: int = 2_000_000_000

    def resolve_workers(self, requested: Optional[int] = None) -> int:
        """Worker count from the CLI flag, then the environment, then 1."""
        if requested is not None and requested > 0:
            return requested
        if self.WORKERS is not None and self.WORKERS > 0:
            return self.WORKERS
        return 1


settings = Settings()
