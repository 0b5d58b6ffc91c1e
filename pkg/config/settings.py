import os
from typing import Optional
from pydantic_settings import BaseSettings, SettingsConfigDict
from dotenv import load_dotenv
from pydantic import field_validator

# Load environment variables from .env file
load_dotenv()

class Settings(BaseSettings):
    """Process-wide settings for tsdlab (environment prefix TSDLAB_)"""

    model_config = SettingsConfigDict(env_prefix="TSDLAB_", env_file=".env", extra="ignore")

    # Parallel harness jobs; None means one per logical core
    threads: Optional[int] = None

    # Regularizer of the change-rate denominator sigma_i + epsilon
    epsilon: float = 1e-6

    # Default output directory for CLI runs
    out_dir: str = "runs"

    # General settings
    verbose: bool = False

    @field_validator("verbose", mode="before")
    @classmethod
    def parse_verbose(cls, value):
        if isinstance(value, str):
            return value.lower() in ("true", "1", "yes")
        return bool(value)

    @field_validator("threads", mode="before")
    @classmethod
    def parse_threads(cls, value):
        if value in (None, ""):
            return None
        threads = int(value)
        if threads < 1:
            raise ValueError("TSDLAB_THREADS must be a positive integer")
        return threads

    def worker_count(self) -> int:
        """Number of parallel jobs the harness may run."""
        return self.threads or os.cpu_count() or 1
