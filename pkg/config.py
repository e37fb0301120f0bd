import logging
import os
import sys

from dotenv import load_dotenv
from pydantic import BaseModel, Field

# Load environment variables from .env file
load_dotenv()

LOG_FORMAT = "[%(levelname)s] %(name)s: %(message)s"


class Settings(BaseModel):
    log_level: str = Field("INFO", description="Root log level")
    n_jobs: int = Field(1, description="joblib workers used to train trees")
    default_seed: int = Field(0, ge=0, description="Seed used when no --seed flag is given")
    model_dir: str = Field(".", description="Base directory for relative model paths")


def get_settings() -> Settings:
    """Read settings from the environment (after .env has been loaded)."""
    return Settings(
        log_level=os.getenv("DARE_LOG_LEVEL", "INFO").upper(),
        n_jobs=int(os.getenv("DARE_N_JOBS", "1")),
        default_seed=int(os.getenv("DARE_DEFAULT_SEED", "0")),
        model_dir=os.getenv("DARE_MODEL_DIR", "."),
    )


def configure_logging(level: str | None = None) -> None:
    """Send log records to stderr; stdout carries the JSON summaries."""
    level = (level or get_settings().log_level).upper()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, level, logging.INFO))
