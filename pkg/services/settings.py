"""
Process-level settings read from the environment (and a .env file).
"""

import logging
from functools import lru_cache
from pathlib import Path
from typing import Optional

import coloredlogs
from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

# Load environment variables
load_dotenv()

DEFAULT_SKELETON_PATH = Path(__file__).with_name("skeleton.yaml")
PROJECT_ROOT = Path(__file__).resolve().parent.parent
DESK_CONFIG_PATH = PROJECT_ROOT / "configs" / "desk.yaml"


class MageSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="MAGE_", extra="ignore")

    log_level: str = "INFO"
    skeleton_path: Path = DEFAULT_SKELETON_PATH
    config: Optional[Path] = None


@lru_cache(maxsize=1)
def get_settings() -> MageSettings:
    return MageSettings()


def setup_logging(level: Optional[str] = None) -> None:
    """Install coloured console logging for CLI runs."""
    level = (level or get_settings().log_level).upper()
    coloredlogs.install(
        level=level,
        fmt="%(asctime)s %(name)s [%(levelname)s] %(message)s",
    )
    logging.getLogger(__name__).debug("logging configured at %s", level)
