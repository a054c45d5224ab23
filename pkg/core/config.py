from functools import lru_cache
from pathlib import Path

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()


class Settings(BaseSettings):
    """
    Process-level settings, read from the environment (prefix ``UDA_``)
    and an optional ``.env`` file.
    """
    output_root: Path = Field(
        default=Path("runs"),
        description=(
            "Root for run artifacts of configs without an output_dir; a "
            "config's output_dir takes precedence over UDA_OUTPUT_ROOT."),
    )
    log_level: str = "INFO"
    log_json: bool = False
    max_workers: int = Field(default=4, ge=1)
    torch_threads: int | None = Field(default=None, ge=1)

    model_config = SettingsConfigDict(
        env_prefix="UDA_",
        env_file=".env",
        extra="ignore",
    )


@lru_cache
def get_settings() -> Settings:
    """
    Get the cached process settings.
    Returns:
        Settings: The settings loaded from the environment.
    """
    return Settings()
