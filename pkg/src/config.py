"""
Environment settings and flat key-value config files.
"""
import os
from pathlib import Path
from typing import Dict, Iterable, Optional

from dotenv import load_dotenv
from pydantic import BaseModel

project_root = Path(__file__).resolve().parent.parent


class ConfigFileError(ValueError):
    """Malformed or unknown entry in a config file."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class Settings(BaseModel):
    data_dir: Path = Path("data")
    runs_dir: Path = Path("runs")
    log_level: str = "INFO"


def load_settings(dotenv_path: Optional[Path] = None) -> Settings:
    """Read default paths from the environment after loading `.env`."""
    load_dotenv(dotenv_path or project_root / '.env')
    return Settings(
        data_dir=Path(os.getenv('SPATIAL_MOE_DATA_DIR', 'data')),
        runs_dir=Path(os.getenv('SPATIAL_MOE_RUNS_DIR', 'runs')),
        log_level=os.getenv('SPATIAL_MOE_LOG_LEVEL', 'INFO').upper(),
    )


def read_flat_config(path: Path, allowed: Optional[Iterable[str]] = None) -> Dict[str, str]:
    """
    Parse `key = value` lines; `#` starts a comment and blank lines are skipped.

    Args:
        path: config file
        allowed: accepted keys; anything else is an error naming key and line

    Returns:
        Raw string values by key
    """
    allowed = set(allowed) if allowed is not None else None
    values: Dict[str, str] = {}
    with Path(path).open("r", encoding="utf-8") as handle:
        for number, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigFileError(f"expected 'key = value', got {line!r}", line=number)
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigFileError("empty key", line=number)
            if allowed is not None and key not in allowed:
                raise ConfigFileError(f"unknown key {key!r}", line=number)
            if key in values:
                raise ConfigFileError(f"duplicate key {key!r}", line=number)
            values[key] = value
    return values
