# src/settings_manager.py

import hashlib
import json
import logging
import types
import typing
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from pydantic import BaseModel, ValidationError

from src.errors import ConfigError
from src.models import ExperimentConfig

logger = logging.getLogger(__name__)

COMMENT_PREFIXES = ("#", ";")


def _field_annotation(section: str, key: str) -> Any:
    section_field = ExperimentConfig.model_fields.get(section)
    if section_field is None:
        return None
    key_field = section_field.annotation.model_fields.get(key)
    return key_field.annotation if key_field is not None else None


def _is_list(annotation: Any) -> bool:
    return typing.get_origin(annotation) in (list, typing.List)


def _is_optional(annotation: Any) -> bool:
    origin = typing.get_origin(annotation)
    return origin in (typing.Union, types.UnionType) and type(None) in typing.get_args(annotation)


def _coerce(section: str, key: str, raw: str) -> Any:
    annotation = _field_annotation(section, key)
    if _is_list(annotation):
        return [item.strip() for item in raw.split(",") if item.strip()]
    if _is_optional(annotation) and raw.lower() in ("", "none"):
        return None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> Tuple[Dict[str, Dict[str, Any]], Dict[Tuple[str, ...], int]]:
    """
    Parses ``key = value`` lines grouped under ``[section]`` headers.
    Returns the raw section dicts and the line number of every section and key.
    """
    data: Dict[str, Dict[str, Any]] = {}
    lines: Dict[Tuple[str, ...], int] = {}
    section: Optional[str] = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith(COMMENT_PREFIXES):
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"{source}:{lineno}: malformed section header '{line}'")
            section = line[1:-1].strip()
            if section not in ExperimentConfig.model_fields:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            if section in data:
                raise ConfigError(f"{source}:{lineno}: section [{section}] appears twice")
            data[section] = {}
            lines[(section,)] = lineno
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{line}'")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside of any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in data[section]:
            raise ConfigError(f"{source}:{lineno}: key '{key}' repeated in [{section}]")
        data[section][key] = _coerce(section, key, value)
        lines[(section, key)] = lineno
    return data, lines


def _line_for(loc: Tuple[Any, ...], lines: Dict[Tuple[str, ...], int]) -> int:
    parts = tuple(str(p) for p in loc)
    for cut in range(len(parts), 0, -1):
        if parts[:cut] in lines:
            return lines[parts[:cut]]
    return 0


def validate_config(data: Dict[str, Dict[str, Any]], lines: Dict[Tuple[str, ...], int], source: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        loc = first.get("loc", ())
        where = ".".join(str(p) for p in loc) or "config"
        raise ConfigError(f"{source}:{_line_for(loc, lines)}: {where}: {first['msg']}") from e
    except ConfigError as e:
        raise ConfigError(f"{source}:0: {e}") from e


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}:0: cannot read config file ({e.strerror})") from e
    data, lines = parse_config_text(text, str(path))
    return validate_config(data, lines, str(path))


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def config_to_text(config: ExperimentConfig) -> str:
    out = []
    for section in ExperimentConfig.model_fields:
        sub: BaseModel = getattr(config, section)
        out.append(f"[{section}]")
        for key in type(sub).model_fields:
            out.append(f"{key} = {_format_value(getattr(sub, key))}")
        out.append("")
    return "\n".join(out)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config_to_text(config), encoding="utf-8")
    logger.info(f"Config written to '{path}'.")


def config_hash(config: ExperimentConfig) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON dump. The output directory is not hashed."""
    canonical = json.dumps(config.model_dump(mode="json", exclude={"output"}), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


class SettingsManager:
    """Loads, overrides and saves one experiment config file."""

    def __init__(self, config_file: str | Path) -> None:
        self.config_file = Path(config_file)
        self.settings: ExperimentConfig = ExperimentConfig()
        logger.info(f"SettingsManager initialized for '{self.config_file}'.")
        self.load_settings()

    def load_settings(self) -> None:
        logger.info(f"Loading settings from '{self.config_file}'...")
        self.settings = load_config(self.config_file)
        logger.info(f"Settings loaded and validated (hash {self.config_hash}).")

    def apply_overrides(self, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
        """Command-line values replace file values: ``seed`` the seed list, ``out`` the output directory."""
        if seed is not None:
            experiment = self.settings.experiment.model_copy(update={"seeds": [seed]})
            self.settings = self.settings.model_copy(update={"experiment": experiment})
        if out is not None:
            output = self.settings.output.model_copy(update={"directory": str(out)})
            self.settings = self.settings.model_copy(update={"output": output})
        return self.settings

    @property
    def config_hash(self) -> str:
        return config_hash(self.settings)

    def save_settings(self, path: str | Path) -> None:
        try:
            save_config(self.settings, path)
        except OSError as e:
            logger.error(f"Failed to save settings to '{path}': {e}", exc_info=True)
            raise ConfigError(f"cannot write config to '{path}' ({e.strerror})") from e
