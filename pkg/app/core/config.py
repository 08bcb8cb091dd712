# app/core/config.py

import logging
import os
import typing
from pathlib import Path
from typing import Any, Dict, Iterator, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from app.core.errors import ConfigError
from app.models.schemas import ExperimentConfig

# Load environment variables from .env file at the project root
# config.py is in app/core/, .env is two levels up.
dotenv_path = os.path.join(os.path.dirname(__file__), "..", "..", ".env")
if os.path.exists(dotenv_path):
    load_dotenv(dotenv_path=dotenv_path)

LOG_LEVEL = os.getenv("SHEV_LOG_LEVEL", "INFO").upper()
OUT_DIR = os.getenv("SHEV_OUT_DIR", "runs")
TORCH_THREADS = os.getenv("SHEV_TORCH_THREADS")

_LOG_FORMAT = "%(levelname)s (%(name)s): %(message)s"


def configure_logging(level: str | None = None) -> None:
    logging.basicConfig(level=(level or LOG_LEVEL), format=_LOG_FORMAT, force=True)


def database_url(out_dir: str | os.PathLike | None = None) -> str:
    """DATABASE_URL from the environment, else a SQLite file in the output directory."""
    url = os.getenv("DATABASE_URL")
    if url:
        return url
    base = Path(out_dir) if out_dir is not None else Path(OUT_DIR)
    base.mkdir(parents=True, exist_ok=True)
    return f"sqlite:///{(base / 'workbench.db').as_posix()}"


# --- Flat dotted-key config files ---

def _unwrap_optional(annotation):
    if typing.get_origin(annotation) is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return annotation


def _field_annotation(model: type[BaseModel], dotted: str):
    """Resolve 'sac.lr' to the annotation of SacConfig.lr; raises KeyError when unknown."""
    parts = dotted.split(".")
    current = model
    for i, part in enumerate(parts):
        if not (isinstance(current, type) and issubclass(current, BaseModel)) or part not in current.model_fields:
            raise KeyError(dotted)
        annotation = _unwrap_optional(current.model_fields[part].annotation)
        if i == len(parts) - 1:
            if isinstance(annotation, type) and issubclass(annotation, BaseModel):
                raise KeyError(dotted)  # sections are not leaf keys
            return annotation
        current = annotation
    raise KeyError(dotted)


def _parse_value(raw: str, annotation) -> Any:
    text = raw.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if typing.get_origin(annotation) in (list, tuple):
        return [item.strip() for item in text.split(",") if item.strip()]
    return text


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    nested: Dict[str, Any] = {}
    key_lines: Dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}: expected 'key = value'", line=lineno)
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in key_lines:
            raise ConfigError(f"{source}: duplicate key", line=lineno, field=key)
        try:
            annotation = _field_annotation(ExperimentConfig, key)
        except KeyError:
            raise ConfigError(f"{source}: unknown key", line=lineno, field=key) from None
        key_lines[key] = lineno
        node = nested
        *sections, leaf = key.split(".")
        for section in sections:
            node = node.setdefault(section, {})
        node[leaf] = _parse_value(value, annotation)
    try:
        return ExperimentConfig.model_validate(nested)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"] if not isinstance(p, int))
        line = key_lines.get(field)
        if line is None:
            line = next((ln for k, ln in key_lines.items() if field.startswith(k) or k.startswith(field)), None)
        raise ConfigError(f"{source}: {first['msg']}", line=line, field=field) from None


def load_experiment_config(path: str | os.PathLike) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), source=str(p))


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _flatten(data: Dict[str, Any], prefix: str = "") -> Iterator[Tuple[str, Any]]:
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _flatten(value, dotted + ".")
        else:
            yield dotted, value


def dump_config_text(cfg: ExperimentConfig) -> str:
    lines = [f"# resolved experiment config (seed {cfg.experiment.seed})"]
    lines += [f"{key} = {_format_value(value)}" for key, value in _flatten(cfg.model_dump())]
    return "\n".join(lines) + "\n"


def write_config_snapshot(cfg: ExperimentConfig, path: str | os.PathLike) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dump_config_text(cfg))
    return p


def help_config_text() -> str:
    """Every config key with its default and description."""
    out = []

    def walk(model: type[BaseModel], prefix: str):
        for name, field in model.model_fields.items():
            annotation = _unwrap_optional(field.annotation)
            if isinstance(annotation, type) and issubclass(annotation, BaseModel):
                walk(annotation, f"{prefix}{name}.")
                continue
            default = field.get_default(call_default_factory=True)
            out.append(f"{prefix}{name} = {_format_value(default)}")
            if field.description:
                out.append(f"    {field.description}")

    walk(ExperimentConfig, "")
    return "\n".join(out) + "\n"
