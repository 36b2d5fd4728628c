"""INI run configuration.

Sections map onto dataclasses: ``[train]`` (TrainConfig scalars), ``[loss]``,
``[ablation]``, ``[augment]``, ``[inference]``, ``[metrics]`` and
``[phantoms]``. Every key is optional and defaults to the dataclass default.
Unknown sections or keys are rejected. Environment variables named
``CTKD_<SECTION>__<KEY>`` override file values.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Optional

from .data.augment import AugmentConfig
from .errors import ConfigError
from .losses import Ablation, LossConfig
from .trainer import TrainConfig

ENV_PREFIX = "CTKD_"


@dataclass(frozen=True)
class InferenceSection:
    sigma_scale: float = 1.0 / 8.0
    connectivity: int = 26


@dataclass(frozen=True)
class MetricsSection:
    tolerance_mm: float = 1.0


@dataclass(frozen=True)
class PhantomSection:
    n_labeled: int = 5
    n_unlabeled: int = 40
    n_validation: int = 5
    extents: tuple[int, int, int] = (48, 48, 48)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceSection = field(default_factory=InferenceSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    phantoms: PhantomSection = field(default_factory=PhantomSection)

    def validate(self) -> "RunConfig":
        self.train.validate()
        if self.inference.connectivity not in (6, 18, 26):
            raise ConfigError(f"inference.connectivity must be 6, 18 or 26, got {self.inference.connectivity}")
        if self.inference.sigma_scale <= 0:
            raise ConfigError("inference.sigma_scale must be > 0")
        if self.metrics.tolerance_mm < 0:
            raise ConfigError("metrics.tolerance_mm must be >= 0")
        p = self.phantoms
        if p.n_labeled < 1 or p.n_validation < 1 or p.n_unlabeled < 0:
            raise ConfigError("phantoms: n_labeled and n_validation must be >= 1, n_unlabeled >= 0")
        return self

    @property
    def inference_config(self):
        return replace(
            self.train.inference,
            sigma_scale=self.inference.sigma_scale,
            connectivity=self.inference.connectivity,
        )


# section name -> (path of attribute names inside RunConfig)
_SECTIONS = {
    "train": ("train",),
    "loss": ("train", "loss"),
    "ablation": ("train", "ablation"),
    "augment": ("train", "augment"),
    "inference": ("inference",),
    "metrics": ("metrics",),
    "phantoms": ("phantoms",),
}
# Nested dataclasses and values derived elsewhere are not settable keys.
_SKIP = {"train": {"loss", "ablation", "augment"}, "loss": {"t_max"}}


def _get(obj, path):
    for name in path:
        obj = getattr(obj, name)
    return obj


def _set(obj, path, value):
    if not path:
        return value
    head, rest = path[0], path[1:]
    return replace(obj, **{head: _set(getattr(obj, head), rest, value)})


def section_keys(section: str) -> dict[str, type]:
    cls = type(_get(RunConfig(), _SECTIONS[section]))
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if f.name not in _SKIP.get(section, ())}


def _parse_value(raw: str, hint, where: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is typing.Union:  # Optional[...]
            if raw.lower() in ("", "none"):
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _parse_value(raw, inner, where)
        if origin is tuple:
            items = [s for s in raw.replace("x", ",").split(",") if s.strip()]
            elem = args[0]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(elem(s.strip()) for s in items)
            if len(items) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(t(s.strip()) for t, s in zip(args, items))
        if hint is bool:
            b = configparser.ConfigParser.BOOLEAN_STATES.get(raw.lower())
            if b is None:
                raise ValueError("expected true/false")
            return b
        return hint(raw)
    except (ValueError, TypeError, IndexError) as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from exc


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def apply_overrides(cfg: RunConfig, values: Mapping[str, Mapping[str, str]], origin: str) -> RunConfig:
    for section, items in values.items():
        if section not in _SECTIONS:
            raise ConfigError(f"{origin}: unknown section [{section}] (known: {', '.join(_SECTIONS)})")
        keys = section_keys(section)
        for key, raw in items.items():
            if key not in keys:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            value = _parse_value(raw, keys[key], f"{origin}: {section}.{key}")
            cfg = _set(cfg, _SECTIONS[section] + (key,), value)
    return cfg


def env_overrides(environ: Mapping[str, str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        section, key = name[len(ENV_PREFIX):].split("__", 1)
        out.setdefault(section.lower(), {})[key.lower()] = value
    return out


def load_config(path=None, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Defaults, then the INI file (if any), then environment overrides."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg = apply_overrides(cfg, {s: dict(parser[s]) for s in parser.sections()}, str(path))
    env = env_overrides(os.environ if environ is None else environ)
    if env:
        cfg = apply_overrides(cfg, env, "environment")
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    """Fully resolved INI text; loading it gives back ``cfg``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, path in _SECTIONS.items():
        obj = _get(cfg, path)
        parser[section] = {k: _format_value(getattr(obj, k)) for k in section_keys(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.ini"
    path.write_text(dump_config(cfg))
    return path


__all__ = [
    "ENV_PREFIX",
    "InferenceSection",
    "MetricsSection",
    "PhantomSection",
    "RunConfig",
    "apply_overrides",
    "dump_config",
    "env_overrides",
    "load_config",
    "section_keys",
    "write_resolved",
]
