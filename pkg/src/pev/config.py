"""Flat ``key=value`` configuration files.

One entry per line, ``#`` starts a comment. Unknown keys are rejected and
missing keys take the defaults below. ``--set key=value`` overrides are
applied after the file.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from .engine import RunConfig
from .errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DataConfig:
    classes: int = 4
    dim: int = 20
    per_class: int = 250
    spread: float = 1.0
    dirichlet_alpha: float = 0.5
    test_fraction: float = 0.2
    data_csv: str | None = None


@dataclass(frozen=True)
class Settings:
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    target: int | None = None  # None: the client present in the most checkpoints
    sweep_sigmas: tuple[float, ...] = (0.2, 0.5, 0.8)
    sweep_seeds: int = 10
    threshold_quantile: float = 0.999
    threshold_samples: int = 10000
    out_dir: str = "runs"

    def resolved_text(self) -> str:
        lines = []
        for key, (section, _) in sorted(KEYS.items()):
            obj = self if section is None else getattr(self, section)
            lines.append(f"{key}={_render(getattr(obj, key))}")
        return "\n".join(lines) + "\n"


def _render(v: Any) -> str:
    if v is None:
        return "auto"
    if isinstance(v, tuple):
        return ",".join(_render(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    v = float(s)
    if math.isnan(v):
        raise ValueError("nan")
    return v


def _auto(inner: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(s: str):
        return None if s.lower() in ("auto", "none", "") else inner(s)
    return parse


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(_float(x) for x in s.split(",") if x.strip())


# key -> (section attribute on Settings or None for top level, parser)
KEYS: dict[str, tuple[str | None, Callable[[str], Any]]] = {
    "n_clients": ("run", _int),
    "clients_per_round": ("run", _int),
    "rounds": ("run", _int),
    "tau": ("run", _int),
    "theta": ("run", _float),
    "sigma": ("run", _float),
    "delta_threshold": ("run", _auto(_float)),
    "lr": ("run", _float),
    "batch_size": ("run", _int),
    "local_epochs": ("run", _int),
    "fingerprint_epsilon": ("run", _float),
    "master_seed": ("run", _int),
    "compression": ("run", str),
    "aggregation": ("run", str),
    "variance_mode": ("run", str),
    "hidden": ("run", _ints),
    "classes": ("data", _int),
    "dim": ("data", _int),
    "per_class": ("data", _int),
    "spread": ("data", _float),
    "dirichlet_alpha": ("data", _float),
    "test_fraction": ("data", _float),
    "data_csv": ("data", _auto(str)),
    "target": (None, _auto(_int)),
    "sweep_sigmas": (None, _floats),
    "sweep_seeds": (None, _int),
    "threshold_quantile": (None, _float),
    "threshold_samples": (None, _int),
    "out_dir": (None, str),
}

# Keys that change what `train` produces; run directories are keyed on these.
TRAINING_KEYS = frozenset(k for k, (sec, _) in KEYS.items() if sec == "data") | frozenset(
    f.name for f in dataclasses.fields(RunConfig) if f.name not in ("sigma", "delta_threshold")
)


def _split_entry(line: str, where: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"{where}: expected key=value, got {line!r}")
    key, value = line.split("=", 1)
    return key.strip(), value.strip()


def read_entries(path: str | Path) -> list[tuple[str, str]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    entries = []
    for no, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            entries.append(_split_entry(line, f"{path}:{no}"))
    return entries


def build_settings(entries: Sequence[tuple[str, str]]) -> Settings:
    values: dict[str, Any] = {}
    for key, raw in entries:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = KEYS[key][1](raw)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r}") from None

    sections: dict[str | None, dict[str, Any]] = {"run": {}, "data": {}, None: {}}
    for key, v in values.items():
        sections[KEYS[key][0]][key] = v
    run = RunConfig(**sections["run"])
    data = DataConfig(**sections["data"])
    settings = Settings(run=run, data=data, **sections[None])
    _validate(settings)
    return settings


def _validate(s: Settings):
    d = s.data
    if d.classes < 2:
        raise ConfigError(f"classes: must be >= 2, got {d.classes}")
    if d.dim < 2:
        raise ConfigError(f"dim: must be >= 2, got {d.dim}")
    if d.per_class < 1:
        raise ConfigError(f"per_class: must be >= 1, got {d.per_class}")
    if not d.spread > 0:
        raise ConfigError(f"spread: must be > 0, got {d.spread}")
    if not d.dirichlet_alpha > 0:
        raise ConfigError(f"dirichlet_alpha: must be > 0, got {d.dirichlet_alpha}")
    if not 0 < d.test_fraction < 1:
        raise ConfigError(f"test_fraction: must be in (0, 1), got {d.test_fraction}")
    if s.target is not None and not 0 <= s.target < s.run.n_clients:
        raise ConfigError(f"target: must be in [0, n_clients={s.run.n_clients}), got {s.target}")
    if not s.sweep_sigmas or any(x < 0 for x in s.sweep_sigmas):
        raise ConfigError(f"sweep_sigmas: need one or more non-negative values, got {s.sweep_sigmas}")
    if s.sweep_seeds < 1:
        raise ConfigError(f"sweep_seeds: must be >= 1, got {s.sweep_seeds}")
    if not 0.9 < s.threshold_quantile < 1:
        raise ConfigError(f"threshold_quantile: must be in (0.9, 1), got {s.threshold_quantile}")
    if s.threshold_samples < 1000:
        raise ConfigError(f"threshold_samples: must be >= 1000, got {s.threshold_samples}")


def parse_config(path: str | Path | None, overrides: Sequence[str] = ()) -> Settings:
    """Resolve defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    entries = read_entries(path) if path is not None else []
    entries += [_split_entry(o, "--set") for o in overrides]
    settings = build_settings(entries)
    for line in settings.resolved_text().splitlines():
        logger.info("config %s", line)
    return settings


def training_text(settings: Settings) -> str:
    return "".join(l + "\n" for l in settings.resolved_text().splitlines() if l.split("=", 1)[0] in TRAINING_KEYS)
