"""config.py – Run configuration.

Settings come from three layers, later ones winning: built-in defaults,
an optional JSON config file (``--config path``), command-line flags.
The ``RunConfig`` class gives typed access to every key.
"""

from __future__ import annotations

import json
import os
from typing import Any, Optional

from anonymize import check_index_bytes
from trace_stats import ReportKind

_DEFAULTS: dict[str, Any] = {
    "input": None,
    "port": 4661,
    "out": None,
    "index_bytes": [2, 3],
    "client_bits": 24,
    "reports": None,
    "client_snapshot": None,
    "file_snapshot": None,
    "resume": False,
    "drops": None,
    "fragment_horizon": 30.0,
    "loss_bucket": 1.0,
    "fit_range": [1, 100],
    "peak_window": 10,
    "peak_prominence": 3.0,
    "fit_breakpoints": {},
    "truth": None,
    "log_level": "INFO",
    "workload": {},
}


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


def parse_index_bytes(text: str) -> list[int]:
    """``"2,3"`` → ``[2, 3]``."""
    try:
        i, j = (int(part) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"index bytes must look like 'i,j', got {text!r}") from exc
    return [i, j]


class RunConfig:
    """Layered settings for one invocation."""

    def __init__(self, path: Optional[str] = None) -> None:
        self._path = path
        self._data: dict[str, Any] = json.loads(json.dumps(_DEFAULTS))
        if path is not None:
            self._load()

    # ── persistence ──────────────────────────────────────────────────────────

    def _load(self) -> None:
        if not os.path.isfile(self._path):
            raise ConfigError(f"config file not found: {self._path!r}")
        try:
            with open(self._path, "r", encoding="utf-8") as fh:
                stored = json.load(fh)
        except (json.JSONDecodeError, OSError) as exc:
            raise ConfigError(f"cannot read config file {self._path!r}: {exc}") from exc
        if not isinstance(stored, dict):
            raise ConfigError(f"config file {self._path!r} must hold a JSON object")
        unknown = set(stored) - set(_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown settings in {self._path!r}: {sorted(unknown)!r}")
        self._data.update(stored)

    def save(self, path: Optional[str] = None) -> None:
        with open(path or self._path, "w", encoding="utf-8") as fh:
            json.dump(self._data, fh, indent=2, ensure_ascii=False)

    # ── generic access ───────────────────────────────────────────────────────

    def get(self, key: str, default: Any = None) -> Any:
        return self._data.get(key, default)

    def set(self, key: str, value: Any) -> None:
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown setting {key!r}")
        self._data[key] = value

    def update(self, values: dict[str, Any]) -> None:
        """Apply flag values; ``None`` means the flag was not given."""
        for key, value in values.items():
            if value is not None:
                self.set(key, value)

    # ── typed convenience properties ─────────────────────────────────────────

    @property
    def input(self) -> Optional[str]:
        return self._data["input"]

    @property
    def out(self) -> Optional[str]:
        return self._data["out"]

    @property
    def port(self) -> int:
        return int(self._data["port"])

    @property
    def index_bytes(self) -> tuple[int, int]:
        i, j = self._data["index_bytes"]
        return int(i), int(j)

    @property
    def client_bits(self) -> int:
        return int(self._data["client_bits"])

    @property
    def reports(self) -> Optional[str]:
        return self._data["reports"]

    @property
    def client_snapshot(self) -> Optional[str]:
        return self._data["client_snapshot"]

    @property
    def file_snapshot(self) -> Optional[str]:
        return self._data["file_snapshot"]

    @property
    def resume(self) -> bool:
        return bool(self._data["resume"])

    @property
    def drops(self) -> Optional[str]:
        return self._data["drops"]

    @property
    def fragment_horizon(self) -> float:
        return float(self._data["fragment_horizon"])

    @property
    def loss_bucket(self) -> float:
        return float(self._data["loss_bucket"])

    @property
    def fit_range(self) -> tuple[float, float]:
        lo, hi = self._data["fit_range"]
        return float(lo), float(hi)

    @property
    def peak_window(self) -> int:
        return int(self._data["peak_window"])

    @property
    def peak_prominence(self) -> float:
        return float(self._data["peak_prominence"])

    @property
    def fit_breakpoints(self) -> dict[str, list[float]]:
        """Report kind name → breakpoints of a piecewise fit."""
        return {str(k): [float(b) for b in v] for k, v in (self._data["fit_breakpoints"] or {}).items()}

    @property
    def truth(self) -> Optional[str]:
        return self._data["truth"]

    @property
    def log_level(self) -> str:
        return str(self._data["log_level"]).upper()

    @property
    def workload(self) -> dict[str, Any]:
        return dict(self._data["workload"] or {})

    # ── validation ───────────────────────────────────────────────────────────

    def validate(self) -> None:
        """Raise :class:`ConfigError` for inconsistent settings."""
        try:
            check_index_bytes(self._data["index_bytes"])
            self._check_values()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def _check_values(self) -> None:
        if not 0 <= self.port <= 0xFFFF:
            raise ConfigError(f"port must be 0..65535, got {self.port!r}")
        if not 8 <= self.client_bits <= 32:
            raise ConfigError(f"client key-space width must be 8..32 bits, got {self.client_bits!r}")
        if self.fragment_horizon <= 0 or self.loss_bucket <= 0:
            raise ConfigError("fragment_horizon and loss_bucket must be positive")
        lo, hi = self.fit_range
        if not 0 < lo < hi:
            raise ConfigError(f"fit_range must satisfy 0 < min < max, got {(lo, hi)!r}")
        if self.peak_window < 1 or self.peak_prominence <= 0:
            raise ConfigError("peak_window must be >= 1 and peak_prominence > 0")
        if not isinstance(self._data["fit_breakpoints"], dict):
            raise ConfigError(f"fit_breakpoints must be an object, got {self._data['fit_breakpoints']!r}")
        kinds = {kind.value for kind in ReportKind}
        unknown = set(self.fit_breakpoints) - kinds
        if unknown:
            raise ConfigError(f"fit_breakpoints names unknown reports {sorted(unknown)!r}, expected some of {sorted(kinds)!r}")
        paths = [p for p in (self.input, self.out, self.client_snapshot, self.file_snapshot) if p]
        resolved = [os.path.abspath(p) for p in paths]
        if len(set(resolved)) != len(resolved):
            raise ConfigError(f"input, output and snapshot paths must be distinct, got {paths!r}")
        if self.log_level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ConfigError(f"unknown log level {self.log_level!r}")
