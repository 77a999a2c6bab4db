"""
Configuration, constants and shared plumbing for the symbolic congestion-control workbench.
"""

import dataclasses
import json
import logging
import os
import types
import typing
from pathlib import Path

# Application configuration
APP_TITLE = "symcc"
APP_ICON = "📡"
__version__ = "0.3.0"

LOG_ENV_VAR = "SYMCC_LOG"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"

# Network defaults for the training environment
DEFAULT_ACCESS_CAPACITY_BPS = 20e9
DEFAULT_QUEUE_CAPACITY = 100
DEFAULT_DATA_PACKET_SIZE = 1500
DEFAULT_ACK_PACKET_SIZE = 64
DEFAULT_ACCESS_PROPAGATION_S = 1e-6
DEFAULT_BOTTLENECK_PROPAGATION_S = 10e-6
DEFAULT_WINDOW_S = 1e-3
DEFAULT_LOSS_TIMEOUT_FACTOR = 4.0
INITIAL_LOAD_FRACTION = 0.1
TRAINING_CAPACITY_RANGE_MBPS = (1.0, 2000.0)
TRAINING_PAIR_CHOICES = (1, 2)
TRAINING_DURATION_S = 3.0

# Action space and intersend clamps
ACTION_LOW = 0.8
ACTION_HIGH = 1.5
INTERSEND_MAX_S = 0.1

# Reward normalisation bounds (per window)
REWARD_RTT_MULTIPLIER = 10.0
REWARD_LOSS_HIGH = 50.0

# Expression language
PROTECTED_DIVISION_EPS = 1e-9
PROTECTED_DIVISION_VALUE = 1.0
DEGENERATE_VALUE = 0.0
MAX_EXPRESSION_LENGTH = 32
UNIT_SCALE = {"s": 1.0, "ms": 1e3}
DEFAULT_UNITS = "ms"

# Data collection
DEFAULT_EPSILON = 0.5
COLLECTION_DURATION_S = 5.0
COLLECTION_CAPACITY_MBPS = 500.0

# Deep symbolic regression
DEFAULT_BATCH_SIZE = 500
DEFAULT_RISK_QUANTILE = 0.05
DEFAULT_LEARNING_RATE = 1.0
DEFAULT_RECURRENT_LEARNING_RATE = 5e-3
DEFAULT_ENTROPY_WEIGHT = 0.005
DEFAULT_MAX_ITERATIONS = 200
DEFAULT_HALL_OF_FAME_SIZE = 20
DEFAULT_STOP_FITNESS = 1.0 - 1e-12

# Evaluation phases
PHASE_CAPACITIES_MBPS = (250.0, 500.0, 1000.0)
PHASE_ONE_DURATION_S = 1.0
PHASE_ONE_PAIRS = (1, 5, 10, 15, 20)
PHASE_TWO_DURATION_S = 20.0
PHASE_TWO_PAIRS = (1, 5, 10, 15, 20, 25, 30, 35, 40)
WARMUP_FRACTION = 0.1
UTILIZATION_SLACK = 0.01

# Interpretability analysis
I_RATIO_RANGE = (0.2, 10.0)
RTT_RATIO_RANGE = (1.0, 4.0)

logger = logging.getLogger(__name__)


class SymccError(Exception):
    """Root of every error raised by the workbench."""


class ConfigError(SymccError):
    """A configuration file could not be read or names an unknown field."""


class ConfigInvalid(ConfigError):
    """A configuration value violates a domain invariant."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


def configure_logging(verbose=False):
    """Configure the root logger from SYMCC_LOG (or -v) with a single stream handler."""
    level_name = os.environ.get(LOG_ENV_VAR, "INFO" if verbose else "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    root = logging.getLogger()
    root.setLevel(level)
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    return level


def progress_enabled():
    """Progress bars are shown only when INFO messages would be."""
    return logging.getLogger().isEnabledFor(logging.INFO)


def load_config(path):
    """Read a JSON run config, reporting syntax errors with line and column."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def build_section(cls, data, section):
    """Instantiate dataclass `cls` from a config mapping; unknown keys are errors."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown field")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints.get(name), value, f"{section}.{name}")
    try:
        return cls(**kwargs)
    except ConfigInvalid as e:
        raise ConfigInvalid(f"{section}.{e.field}", str(e).split(": ", 1)[-1]) from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from e


def _coerce(hint, value, field):
    """Light type check for JSON scalars and lists against a dataclass annotation."""
    if value is None or hint is None:
        return value
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or origin is types.UnionType:
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, field) if len(inner) == 1 else value
    if origin in (tuple, list):
        if not isinstance(value, list):
            raise ConfigInvalid(field, f"expected a list, got {type(value).__name__}")
        item = args[0] if args else None
        return tuple(_coerce(item, v, field) for v in value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid(field, f"expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(field, f"expected an integer, got {value!r}")
        return value
    if hint is bool and not isinstance(value, bool):
        raise ConfigInvalid(field, f"expected true/false, got {value!r}")
    if hint is str and not isinstance(value, str):
        raise ConfigInvalid(field, f"expected a string, got {value!r}")
    return value


def require(condition, field, message):
    """Raise ConfigInvalid for `field` unless `condition` holds."""
    if not condition:
        raise ConfigInvalid(field, message)


def section_dict(obj):
    """Dataclass → plain JSON-ready dict (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(obj)))
