"""
Configuration loader for EquiQuant
Reads one flat JSON or YAML document into model and training configs
"""

import json
import logging
import os
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from model import ModelConfig
from training import TrainConfig


logger = logging.getLogger('EquiQuant.ConfigLoader')

SEED_ENV = 'EQUIQUANT_SEED'
DEFAULT_SPLIT = (0.8, 0.1, 0.1)
SPLIT_TOLERANCE = 1e-9

MODEL_FIELDS = {f.name: f.type for f in fields(ModelConfig)}
TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}
EXTRA_KEYS = ('split', 'data')


class ConfigError(ValueError):
    """Raised when a configuration breaks an invariant or cannot be read"""


def _coerce(key: str, value: Any, kind: type, source: str):
    """Value of the declared type, or None (with a warning) if it does not fit"""
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif kind is str:
        if isinstance(value, str):
            return value
    logger.warning(f"Invalid {key} value in {source}: {value!r} (expected {kind.__name__}), using default")
    return None


class ConfigLoader:
    """Load and validate a configuration file"""

    def __init__(self, path: Optional[str] = None):
        self.path = Path(path) if path else None

    def load(self, overrides: Optional[Dict[str, Any]] = None) -> Tuple[ModelConfig, TrainConfig, Dict[str, Any]]:
        """
        Resolve the configuration

        Args:
            overrides: Values applied after the file (command-line flags)

        Returns:
            (ModelConfig, TrainConfig, resolved flat dict)
        """
        raw = self._load_file(self.path) if self.path else {}
        source = str(self.path) if self.path else 'defaults'
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})

        model_kwargs: Dict[str, Any] = {}
        train_kwargs: Dict[str, Any] = {}
        for key, value in raw.items():
            if key in MODEL_FIELDS:
                target, kind = model_kwargs, MODEL_FIELDS[key]
            elif key in TRAIN_FIELDS:
                target, kind = train_kwargs, TRAIN_FIELDS[key]
            elif key in EXTRA_KEYS:
                continue
            else:
                logger.warning(f"Unknown key '{key}' in {source}, ignoring")
                continue
            coerced = _coerce(key, value, kind, source)
            if coerced is not None:
                target[key] = coerced

        # Precedence: command-line seed, then EQUIQUANT_SEED, then the file
        seed = self._seed_override()
        if seed is not None and (overrides or {}).get('seed') is None:
            logger.info(f"{SEED_ENV} overrides seed: {seed}")
            train_kwargs['seed'] = seed

        try:
            model_config = ModelConfig(**model_kwargs)
            train_config = TrainConfig(**train_kwargs)
        except ValueError as e:
            logger.error(f"Invalid configuration in {source}: {e}")
            raise ConfigError(f"Invalid configuration in {source}: {e}")

        resolved = {**asdict(model_config), **asdict(train_config),
                    'split': list(self._split(raw.get('split'), source))}
        if raw.get('data') is not None:
            resolved['data'] = str(raw['data'])
        logger.info(f"Configuration from {source}: scheme {train_config.scheme}, "
                    f"{train_config.epochs} epochs, seed {train_config.seed}")
        return model_config, train_config, resolved

    def _load_file(self, filepath: Path) -> Dict[str, Any]:
        """Load a JSON or YAML file; anything that is not .json is read as YAML"""
        try:
            with open(filepath, 'r') as f:
                if filepath.suffix == '.json':
                    document = json.load(f)
                else:
                    document = yaml.safe_load(f)
        except json.JSONDecodeError as e:
            logger.error(f"JSON error in {filepath}: {e}")
            raise ConfigError(f"JSON error in {filepath}: {e}")
        except yaml.YAMLError as e:
            logger.error(f"YAML error in {filepath}: {e}")
            raise ConfigError(f"YAML error in {filepath}: {e}")
        except OSError as e:
            logger.error(f"Error reading {filepath}: {e}")
            raise ConfigError(f"Error reading {filepath}: {e}")

        if document is None:
            logger.warning(f"{filepath} is empty, using defaults")
            return {}
        if not isinstance(document, dict):
            raise ConfigError(f"Invalid configuration in {filepath}: must be a key-value mapping")
        return dict(document)

    def _seed_override(self) -> Optional[int]:
        value = os.environ.get(SEED_ENV)
        if value is None or value == '':
            return None
        try:
            return int(value)
        except ValueError:
            logger.warning(f"Invalid {SEED_ENV} value: {value!r}, must be an integer; ignoring")
            return None

    def _split(self, value: Any, source: str) -> Tuple[float, ...]:
        if value is None:
            return DEFAULT_SPLIT
        if (not isinstance(value, (list, tuple)) or len(value) != 3
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
            logger.warning(f"Invalid split value in {source}: {value!r}, using {DEFAULT_SPLIT}")
            return DEFAULT_SPLIT
        fractions = tuple(float(v) for v in value)
        if any(v < 0 for v in fractions) or abs(sum(fractions) - 1.0) > SPLIT_TOLERANCE:
            raise ConfigError(f"Split fractions must be non-negative and sum to 1, got {list(fractions)}")
        return fractions
