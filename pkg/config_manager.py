from typing import Any, Dict, Optional
import configparser
import os
import logging
from dataclasses import fields

from models import ConfigError, DiscrepancyMode, GodConfig, LossWeights, TrainingConfig
from persistence import PersistenceError

# Get logger instance
logger = logging.getLogger("aligncap")

TRAINING_KEYS = ("seed", "batch_size", "steps", "learning_rate", "beta1", "beta2", "epsilon", "dropout_p",
                 "dataset_size")
MODEL_KEYS = ("grid_size", "channels", "d_v", "d_t", "d_c", "d_s", "d_llm", "vocab_size", "roi_size",
              "sampling_ratio", "num_heads", "mlp_hidden", "num_queries", "num_tags_per_subclass", "tau_init",
              "bias_init", "top_k_tags", "vocab_file", "tag_vocab_file")
GOD_KEYS = ("k", "j", "discrepancy_mode", "enabled")
LOSS_WEIGHT_KEYS = ("alpha", "beta", "gamma", "lambda")


def _default_sections() -> Dict[str, Dict[str, str]]:
    defaults = TrainingConfig()
    return {
        'training': {k: str(getattr(defaults, k)) for k in TRAINING_KEYS},
        'model': {k: str(getattr(defaults, k)) for k in MODEL_KEYS},
        'god': {'k': str(defaults.god.k), 'j': str(defaults.god.j),
                'discrepancy_mode': defaults.god.discrepancy_mode.value,
                'enabled': str(defaults.god.enabled).lower()},
        'loss_weights': {'alpha': str(defaults.loss_weights.alpha), 'beta': str(defaults.loss_weights.beta),
                         'gamma': str(defaults.loss_weights.gamma), 'lambda': str(defaults.loss_weights.lam)},
    }


class ConfigManager:
    def __init__(self, config_file='aligncap.ini'):
        self.config_file = config_file
        self.config = configparser.ConfigParser()
        if not os.path.exists(self.config_file):
            logger.warning(f"Configuration file '{self.config_file}' not found. Creating default.")
            self._create_default_config()
        else:
            logger.debug(f"Reading configuration from {self.config_file}")
            try:
                self.config.read(self.config_file)
            except configparser.Error as e:
                logger.error(f"Failed to parse configuration file '{self.config_file}': {e}", exc_info=True)
                raise ConfigError(f"Failed to parse configuration file '{self.config_file}': {e}") from e

        # Missing sections fall back to the defaults below via typed getters
        for section in _default_sections():
            if not self.config.has_section(section):
                logger.warning(f"Config section '{section}' missing. Using defaults.")
                self.config.add_section(section)

    def _create_default_config(self):
        for section, values in _default_sections().items():
            self.config[section] = values
        self.save_config()
        logger.info(f"Default configuration file '{self.config_file}' created.")

    def _get_int(self, section: str, option: str, fallback: int) -> int:
        try:
            return self.config.getint(section, option, fallback=fallback)
        except ValueError as e:
            raise ConfigError(f"[{section}] {option} must be an integer: {e}") from e

    def _get_float(self, section: str, option: str, fallback: float) -> float:
        try:
            return self.config.getfloat(section, option, fallback=fallback)
        except ValueError as e:
            raise ConfigError(f"[{section}] {option} must be a number: {e}") from e

    def _get_bool(self, section: str, option: str, fallback: bool) -> bool:
        try:
            return self.config.getboolean(section, option, fallback=fallback)
        except ValueError as e:
            raise ConfigError(f"[{section}] {option} must be a boolean: {e}") from e

    def _get_path(self, section: str, option: str, fallback: str) -> str:
        """Relative paths are taken from the directory of the config file."""
        value = self.config.get(section, option, fallback=fallback).strip()
        if value and not os.path.isabs(value):
            value = os.path.join(os.path.dirname(os.path.abspath(self.config_file)), value)
        return value

    def get_god_config(self) -> GodConfig:
        defaults = GodConfig()
        mode = self.get_config_value('god', 'discrepancy_mode', fallback=defaults.discrepancy_mode.value)
        try:
            discrepancy = DiscrepancyMode(mode)
        except ValueError as e:
            raise ConfigError(f"[god] discrepancy_mode must be one of "
                              f"{[m.value for m in DiscrepancyMode]}, got '{mode}'") from e
        try:
            return GodConfig(k=self._get_int('god', 'k', defaults.k), j=self._get_int('god', 'j', defaults.j),
                             discrepancy_mode=discrepancy,
                             enabled=self._get_bool('god', 'enabled', defaults.enabled))
        except ConfigError:
            raise
        except Exception as e:
            raise ConfigError(f"Invalid [god] section: {e}") from e

    def get_loss_weights(self) -> LossWeights:
        d = LossWeights()
        return LossWeights(alpha=self._get_float('loss_weights', 'alpha', d.alpha),
                           beta=self._get_float('loss_weights', 'beta', d.beta),
                           gamma=self._get_float('loss_weights', 'gamma', d.gamma),
                           lam=self._get_float('loss_weights', 'lambda', d.lam))

    def get_training_config(self, seed: Optional[int] = None) -> TrainingConfig:
        """Validated TrainingConfig; `seed`, when given, overrides [training] seed."""
        defaults = TrainingConfig()
        kinds = {f.name: f.type for f in fields(TrainingConfig)}
        values: Dict[str, Any] = {}
        for section, keys in (('training', TRAINING_KEYS), ('model', MODEL_KEYS)):
            for key in keys:
                fallback = getattr(defaults, key)
                if kinds[key] in (int, 'int'):
                    values[key] = self._get_int(section, key, fallback)
                elif kinds[key] in (str, 'str'):
                    values[key] = self._get_path(section, key, fallback)
                else:
                    values[key] = self._get_float(section, key, fallback)
        if seed is not None:
            values['seed'] = int(seed)
        config = TrainingConfig(god=self.get_god_config(), loss_weights=self.get_loss_weights(), **values)
        logger.debug(f"Training config from {self.config_file}: {config.to_dict()}")
        return config

    def get_config_value(self, section: str, option: str, fallback: Any = None) -> Any:
        if not self.config.has_section(section):
            logger.warning(f"Config section '{section}' not found. Using fallback '{fallback}' for option '{option}'.")
            return fallback
        return self.config.get(section, option, fallback=fallback)

    def set_config_value(self, section: str, option: str, value: str) -> bool:
        try:
            if not self.config.has_section(section):
                self.config.add_section(section)
                logger.info(f"Added section '{section}' to save value for '{option}'.")
            self.config.set(section, option, value)
            self.save_config()
            logger.info(f"Config value saved: [{section}] {option} = {value}")
            return True
        except (configparser.Error, PersistenceError) as e:
            logger.error(f"Error saving config value [{section}] {option} = {value}: {e}", exc_info=True)
            return False

    def save_config(self):
        """Saves the current config state to the file."""
        try:
            with open(self.config_file, 'w') as f:
                self.config.write(f)
            logger.debug(f"Configuration saved to {self.config_file}")
        except IOError as e:
            logger.error(f"Could not save config file {self.config_file}: {e}", exc_info=True)
            raise PersistenceError(f"Failed to save config file '{self.config_file}': {e}") from e


def _ini_value(value: Any) -> str:
    return value if isinstance(value, str) else repr(value)


def write_config(path: str, config: TrainingConfig):
    """Writes `config` as an INI file readable by ConfigManager."""
    parser = configparser.ConfigParser()
    parser['training'] = {k: _ini_value(getattr(config, k)) for k in TRAINING_KEYS}
    parser['model'] = {k: _ini_value(getattr(config, k)) for k in MODEL_KEYS}
    parser['god'] = {'k': str(config.god.k), 'j': str(config.god.j),
                     'discrepancy_mode': config.god.discrepancy_mode.value,
                     'enabled': str(config.god.enabled).lower()}
    parser['loss_weights'] = {'alpha': repr(config.loss_weights.alpha), 'beta': repr(config.loss_weights.beta),
                              'gamma': repr(config.loss_weights.gamma), 'lambda': repr(config.loss_weights.lam)}
    try:
        with open(path, 'w') as f:
            parser.write(f)
    except IOError as e:
        logger.error(f"Could not write config file {path}: {e}", exc_info=True)
        raise PersistenceError(f"Failed to write config file '{path}': {e}") from e
