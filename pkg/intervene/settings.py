#!/usr/bin/python3
"""Ini file configuration and the immutable experiment configuration.

Classes:
  SettingsManager: Reads and edits an ini file through configparser.
  ExperimentConfig: All experiment settings with the protocol defaults.

Error classes:
  Error: Base class for all errors generated by this module.
  ConfigError: Invalid configuration value, key or section.
  PermissionError: The configuration file cannot be read or written.
"""
__version__ = '1.0'

# Standard modules
import configparser
import dataclasses
import logging
import os

LOGGER = logging.getLogger('intervene.settings')


class Error(Exception):
  """Superclass used for inheritance and external exception handling."""


class ConfigError(Error, ValueError):
  """A configuration value, key or section is invalid."""


class PermissionError(Error, IOError):
  """The configuration file cannot be accessed."""


class SettingsManager:
  """Ini file backed settings.

  Arguments:
    % filename: str ~~ 'intervene'
      Name of the file, optionally without the '.ini' extension.
    % path: str ~~ None
      Directory of the file, used when `filename` is relative.
    % create: bool ~~ False
      Create an empty file when it does not exist yet.
  """
  def __init__(self, filename='intervene', path=None, create=False):
    extension = '' if filename.endswith(('.ini', '.conf')) else '.ini'
    self.filename = filename + extension
    if path and not os.path.isabs(self.filename):
      self.file_location = os.path.join(path, self.filename)
    else:
      self.file_location = self.filename
    self.__CheckPermissions()
    if not os.path.isfile(self.file_location):
      if not create:
        raise ConfigError('Configuration file %r does not exist' %
                          self.file_location)
      open(self.file_location, 'a').close()
    self.mtime = None
    self.options = {}
    self.config = configparser.ConfigParser()
    self.Read()

  def __CheckPermissions(self):
    """Checks if SettingsManager can read/write to file."""
    if not os.path.isfile(self.file_location):
      return True
    if not os.access(self.file_location, os.R_OK):
      raise PermissionError('SettingsManager missing permissions to read file: '
                            '%s' % self.file_location)
    return True

  def Read(self):
    """Reads the config file and populates the options member.

    The file is only parsed again when its mtime changed.
    """
    curtime = os.path.getmtime(self.file_location)
    if self.mtime is not None and self.mtime == curtime:
      return False
    self.config = configparser.ConfigParser()
    try:
      self.config.read(self.file_location, encoding='utf-8')
    except configparser.Error as error:
      raise ConfigError('Could not parse %r: %s' % (self.file_location, error))
    self.options = {section: dict(self.config[section])
                    for section in self.config.sections()}
    self.mtime = curtime
    return True

  def Create(self, section, key, value):
    """Creates a section or/and key = value.

    Raises:
      ConfigError: the key already exists.
    """
    if not self.config.has_section(section):
      self.config.add_section(section)
    elif self.config.has_option(section, key):
      raise ConfigError('Key %r already exists in section %r' % (key, section))
    self.config.set(section, key, str(value))
    self._Write()

  def Update(self, section, key, value):
    """Sets section.key to `value`, creating the section when needed."""
    if not self.config.has_section(section):
      self.config.add_section(section)
    self.config.set(section, key, str(value))
    self._Write()

  def Delete(self, section, key=None):
    """Deletes a key, or the whole section when no key is given."""
    try:
      if key:
        self.config.remove_option(section, key)
      else:
        self.config.remove_section(section)
    except configparser.NoSectionError:
      raise ConfigError('No section %r in %r' % (section, self.file_location))
    self._Write()
    return True

  def _Write(self):
    """Internal function to store the current config to file."""
    if os.path.isfile(self.file_location) and not os.access(
        self.file_location, os.W_OK):
      raise PermissionError('SettingsManager missing permissions to write to '
                            'file: %s' % self.file_location)
    with open(self.file_location, 'w', encoding='utf-8') as configfile:
      self.config.write(configfile)
    self.mtime = None
    return self.Read()


# ##############################################################################
# Experiment configuration
#
def _Bool(value):
  lowered = str(value).strip().lower()
  if lowered in ('1', 'true', 'yes', 'on'):
    return True
  if lowered in ('0', 'false', 'no', 'off'):
    return False
  raise ValueError('not a boolean: %r' % value)


def _IntList(value):
  if isinstance(value, (list, tuple)):
    return tuple(int(item) for item in value)
  return tuple(int(item) for item in str(value).replace(',', ' ').split())


def _OptionalInt(value):
  if value is None or str(value).strip().lower() in ('', 'none'):
    return None
  return int(value)


# (section, key) -> (field, converter)
SETTINGS = {
    ('experiment', 'process'): ('process', str),
    ('experiment', 'seed'): ('seed', int),
    ('experiment', 'seeds'): ('seeds', _IntList),
    ('experiment', 'n_test'): ('n_test', int),
    ('experiment', 'n_rct'): ('n_rct', int),
    ('experiment', 'runs'): ('runs', int),
    ('experiment', 'mode'): ('mode', str),
    ('experiment', 'never_row'): ('never_row', _Bool),
    ('network', 'hidden'): ('hidden', int),
    ('network', 'learning_rate'): ('learning_rate', float),
    ('network', 'beta1'): ('beta1', float),
    ('network', 'beta2'): ('beta2', float),
    ('network', 'epsilon'): ('adam_epsilon', float),
    ('network', 'batch_size'): ('batch_size', int),
    ('ci', 'patience'): ('ci_patience', _OptionalInt),
    ('ci', 'max_epochs'): ('max_epochs', int),
    ('ci', 'validation_fraction'): ('validation_fraction', float),
    ('rl', 'memory_size'): ('memory_size', int),
    ('rl', 'epsilon_start'): ('epsilon_start', float),
    ('rl', 'epsilon_min'): ('epsilon_min', float),
    ('rl', 'epsilon_decay_transitions'): ('epsilon_decay_transitions', int),
    ('rl', 'eval_interval'): ('eval_interval', int),
    ('rl', 'patience'): ('rl_patience', _OptionalInt),
    ('rl', 'min_transitions'): ('min_transitions', int),
    ('rl', 'max_transitions'): ('max_transitions', int),
    ('rl', 'alpha'): ('alpha', float),
    ('rl', 'alpha_decay'): ('alpha_decay', _Bool),
    ('rl', 'gamma'): ('gamma', float),
    ('rl', 'repeat_penalty'): ('repeat_penalty', int),
    ('logging', 'level'): ('log_level', str),
    ('logging', 'file'): ('log_file', str),
}

MODES = ('neural', 'tabular')
PROCESSES = ('p1', 'p2')


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
  """Every setting of an experiment; the defaults follow the protocol.

  `seeds` defaults to `runs` consecutive seeds starting at `seed`.
  """
  process: str = 'p1'
  seed: int = 0
  seeds: tuple = None
  n_test: int = 1000
  n_rct: int = 10000
  runs: int = 5
  mode: str = 'neural'
  never_row: bool = False
  # network
  hidden: int = 32
  learning_rate: float = 1e-3
  beta1: float = 0.9
  beta2: float = 0.999
  adam_epsilon: float = 1e-8
  batch_size: int = 1024
  # causal inference
  ci_patience: int = 5
  max_epochs: int = 1000
  validation_fraction: float = 0.2
  # Q-learning
  memory_size: int = 1024
  epsilon_start: float = 1.0
  epsilon_min: float = 0.05
  epsilon_decay_transitions: int = 5000
  eval_interval: int = 500
  rl_patience: int = 5
  min_transitions: int = 7500
  max_transitions: int = 200000
  alpha: float = 0.05
  alpha_decay: bool = False
  gamma: float = 1.0
  repeat_penalty: int = 100
  # logging
  log_level: str = 'INFO'
  log_file: str = 'intervene.log'

  def __post_init__(self):
    if self.seeds is None:
      object.__setattr__(self, 'seeds', tuple(
          self.seed + run for run in range(self.runs)))
    else:
      object.__setattr__(self, 'seeds', _IntList(self.seeds))
    if self.process not in PROCESSES:
      raise ConfigError('process must be one of %s, not %r' % (
          ', '.join(PROCESSES), self.process))
    if self.mode not in MODES:
      raise ConfigError('mode must be one of %s, not %r' % (
          ', '.join(MODES), self.mode))
    if not 0 < self.validation_fraction < 1:
      raise ConfigError('validation_fraction must lie in (0, 1)')
    if not 0 <= self.epsilon_min <= self.epsilon_start <= 1:
      raise ConfigError('epsilon values must satisfy 0 <= min <= start <= 1')
    for name in ('n_test', 'n_rct', 'runs', 'hidden', 'batch_size',
                 'memory_size', 'eval_interval', 'max_epochs'):
      if getattr(self, name) < 1:
        raise ConfigError('%s must be positive' % name)
    if self.rl_patience is not None:
      settled = (self.epsilon_decay_transitions +
                 self.rl_patience * self.eval_interval)
      if self.min_transitions < settled:
        raise ConfigError(
            'min_transitions %d is below the epsilon decay plus one patience '
            'window (%d)' % (self.min_transitions, settled))

  @classmethod
  def FromSettings(cls, settings, **overrides):
    """Builds a config from a SettingsManager, then applies `overrides`.

    Raises:
      ConfigError: unknown section or key, or a value that does not parse.
    """
    values = {}
    for section, options in settings.options.items():
      for key, raw in options.items():
        try:
          field, converter = SETTINGS[section, key]
        except KeyError:
          raise ConfigError('Unknown setting [%s] %s in %r' % (
              section, key, settings.file_location))
        try:
          values[field] = converter(raw)
        except ValueError as error:
          raise ConfigError('Bad value for [%s] %s: %s' % (section, key, error))
    values.update((key, value) for key, value in overrides.items()
                  if value is not None)
    if 'seeds' not in values and ('seed' in values or 'runs' in values):
      values['seeds'] = None
    return cls(**values)

  def Replace(self, **overrides):
    """Returns a copy with the non-None `overrides` applied.

    Changing `seed` or `runs` without explicit `seeds` re-derives the seeds.
    """
    overrides = {key: value for key, value in overrides.items()
                 if value is not None}
    if 'seeds' not in overrides and ({'seed', 'runs'} & set(overrides)):
      overrides['seeds'] = None
    return dataclasses.replace(self, **overrides)

  def ToSettings(self, settings):
    """Writes every value into the given SettingsManager."""
    for (section, key), (field, _converter) in SETTINGS.items():
      value = getattr(self, field)
      if isinstance(value, tuple):
        value = ','.join(map(str, value))
      settings.Update(section, key, value)
    return settings

  @property
  def optimizer_settings(self):
    return {'learning_rate': self.learning_rate, 'beta1': self.beta1,
            'beta2': self.beta2, 'epsilon': self.adam_epsilon}
