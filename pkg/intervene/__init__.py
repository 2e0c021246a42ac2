#!/usr/bin/python3
"""Intervene: timing a single intervention in running business processes.

Compares direct causal inference on randomized trial data with online
Q-learning on two synthetic processes, against the exact perfect policy.
"""

__version__ = '1.0'

# Standard modules
import logging
import os
import re

# Package modules
from . import causal
from . import harness
from . import network
from . import policies
from . import process
from . import qlearning
from . import report
from . import settings

# Package classes
from .settings import ExperimentConfig, SettingsManager

LOGGER = logging.getLogger('intervene')
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

# Every error the package raises on purpose.
ERRORS = (process.Error, policies.Error, network.Error, causal.Error,
          harness.Error, report.Error, settings.Error)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ACCEPTANCE = 2


class Error(Exception):
  """Superclass used for inheritance and external exception handling."""


class NoRouteError(Error):
  """There is no handler for the requested command."""


class Router:
  def __init__(self, command_class):
    self.command_class = command_class

  def router(self, routes):
    """Returns a closure that maps a command name to its handler name.

    Arguments:
      @ routes: iterable of 2-tuples.
        Each tuple is a pair of `pattern` (regex) and the name of the handler
        method on the command class.

    Raises:
      NoRouteError: a route names a handler the command class lacks.
    """
    compiled = []
    for pattern, handler in routes:
      if not callable(getattr(self.command_class, handler, None)):
        raise NoRouteError('%s has no handler called %r' % (
            self.command_class.__name__, handler))
      compiled.append((re.compile(pattern + '$', re.UNICODE), handler))

    def command_router(command):
      """Returns the handler name of the first pattern matching `command`.

      Raises:
        NoRouteError: none of the patterns match.
      """
      for pattern, handler in compiled:
        if pattern.match(command):
          return handler
      raise NoRouteError('%r cannot be handled' % command)
    return command_router


class Laboratory:
  """Configured dispatcher for experiment commands.

  Arguments:
    @ command_class: class
      Holds the handler methods named in `routes`; instantiated per command
      with the config, output directory and logger.
    @ routes: iterable of (pattern, handler name)
    % config: ExperimentConfig ~~ None
      The protocol defaults when not given.
    % out: str ~~ '.'
      Output directory, created when missing. The log file is written here.
  """
  def __init__(self, command_class, routes, config=None, out='.'):
    self.config = config or ExperimentConfig()
    self.out = out
    os.makedirs(out, exist_ok=True)
    self.logger = self.SetupLogger()
    self.router = Router(command_class).router(routes)
    self.command_class = command_class

  @classmethod
  def FromFile(cls, command_class, routes, filename, out='.', **overrides):
    """Creates a Laboratory with its config read from an ini file."""
    config = ExperimentConfig.FromSettings(SettingsManager(filename),
                                           **overrides)
    return cls(command_class, routes, config, out)

  def SetupLogger(self):
    logger = LOGGER
    level = logging.getLevelName(self.config.log_level.upper())
    if not isinstance(level, int):
      raise settings.ConfigError('Unknown log level %r' % self.config.log_level)
    logger.setLevel(level)
    for handler in list(logger.handlers):
      logger.removeHandler(handler)
      handler.close()
    formatter = logging.Formatter(LOG_FORMAT)
    file_handler = logging.FileHandler(
        os.path.join(self.out, self.config.log_file), encoding='utf-8')
    stream_handler = logging.StreamHandler()
    for handler in (file_handler, stream_handler):
      handler.setLevel(level)
      handler.setFormatter(formatter)
      logger.addHandler(handler)
    return logger

  def __call__(self, command, arguments=None):
    """Runs `command` and returns its exit code.

    Package errors are logged as a diagnostic; anything else is logged with
    its traceback. Both exit with EXIT_ERROR.
    """
    try:
      handler = self.router(command)
    except NoRouteError as error:
      self.logger.error('%s', error)
      return EXIT_ERROR
    commands = self.command_class(self.config, self.out, self.logger)
    try:
      return getattr(commands, handler)(arguments)
    except ERRORS as error:
      self.logger.error('%s failed: %s', command, error)
      return EXIT_ERROR
    except Exception:
      self.logger.exception('Uncaught exception in %s:', command)
      return EXIT_ERROR
