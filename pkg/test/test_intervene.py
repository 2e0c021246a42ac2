#!/usr/bin/python3
"""Tests for command routing, the laboratory dispatcher and the entry point."""

# Too many public methods
# pylint: disable=R0904

# Standard modules
import contextlib
import io
import logging
import os
import tempfile
import unittest

# Unittest target
import intervene
from intervene import __main__ as entry
from intervene import process
from intervene.commands import ROUTES, Commands


class Handlers:
  """Minimal command class recording what ran."""
  def __init__(self, config, out, logger):
    self.config = config

  def Echo(self, arguments):
    return arguments

  def Broken(self, arguments):
    raise process.InvalidOptionError('option 9 does not exist')

  def Crash(self, arguments):
    raise ZeroDivisionError('boom')


HANDLER_ROUTES = (('echo', 'Echo'), ('broken', 'Broken'), ('crash', 'Crash'))


def CloseLogger():
  logger = logging.getLogger('intervene')
  for handler in list(logger.handlers):
    logger.removeHandler(handler)
    handler.close()


class Router(unittest.TestCase):
  """Command name routing."""
  def testMatch(self):
    """[Router] Patterns map full command names onto handlers"""
    router = intervene.Router(Handlers).router(HANDLER_ROUTES)
    self.assertEqual(router('echo'), 'Echo')
    self.assertEqual(router('crash'), 'Crash')
    self.assertRaises(intervene.NoRouteError, router, 'echoes')

  def testMissingHandler(self):
    """[Router] A route without a handler raises NoRouteError"""
    self.assertRaises(intervene.NoRouteError,
                      intervene.Router(Handlers).router, [('run', 'Run')])

  def testCommandRoutes(self):
    """[Router] Every command line route has a handler"""
    router = intervene.Router(Commands).router(ROUTES)
    self.assertEqual(router('reproduce-table3'), 'Reproduce')
    self.assertRaises(intervene.NoRouteError, router, 'reproduce')


class Laboratory(unittest.TestCase):
  """Dispatching commands and their exit codes."""
  def setUp(self):
    self.directory = tempfile.TemporaryDirectory()
    self.out = os.path.join(self.directory.name, 'results')
    self.laboratory = intervene.Laboratory(Handlers, HANDLER_ROUTES,
                                           out=self.out)

  def tearDown(self):
    CloseLogger()
    self.directory.cleanup()

  def testLogFile(self):
    """[Laboratory] Creates the output directory and its log file"""
    self.assertTrue(os.path.isfile(os.path.join(self.out, 'intervene.log')))

  def testDispatch(self):
    """[Laboratory] Returns the exit code the handler returns"""
    self.assertEqual(self.laboratory('echo', 0), intervene.EXIT_OK)
    self.assertEqual(self.laboratory('echo', 2), intervene.EXIT_ACCEPTANCE)

  def testErrors(self):
    """[Laboratory] Unknown commands and failures exit with EXIT_ERROR"""
    with self.assertLogs('intervene', level='ERROR') as logs:
      self.assertEqual(self.laboratory('unknown'), intervene.EXIT_ERROR)
      self.assertEqual(self.laboratory('broken'), intervene.EXIT_ERROR)
      self.assertEqual(self.laboratory('crash'), intervene.EXIT_ERROR)
    self.assertIn('option 9 does not exist', logs.output[1])
    self.assertIn('Uncaught exception in crash', logs.output[2])

  def testBadLogLevel(self):
    """[Laboratory] Unknown log levels raise ConfigError"""
    config = intervene.ExperimentConfig(log_level='chatty')
    self.assertRaises(intervene.settings.ConfigError, intervene.Laboratory,
                      Handlers, HANDLER_ROUTES, config, self.out)


class Main(unittest.TestCase):
  """The command line entry point."""
  def setUp(self):
    self.directory = tempfile.TemporaryDirectory()
    self.out = self.directory.name

  def tearDown(self):
    CloseLogger()
    self.directory.cleanup()

  def testEvaluate(self):
    """[main] evaluate writes the reference policy table"""
    stdout = io.StringIO()
    with contextlib.redirect_stdout(stdout):
      code = entry.main(['evaluate', '--process', 'p1', '--out', self.out])
    self.assertEqual(code, intervene.EXIT_OK)
    self.assertTrue(os.path.isfile(os.path.join(self.out, 'evaluate_p1.csv')))
    self.assertIn('perfect', stdout.getvalue())

  def testPerfectPinnedValue(self):
    """[main] perfect prints the exact uplift scaled to the test set"""
    stdout = io.StringIO()
    with contextlib.redirect_stdout(stdout):
      code = entry.main(['perfect', '--process', 'p2', '--out', self.out])
    self.assertEqual(code, intervene.EXIT_OK)
    self.assertIn('pinned exact uplift 1200.0 per 1000 cases',
                  stdout.getvalue())
    self.assertTrue(os.path.isfile(os.path.join(self.out, 'perfect_p2.csv')))

  def testMissingConfig(self):
    """[main] A missing ini file exits with EXIT_ERROR"""
    stderr = io.StringIO()
    with contextlib.redirect_stderr(stderr):
      code = entry.main(['perfect', '--config',
                         os.path.join(self.out, 'absent.ini'),
                         '--out', self.out])
    self.assertEqual(code, intervene.EXIT_ERROR)
    self.assertIn('does not exist', stderr.getvalue())

  def testUnknownCommand(self):
    """[main] argparse rejects commands without a route"""
    with contextlib.redirect_stderr(io.StringIO()):
      self.assertRaises(SystemExit, entry.main, ['fly'])


if __name__ == '__main__':
  unittest.main(testRunner=unittest.TextTestRunner(verbosity=2))
