#!/usr/bin/python3
"""Command line entry point: python -m intervene <command> [flags]."""

# Standard modules
import argparse
import sys

# Package modules
from . import EXIT_ERROR, Laboratory, settings
from .commands import ROUTES, Commands


def Parser():
  parser = argparse.ArgumentParser(
      prog='intervene',
      description='Learn when to intervene in a running case: direct causal '
                  'inference versus online Q-learning on synthetic processes.')
  commands = parser.add_subparsers(dest='command', metavar='command')
  commands.required = True
  descriptions = {
      'generate': 'write the shared test set and an RCT event log',
      'perfect': 'solve and dump the perfect policy',
      'train-ci': 'train and evaluate one causal inference run',
      'train-rl': 'train and evaluate one Q-learning run',
      'evaluate': 'evaluate the reference policies',
      'reproduce-table3': 'run the full protocol and write the uplift table'}
  for name, _handler in ROUTES:
    command = commands.add_parser(name, help=descriptions[name])
    command.add_argument('--process', choices=settings.PROCESSES,
                         help='process to run on (default p1)')
    command.add_argument('--seed', type=int,
                         help='base seed; runs use seed .. seed + runs - 1')
    command.add_argument('--runs', type=int, help='number of seeded runs')
    command.add_argument('--mode', choices=settings.MODES,
                         help='function approximation (default neural)')
    command.add_argument('--config', help='ini file with experiment settings')
    command.add_argument('--out', default='.', help='output directory')
    command.add_argument('--format', default='text',
                         choices=('text', 'csv', 'json'),
                         help='report format printed to stdout')
    command.add_argument('--debug', action='store_true',
                         help='debug logging and the never-policy control row')
  return parser


def main(argv=None):
  arguments = Parser().parse_args(argv)
  overrides = {'process': arguments.process, 'seed': arguments.seed,
               'runs': arguments.runs, 'mode': arguments.mode}
  if arguments.debug:
    overrides.update(never_row=True, log_level='DEBUG')
  try:
    if arguments.config:
      laboratory = Laboratory.FromFile(Commands, ROUTES, arguments.config,
                                       arguments.out, **overrides)
    else:
      laboratory = Laboratory(
          Commands, ROUTES, settings.ExperimentConfig().Replace(**overrides),
          arguments.out)
  except settings.Error as error:
    sys.stderr.write('intervene: %s\n' % error)
    return EXIT_ERROR
  return laboratory(arguments.command, arguments)


if __name__ == '__main__':
  sys.exit(main())
