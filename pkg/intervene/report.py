#!/usr/bin/python3
"""Experiment report tables and their text, csv and json renderings.

Classes:
  RunResult: Outcome of one method in one seeded run.
  MethodRow: Aggregated uplift and effort of one method.
  ReportTable: All rows and runs of an experiment.
  Report: Base renderer carrying a content type.
  TextReport, CsvReport, JsonReport: The three output formats.

Error classes:
  Error: Base class for all errors generated by this module.
  ParseError: A rendered report could not be read back.
  WriteError: A report could not be written to disk.
"""
__version__ = '1.0'

# Standard modules
import dataclasses
import io
import json
import re

# Third-party modules
import numpy as np
import pandas as pd

# Methods in report order.
METHODS = ('ci', 'rl', 'perfect', 'rct', 'never')
EFFORT_UNITS = {'ci': 'epochs', 'rl': 'transitions'}
DECIMALS = 6
MISSING = '-'


class Error(Exception):
  """Superclass used for inheritance and external exception handling."""


class ParseError(Error, ValueError):
  """The report text does not have the expected layout."""


class WriteError(Error, IOError):
  """The report could not be written."""


def Round(value):
  """Rounds floats to the report precision; None stays None."""
  if value is None:
    return None
  value = float(value)
  if not np.isfinite(value):
    return value
  return round(value, DECIMALS)


@dataclasses.dataclass(frozen=True)
class RunResult:
  method: str
  seed: int
  uplift: float
  effort: int = None
  threshold: float = None

  def __post_init__(self):
    object.__setattr__(self, 'uplift', Round(self.uplift))
    object.__setattr__(self, 'threshold', Round(self.threshold))


@dataclasses.dataclass(frozen=True)
class MethodRow:
  """Mean uplift (and std over runs) plus computational effort of a method.

  Single-valued methods (perfect, rct, never) carry no std and no effort.
  """
  method: str
  uplift_mean: float
  uplift_std: float = None
  effort_unit: str = None
  effort_mean: float = None
  effort_std: float = None

  def __post_init__(self):
    for name in ('uplift_mean', 'uplift_std', 'effort_mean', 'effort_std'):
      object.__setattr__(self, name, Round(getattr(self, name)))

  @classmethod
  def FromRuns(cls, method, runs):
    uplifts = np.array([run.uplift for run in runs], dtype=np.float64)
    efforts = np.array([run.effort for run in runs], dtype=np.float64)
    return cls(method, uplifts.mean(), _Std(uplifts), EFFORT_UNITS.get(method),
               efforts.mean(), _Std(efforts))


def _Std(values):
  return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclasses.dataclass(frozen=True)
class ReportTable:
  process: str
  mode: str
  seeds: tuple
  n_test: int
  rows: tuple
  runs: tuple = ()

  def Row(self, method):
    for row in self.rows:
      if row.method == method:
        return row
    raise KeyError(method)

  def Methods(self):
    return [row.method for row in self.rows]

  @classmethod
  def Aggregate(cls, process, mode, seeds, n_test, runs, fixed):
    """Builds a table from per-run results and single-valued uplifts.

    Arguments:
      @ runs: list of RunResult for the learned methods (ci, rl)
      @ fixed: dict method -> uplift for perfect, rct and optionally never
    """
    rows = []
    for method in METHODS:
      method_runs = [run for run in runs if run.method == method]
      if method_runs:
        rows.append(MethodRow.FromRuns(method, method_runs))
      elif method in fixed:
        rows.append(MethodRow(method, fixed[method]))
    return cls(process, mode, tuple(seeds), int(n_test), tuple(rows),
               tuple(runs))

  def ToDict(self):
    return dataclasses.asdict(self)

  @classmethod
  def FromDict(cls, data):
    return cls(data['process'], data['mode'], tuple(data['seeds']),
               int(data['n_test']),
               tuple(MethodRow(**row) for row in data['rows']),
               tuple(RunResult(**run) for run in data.get('runs', ())))


# ##############################################################################
# Renderers
#
class ReportEncoder(json.JSONEncoder):
  """Json encoder aware of numpy scalars, tuples and dataclasses."""
  def default(self, o):
    if isinstance(o, np.integer):
      return int(o)
    if isinstance(o, np.floating):
      return float(o)
    if isinstance(o, np.ndarray):
      return o.tolist()
    if dataclasses.is_dataclass(o):
      return dataclasses.asdict(o)
    return super(ReportEncoder, self).default(o)


class Report:
  """A rendered ReportTable.

  Subclasses set CONTENT_TYPE and implement `Render`.
  """
  CONTENT_TYPE = 'text/plain'
  EXTENSION = 'txt'

  def __init__(self, table, charset='utf-8'):
    self.table = table
    self.charset = charset
    self.content = self.Render(table)

  @property
  def content_type(self):
    return '%s; charset=%s' % (self.CONTENT_TYPE, self.charset)

  def Render(self, table):
    raise NotImplementedError

  def Write(self, path):
    """Writes the rendered content to `path`.

    Raises:
      WriteError: the file could not be written.
    """
    try:
      with open(path, 'w', encoding=self.charset, newline='') as report:
        report.write(self.content)
    except OSError as error:
      raise WriteError('Could not write report to %r: %s' % (str(path), error))
    return path

  def __str__(self):
    return self.content


def _Cell(value):
  if value is None:
    return MISSING
  if isinstance(value, float):
    return '%.*f' % (DECIMALS, value)
  return str(value)


def _Value(cell, kind=float):
  if cell == MISSING:
    return None
  return kind(cell)


ROW_FIELDS = ('method', 'uplift_mean', 'uplift_std', 'effort_unit',
              'effort_mean', 'effort_std')
RUN_FIELDS = ('method', 'seed', 'uplift', 'effort', 'threshold')
TEXT_HEADER = re.compile(r'^Process (?P<process>\S+) \((?P<mode>\w+)\), '
                         r'seeds (?P<seeds>[\d,]*), '
                         r'test set (?P<n_test>\d+) cases$')


class TextReport(Report):
  """Fixed-width table in the layout of a results table."""
  CONTENT_TYPE = 'text/plain'
  EXTENSION = 'txt'

  def Render(self, table):
    lines = ['Process %s (%s), seeds %s, test set %d cases' % (
        table.process, table.mode, ','.join(map(str, table.seeds)),
        table.n_test), '']
    lines.extend(_Columns(ROW_FIELDS, [
        [_Cell(getattr(row, field)) for field in ROW_FIELDS]
        for row in table.rows]))
    if table.runs:
      lines.append('')
      lines.extend(_Columns(RUN_FIELDS, [
          [_Cell(getattr(run, field)) for field in RUN_FIELDS]
          for run in table.runs]))
    return '\n'.join(lines) + '\n'


def _Columns(header, cells):
  widths = [max(len(item) for item in column)
            for column in zip(header, *cells)]
  return ['  '.join(item.ljust(width) for item, width in zip(line, widths)
                    ).rstrip() for line in [list(header)] + cells]


class CsvReport(Report):
  """One csv line per method row."""
  CONTENT_TYPE = 'text/csv'
  EXTENSION = 'csv'

  def Render(self, table):
    frame = pd.DataFrame([dataclasses.asdict(row) for row in table.rows],
                         columns=list(ROW_FIELDS))
    frame.insert(0, 'process', table.process)
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, float_format='%.6f',
                 lineterminator='\n')
    return buffer.getvalue()


class JsonReport(Report):
  """Sorted-key json with report-precision floats, for byte-level diffs."""
  CONTENT_TYPE = 'application/json'
  EXTENSION = 'json'

  def Render(self, table):
    return json.dumps(table.ToDict(), cls=ReportEncoder, sort_keys=True,
                      indent=2) + '\n'


FORMATS = {'text': TextReport, 'csv': CsvReport, 'json': JsonReport}


def EmitReport(table, format='text'):
  """Returns the Report rendering `table` in `format` (text, csv or json)."""
  try:
    return FORMATS[format](table)
  except KeyError:
    raise Error('Unknown report format %r, available: %s' % (
        format, ', '.join(sorted(FORMATS))))


def FromJson(content):
  """Reads a ReportTable back from JsonReport content."""
  try:
    return ReportTable.FromDict(json.loads(content))
  except (ValueError, KeyError, TypeError) as error:
    raise ParseError('Not a json report: %s' % error)


def FromText(content):
  """Reads a ReportTable back from TextReport content."""
  lines = content.splitlines()
  if not lines:
    raise ParseError('Empty report')
  header = TEXT_HEADER.match(lines[0])
  if not header:
    raise ParseError('Unexpected report header %r' % lines[0])
  blocks = [[]]
  for line in lines[2:]:
    if line.strip():
      blocks[-1].append(line.split())
    else:
      blocks.append([])
  try:
    rows = tuple(MethodRow(
        cells[0], _Value(cells[1]), _Value(cells[2]), _Value(cells[3], str),
        _Value(cells[4]), _Value(cells[5])) for cells in blocks[0][1:])
    runs = ()
    if len(blocks) > 1 and blocks[1]:
      runs = tuple(RunResult(
          cells[0], int(cells[1]), _Value(cells[2]), _Value(cells[3], int),
          _Value(cells[4])) for cells in blocks[1][1:])
  except (IndexError, ValueError) as error:
    raise ParseError('Malformed report table: %s' % error)
  seeds = tuple(int(seed) for seed in header.group('seeds').split(',') if seed)
  return ReportTable(header.group('process'), header.group('mode'), seeds,
                     int(header.group('n_test')), rows, runs)
