#!/usr/bin/python3
"""Experiment protocol: shared test sets, seeded runs, reports and exports.

Every method is evaluated on the same test set of complete counterfactual
tables. Learned methods (CI and RL) are trained once per seed; the perfect
and RCT policies are single exact values on the test set.

Classes:
  MethodRun: Result, policy and training curve of one learned run.

Error classes:
  Error: Base class for all errors generated by this module.
  StageError: A run failed; carries the partial ReportTable.
  ExportError: An artifact could not be written.
  IsolationError: Test cases leaked into training or threshold selection.
"""
__version__ = '1.0'

# Standard modules
import dataclasses
import logging
import os

# Third-party modules
import numpy as np
import pandas as pd

# Package modules
from . import causal
from . import process
from . import qlearning
from . import report
from .policies import (EvaluatePolicySampled, NeverPolicy, PerfectPolicyFor,
                       RctPolicy)
from .process import CounterfactualTable

LOGGER = logging.getLogger('intervene.harness')

# Random streams, combined with the run seed into one SeedSequence.
STREAM_TEST = 0
STREAM_RCT = 1
STREAM_CI = 2
STREAM_RL = 3
STREAM_LOG = 4

TEST_PREFIX = 'test'
EVENT_LOG_COLUMNS = ['case_id', 'event_index', 'activity', 'attribute',
                     'case_var', 'intervened', 'final_outcome']


class Error(Exception):
  """Superclass used for inheritance and external exception handling."""


class StageError(Error):
  """A stage of the experiment failed.

  Members:
    @ partial: report.ReportTable with the runs completed before the failure.
  """
  def __init__(self, message, partial=None):
    super(StageError, self).__init__(message)
    self.partial = partial


class ExportError(Error, IOError):
  """An artifact could not be written to disk."""


class IsolationError(Error, AssertionError):
  """A test case was used for training or threshold selection."""


def Rng(seed, stream):
  """Returns the numpy Generator of `stream` for run `seed`."""
  return np.random.default_rng((int(seed), stream))


def SpecFor(config):
  """Returns the ProcessSpec of `config`, with its repeat penalty applied."""
  spec = process.ProcessSpec.Get(config.process)
  if spec.repeat_penalty != config.repeat_penalty:
    spec = dataclasses.replace(spec, repeat_penalty=config.repeat_penalty)
  return spec


def MakeTestSet(spec, seed, n=1000):
  """Returns `n` i.i.d. CounterfactualTables with `test-` case ids."""
  rng = Rng(seed, STREAM_TEST)
  return [CounterfactualTable.FromTrace(process.SampleTrace(spec, rng),
                                        '%s-%05d' % (TEST_PREFIX, index))
          for index in range(n)]


def CheckIsolation(test_set, used_case_ids):
  """Asserts that no test case was used for training or validation.

  Raises:
    IsolationError: a test case id lacks its tag or appears in `used_case_ids`.
  """
  test_ids = set()
  for table in test_set:
    if not (table.case_id or '').startswith(TEST_PREFIX + '-'):
      raise IsolationError('Test case without test provenance: %r' %
                           table.case_id)
    test_ids.add(table.case_id)
  leaked = test_ids.intersection(used_case_ids)
  leaked.update(case_id for case_id in used_case_ids
                if case_id.startswith(TEST_PREFIX + '-'))
  if leaked:
    raise IsolationError('Test cases used outside evaluation: %s' %
                         ', '.join(sorted(leaked)[:5]))


# ##############################################################################
# Runs
#
@dataclasses.dataclass
class MethodRun:
  result: report.RunResult
  policy: object
  curve: pd.DataFrame
  artifact: object = None


def RunCI(spec, config, seed, test_set):
  """Builds an RCT dataset, trains the CI model and evaluates its policy."""
  dataset = causal.BuildRctDataset(spec, config.n_rct, Rng(seed, STREAM_RCT),
                                   config.validation_fraction)
  CheckIsolation(test_set, [case.case_id for case in dataset.cases])
  if config.mode == 'tabular':
    outcome_model = causal.TabularOutcomeModel.FromCases(
        dataset.Cases(causal.TRAIN))
    epochs = 1
    curve = pd.DataFrame(columns=['epoch', 'train_mae', 'val_mae'])
    artifact = outcome_model
  else:
    training = causal.TrainCI(
        dataset, Rng(seed, STREAM_CI), hidden=config.hidden,
        batch_size=config.batch_size, patience=config.ci_patience,
        max_epochs=config.max_epochs, seed=seed, **config.optimizer_settings)
    outcome_model = causal.NeuralOutcomeModel(training.model,
                                              dataset.standardizer)
    epochs = training.epochs
    curve = training.Curve()
    artifact = training.model
  cache = causal.IteCache(outcome_model)
  selection = causal.SelectThreshold(outcome_model, dataset.ValidationTables(),
                                     cache)
  policy = causal.CIPolicy(spec, outcome_model, selection.threshold, cache)
  uplift = EvaluatePolicySampled(policy, test_set)
  LOGGER.info('CI %s seed %d: %d epochs, threshold %.4f, test uplift %.1f',
              spec.id, seed, epochs, selection.threshold, uplift)
  return MethodRun(report.RunResult('ci', seed, uplift, epochs,
                                    selection.threshold),
                   policy, curve, artifact)


def MakeAgent(spec, config, seed):
  if config.mode == 'tabular':
    return qlearning.TabularQAgent(spec, config.alpha, config.alpha_decay,
                                   config.gamma)
  return qlearning.NeuralQAgent(spec, hidden=config.hidden, seed=seed,
                                gamma=config.gamma, **config.optimizer_settings)


def RunRL(spec, config, seed, test_set):
  """Trains a Q-learning agent online and evaluates its greedy policy."""
  agent = MakeAgent(spec, config, seed)
  schedule = qlearning.EpsilonSchedule(config.epsilon_start, config.epsilon_min,
                                       config.epsilon_decay_transitions)
  training = qlearning.TrainRL(
      spec, agent, Rng(seed, STREAM_RL), memory_size=config.memory_size,
      epsilon=schedule, eval_interval=config.eval_interval,
      patience=config.rl_patience, min_transitions=config.min_transitions,
      max_transitions=config.max_transitions)
  policy = qlearning.ExtractPolicy(agent)
  uplift = EvaluatePolicySampled(policy, test_set)
  LOGGER.info('RL %s seed %d: %d transitions, test uplift %.1f',
              spec.id, seed, training.transitions, uplift)
  return MethodRun(report.RunResult('rl', seed, uplift, training.transitions),
                   policy, training.Curve(), agent)


RUNNERS = (('ci', RunCI), ('rl', RunRL))


def FixedUplifts(spec, test_set, never_row=False):
  """Returns the uplifts of the perfect and RCT (and never) policies."""
  fixed = {'perfect': EvaluatePolicySampled(PerfectPolicyFor(spec), test_set),
           'rct': EvaluatePolicySampled(RctPolicy(spec), test_set)}
  if never_row:
    fixed['never'] = EvaluatePolicySampled(NeverPolicy(), test_set)
  return fixed


def RunExperiment(config, out=None, methods=('ci', 'rl')):
  """Runs the full protocol of `config` and returns its ReportTable.

  Arguments:
    @ config: settings.ExperimentConfig
    % out: str ~~ None
      Directory for training curves and checkpoints.
    % methods: sequence of str ~~ ('ci', 'rl')

  Raises:
    StageError: a run failed; `partial` holds the runs completed so far.
  """
  spec = SpecFor(config)
  test_set = MakeTestSet(spec, config.seed, config.n_test)
  fixed = FixedUplifts(spec, test_set, config.never_row)
  runs = []
  for seed in config.seeds:
    for method, runner in RUNNERS:
      if method not in methods:
        continue
      try:
        run = runner(spec, config, seed, test_set)
      except Exception as error:
        LOGGER.exception('%s run for %s with seed %d failed', method, spec.id,
                         seed)
        raise StageError('%s run with seed %d failed: %s' % (
            method, seed, error), report.ReportTable.Aggregate(
                spec.id, config.mode, config.seeds, config.n_test, runs, fixed))
      runs.append(run.result)
      if out:
        WriteRunArtifacts(run, out, spec.id)
  return report.ReportTable.Aggregate(spec.id, config.mode, config.seeds,
                                      config.n_test, runs, fixed)


def CheckAcceptance(table, tolerance=1e-9, rl_share=0.95):
  """Returns the violated result orderings of `table`, empty when all hold.

  Arguments:
    @ table: report.ReportTable
    % tolerance: float ~~ 1e-9
    % rl_share: float ~~ 0.95
      Share of the perfect uplift the RL mean has to reach.
  """
  failures = []
  rows = {row.method: row for row in table.rows}
  perfect = rows['perfect'].uplift_mean
  if rows['rct'].uplift_mean >= 0:
    failures.append('RCT uplift %.3f is not negative' % rows['rct'].uplift_mean)
  for method in ('ci', 'rl'):
    if method in rows and rows[method].uplift_mean > perfect + tolerance:
      failures.append('%s mean uplift %.3f exceeds perfect %.3f' % (
          method, rows[method].uplift_mean, perfect))
  if 'rl' in rows and rows['rl'].uplift_mean < rl_share * perfect - tolerance:
    failures.append('RL mean uplift %.3f is below %.0f%% of perfect %.3f' % (
        rows['rl'].uplift_mean, 100 * rl_share, perfect))
  if 'ci' in rows:
    ci_mean = rows['ci'].uplift_mean
    if ci_mean <= 0:
      failures.append('CI mean uplift %.3f is not positive' % ci_mean)
    if ci_mean <= rows['rct'].uplift_mean:
      failures.append('CI mean uplift %.3f does not beat RCT' % ci_mean)
    if 'rl' in rows and ci_mean >= rows['rl'].uplift_mean:
      failures.append('CI mean uplift %.3f does not stay below RL %.3f' % (
          ci_mean, rows['rl'].uplift_mean))
    if ('rl' in rows and len(table.seeds) > 1 and
        rows['rl'].uplift_std >= rows['ci'].uplift_std):
      failures.append('RL uplift std %.3f is not below CI std %.3f' % (
          rows['rl'].uplift_std, rows['ci'].uplift_std))
  if 'never' in rows and abs(rows['never'].uplift_mean) > tolerance:
    failures.append('never policy uplift %.3f is not zero' %
                    rows['never'].uplift_mean)
  for failure in failures:
    LOGGER.warning('Acceptance: %s', failure)
  return failures


# ##############################################################################
# Exports
#
def WriteFrame(frame, path, **kwds):
  """Writes a data frame as csv; OSErrors become ExportError."""
  try:
    frame.to_csv(path, index=False, encoding='utf-8', lineterminator='\n',
                 **kwds)
  except OSError as error:
    raise ExportError('Could not write %r: %s' % (str(path), error))
  return path


def WriteCurve(curve, path):
  """Writes a training curve frame as csv."""
  return WriteFrame(curve, path)


def WriteRunArtifacts(run, out, process_id):
  """Writes the training curve and checkpoint of one run into `out`."""
  name = '%s_%s_seed%d' % (run.result.method, process_id, run.result.seed)
  WriteCurve(run.curve, os.path.join(out, name + '_curve.csv'))
  if hasattr(run.artifact, 'Save'):
    try:
      run.artifact.Save(os.path.join(out, name + '.npz'))
    except Exception as error:
      raise ExportError('Could not write checkpoint for %s: %s' % (name, error))


def EventLogRows(case_id, trace, option):
  outcome = process.Outcome(trace, option)
  for index, event in enumerate(trace.events, 1):
    yield (case_id, index, event.activity, event.attribute, trace.case_var,
           int(option.index == index), outcome)


def ExportEventLog(cases, path):
  """Writes cases as an event log, one row per event.

  Arguments:
    @ cases: iterable of (case_id, LatentTrace, InterventionOption)
    @ path: str

  Raises:
    ExportError: the file could not be written.
  """
  frame = pd.DataFrame(
      [row for case_id, trace, option in cases
       for row in EventLogRows(case_id, trace, option)],
      columns=EVENT_LOG_COLUMNS)
  return WriteFrame(frame, path)


def PolicyCases(test_set, policy, seed=0):
  """Returns (case_id, trace, option) of `test_set` as run under `policy`."""
  rng = Rng(seed, STREAM_LOG)
  return [(table.case_id, table.trace, policy.InducedOption(table.trace, rng))
          for table in test_set]


def ExportCounterfactuals(test_set, path):
  """Writes the outcome of every option per test case."""
  if not test_set:
    return WriteFrame(pd.DataFrame(columns=['case_id']), path)
  labels = [option.label for option in process.Options(test_set[0].trace.spec)]
  frame = pd.DataFrame([table.OutcomeRow() for table in test_set],
                       columns=labels)
  frame.insert(0, 'case_id', [table.case_id for table in test_set])
  return WriteFrame(frame, path)
