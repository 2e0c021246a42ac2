#!/usr/bin/python3
"""Direct causal inference: outcome regression on RCT data, ITE, threshold.

One model predicts the final outcome of a prefix together with a candidate
decision taken at its last event. The individual treatment effect (ITE) of a
prefix is the predicted outcome with the intervention minus the one without.
The policy intervenes at the first prefix whose ITE exceeds a threshold that
maximizes the realized uplift on the validation cases.

Classes:
  RctCase: One case of the RCT dataset with its drawn option and outcome.
  CIDataset: Prefix-expanded, encoded RCT dataset split by case.
  CITrainingResult: Trained regressor plus its training curve.
  NeuralOutcomeModel: ITE from a SequenceRegressor in CI mode.
  TabularOutcomeModel: ITE from exact conditional means.
  CIPolicy: Intervene iff ITE > threshold and nothing was done before.
  ThresholdSelection: Chosen threshold with its validation uplift.

Error classes:
  Error: Base class for all errors generated by this module.
  EmptyValidationError: Threshold selection without validation cases.
"""
__version__ = '1.0'

# Standard modules
import dataclasses
import logging

# Third-party modules
import numpy as np
import pandas as pd

# Package modules
from . import network
from . import process
from .network import CI, DivergenceError, NoDataError
from .policies import Policy, PrefixKey, RctOption
from .process import CounterfactualTable, InterventionOption

LOGGER = logging.getLogger('intervene.causal')

TRAIN = 'train'
VALIDATION = 'validation'
# Case id provenance tags per split.
CASE_PREFIX = {TRAIN: 'rct', VALIDATION: 'val'}


class Error(Exception):
  """Superclass used for inheritance and external exception handling."""


class EmptyValidationError(Error, ValueError):
  """Threshold selection needs at least one validation case."""


# ##############################################################################
# Dataset
#
@dataclasses.dataclass(frozen=True)
class RctCase:
  case_id: str
  trace: process.LatentTrace
  option: InterventionOption
  outcome: float
  split: str = TRAIN


def ExpandCase(trace, option):
  """Returns the decision samples an RCT case contributes.

  Every prefix up to the intervention event (or the whole case for `never`)
  is one sample. Only the prefix of the intervention event carries
  intervene_now = True; longer prefixes have no decision left and are left out.

  Returns:
    list of (PrefixObservation, intervene_now) tuples.
  """
  last = trace.spec.num_events if option.never else option.index
  return [(trace.Prefix(length), (not option.never) and length == option.index)
          for length in range(1, last + 1)]


@dataclasses.dataclass
class CIDataset:
  """Encoded RCT decision samples, split by case into train and validation.

  Members:
    @ spec: process.ProcessSpec
    @ cases: list of RctCase
    @ standardizer: network.Standardizer, fitted on the training cases only
    @ arrays: dict split -> (steps, side, labels, case_ids)
  """
  spec: process.ProcessSpec
  cases: list
  standardizer: network.Standardizer
  arrays: dict

  def Cases(self, split):
    return [case for case in self.cases if case.split == split]

  def ValidationTables(self):
    """Returns complete CounterfactualTables of the validation cases."""
    return [CounterfactualTable.FromTrace(case.trace, case.case_id)
            for case in self.Cases(VALIDATION)]

  def Samples(self, split):
    """Yields (EncodedPrefix, standardized label) pairs of a split."""
    steps, side, labels, _case_ids = self.arrays[split]
    for index in range(len(labels)):
      yield network.EncodedPrefix(steps[index], side[index]), labels[index]

  def SampleCount(self, split):
    return len(self.arrays[split][2])


def BuildRctDataset(spec, n_cases=10000, rng=None, validation_fraction=0.2):
  """Generates an RCT dataset and prefix-expands it.

  Arguments:
    @ spec: process.ProcessSpec
    % n_cases: int ~~ 10,000
    @ rng: numpy.random.Generator
    % validation_fraction: float ~~ 0.2
      Fraction of cases (not prefixes) held out for validation.

  Returns:
    CIDataset: with the standardizer fitted on the training split only.
  """
  rng = rng if rng is not None else np.random.default_rng()
  drawn = []
  for _index in range(n_cases):
    trace = process.SampleTrace(spec, rng)
    option = RctOption(spec, rng)
    drawn.append((trace, option, process.Outcome(trace, option)))
  held_out = set(rng.permutation(n_cases)[
      :int(round(n_cases * validation_fraction))].tolist())
  cases = []
  for index, (trace, option, outcome) in enumerate(drawn):
    split = VALIDATION if index in held_out else TRAIN
    cases.append(RctCase('%s-%05d' % (CASE_PREFIX[split], index), trace,
                         option, outcome, split))
  training = [case for case in cases if case.split == TRAIN]
  standardizer = network.Standardizer.FromTraces(
      [case.trace for case in training], [case.outcome for case in training])
  arrays = {split: _EncodeSplit(spec, [case for case in cases
                                       if case.split == split], standardizer)
            for split in (TRAIN, VALIDATION)}
  LOGGER.info('RCT dataset for %s: %d cases, %d train / %d validation samples',
              spec.id, n_cases, len(arrays[TRAIN][2]),
              len(arrays[VALIDATION][2]))
  return CIDataset(spec, cases, standardizer, arrays)


def _EncodeSplit(spec, cases, standardizer):
  encoded = []
  labels = []
  case_ids = []
  for case in cases:
    label = float(standardizer.Transform('outcome', case.outcome))
    for prefix, intervene_now in ExpandCase(case.trace, case.option):
      encoded.append(network.Encode(prefix, standardizer, CI, intervene_now))
      labels.append(label)
      case_ids.append(case.case_id)
  if not encoded:
    width = network.FeatureWidth(spec)
    return (np.zeros((0, spec.num_events, width)),
            np.zeros((0, network.SideWidth(spec))), np.zeros(0), [])
  steps, side = network.Stack(encoded)
  return steps, side, np.array(labels), case_ids


# ##############################################################################
# Training
#
@dataclasses.dataclass
class CITrainingResult:
  model: network.SequenceRegressor
  epochs: int
  best_epoch: int
  history: list

  def Curve(self):
    """Returns the training curve as an `epoch,train_mae,val_mae` frame."""
    return pd.DataFrame(self.history, columns=['epoch', 'train_mae', 'val_mae'])


def TrainCI(dataset, rng, hidden=32, batch_size=1024, patience=5,
            max_epochs=1000, seed=0, **optimizer_settings):
  """Trains the outcome regressor with early stopping on validation MAE.

  Each epoch shuffles the training samples and runs one Adam step per batch.
  Training stops after `patience` epochs without validation improvement and
  the best parameters are restored.

  Raises:
    network.DivergenceError: a loss became non-finite.
  """
  spec = dataset.spec
  steps, side, labels, _ids = dataset.arrays[TRAIN]
  val_steps, val_side, val_labels, _ids = dataset.arrays[VALIDATION]
  if not len(labels):
    raise Error('CI training needs a nonempty training split')
  model = network.SequenceRegressor.ForSpec(spec, CI, hidden=hidden, seed=seed,
                                            **optimizer_settings)
  model.metadata = {'process': spec.id,
                    'standardizer': dataset.standardizer.ToDict()}
  stopper = network.EarlyStopping(patience, 'min')
  history = []
  epoch = 0
  for epoch in range(1, max_epochs + 1):
    order = rng.permutation(len(labels))
    total = 0.0
    for start in range(0, len(order), batch_size):
      batch = order[start:start + batch_size]
      total += model.TrainStep(steps[batch], side[batch], labels[batch]
                               ) * len(batch)
    train_mae = total / len(labels)
    if len(val_labels):
      val_mae = model.MeanAbsoluteError(val_steps, val_side, val_labels)
    else:
      val_mae = train_mae
    if not np.isfinite(val_mae):
      raise DivergenceError('Validation MAE diverged at epoch %d' % epoch)
    history.append((epoch, train_mae, val_mae))
    LOGGER.debug('CI epoch %d: train MAE %.5f, validation MAE %.5f',
                 epoch, train_mae, val_mae)
    if stopper.Update(val_mae, epoch, model.Snapshot):
      LOGGER.info('CI early stopping at epoch %d, best epoch %d (MAE %.5f)',
                  epoch, stopper.best_step, stopper.best)
      break
  model.Restore(stopper.best_state)
  return CITrainingResult(model, epoch, stopper.best_step, history)


# ##############################################################################
# Treatment effects
#
class NeuralOutcomeModel:
  """ITE from a trained CI-mode SequenceRegressor."""
  def __init__(self, model, standardizer):
    self.model = model
    self.standardizer = standardizer

  def Predict(self, observations, intervene_now):
    """Returns de-standardized predicted outcomes."""
    encoded = [network.Encode(observation, self.standardizer, CI, intervene_now)
               for observation in observations]
    predictions = self.model.PredictEncoded(encoded)[:, 0]
    return self.standardizer.Inverse('outcome', predictions)

  def Ite(self, observations):
    """Returns predicted outcome(intervene) - outcome(wait) per observation."""
    observations = list(observations)
    if not observations:
      return np.zeros(0)
    return (self.Predict(observations, True)
            - self.Predict(observations, False))


class TabularOutcomeModel:
  """ITE from exact empirical conditional means per prefix and decision.

  Prefixes without data for either decision get a NaN ITE, which never
  exceeds a threshold.
  """
  def __init__(self, estimator):
    self.estimator = estimator

  @classmethod
  def FromCases(cls, cases):
    """Fits on sampled RCT cases (unit weights)."""
    estimator = network.TabularEstimator()
    estimator.Fit((PrefixKey(prefix), int(intervene_now), case.outcome)
                  for case in cases
                  for prefix, intervene_now in ExpandCase(case.trace,
                                                          case.option))
    return cls(estimator)

  @classmethod
  def FromStateSpace(cls, spec):
    """Fits on the full state space weighted by exact RCT probabilities."""
    estimator = network.TabularEstimator()
    option_weight = 1.0 / spec.num_options
    estimator.Fit(
        (PrefixKey(prefix), int(intervene_now), process.Outcome(trace, option),
         trace.probability * option_weight)
        for trace in process.StateSpace(spec)
        for option in process.Options(spec)
        for prefix, intervene_now in ExpandCase(trace, option))
    return cls(estimator)

  def Ite(self, observations):
    effects = []
    for observation in observations:
      key = PrefixKey(observation)
      try:
        effects.append(self.estimator.Predict(key, 1)
                       - self.estimator.Predict(key, 0))
      except NoDataError:
        effects.append(np.nan)
    return np.array(effects, dtype=np.float64)


def Ite(outcome_model, observation):
  """Returns the ITE of a single prefix without prior intervention."""
  return float(outcome_model.Ite([observation])[0])


class IteCache:
  """Computes ITEs once per distinct prefix key."""
  def __init__(self, outcome_model):
    self.outcome_model = outcome_model
    self.values = {}

  def Fill(self, observations):
    missing = {}
    for observation in observations:
      key = PrefixKey(observation)
      if key not in self.values:
        missing.setdefault(key, observation)
    if missing:
      effects = self.outcome_model.Ite(list(missing.values()))
      self.values.update(zip(missing, effects.tolist()))

  def __getitem__(self, observation):
    key = PrefixKey(observation)
    if key not in self.values:
      self.Fill([observation])
    return self.values[key]

  def Matrix(self, traces):
    """Returns an (n_traces, num_events) array of prefix ITEs."""
    prefixes = [list(trace.Prefixes()) for trace in traces]
    self.Fill(prefix for row in prefixes for prefix in row)
    return np.array([[self.values[PrefixKey(prefix)] for prefix in row]
                     for row in prefixes], dtype=np.float64)


class CIPolicy(Policy):
  """Intervenes at the first prefix whose ITE exceeds `threshold`."""
  NAME = 'ci'

  def __init__(self, spec, outcome_model, threshold, cache=None):
    self.spec = spec
    self.outcome_model = outcome_model
    self.threshold = threshold
    self.cache = cache or IteCache(outcome_model)
    self.cache.Fill(process.EnumeratePrefixes(spec, process.StateSpace(spec)))

  def Ite(self, observation):
    return self.cache[observation]

  def _Decide(self, observation):
    return self.cache[observation] > self.threshold


# ##############################################################################
# Threshold selection
#
@dataclasses.dataclass(frozen=True)
class ThresholdSelection:
  threshold: float
  uplift: float
  candidates: int


def ThresholdUplift(ite, outcomes, threshold, weights=None):
  """Returns the (weighted) uplift of intervening iff ITE > threshold.

  Arguments:
    @ ite: ndarray (cases, num_events), NaN for unknown effects
    @ outcomes: ndarray (cases, num_events + 1), columns never, at_1 .. at_T
    @ threshold: float
    % weights: ndarray (cases,) ~~ None
  """
  with np.errstate(invalid='ignore'):
    mask = ite > threshold
  column = np.where(mask.any(axis=1), mask.argmax(axis=1) + 1, 0)
  rows = np.arange(len(outcomes))
  uplift = outcomes[rows, column] - outcomes[:, 0]
  if weights is None:
    return float(uplift.sum())
  return float(np.dot(weights, uplift))


def BestThreshold(ite, outcomes, weights=None):
  """Returns the ThresholdSelection maximizing the realized uplift.

  Candidates are the midpoints of the sorted distinct ITE values plus -inf
  and +inf. Ties go to the larger threshold.
  """
  if not len(outcomes):
    raise EmptyValidationError('Threshold selection without validation cases')
  values = np.unique(ite[np.isfinite(ite)])
  midpoints = (values[1:] + values[:-1]) / 2.0
  candidates = np.concatenate([[np.inf], midpoints[::-1], [-np.inf]])
  best_threshold = None
  best_uplift = -np.inf
  for threshold in candidates:
    uplift = ThresholdUplift(ite, outcomes, threshold, weights)
    if uplift > best_uplift + 1e-12:
      best_threshold, best_uplift = float(threshold), uplift
  return ThresholdSelection(best_threshold, best_uplift, len(candidates))


def SelectThreshold(outcome_model, validation_tables, cache=None):
  """Chooses the threshold that maximizes uplift on validation cases.

  Arguments:
    @ outcome_model: NeuralOutcomeModel or TabularOutcomeModel
    @ validation_tables: list of CounterfactualTable

  Raises:
    EmptyValidationError: no validation cases were given.
  """
  if not validation_tables:
    raise EmptyValidationError('Threshold selection without validation cases')
  cache = cache or IteCache(outcome_model)
  ite = cache.Matrix([table.trace for table in validation_tables])
  outcomes = np.array([table.OutcomeRow() for table in validation_tables],
                      dtype=np.float64)
  selection = BestThreshold(ite, outcomes)
  LOGGER.info('Selected threshold %.4f out of %d candidates, validation uplift '
              '%.1f over %d cases', selection.threshold, selection.candidates,
              selection.uplift, len(validation_tables))
  return selection


def SelectThresholdExact(outcome_model, spec, cache=None):
  """Chooses the threshold maximizing the exact expected uplift per case."""
  traces = process.StateSpace(spec)
  cache = cache or IteCache(outcome_model)
  ite = cache.Matrix(traces)
  outcomes = np.array([CounterfactualTable.FromTrace(trace).OutcomeRow()
                       for trace in traces], dtype=np.float64)
  weights = np.array([trace.probability for trace in traces])
  return BestThreshold(ite, outcomes, weights)


def ExactCIPolicy(spec):
  """Returns the CI policy of a tabular model fed the whole state space.

  Outcome means are taken under the exact RCT distribution and the threshold
  maximizes the exact expected uplift, so no sampling noise is involved.
  """
  outcome_model = TabularOutcomeModel.FromStateSpace(spec)
  cache = IteCache(outcome_model)
  selection = SelectThresholdExact(outcome_model, spec, cache)
  LOGGER.info('Exact CI policy for %s: threshold %.4f, uplift %.6f/case',
              spec.id, selection.threshold, selection.uplift)
  return CIPolicy(spec, outcome_model, selection.threshold, cache)
