#!/usr/bin/python3
"""Prefix encoding and the trainable sequence regressor.

The regressor has two LSTM layers followed by two dense layers. The case
variable of p2 bypasses the recurrent stack and joins in front of the first
dense layer. The output is a scalar outcome (causal inference) or a pair of
Q-values (wait, intervene) for Q-learning. Forward and reverse mode are written
out for this fixed architecture in numpy.

Classes:
  Standardizer: z-score statistics per feature.
  EncodedPrefix: Fixed-length step matrix plus side input of one prefix.
  SequenceRegressor: The LSTM/dense network with its Adam optimizer.
  Adam: Adaptive moment estimation for a dict of parameters.
  EarlyStopping: Patience-based stopping with best-state bookkeeping.
  TabularEstimator: Exact conditional means keyed on prefix and action.

Error classes:
  Error: Base class for all errors generated by this module.
  NotFittedError: Standardizer was used before it was fitted.
  DivergenceError: Training produced a non-finite loss or parameter.
  CheckpointError: Checkpoint could not be written or read.
  NoDataError: Tabular lookup of a key/action pair that was never seen.
"""
__version__ = '1.0'

# Standard modules
import collections
import dataclasses
import json
import logging

# Third-party modules
import numpy as np

# Package modules
from . import process

CI = 'ci'
RL = 'rl'

LOGGER = logging.getLogger('intervene.network')


class Error(Exception):
  """Superclass used for inheritance and external exception handling."""


class NotFittedError(Error):
  """The standardizer has no statistics for the requested feature."""


class DivergenceError(Error, FloatingPointError):
  """A loss or parameter became non-finite."""


class CheckpointError(Error, IOError):
  """Checkpoint file could not be written or read."""


class NoDataError(Error, KeyError):
  """No labels were ever fed for this key and action."""


# ##############################################################################
# Standardization and encoding
#
class Standardizer:
  """Holds mean and standard deviation per feature.

  Features used: 'attribute', 'case_var' and 'outcome'. A feature with zero
  spread keeps a standard deviation of 1.
  """
  def __init__(self, mean=None, std=None):
    self.mean = dict(mean or {})
    self.std = dict(std or {})

  @property
  def fitted(self):
    return 'attribute' in self.mean

  def Fit(self, name, values, weights=None):
    """Estimates the statistics of feature `name` from `values`.

    Arguments:
      @ name: str
      @ values: iterable of numbers
      % weights: iterable of numbers ~~ None
        Optional (probability) weights, one per value.
    """
    values = np.asarray(list(values), dtype=np.float64)
    if not values.size:
      raise NotFittedError('No values to fit feature %r on' % name)
    weights = (np.ones_like(values) if weights is None
               else np.asarray(list(weights), dtype=np.float64))
    mean = float(np.average(values, weights=weights))
    std = float(np.sqrt(np.average((values - mean) ** 2, weights=weights)))
    self.mean[name] = mean
    self.std[name] = std if std > 1e-12 else 1.0
    return self

  def Transform(self, name, values):
    try:
      return (np.asarray(values, dtype=np.float64) - self.mean[name]
              ) / self.std[name]
    except KeyError:
      raise NotFittedError('Standardizer has not been fitted on %r' % name)

  def Inverse(self, name, values):
    try:
      return (np.asarray(values, dtype=np.float64) * self.std[name]
              + self.mean[name])
    except KeyError:
      raise NotFittedError('Standardizer has not been fitted on %r' % name)

  def ToDict(self):
    return {'mean': self.mean, 'std': self.std}

  @classmethod
  def FromDict(cls, data):
    return cls(data['mean'], data['std'])

  @classmethod
  def FromTraces(cls, traces, outcomes=None):
    """Fits attribute and case variable statistics on sampled traces."""
    standardizer = cls()
    standardizer.Fit('attribute', (event.attribute for trace in traces
                                   for event in trace.events))
    standardizer.Fit('case_var', (trace.case_var for trace in traces))
    if outcomes is not None:
      standardizer.Fit('outcome', outcomes)
    return standardizer

  @classmethod
  def FromStateSpace(cls, spec):
    """Fits statistics on the enumerated state space, weighted exactly."""
    traces = process.StateSpace(spec)
    standardizer = cls()
    standardizer.Fit(
        'attribute', (event.attribute for trace in traces
                      for event in trace.events),
        (trace.probability for trace in traces for _event in trace.events))
    standardizer.Fit('case_var', (trace.case_var for trace in traces),
                     (trace.probability for trace in traces))
    standardizer.Fit('outcome',
                     (process.Outcome(trace, process.NEVER) for trace in traces),
                     (trace.probability for trace in traces))
    return standardizer


@dataclasses.dataclass(frozen=True)
class EncodedPrefix:
  """Network input for one prefix.

  Members:
    @ steps: ndarray (num_events, feature width)
      Per step: activity one-hot, padding flag, standardized attribute and
      intervention flag.
    @ side: ndarray (0,) or (1,)
      Standardized case variable for p2, empty for p1.
  """
  steps: np.ndarray
  side: np.ndarray


def FeatureWidth(spec):
  return len(spec.activities) + 3


def SideWidth(spec):
  return 1 if spec.has_case_var else 0


def Encode(observation, standardizer, mode=RL, intervene_now=False):
  """Encodes a PrefixObservation into an EncodedPrefix.

  Steps beyond the prefix are all zero apart from their padding flag. The
  intervention flag marks the step of a prior intervention; in CI mode the
  last observed step additionally carries the decision under evaluation.

  Arguments:
    @ observation: process.PrefixObservation
    @ standardizer: Standardizer (fitted)
    % mode: str ~~ RL
      CI or RL.
    % intervene_now: bool ~~ False
      CI mode only: the candidate decision at the last observed step.

  Raises:
    NotFittedError: the standardizer was not fitted.
  """
  if not standardizer.fitted:
    raise NotFittedError('Encoding requires a fitted standardizer')
  spec = observation.spec
  width = len(spec.activities)
  pad, attribute, flag = width, width + 1, width + 2
  steps = np.zeros((spec.num_events, FeatureWidth(spec)))
  for position, event in enumerate(observation.observed_events):
    steps[position, spec.activities.index(event.activity)] = 1.0
    steps[position, attribute] = standardizer.Transform(
        'attribute', event.attribute)
  steps[observation.length:, pad] = 1.0
  if observation.intervened_before:
    steps[observation.intervention_index - 1, flag] = 1.0
  if mode == CI and intervene_now:
    steps[observation.length - 1, flag] = 1.0
  if spec.has_case_var:
    side = np.array([standardizer.Transform('case_var', observation.case_var)])
  else:
    side = np.zeros(0)
  return EncodedPrefix(steps, side)


def Stack(encoded):
  """Stacks a list of EncodedPrefix into batch arrays (steps, side)."""
  return (np.stack([item.steps for item in encoded]),
          np.stack([item.side for item in encoded]))


# ##############################################################################
# Network
#
def _Sigmoid(values):
  return 0.5 * (np.tanh(0.5 * values) + 1.0)


class Adam:
  """Adam optimizer over an ordered dict of numpy parameters."""
  def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999,
               epsilon=1e-8):
    self.learning_rate = learning_rate
    self.beta1 = beta1
    self.beta2 = beta2
    self.epsilon = epsilon
    self.t = 0
    self.m = {name: np.zeros_like(value) for name, value in params.items()}
    self.v = {name: np.zeros_like(value) for name, value in params.items()}

  def Update(self, params, grads):
    """Applies one Adam step to `params` in place."""
    self.t += 1
    correction1 = 1.0 - self.beta1 ** self.t
    correction2 = 1.0 - self.beta2 ** self.t
    for name, param in params.items():
      grad = grads[name]
      self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
      self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad ** 2
      m_hat = self.m[name] / correction1
      v_hat = self.v[name] / correction2
      param -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)


class SequenceRegressor:
  """Two LSTM layers and two dense layers, trained with MAE and Adam.

  Arguments:
    @ input_width: int
      Features per step.
    % side_width: int ~~ 0
      Width of the side input joined after the recurrent stack.
    % outputs: int ~~ 1
      1 for outcome regression, 2 for Q-values.
    % hidden: int ~~ 32
    % seed: int ~~ 0
      Seed for the weight initialization.
    % learning_rate, beta1, beta2, epsilon: Adam settings.
  """
  FORMAT_VERSION = 1

  def __init__(self, input_width, side_width=0, outputs=1, hidden=32, seed=0,
               learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
    self.shape = {'input_width': int(input_width),
                  'side_width': int(side_width),
                  'outputs': int(outputs),
                  'hidden': int(hidden)}
    self.optimizer_settings = {'learning_rate': learning_rate,
                               'beta1': beta1, 'beta2': beta2,
                               'epsilon': epsilon}
    self.metadata = {}
    rng = np.random.default_rng(seed)
    self.params = collections.OrderedDict()
    self._InitLstm('lstm1', input_width, hidden, rng)
    self._InitLstm('lstm2', hidden, hidden, rng)
    self._InitDense('dense1', hidden + side_width, hidden, rng)
    self._InitDense('dense2', hidden, outputs, rng)
    self.optimizer = Adam(self.params, **self.optimizer_settings)

  @classmethod
  def ForSpec(cls, spec, mode, hidden=32, seed=0, **optimizer_settings):
    """Returns a regressor shaped for `spec` in CI (scalar) or RL mode."""
    return cls(FeatureWidth(spec), SideWidth(spec), 1 if mode == CI else 2,
               hidden=hidden, seed=seed, **optimizer_settings)

  @property
  def hidden(self):
    return self.shape['hidden']

  @property
  def outputs(self):
    return self.shape['outputs']

  def _InitLstm(self, name, fan_in, hidden, rng):
    limit = np.sqrt(6.0 / (fan_in + 4 * hidden))
    self.params[name + '_wx'] = rng.uniform(-limit, limit, (fan_in, 4 * hidden))
    limit = np.sqrt(6.0 / (hidden + 4 * hidden))
    self.params[name + '_wh'] = rng.uniform(-limit, limit, (hidden, 4 * hidden))
    bias = np.zeros(4 * hidden)
    bias[hidden:2 * hidden] = 1.0  # forget gate
    self.params[name + '_b'] = bias

  def _InitDense(self, name, fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    self.params[name + '_w'] = rng.uniform(-limit, limit, (fan_in, fan_out))
    self.params[name + '_b'] = np.zeros(fan_out)

  # ############################################################################
  # Forward and reverse mode
  #
  def _LstmForward(self, name, inputs):
    wx = self.params[name + '_wx']
    wh = self.params[name + '_wh']
    bias = self.params[name + '_b']
    batch, length, _ = inputs.shape
    hidden = wh.shape[0]
    state_h = np.zeros((batch, hidden))
    state_c = np.zeros((batch, hidden))
    outputs = np.empty((batch, length, hidden))
    steps = []
    for position in range(length):
      gates = inputs[:, position] @ wx + state_h @ wh + bias
      gate_i = _Sigmoid(gates[:, :hidden])
      gate_f = _Sigmoid(gates[:, hidden:2 * hidden])
      gate_o = _Sigmoid(gates[:, 2 * hidden:3 * hidden])
      gate_g = np.tanh(gates[:, 3 * hidden:])
      cell = gate_f * state_c + gate_i * gate_g
      cell_tanh = np.tanh(cell)
      steps.append((state_h, state_c, gate_i, gate_f, gate_o, gate_g,
                    cell_tanh))
      state_h = gate_o * cell_tanh
      state_c = cell
      outputs[:, position] = state_h
    return outputs, steps

  def _LstmBackward(self, name, inputs, steps, doutputs, grads):
    wx = self.params[name + '_wx']
    wh = self.params[name + '_wh']
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    dbias = np.zeros(wh.shape[1])
    dinputs = np.zeros_like(inputs)
    dh_next = np.zeros((doutputs.shape[0], doutputs.shape[2]))
    dc_next = np.zeros_like(dh_next)
    for position in reversed(range(inputs.shape[1])):
      h_prev, c_prev, gate_i, gate_f, gate_o, gate_g, cell_tanh = steps[position]
      dh = doutputs[:, position] + dh_next
      dcell = dc_next + dh * gate_o * (1.0 - cell_tanh ** 2)
      dgates = np.concatenate([
          dcell * gate_g * gate_i * (1.0 - gate_i),
          dcell * c_prev * gate_f * (1.0 - gate_f),
          dh * cell_tanh * gate_o * (1.0 - gate_o),
          dcell * gate_i * (1.0 - gate_g ** 2)], axis=1)
      dwx += inputs[:, position].T @ dgates
      dwh += h_prev.T @ dgates
      dbias += dgates.sum(axis=0)
      dinputs[:, position] = dgates @ wx.T
      dh_next = dgates @ wh.T
      dc_next = dcell * gate_f
    grads[name + '_wx'] = dwx
    grads[name + '_wh'] = dwh
    grads[name + '_b'] = dbias
    return dinputs

  def Forward(self, steps, side):
    """Returns (predictions, cache) for a batch.

    Arguments:
      @ steps: ndarray (batch, num_events, input_width)
      @ side: ndarray (batch, side_width)
    """
    hidden1, cache1 = self._LstmForward('lstm1', steps)
    hidden2, cache2 = self._LstmForward('lstm2', hidden1)
    joined = hidden2[:, -1]
    if self.shape['side_width']:
      joined = np.concatenate([joined, side], axis=1)
    dense = np.tanh(joined @ self.params['dense1_w'] + self.params['dense1_b'])
    predictions = dense @ self.params['dense2_w'] + self.params['dense2_b']
    return predictions, (steps, hidden1, cache1, hidden2, cache2, joined, dense)

  def Predict(self, steps, side):
    return self.Forward(steps, side)[0]

  def PredictEncoded(self, encoded):
    return self.Predict(*Stack(encoded))

  def Backward(self, cache, dpredictions):
    """Returns the gradients of all parameters given d(loss)/d(predictions)."""
    steps, hidden1, cache1, hidden2, cache2, joined, dense = cache
    grads = {}
    grads['dense2_w'] = dense.T @ dpredictions
    grads['dense2_b'] = dpredictions.sum(axis=0)
    dpre = (dpredictions @ self.params['dense2_w'].T) * (1.0 - dense ** 2)
    grads['dense1_w'] = joined.T @ dpre
    grads['dense1_b'] = dpre.sum(axis=0)
    djoined = dpre @ self.params['dense1_w'].T
    dhidden2 = np.zeros_like(hidden2)
    dhidden2[:, -1] = djoined[:, :self.hidden]
    dhidden1 = self._LstmBackward('lstm2', hidden1, cache2, dhidden2, grads)
    self._LstmBackward('lstm1', steps, cache1, dhidden1, grads)
    return grads

  @staticmethod
  def Loss(predictions, targets, actions=None):
    """Mean absolute error and its gradient with respect to the predictions.

    With `actions` given (Q-learning), only the output of the taken action is
    compared with its target; the other output gets zero gradient.
    """
    targets = np.asarray(targets, dtype=np.float64)
    rows = np.arange(predictions.shape[0])
    columns = (np.zeros(len(rows), dtype=int) if actions is None
               else np.asarray(actions, dtype=int))
    residual = predictions[rows, columns] - targets
    dpredictions = np.zeros_like(predictions)
    dpredictions[rows, columns] = np.sign(residual) / len(rows)
    return float(np.mean(np.abs(residual))), dpredictions

  def Gradients(self, steps, side, targets, actions=None):
    predictions, cache = self.Forward(steps, side)
    loss, dpredictions = self.Loss(predictions, targets, actions)
    return loss, self.Backward(cache, dpredictions)

  def TrainStep(self, steps, side, targets, actions=None):
    """Runs one Adam step on a batch and returns the batch loss.

    Raises:
      DivergenceError: the loss (or an updated parameter) is not finite.
    """
    if not len(steps):
      raise Error('TrainStep needs a nonempty batch')
    loss, grads = self.Gradients(steps, side, targets, actions)
    if not np.isfinite(loss):
      raise DivergenceError('Non-finite training loss %r' % loss)
    self.optimizer.Update(self.params, grads)
    if not all(np.isfinite(param).all() for param in self.params.values()):
      raise DivergenceError('Non-finite parameters after update')
    return loss

  def MeanAbsoluteError(self, steps, side, targets, actions=None):
    return self.Loss(self.Predict(steps, side), targets, actions)[0]

  # ############################################################################
  # State handling
  #
  def Snapshot(self):
    return {name: value.copy() for name, value in self.params.items()}

  def Restore(self, snapshot):
    for name, value in snapshot.items():
      self.params[name][...] = value

  def Save(self, path):
    """Writes parameters, layer shapes and optimizer state to `path`.

    The file is a numpy archive with a json header and one flat float64
    array per parameter (and per Adam moment). Loading it back is bit exact.
    """
    header = {'format_version': self.FORMAT_VERSION,
              'shape': self.shape,
              'optimizer': self.optimizer_settings,
              'adam_t': self.optimizer.t,
              'layers': {name: list(value.shape)
                         for name, value in self.params.items()},
              'metadata': self.metadata}
    arrays = {}
    for name, value in self.params.items():
      arrays['param__' + name] = value.ravel()
      arrays['adam_m__' + name] = self.optimizer.m[name].ravel()
      arrays['adam_v__' + name] = self.optimizer.v[name].ravel()
    try:
      with open(path, 'wb') as checkpoint:
        np.savez(checkpoint, header=np.array(json.dumps(header, sort_keys=True)),
                 **arrays)
    except OSError as error:
      raise CheckpointError('Could not write checkpoint %r: %s' % (
          str(path), error))
    return path

  @classmethod
  def Load(cls, path):
    """Returns the SequenceRegressor stored at `path` by Save."""
    try:
      with np.load(path, allow_pickle=False) as archive:
        header = json.loads(str(archive['header']))
        if header.get('format_version') != cls.FORMAT_VERSION:
          raise CheckpointError('Unsupported checkpoint version %r in %r' % (
              header.get('format_version'), str(path)))
        model = cls(**header['shape'], **header['optimizer'])
        for name, shape in header['layers'].items():
          model.params[name][...] = archive['param__' + name].reshape(shape)
          model.optimizer.m[name] = archive['adam_m__' + name].reshape(shape)
          model.optimizer.v[name] = archive['adam_v__' + name].reshape(shape)
    except (OSError, KeyError, ValueError) as error:
      raise CheckpointError('Could not read checkpoint %r: %s' % (
          str(path), error))
    model.optimizer.t = header['adam_t']
    model.metadata = header['metadata']
    return model


def GradientCheck(model, steps, side, targets, actions=None, step=1e-5):
  """Compares analytic gradients with central finite differences.

  Returns:
    dict: parameter name -> relative error
      ||analytic - numeric|| / (||analytic|| + ||numeric||).
  """
  _loss, analytic = model.Gradients(steps, side, targets, actions)
  errors = {}
  for name, param in model.params.items():
    numeric = np.zeros_like(param)
    flat = param.reshape(-1)
    numeric_flat = numeric.reshape(-1)
    for index in range(flat.size):
      original = flat[index]
      flat[index] = original + step
      loss_plus = model.MeanAbsoluteError(steps, side, targets, actions)
      flat[index] = original - step
      loss_minus = model.MeanAbsoluteError(steps, side, targets, actions)
      flat[index] = original
      numeric_flat[index] = (loss_plus - loss_minus) / (2 * step)
    difference = np.linalg.norm(analytic[name] - numeric)
    scale = np.linalg.norm(analytic[name]) + np.linalg.norm(numeric)
    errors[name] = float(difference / max(scale, 1e-12))
  return errors


# ##############################################################################
# Training helpers
#
class EarlyStopping:
  """Tracks the best score and signals when patience has run out.

  Arguments:
    % patience: int ~~ 5
      Number of consecutive non-improving updates before stopping. None never
      stops, but still tracks the best state.
    % mode: str ~~ 'min'
      'min' for losses, 'max' for uplift.
  """
  def __init__(self, patience=5, mode='min'):
    if mode not in ('min', 'max'):
      raise ValueError('mode must be min or max, not %r' % mode)
    self.patience = patience
    self.mode = mode
    self.best = np.inf if mode == 'min' else -np.inf
    self.best_step = None
    self.best_state = None
    self.bad_rounds = 0

  def Improves(self, score):
    return score < self.best if self.mode == 'min' else score > self.best

  def Update(self, score, step, snapshot=None):
    """Records `score` at `step`; returns True when training should stop.

    Arguments:
      @ score: float
      @ step: int
        Epoch or transition count.
      % snapshot: callable ~~ None
        Called on improvement; its result is kept as `best_state`.
    """
    if self.Improves(score):
      self.best = score
      self.best_step = step
      self.best_state = snapshot() if snapshot else None
      self.bad_rounds = 0
      return False
    self.bad_rounds += 1
    return self.patience is not None and self.bad_rounds >= self.patience


class TabularEstimator:
  """Exact (weighted) running means of labels per (key, action) pair."""
  def __init__(self):
    self._totals = {}

  def __len__(self):
    return len(self._totals)

  def Fit(self, samples):
    """Feeds labelled samples into the estimator.

    Arguments:
      @ samples: iterable of (key, action, label) or (key, action, label,
        weight) tuples.
    """
    for sample in samples:
      key, action, label = sample[:3]
      weight = sample[3] if len(sample) > 3 else 1.0
      totals = self._totals.setdefault((key, action), [0.0, 0.0, 0])
      totals[0] += weight * label
      totals[1] += weight
      totals[2] += 1
    return self

  def Predict(self, key, action):
    """Returns the mean label fed for (key, action).

    Raises:
      NoDataError: nothing was fed for this key and action.
    """
    try:
      weighted, weight, _count = self._totals[key, action]
    except KeyError:
      raise NoDataError('No data for key %r, action %r' % (key, action))
    return weighted / weight

  def Count(self, key, action):
    return self._totals.get((key, action), (0, 0, 0))[2]

  def __contains__(self, key_action):
    return key_action in self._totals
