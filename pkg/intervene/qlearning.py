#!/usr/bin/python3
"""Online Q-learning with experience replay against the process episodes.

Two agents share one training loop: a neural agent whose Q-function is a
SequenceRegressor with two outputs (wait, intervene), and a tabular agent with
an exact Q-map keyed on the observed prefix and the step of a prior
intervention. Training is undiscounted by default; episodes are at most a
handful of events long.

Classes:
  Transition: One observed (state, action, reward, next state) step.
  ReplayMemory: First-in-first-out transition buffer.
  EncodedReplay: Encoded copy of a replay memory for batched training.
  EpsilonSchedule: Linear exploration decay with a floor.
  QAgent: Shared acting logic for both agents.
  NeuralQAgent: Q-function approximated by a SequenceRegressor.
  TabularQAgent: Q-function stored per prefix key.
  GreedyPolicy: The guarded greedy policy extracted from an agent.
  RLTrainingResult: Trained agent plus its training curve.
"""
__version__ = '1.0'

# Standard modules
import collections
import dataclasses
import json
import logging

# Third-party modules
import numpy as np
import pandas as pd

# Package modules
from . import network
from . import process
from .network import RL, CheckpointError, DivergenceError
from .policies import EvaluatePolicyExact, PrefixKey, TablePolicy
from .process import INTERVENE, WAIT

LOGGER = logging.getLogger('intervene.qlearning')


@dataclasses.dataclass(frozen=True)
class Transition:
  """One environment step.

  Members:
    @ state: process.PrefixObservation
    @ action: int, WAIT or INTERVENE
    @ reward: float
    @ next_state: process.PrefixObservation, None when done
    @ done: bool
  """
  state: process.PrefixObservation
  action: int
  reward: float
  next_state: process.PrefixObservation
  done: bool


class ReplayMemory:
  """Bounded transition buffer; the oldest transition is evicted first."""
  def __init__(self, capacity=1024):
    self.capacity = capacity
    self._items = collections.deque(maxlen=capacity)

  def __len__(self):
    return len(self._items)

  def __iter__(self):
    return iter(self._items)

  @property
  def full(self):
    return len(self._items) == self.capacity

  def Push(self, transition):
    self._items.append(transition)

  def Contents(self):
    return list(self._items)


class EncodedReplay:
  """Ring buffer of encoded transitions mirroring one ReplayMemory.

  Every transition is encoded once, when it enters the memory; a full batch
  is then read straight from preallocated arrays. Row order differs from the
  memory order, the set of transitions is the same.
  """
  def __init__(self, memory, encode):
    self.memory = memory
    self.encode = encode
    self.capacity = memory.capacity
    self.position = 0
    self.size = 0
    self.steps = self.side = self.next_steps = self.next_side = None
    self.actions = np.zeros(self.capacity, dtype=int)
    self.rewards = np.zeros(self.capacity)
    self.live = np.zeros(self.capacity, dtype=bool)
    for transition in memory:
      self.Add(transition)

  def _Allocate(self, encoded):
    self.steps = np.zeros((self.capacity,) + encoded.steps.shape)
    self.side = np.zeros((self.capacity,) + encoded.side.shape)
    self.next_steps = np.zeros_like(self.steps)
    self.next_side = np.zeros_like(self.side)

  def Add(self, transition):
    """Writes `transition` over the oldest row."""
    state = self.encode(transition.state)
    if self.steps is None:
      self._Allocate(state)
    row = self.position
    self.steps[row] = state.steps
    self.side[row] = state.side
    self.actions[row] = transition.action
    self.rewards[row] = transition.reward
    self.live[row] = not transition.done
    if not transition.done:
      following = self.encode(transition.next_state)
      self.next_steps[row] = following.steps
      self.next_side[row] = following.side
    self.position = (row + 1) % self.capacity
    self.size = min(self.size + 1, self.capacity)


class EpsilonSchedule:
  """Linear decay from `start` to `minimum` over `decay_transitions` steps."""
  def __init__(self, start=1.0, minimum=0.05, decay_transitions=5000):
    self.start = start
    self.minimum = minimum
    self.decay_transitions = decay_transitions

  def __call__(self, transitions):
    if self.decay_transitions <= 0:
      return self.minimum
    fraction = min(1.0, transitions / float(self.decay_transitions))
    return self.start + (self.minimum - self.start) * fraction


def StateKey(observation):
  """Returns the Q-map key: prefix key plus the step of a prior intervention."""
  return PrefixKey(observation), observation.intervention_index


def GreedyAction(q_values):
  """Returns the argmax action; unknown (NaN) values lose, ties wait."""
  q_wait, q_intervene = q_values
  if np.isnan(q_intervene):
    return WAIT
  if np.isnan(q_wait):
    return INTERVENE
  return INTERVENE if q_intervene > q_wait else WAIT


def BestValue(q_values):
  """Returns max over the known Q-values of a state, 0 if none is known."""
  known = q_values[~np.isnan(q_values)]
  return float(known.max()) if known.size else 0.0


# ##############################################################################
# Agents
#
class QAgent:
  """Acting logic shared by the neural and tabular agents.

  Subclasses implement `QValues`, `QTable`, `Learn`, `Snapshot` and
  `Restore`.
  """
  KIND = None

  def __init__(self, spec, gamma=1.0):
    self.spec = spec
    self.gamma = gamma
    self.epsilon = 1.0

  def Act(self, observation, rng):
    """Returns an epsilon-greedy action for `observation`."""
    if rng.random() < self.epsilon:
      return int(rng.integers(2))
    return GreedyAction(self.QValues(observation))

  def QValues(self, observation):
    raise NotImplementedError

  def QTable(self, observations):
    """Returns an (n, 2) array of Q-values for many observations."""
    return np.array([self.QValues(observation) for observation in observations])

  def Observe(self, transition, memory):
    """Stores `transition` and performs the learning step that follows it."""
    memory.Push(transition)
    self.Learn(transition, memory)

  def Learn(self, transition, memory):
    raise NotImplementedError

  def Snapshot(self):
    raise NotImplementedError

  def Restore(self, snapshot):
    raise NotImplementedError


class NeuralQAgent(QAgent):
  """Q-function approximated by a SequenceRegressor in RL mode.

  Once the replay memory is full every new transition triggers one optimizer
  step on the whole memory, read from its EncodedReplay, with targets r for
  terminal transitions and r + gamma * max Q(next state) otherwise. There is no
  target network.
  """
  KIND = 'neural'

  def __init__(self, spec, standardizer=None, hidden=32, seed=0, gamma=1.0,
               **optimizer_settings):
    super(NeuralQAgent, self).__init__(spec, gamma)
    self.standardizer = standardizer or network.Standardizer.FromStateSpace(spec)
    self.model = network.SequenceRegressor.ForSpec(
        spec, RL, hidden=hidden, seed=seed, **optimizer_settings)
    self.model.metadata = {'process': spec.id, 'agent': self.KIND,
                           'standardizer': self.standardizer.ToDict()}
    self.train_steps = 0
    self._encoded = {}
    self._replay = None

  def Encode(self, observation):
    key = StateKey(observation)
    if key not in self._encoded:
      self._encoded[key] = network.Encode(observation, self.standardizer, RL)
    return self._encoded[key]

  def QValues(self, observation):
    return self.model.PredictEncoded([self.Encode(observation)])[0]

  def QTable(self, observations):
    observations = list(observations)
    if not observations:
      return np.zeros((0, 2))
    return self.model.PredictEncoded(
        [self.Encode(observation) for observation in observations])

  def Learn(self, transition, memory):
    if self._replay is None or self._replay.memory is not memory:
      self._replay = EncodedReplay(memory, self.Encode)
    else:
      self._replay.Add(transition)
    if not memory.full:
      return None
    replay = self._replay
    targets = replay.rewards.copy()
    if replay.live.any():
      next_q = self.model.Predict(replay.next_steps[replay.live],
                                  replay.next_side[replay.live])
      if not np.isfinite(next_q).all():
        raise DivergenceError('Non-finite Q-values after %d train steps' %
                              self.train_steps)
      targets[replay.live] += self.gamma * next_q.max(axis=1)
    self.train_steps += 1
    return self.model.TrainStep(replay.steps, replay.side, targets,
                                replay.actions)

  def Snapshot(self):
    return self.model.Snapshot()

  def Restore(self, snapshot):
    self.model.Restore(snapshot)

  def Save(self, path):
    return self.model.Save(path)


class TabularQAgent(QAgent):
  """Exact Q-map with update Q <- Q + alpha * (target - Q).

  Never-updated entries are unknown rather than zero: the first update sets
  them to the target. Acting tries unknown actions before anything else, while
  the extracted greedy policy lets them lose against known ones. A transition
  only bootstraps from a next state whose two actions are both known, others
  are skipped. With `alpha_decay` the step size is 1 / visit count.
  """
  KIND = 'tabular'
  FORMAT_VERSION = 1

  def __init__(self, spec, alpha=0.05, alpha_decay=False, gamma=1.0):
    super(TabularQAgent, self).__init__(spec, gamma)
    self.alpha = alpha
    self.alpha_decay = alpha_decay
    self.q = {}
    self.visits = {}
    self.skipped = 0

  def Act(self, observation, rng):
    """Tries never-updated actions first, then acts epsilon-greedy."""
    unknown = np.flatnonzero(np.isnan(self.QValues(observation)))
    if unknown.size:
      return int(rng.choice(unknown))
    return super(TabularQAgent, self).Act(observation, rng)

  def QValues(self, observation):
    values = self.q.get(StateKey(observation))
    if values is None:
      return np.full(2, np.nan)
    return values.copy()

  def Update(self, state_key, action, target):
    values = self.q.setdefault(state_key, np.full(2, np.nan))
    visits = self.visits.setdefault(state_key, np.zeros(2, dtype=int))
    visits[action] += 1
    if np.isnan(values[action]):
      values[action] = target
    else:
      step = 1.0 / visits[action] if self.alpha_decay else self.alpha
      values[action] += step * (target - values[action])
    if not np.isfinite(values[action]):
      raise DivergenceError('Non-finite Q-value for %r' % (state_key,))

  def Target(self, transition):
    """Returns the Q-learning target, None while the next state is unexplored."""
    if transition.done:
      return transition.reward
    next_q = self.QValues(transition.next_state)
    if np.isnan(next_q).any():
      return None
    return transition.reward + self.gamma * BestValue(next_q)

  def Learn(self, transition, memory):
    target = self.Target(transition)
    if target is None:
      self.skipped += 1
      return
    self.Update(StateKey(transition.state), transition.action, target)

  def BellmanResidual(self, memory):
    """Returns the mean |Q - target| over the learnable transitions in `memory`."""
    residuals = []
    for item in memory:
      target = self.Target(item)
      value = self.QValues(item.state)[item.action]
      if target is not None and not np.isnan(value):
        residuals.append(abs(value - target))
    return float(np.mean(residuals)) if residuals else 0.0

  def Snapshot(self):
    return ({key: value.copy() for key, value in self.q.items()},
            {key: value.copy() for key, value in self.visits.items()})

  def Restore(self, snapshot):
    q_values, visits = snapshot
    self.q = {key: value.copy() for key, value in q_values.items()}
    self.visits = {key: value.copy() for key, value in visits.items()}

  def Save(self, path):
    """Writes the Q-map in the checkpoint layout used by SequenceRegressor."""
    keys = sorted(self.q, key=lambda key: (key[0], key[1] or 0))
    header = {'format_version': self.FORMAT_VERSION,
              'metadata': {'process': self.spec.id, 'agent': self.KIND,
                           'alpha': self.alpha, 'alpha_decay': self.alpha_decay,
                           'gamma': self.gamma}}
    try:
      with open(path, 'wb') as checkpoint:
        np.savez(checkpoint,
                 header=np.array(json.dumps(header, sort_keys=True)),
                 prefix_keys=np.array([key[0] for key in keys], dtype=str),
                 intervention_index=np.array(
                     [-1 if key[1] is None else key[1] for key in keys]),
                 q=np.array([self.q[key] for key in keys]).reshape(-1, 2),
                 visits=np.array([self.visits[key] for key in keys]
                                 ).reshape(-1, 2))
    except OSError as error:
      raise CheckpointError('Could not write checkpoint %r: %s' % (
          str(path), error))
    return path

  @classmethod
  def Load(cls, path):
    try:
      with np.load(path, allow_pickle=False) as archive:
        header = json.loads(str(archive['header']))
        if header.get('format_version') != cls.FORMAT_VERSION:
          raise CheckpointError('Unsupported checkpoint version in %r' % (
              str(path),))
        metadata = header['metadata']
        agent = cls(process.ProcessSpec.Get(metadata['process']),
                    metadata['alpha'], metadata['alpha_decay'],
                    metadata['gamma'])
        for prefix_key, index, values, visits in zip(
            archive['prefix_keys'].tolist(),
            archive['intervention_index'].tolist(),
            archive['q'], archive['visits']):
          key = (prefix_key, None if index < 0 else index)
          agent.q[key] = values.astype(np.float64)
          agent.visits[key] = visits.astype(int)
    except (OSError, KeyError, ValueError) as error:
      raise CheckpointError('Could not read checkpoint %r: %s' % (
          str(path), error))
    return agent


# ##############################################################################
# Policy extraction and training
#
class GreedyPolicy(TablePolicy):
  """Deterministic greedy policy of a trained agent, with the one-off guard."""
  NAME = 'rl'

  def __init__(self, spec, decision, q_values):
    super(GreedyPolicy, self).__init__(spec, decision)
    self.q_values = q_values


def ExtractPolicy(agent):
  """Returns the GreedyPolicy of `agent` over every no-intervention prefix."""
  prefixes = process.EnumeratePrefixes(agent.spec,
                                       process.StateSpace(agent.spec))
  table = agent.QTable(prefixes)
  decision = {}
  q_values = {}
  for prefix, values in zip(prefixes, table):
    key = PrefixKey(prefix)
    decision[key] = GreedyAction(values)
    q_values[key] = tuple(float(value) for value in values)
  return GreedyPolicy(agent.spec, decision, q_values)


@dataclasses.dataclass
class RLTrainingResult:
  agent: QAgent
  transitions: int
  best_transitions: int
  best_uplift: float
  curve: list

  def Curve(self):
    """Returns the training curve as a `transitions,eval_uplift,epsilon` frame."""
    return pd.DataFrame(self.curve,
                        columns=['transitions', 'eval_uplift', 'epsilon'])


def RunEpisode(agent, rng, memory, transitions=0, schedule=None):
  """Plays one episode on a fresh trace, learning after every step.

  Yields the running transition count after each step.
  """
  episode, observation = process.Reset(agent.spec, rng)
  done = False
  while not done:
    if schedule is not None:
      agent.epsilon = schedule(transitions)
    action = agent.Act(observation, rng)
    next_observation, reward, done = episode.Step(action)
    agent.Observe(Transition(observation, action, reward, next_observation,
                             done), memory)
    observation = next_observation
    transitions += 1
    yield transitions


def TrainRL(spec, agent, rng, memory_size=1024, epsilon=None, eval_interval=500,
            patience=5, min_transitions=7500, max_transitions=200000):
  """Trains `agent` online until its greedy policy stops improving.

  Every `eval_interval` transitions the greedy policy is evaluated exactly on
  the enumerated state space. Only evaluations made once epsilon reached its
  floor compete for the best agent state, and early stopping never triggers
  before `min_transitions`. The best agent state is restored at the end.

  Arguments:
    @ spec: process.ProcessSpec
    @ agent: QAgent
    @ rng: numpy.random.Generator
    % memory_size: int ~~ 1024
    % epsilon: EpsilonSchedule ~~ linear 1.0 -> 0.05 over 5,000 transitions
    % eval_interval: int ~~ 500
    % patience: int ~~ 5
      None never stops before `max_transitions`.
    % min_transitions: int ~~ 7,500
    % max_transitions: int ~~ 200,000

  Raises:
    network.DivergenceError: loss or Q-values became non-finite.
  """
  schedule = epsilon or EpsilonSchedule()
  memory = ReplayMemory(memory_size)
  stopper = network.EarlyStopping(patience, 'max')
  curve = []
  transitions = 0
  stop = False
  while not stop and transitions < max_transitions:
    for transitions in RunEpisode(agent, rng, memory, transitions, schedule):
      if transitions % eval_interval:
        continue
      uplift = EvaluatePolicyExact(ExtractPolicy(agent),
                                   spec).expected_uplift_per_case
      curve.append((transitions, uplift, agent.epsilon))
      LOGGER.info('RL %s %s: %d transitions, exact uplift %.4f/case, '
                  'epsilon %.3f', agent.KIND, spec.id, transitions, uplift,
                  agent.epsilon)
      if (transitions < schedule.decay_transitions and
          transitions < max_transitions):
        continue
      stop = stopper.Update(uplift, transitions, agent.Snapshot)
      if transitions < min_transitions:
        stop = False
        stopper.bad_rounds = 0
      if transitions >= max_transitions:
        stop = True
  if stopper.best_state is None:
    uplift = EvaluatePolicyExact(ExtractPolicy(agent),
                                 spec).expected_uplift_per_case
    curve.append((transitions, uplift, agent.epsilon))
    stopper.Update(uplift, transitions, agent.Snapshot)
  agent.Restore(stopper.best_state)
  LOGGER.info('RL %s %s stopped after %d transitions, best at %s (%.4f/case)',
              agent.KIND, spec.id, transitions, stopper.best_step,
              stopper.best)
  return RLTrainingResult(agent, transitions, stopper.best_step, stopper.best,
                          curve)
