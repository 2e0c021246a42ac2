#!/usr/bin/python3
"""Synthetic intervention-timing processes.

Two small generative processes are implemented here, together with their
exact counterfactual outcomes and a step-wise episode interface:

  p1: three i.i.d. events, activity A or B, attribute from {0, 1, 2, 5}.
      A free intervention doubles the attribute of the intervened event if an
      A occurs anywhere in the case, and multiplies it by -2 otherwise.
  p2: start event S, then an interleaving of one XOR event (B or C) with the
      ordered pair D1, D2, then end event E. An intervention (cost 5) doubles
      the attribute of the first D event strictly after it on the B branch,
      and multiplies it by -4 on the C branch. The outcome is the case
      variable times the attribute sum, minus the intervention cost.

Classes:
  ProcessSpec: Static description of a process.
  Event: One observed activity with its attribute.
  LatentTrace: A fully realized case before any intervention is applied.
  InterventionOption: `never` or an event index.
  PrefixObservation: What a decision maker sees halfway through a case.
  CounterfactualTable: Outcomes of a trace under every intervention option.
  Episode: Step-wise environment over a single latent trace.

Error classes:
  Error: Base class for all errors generated by this module.
  InvalidOptionError: Intervention option is out of range for the trace.
  EpisodeDoneError: A step was requested on a finished episode.
"""
__version__ = '1.0'

# Standard modules
import collections
import dataclasses
import itertools
import logging

# Third-party modules
import numpy as np

# Package modules
from .libs.storage import ARTIFACTS

WAIT = 0
INTERVENE = 1
ACTIONS = (WAIT, INTERVENE)

LOGGER = logging.getLogger('intervene.process')


class Error(Exception):
  """Superclass used for inheritance and external exception handling."""


class InvalidOptionError(Error, ValueError):
  """The intervention option does not fit the trace it is applied to."""


class EpisodeDoneError(Error):
  """The episode has already delivered its terminal reward."""


@dataclasses.dataclass(frozen=True)
class ProcessSpec:
  """Static features of one synthetic process."""
  id: str
  num_events: int
  intervention_cost: int
  activities: tuple
  repeat_penalty: int = 100

  @classmethod
  def Get(cls, identifier):
    """Returns the ProcessSpec for the given process id ('p1' or 'p2')."""
    try:
      return SPECS[identifier.lower()]
    except (KeyError, AttributeError):
      raise Error('Unknown process %r, available: %s' % (
          identifier, ', '.join(sorted(SPECS))))

  @property
  def num_options(self):
    return self.num_events + 1

  @property
  def has_case_var(self):
    return self.id == 'p2'


P1 = ProcessSpec(id='p1', num_events=3, intervention_cost=0,
                 activities=('A', 'B'))
P2 = ProcessSpec(id='p2', num_events=5, intervention_cost=5,
                 activities=('S', 'B', 'C', 'D1', 'D2', 'E'))
SPECS = {P1.id: P1, P2.id: P2}

# Generator constants
P1_ACTIVITY_PROBS = {'A': 0.25, 'B': 0.75}
P1_ATTRIBUTES = (0, 1, 2, 5)
P2_XOR_PROBS = {'B': 0.2, 'C': 0.8}
P2_ATTRIBUTES = {'D1': (1, 2, 3), 'D2': (1, 2, 3, 4)}
P2_CASE_VARS = tuple(range(1, 11))
P2_EFFECT = {'B': 2, 'C': -4}
# Middle block orders; 'X' is the XOR event.
P2_ORDERS = (('X', 'D1', 'D2'), ('D1', 'X', 'D2'), ('D1', 'D2', 'X'))


@dataclasses.dataclass(frozen=True)
class Event:
  activity: str
  attribute: int

  def __str__(self):
    return '%s:%d' % (self.activity, self.attribute)


@dataclasses.dataclass(frozen=True)
class InterventionOption:
  """An intervention option; `index` None means never intervene."""
  index: int = None

  @classmethod
  def AtEvent(cls, index):
    if not isinstance(index, (int, np.integer)) or index < 1:
      raise InvalidOptionError('Intervention index must be a positive int, '
                               'got %r' % (index,))
    return cls(int(index))

  @property
  def never(self):
    return self.index is None

  @property
  def label(self):
    return 'never' if self.never else 'at_%d' % self.index

  def __str__(self):
    return self.label


NEVER = InterventionOption()


def Options(spec):
  """Returns all intervention options for `spec`, `never` first."""
  return [NEVER] + [InterventionOption.AtEvent(index)
                    for index in range(1, spec.num_events + 1)]


@dataclasses.dataclass(frozen=True)
class PrefixObservation:
  """The observable part of a running case.

  Members:
    @ spec_id: str
    @ observed_events: tuple of Event, length 1..num_events
    @ case_var: int (fixed 1 for p1)
    % intervention_index: int ~~ None
      Event index at which the case was intervened, if any.
  """
  spec_id: str
  observed_events: tuple
  case_var: int = 1
  intervention_index: int = None

  @property
  def spec(self):
    return ProcessSpec.Get(self.spec_id)

  @property
  def length(self):
    return len(self.observed_events)

  @property
  def intervened_before(self):
    return self.intervention_index is not None

  @property
  def complete(self):
    return self.length == self.spec.num_events

  def Extend(self, event, intervention_index=None):
    """Returns the observation that follows once `event` is revealed."""
    if intervention_index is None:
      intervention_index = self.intervention_index
    return dataclasses.replace(
        self, observed_events=self.observed_events + (event,),
        intervention_index=intervention_index)

  def WithIntervention(self, index):
    return dataclasses.replace(self, intervention_index=index)

  def __str__(self):
    return '[%s] cv=%d' % (', '.join(map(str, self.observed_events)),
                           self.case_var)


@dataclasses.dataclass(frozen=True)
class LatentTrace:
  """A complete case, as generated, before any intervention.

  Members:
    @ spec_id: str
    @ events: tuple of Event, length num_events
    % case_var: int ~~ 1
    % probability: float ~~ 1.0
      Generator probability of this exact realization.
  """
  spec_id: str
  events: tuple
  case_var: int = 1
  probability: float = 1.0

  @property
  def spec(self):
    return ProcessSpec.Get(self.spec_id)

  @property
  def activities(self):
    return tuple(event.activity for event in self.events)

  @property
  def attributes(self):
    return tuple(event.attribute for event in self.events)

  @property
  def xor_activity(self):
    """Activity of the XOR event of a p2 trace ('B' or 'C')."""
    for event in self.events:
      if event.activity in P2_XOR_PROBS:
        return event.activity
    raise Error('Trace has no XOR event: %s' % (self.activities,))

  def Prefix(self, length, intervention_index=None):
    """Returns the PrefixObservation after `length` events."""
    if not 1 <= length <= len(self.events):
      raise Error('Prefix length %d out of range 1..%d' % (
          length, len(self.events)))
    if intervention_index is not None and intervention_index > length:
      intervention_index = None
    return PrefixObservation(self.spec_id, self.events[:length],
                             self.case_var, intervention_index)

  def Prefixes(self):
    """Yields all no-intervention prefixes, shortest first."""
    for length in range(1, len(self.events) + 1):
      yield self.Prefix(length)

  def Key(self):
    return (self.spec_id, self.case_var,
            tuple((event.activity, event.attribute) for event in self.events))


@dataclasses.dataclass(frozen=True)
class CounterfactualTable:
  """Outcomes of one trace under every intervention option."""
  trace: LatentTrace
  outcomes: dict
  case_id: str = None

  @classmethod
  def FromTrace(cls, trace, case_id=None):
    """Computes the outcome of every option for the given `trace`."""
    outcomes = {option: Outcome(trace, option) for option in Options(trace.spec)}
    return cls(trace, outcomes, case_id)

  def Uplift(self, option):
    return self.outcomes[option] - self.outcomes[NEVER]

  def OutcomeRow(self):
    """Returns outcomes as a list ordered never, at_1 .. at_T."""
    return [self.outcomes[option] for option in Options(self.trace.spec)]


# ##############################################################################
# Sampling and enumeration
#
def SampleTrace(spec, rng):
  """Draws one LatentTrace of `spec` using the numpy Generator `rng`."""
  if spec.id == 'p1':
    return _SampleP1(rng)
  return _SampleP2(rng)


def _SampleP1(rng):
  events = []
  probability = 1.0
  for _ in range(P1.num_events):
    activity = 'A' if rng.random() < P1_ACTIVITY_PROBS['A'] else 'B'
    attribute = P1_ATTRIBUTES[rng.integers(len(P1_ATTRIBUTES))]
    probability *= P1_ACTIVITY_PROBS[activity] / len(P1_ATTRIBUTES)
    events.append(Event(activity, int(attribute)))
  return LatentTrace(P1.id, tuple(events), 1, probability)


def _SampleP2(rng):
  case_var = int(P2_CASE_VARS[rng.integers(len(P2_CASE_VARS))])
  xor = 'B' if rng.random() < P2_XOR_PROBS['B'] else 'C'
  d1 = int(P2_ATTRIBUTES['D1'][rng.integers(len(P2_ATTRIBUTES['D1']))])
  d2 = int(P2_ATTRIBUTES['D2'][rng.integers(len(P2_ATTRIBUTES['D2']))])
  order = P2_ORDERS[rng.integers(len(P2_ORDERS))]
  return _BuildP2(case_var, xor, d1, d2, order)


def _BuildP2(case_var, xor, d1, d2, order):
  middle = {'X': Event(xor, 0), 'D1': Event('D1', d1), 'D2': Event('D2', d2)}
  events = (Event('S', 0),) + tuple(middle[slot] for slot in order) + (
      Event('E', 0),)
  probability = (P2_XOR_PROBS[xor] / len(P2_ORDERS) / len(P2_CASE_VARS)
                 / len(P2_ATTRIBUTES['D1']) / len(P2_ATTRIBUTES['D2']))
  return LatentTrace(P2.id, events, case_var, probability)


def EnumerateStateSpace(spec):
  """Returns every possible LatentTrace of `spec` with its exact probability.

  The enumeration is exhaustive and duplicate free: 512 traces for p1 and 720
  for p2. Probabilities are carried on the traces and sum to one.
  """
  if spec.id == 'p1':
    per_event = [Event(activity, attribute)
                 for activity in P1.activities for attribute in P1_ATTRIBUTES]
    traces = []
    for events in itertools.product(per_event, repeat=P1.num_events):
      probability = 1.0
      for event in events:
        probability *= P1_ACTIVITY_PROBS[event.activity] / len(P1_ATTRIBUTES)
      traces.append(LatentTrace(P1.id, events, 1, probability))
    return traces
  return [_BuildP2(case_var, xor, d1, d2, order)
          for order in P2_ORDERS
          for xor in sorted(P2_XOR_PROBS)
          for d1 in P2_ATTRIBUTES['D1']
          for d2 in P2_ATTRIBUTES['D2']
          for case_var in P2_CASE_VARS]


def EnumeratePrefixes(spec, traces=None):
  """Returns all distinct no-intervention prefixes of `spec`, shortest first."""
  traces = traces or EnumerateStateSpace(spec)
  seen = collections.OrderedDict()
  for length in range(1, spec.num_events + 1):
    for trace in traces:
      prefix = trace.Prefix(length)
      seen.setdefault((prefix.observed_events, prefix.case_var), prefix)
  return list(seen.values())


def TraceFrequencies(spec, rng, count):
  """Returns a Counter of trace keys over `count` sampled traces."""
  return collections.Counter(
      SampleTrace(spec, rng).Key() for _ in range(count))


# ##############################################################################
# Outcomes
#
def _CheckOption(trace, option):
  if option.never:
    return
  if not 1 <= option.index <= len(trace.events):
    raise InvalidOptionError('Option %s out of range for a %d event trace' % (
        option, len(trace.events)))


def GrossOutcome(trace, option):
  """Returns the outcome of `trace` under `option`, before intervention cost."""
  _CheckOption(trace, option)
  attributes = list(trace.attributes)
  if trace.spec_id == 'p1':
    if not option.never:
      factor = 2 if 'A' in trace.activities else -2
      attributes[option.index - 1] *= factor
    return sum(attributes)
  if not option.never:
    # Affects the first D event strictly after the intervened event.
    for position in range(option.index, len(trace.events)):
      if trace.events[position].activity in P2_ATTRIBUTES:
        attributes[position] *= P2_EFFECT[trace.xor_activity]
        break
  return trace.case_var * sum(attributes)


def Outcome(trace, option):
  """Returns the final outcome of `trace` when `option` is applied.

  Arguments:
    @ trace: LatentTrace
    @ option: InterventionOption

  Raises:
    InvalidOptionError: the option's index exceeds the trace length.

  Returns:
    int: outcome in outcome units, net of the intervention cost.
  """
  outcome = GrossOutcome(trace, option)
  if not option.never:
    outcome -= trace.spec.intervention_cost
  return outcome


# ##############################################################################
# Step-wise environment
#
class Episode:
  """A single case replayed event by event.

  Reset reveals the first event. Each Step takes an action on the current
  prefix and reveals the next event. The first intervention costs the
  process' intervention cost at that step, every later one costs the repeat
  penalty and has no effect on the process. The gross outcome under the first
  intervention is delivered with the final step.
  """

  def __init__(self, trace, spec=None):
    self.trace = trace
    self.spec = spec or trace.spec
    self.position = 1
    self.intervention_index = None
    self.done = False
    self.total_reward = 0

  @property
  def observation(self):
    return self.trace.Prefix(self.position, self.intervention_index)

  @property
  def option(self):
    if self.intervention_index is None:
      return NEVER
    return InterventionOption.AtEvent(self.intervention_index)

  def Step(self, action):
    """Takes `action` on the current prefix.

    Arguments:
      @ action: int
        WAIT (0) or INTERVENE (1).

    Raises:
      EpisodeDoneError: the episode has already finished.

    Returns:
      3-tuple: next PrefixObservation (None when done), reward, done flag.
    """
    if self.done:
      raise EpisodeDoneError('Step called on a finished episode')
    if action not in ACTIONS:
      raise Error('Unknown action %r' % (action,))
    reward = 0
    if action == INTERVENE:
      if self.intervention_index is None:
        self.intervention_index = self.position
        reward -= self.spec.intervention_cost
      else:
        reward -= self.spec.repeat_penalty
    if self.position == self.spec.num_events:
      reward += GrossOutcome(self.trace, self.option)
      self.done = True
      self.total_reward += reward
      return None, reward, True
    self.position += 1
    self.total_reward += reward
    return self.observation, reward, False


def Reset(spec, rng):
  """Starts an episode on a freshly sampled trace.

  Returns:
    2-tuple: the Episode handle and its one-event PrefixObservation.
  """
  episode = Episode(SampleTrace(spec, rng), spec)
  return episode, episode.observation


def ReplayActions(trace, actions, spec=None):
  """Returns the total reward of playing `actions` on a fixed `trace`."""
  episode = Episode(trace, spec)
  for action in actions:
    episode.Step(action)
  if not episode.done:
    raise Error('Action list of length %d does not finish a %d event case' % (
        len(actions), trace.spec.num_events))
  return episode.total_reward


def ActionsForOption(spec, option):
  """Returns the action sequence that realizes `option` in an episode."""
  return [INTERVENE if option.index == step else WAIT
          for step in range(1, spec.num_events + 1)]


def StateSpace(spec):
  """Returns the enumerated state space of `spec`, built once per process."""
  return ARTIFACTS.Memoize(('state_space', spec.id),
                           lambda: tuple(EnumerateStateSpace(spec)))
