#!/usr/bin/python3
"""Intervention policies and their exact and sampled evaluation.

Classes:
  Policy: Base class mapping a PrefixObservation to intervene / wait.
  NeverPolicy: Never intervenes, the zero-uplift reference.
  AlwaysAtPolicy: Always intervenes at a fixed event index.
  RctPolicy: Randomized data-gathering policy, uniform over all options.
  PerfectPolicy: Backward-induction optimum over the enumerated prefix tree.
  PolicyEvaluation: Exact expected uplift of a policy.

Error classes:
  Error: Base class for all errors generated by this module.
  UndefinedPrefixError: A policy was consulted on a prefix it has no entry for.
  DumpError: Policy table could not be written.
"""
__version__ = '1.0'

# Standard modules
import collections
import dataclasses
import logging

# Third-party modules
import pandas as pd

# Package modules
from . import process
from .libs.storage import ARTIFACTS
from .process import INTERVENE, NEVER, WAIT, InterventionOption, Outcome

LOGGER = logging.getLogger('intervene.policies')

# Values closer than this are treated as a tie, and ties resolve to waiting.
TIE_TOLERANCE = 1e-9


class Error(Exception):
  """Superclass used for inheritance and external exception handling."""


class UndefinedPrefixError(Error, KeyError):
  """The policy has no decision for a reachable prefix."""


class DumpError(Error, IOError):
  """The policy table could not be written to disk."""


def PrefixKey(observation):
  """Returns the canonical key of an observable prefix.

  The key covers the process id, the case variable and the observed
  (activity, attribute) pairs. Intervention history is not part of the key.
  """
  events = ','.join('%s:%d' % (event.activity, event.attribute)
                    for event in observation.observed_events)
  return '%s|%d|%s' % (observation.spec_id, observation.case_var, events)


# ##############################################################################
# Policies
#
class Policy:
  """Base class for all policies.

  Subclasses implement `_Decide`, which is only ever consulted on prefixes
  without a prior intervention. `Decide` enforces the one-intervention guard.
  """
  NAME = 'policy'

  def Decide(self, observation):
    """Returns True if the policy intervenes on `observation`."""
    if observation.intervened_before:
      return False
    return bool(self._Decide(observation))

  def _Decide(self, observation):
    raise NotImplementedError

  def Action(self, observation):
    return INTERVENE if self.Decide(observation) else WAIT

  def InducedOption(self, trace, rng=None):
    """Walks the prefixes of `trace` and returns the option this policy takes.

    Decisions only use prefix information: prefix k is consulted before event
    k+1 is looked at.
    """
    for prefix in trace.Prefixes():
      if self.Decide(prefix):
        return InterventionOption.AtEvent(prefix.length)
    return NEVER

  def OptionDistribution(self, trace):
    """Returns (option, probability) pairs this policy induces on `trace`."""
    return ((self.InducedOption(trace), 1.0),)

  def __repr__(self):
    return '<%s>' % self.NAME


class NeverPolicy(Policy):
  NAME = 'never'

  def _Decide(self, observation):
    return False


class AlwaysAtPolicy(Policy):
  """Intervenes at event `index` of every case."""
  NAME = 'always'

  def __init__(self, index):
    self.index = index
    self.NAME = 'always_at_%d' % index

  def _Decide(self, observation):
    return observation.length == self.index


def RctOption(spec, rng):
  """Draws an intervention option uniformly from never and at_1 .. at_T."""
  choice = int(rng.integers(spec.num_options))
  if choice == 0:
    return NEVER
  return InterventionOption.AtEvent(choice)


class RctPolicy(Policy):
  """Randomized controlled trial, uniform over the num_events + 1 options.

  Used prefix by prefix it intervenes at event k with hazard 1 / (T + 2 - k),
  which yields the same uniform distribution over options.
  """
  NAME = 'rct'

  def __init__(self, spec, rng=None):
    self.spec = spec
    self.rng = rng

  def _Decide(self, observation):
    hazard = 1.0 / (self.spec.num_events + 2 - observation.length)
    return self.rng.random() < hazard

  def InducedOption(self, trace, rng=None):
    return RctOption(self.spec, rng or self.rng)

  def OptionDistribution(self, trace):
    weight = 1.0 / self.spec.num_options
    return tuple((option, weight) for option in process.Options(self.spec))


class TablePolicy(Policy):
  """Policy backed by a decision table keyed on PrefixKey."""
  NAME = 'table'

  def __init__(self, spec, decision):
    self.spec = spec
    self.decision = decision

  def _Decide(self, observation):
    key = PrefixKey(observation)
    try:
      return self.decision[key] == INTERVENE
    except KeyError:
      raise UndefinedPrefixError('%s has no decision for prefix %s' % (
          self.NAME, key))


class PerfectPolicy(TablePolicy):
  """The exact optimum, built by BuildPerfectPolicy.

  Members:
    @ decision: dict PrefixKey -> INTERVENE / WAIT
    @ value: dict PrefixKey -> (v_intervene, v_wait)
    @ root_uplift: float
      Expected uplift per case of following the decisions.
  """
  NAME = 'perfect'

  def __init__(self, spec, decision, value, root_uplift):
    super(PerfectPolicy, self).__init__(spec, decision)
    self.value = value
    self.root_uplift = root_uplift

  def Dump(self, path):
    """Writes `prefix_key,v_intervene,v_wait,decision` rows to `path`."""
    frame = pd.DataFrame(
        [(key, v_intervene, v_wait,
          'intervene' if self.decision[key] == INTERVENE else 'wait')
         for key, (v_intervene, v_wait) in self.value.items()],
        columns=['prefix_key', 'v_intervene', 'v_wait', 'decision'])
    try:
      frame.to_csv(path, index=False, encoding='utf-8')
    except OSError as error:
      raise DumpError('Could not write perfect policy to %r: %s' % (
          str(path), error))
    return path


def BuildPerfectPolicy(spec):
  """Computes the perfect policy of `spec` by backward induction.

  For every prefix of length k without a prior intervention:
    v_intervene = E[outcome(trace, at_k) | trace extends prefix]
    v_wait = E[outcome(trace, never)] at full length, otherwise the expected
             best value of the one event longer prefixes.
  Decisions intervene only when v_intervene exceeds v_wait (ties wait).

  Returns:
    PerfectPolicy: with per-prefix values and the expected uplift per case.
  """
  traces = process.StateSpace(spec)
  length = spec.num_events
  levels = collections.defaultdict(list)
  weight = collections.defaultdict(float)
  intervene_sum = collections.defaultdict(float)
  wait_sum = collections.defaultdict(float)
  parent = {}
  never_mean = 0.0
  for trace in traces:
    probability = trace.probability
    keys = [PrefixKey(prefix) for prefix in trace.Prefixes()]
    for index, key in enumerate(keys, 1):
      if key not in weight:
        levels[index].append(key)
      weight[key] += probability
      intervene_sum[key] += probability * Outcome(
          trace, InterventionOption.AtEvent(index))
      if index > 1:
        parent[key] = keys[index - 2]
    never_outcome = Outcome(trace, NEVER)
    wait_sum[keys[-1]] += probability * never_outcome
    never_mean += probability * never_outcome

  decision = {}
  value = {}
  root = 0.0
  for index in range(length, 0, -1):
    for key in levels[index]:
      v_intervene = intervene_sum[key] / weight[key]
      v_wait = wait_sum[key] / weight[key]
      value[key] = (v_intervene, v_wait)
      decision[key] = (INTERVENE if v_intervene > v_wait + TIE_TOLERANCE
                       else WAIT)
      best = weight[key] * max(v_intervene, v_wait)
      if index > 1:
        wait_sum[parent[key]] += best
      else:
        root += best
  # Shortest prefixes first, for readable dumps.
  value = {key: value[key] for index in range(1, length + 1)
           for key in levels[index]}
  root_uplift = root - never_mean
  LOGGER.info('Perfect policy for %s: %d prefixes, expected uplift %.6f/case',
              spec.id, len(value), root_uplift)
  return PerfectPolicy(spec, decision, value, root_uplift)


def PerfectPolicyFor(spec):
  """Returns the perfect policy of `spec`, built once and shared."""
  return ARTIFACTS.Memoize(('perfect', spec.id),
                           lambda: BuildPerfectPolicy(spec))


# ##############################################################################
# Evaluation
#
@dataclasses.dataclass(frozen=True)
class PolicyEvaluation:
  """Exact expected uplift of a policy.

  Members:
    @ expected_uplift_per_case: float
    % by_prefix_breakdown: dict first-event PrefixKey -> uplift contribution
    % option_mass: dict option label -> probability of taking that option
  """
  expected_uplift_per_case: float
  by_prefix_breakdown: dict = None
  option_mass: dict = None


def EvaluatePolicyExact(policy, spec):
  """Computes the expected uplift per case of `policy` by enumeration.

  Every enumerated trace is walked through the policy; the uplift of the
  induced option is weighted with the trace's probability.

  Raises:
    UndefinedPrefixError: the policy has no decision for a reachable prefix.
  """
  total = 0.0
  breakdown = collections.defaultdict(float)
  mass = collections.defaultdict(float)
  for trace in process.StateSpace(spec):
    never_outcome = Outcome(trace, NEVER)
    first_key = PrefixKey(trace.Prefix(1))
    for option, option_weight in policy.OptionDistribution(trace):
      weight = trace.probability * option_weight
      uplift = weight * (Outcome(trace, option) - never_outcome)
      total += uplift
      breakdown[first_key] += uplift
      mass[option.label] += weight
  return PolicyEvaluation(total, dict(breakdown), dict(mass))


def EvaluatePolicySampled(policy, test_set):
  """Returns the uplift of `policy` cumulated over `test_set`.

  Arguments:
    @ policy: Policy
    @ test_set: iterable of CounterfactualTable

  Randomized policies contribute their expected uplift per case, so the
  result is deterministic for every policy.
  """
  uplift = 0.0
  for table in test_set:
    for option, weight in policy.OptionDistribution(table.trace):
      uplift += weight * table.Uplift(option)
  return uplift


def InterventionCount(policy, test_set):
  """Returns the expected number of interventions `policy` makes."""
  return sum(weight for table in test_set
             for option, weight in policy.OptionDistribution(table.trace)
             if not option.never)
