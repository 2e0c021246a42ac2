#!/usr/bin/python3
"""Command handlers for the intervene command line.

Every handler takes the parsed argparse namespace and returns an exit code.
"""

# Standard modules
import os

# Third-party modules
import pandas as pd

# Package modules
from . import EXIT_ACCEPTANCE, EXIT_OK
from . import causal
from . import harness
from . import policies
from . import process
from . import report

ROUTES = (
    ('generate', 'Generate'),
    ('perfect', 'Perfect'),
    ('train-ci', 'TrainCi'),
    ('train-rl', 'TrainRl'),
    ('evaluate', 'Evaluate'),
    ('reproduce-table3', 'Reproduce'),
)


class Commands:
  """Handlers bound to one experiment configuration and output directory."""
  def __init__(self, config, out, logger):
    self.config = config
    self.out = out
    self.logger = logger
    self.spec = harness.SpecFor(config)

  def _Path(self, name):
    return os.path.join(self.out, name)

  def _TestSet(self):
    return harness.MakeTestSet(self.spec, self.config.seed, self.config.n_test)

  def Generate(self, arguments=None):
    """Writes the shared test set and a seeded RCT event log."""
    spec, seed = self.spec, self.config.seed
    test_set = self._TestSet()
    harness.ExportEventLog(
        [(table.case_id, table.trace, process.NEVER) for table in test_set],
        self._Path('test_%s_seed%d.csv' % (spec.id, seed)))
    harness.ExportCounterfactuals(
        test_set, self._Path('counterfactuals_%s_seed%d.csv' % (spec.id, seed)))
    rng = harness.Rng(seed, harness.STREAM_RCT)
    rct_cases = []
    for index in range(self.config.n_rct):
      trace = process.SampleTrace(spec, rng)
      rct_cases.append(('rct-%05d' % index, trace,
                        policies.RctOption(spec, rng)))
    harness.ExportEventLog(rct_cases,
                           self._Path('rct_%s_seed%d.csv' % (spec.id, seed)))
    self.logger.info('Wrote %d test cases and %d RCT cases for %s to %s',
                     len(test_set), len(rct_cases), spec.id, self.out)
    return EXIT_OK

  def Perfect(self, arguments=None):
    """Solves the perfect policy, dumps it and reports its uplift.

    Next to the test set uplift the exact expectation is printed scaled to the
    test set size, the value sampled uplifts are compared against.
    """
    policy = policies.PerfectPolicyFor(self.spec)
    policy.Dump(self._Path('perfect_%s.csv' % self.spec.id))
    exact = policies.EvaluatePolicyExact(policy, self.spec)
    sampled = policies.EvaluatePolicySampled(policy, self._TestSet())
    n_test = self.config.n_test
    print('perfect %s: root uplift %.6f/case, exact uplift %.6f/case, '
          'test set uplift %.1f' % (self.spec.id, policy.root_uplift,
                                    exact.expected_uplift_per_case, sampled))
    print('perfect %s: pinned exact uplift %.1f per %d cases' % (
        self.spec.id, exact.expected_uplift_per_case * n_test, n_test))
    return EXIT_OK

  def TrainCi(self, arguments=None):
    """Trains and evaluates one CI run for the configured seed."""
    run = harness.RunCI(self.spec, self.config, self.config.seed,
                        self._TestSet())
    harness.WriteRunArtifacts(run, self.out, self.spec.id)
    print('ci %s seed %d: threshold %.4f, %d epochs, test uplift %.1f' % (
        self.spec.id, run.result.seed, run.result.threshold, run.result.effort,
        run.result.uplift))
    return EXIT_OK

  def TrainRl(self, arguments=None):
    """Trains and evaluates one RL run for the configured seed."""
    run = harness.RunRL(self.spec, self.config, self.config.seed,
                        self._TestSet())
    harness.WriteRunArtifacts(run, self.out, self.spec.id)
    print('rl %s seed %d: %d transitions, test uplift %.1f' % (
        self.spec.id, run.result.seed, run.result.effort, run.result.uplift))
    return EXIT_OK

  def Evaluate(self, arguments=None):
    """Evaluates the reference policies exactly and on the test set."""
    test_set = self._TestSet()
    candidates = [policies.NeverPolicy(), policies.RctPolicy(self.spec),
                  policies.PerfectPolicyFor(self.spec),
                  causal.ExactCIPolicy(self.spec)]
    candidates.extend(policies.AlwaysAtPolicy(index)
                      for index in range(1, self.spec.num_events + 1))
    rows = []
    for policy in candidates:
      name = 'ci_exact_tabular' if isinstance(policy, causal.CIPolicy) else (
          policy.NAME)
      rows.append((name, policies.EvaluatePolicyExact(
          policy, self.spec).expected_uplift_per_case,
                   policies.EvaluatePolicySampled(policy, test_set),
                   policies.InterventionCount(policy, test_set)))
    frame = pd.DataFrame(rows, columns=['policy', 'exact_uplift_per_case',
                                        'test_uplift', 'interventions'])
    harness.WriteFrame(frame, self._Path('evaluate_%s.csv' % self.spec.id))
    print(frame.to_string(index=False, float_format='%.6f'))
    return EXIT_OK

  def Reproduce(self, arguments=None):
    """Runs the full protocol, writes all report formats, checks orderings."""
    try:
      table = harness.RunExperiment(self.config, self.out)
    except harness.StageError as error:
      if error.partial is not None:
        self._WriteReports(error.partial, 'partial_')
      raise
    self._WriteReports(table)
    print(report.EmitReport(table, getattr(arguments, 'format', 'text')))
    if harness.CheckAcceptance(table):
      return EXIT_ACCEPTANCE
    return EXIT_OK

  def _WriteReports(self, table, prefix=''):
    for renderer in report.FORMATS.values():
      renderer(table).Write(self._Path('%sreport_%s.%s' % (
          prefix, table.process, renderer.EXTENSION)))
