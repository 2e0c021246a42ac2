#!/usr/bin/python3
"""Tests for prefix encoding, the sequence regressor and training helpers."""

# Too many public methods
# pylint: disable=R0904

# Standard modules
import os
import tempfile
import unittest

# Third-party modules
import numpy as np

# Unittest target
from intervene import network
from intervene import process
from intervene.process import P1, P2


def Batch(spec, count, seed=0):
  rng = np.random.default_rng(seed)
  standardizer = network.Standardizer.FromStateSpace(spec)
  encoded = []
  for _ in range(count):
    trace = process.SampleTrace(spec, rng)
    length = int(rng.integers(1, spec.num_events + 1))
    encoded.append(network.Encode(trace.Prefix(length), standardizer))
  return network.Stack(encoded)


class Standardizer(unittest.TestCase):
  """Feature statistics."""
  def testFit(self):
    """[Standardizer] Fit estimates mean and population deviation"""
    standardizer = network.Standardizer().Fit('attribute', [1, 3, 5, 7])
    self.assertEqual(standardizer.mean['attribute'], 4)
    self.assertAlmostEqual(standardizer.std['attribute'], np.sqrt(5))
    np.testing.assert_allclose(
        standardizer.Inverse('attribute',
                             standardizer.Transform('attribute', [2, 6])),
        [2, 6])

  def testZeroSpread(self):
    """[Standardizer] Constant features keep a deviation of one"""
    standardizer = network.Standardizer().Fit('case_var', [1, 1, 1])
    self.assertEqual(standardizer.std['case_var'], 1.0)

  def testWeighted(self):
    """[Standardizer] State space statistics use the trace probabilities"""
    standardizer = network.Standardizer.FromStateSpace(P1)
    self.assertAlmostEqual(standardizer.mean['attribute'], 2.0)
    self.assertAlmostEqual(standardizer.mean['outcome'], 6.0)

  def testNotFitted(self):
    """[Standardizer] Unfitted features raise NotFittedError"""
    standardizer = network.Standardizer()
    self.assertRaises(network.NotFittedError, standardizer.Transform,
                      'attribute', 1)
    self.assertRaises(network.NotFittedError, network.Encode,
                      process.StateSpace(P1)[0].Prefix(1), standardizer)
    self.assertRaises(network.NotFittedError, standardizer.Fit, 'outcome', [])

  def testDictRoundTrip(self):
    """[Standardizer] ToDict and FromDict keep the statistics"""
    standardizer = network.Standardizer.FromStateSpace(P2)
    copy = network.Standardizer.FromDict(standardizer.ToDict())
    self.assertEqual(copy.mean, standardizer.mean)
    self.assertEqual(copy.std, standardizer.std)


class Encoding(unittest.TestCase):
  """Prefix encoding channels."""
  def setUp(self):
    self.standardizer = network.Standardizer().Fit('attribute', [0, 4])
    self.standardizer.Fit('case_var', [1, 3])

  def testP1Prefix(self):
    """[Encode] Activities, padding and attributes land in their channels"""
    trace = process.LatentTrace('p1', (process.Event('A', 4),
                                       process.Event('B', 0),
                                       process.Event('B', 2)))
    encoded = network.Encode(trace.Prefix(2), self.standardizer)
    self.assertEqual(encoded.steps.shape, (3, network.FeatureWidth(P1)))
    np.testing.assert_array_equal(encoded.steps[0], [1, 0, 0, 1, 0])
    np.testing.assert_array_equal(encoded.steps[1], [0, 1, 0, -1, 0])
    np.testing.assert_array_equal(encoded.steps[2], [0, 0, 1, 0, 0])
    self.assertEqual(encoded.side.shape, (0,))

  def testInterventionFlag(self):
    """[Encode] A prior intervention is flagged at its step"""
    trace = process.StateSpace(P1)[0]
    encoded = network.Encode(trace.Prefix(3, intervention_index=2),
                             self.standardizer)
    np.testing.assert_array_equal(encoded.steps[:, -1], [0, 1, 0])

  def testDecisionFlag(self):
    """[Encode] CI mode flags the candidate decision on the last step"""
    trace = process.StateSpace(P1)[0]
    prefix = trace.Prefix(2)
    wait = network.Encode(prefix, self.standardizer, network.CI, False)
    now = network.Encode(prefix, self.standardizer, network.CI, True)
    np.testing.assert_array_equal(wait.steps[:, -1], [0, 0, 0])
    np.testing.assert_array_equal(now.steps[:, -1], [0, 1, 0])
    rl = network.Encode(prefix, self.standardizer, network.RL, True)
    np.testing.assert_array_equal(rl.steps[:, -1], [0, 0, 0])

  def testCaseVariable(self):
    """[Encode] p2 carries the standardized case variable as side input"""
    trace = process.StateSpace(P2)[0]
    encoded = network.Encode(trace.Prefix(1), self.standardizer)
    self.assertEqual(encoded.steps.shape, (5, network.FeatureWidth(P2)))
    self.assertEqual(encoded.side.shape, (network.SideWidth(P2),))
    self.assertEqual(encoded.side[0], trace.case_var - 2)


class Regressor(unittest.TestCase):
  """The LSTM regressor, its gradients and checkpoints."""
  def testPredictionShapes(self):
    """[SequenceRegressor] CI outputs one value, RL outputs two"""
    steps, side = Batch(P2, 4)
    ci = network.SequenceRegressor.ForSpec(P2, network.CI, hidden=4)
    rl = network.SequenceRegressor.ForSpec(P2, network.RL, hidden=4)
    self.assertEqual(ci.Predict(steps, side).shape, (4, 1))
    self.assertEqual(rl.Predict(steps, side).shape, (4, 2))

  def testGradientCheck(self):
    """[SequenceRegressor] Analytic gradients match finite differences"""
    steps, side = Batch(P2, 3, seed=1)
    model = network.SequenceRegressor.ForSpec(P2, network.CI, hidden=4, seed=2)
    errors = network.GradientCheck(model, steps, side, [3.0, -2.0, 5.0])
    self.assertLess(max(errors.values()), 1e-4, errors)

  def testGradientCheckActions(self):
    """[SequenceRegressor] Q-value gradients flow through the taken action"""
    steps, side = Batch(P1, 3, seed=3)
    model = network.SequenceRegressor.ForSpec(P1, network.RL, hidden=4, seed=4)
    errors = network.GradientCheck(model, steps, side, [4.0, -3.0, 6.0],
                                   actions=[0, 1, 1])
    self.assertLess(max(errors.values()), 1e-4, errors)

  def testTrainStepReducesLoss(self):
    """[SequenceRegressor] One Adam step lowers the loss on its batch"""
    steps, side = Batch(P1, 16, seed=5)
    targets = np.linspace(-3, 3, 16)
    model = network.SequenceRegressor.ForSpec(P1, network.CI, hidden=8, seed=6)
    before = model.TrainStep(steps, side, targets)
    self.assertLess(model.MeanAbsoluteError(steps, side, targets), before)
    self.assertEqual(model.optimizer.t, 1)

  def testZeroLossKeepsParameters(self):
    """[SequenceRegressor] Exact predictions leave the parameters unchanged"""
    steps, side = Batch(P1, 4, seed=7)
    model = network.SequenceRegressor.ForSpec(P1, network.CI, hidden=4)
    targets = model.Predict(steps, side)[:, 0]
    before = model.Snapshot()
    self.assertEqual(model.TrainStep(steps, side, targets), 0)
    for name, value in before.items():
      np.testing.assert_array_equal(model.params[name], value)

  def testDivergence(self):
    """[SequenceRegressor] Non-finite losses raise DivergenceError"""
    steps, side = Batch(P1, 2)
    model = network.SequenceRegressor.ForSpec(P1, network.CI, hidden=4)
    self.assertRaises(network.DivergenceError, model.TrainStep, steps, side,
                      [np.inf, 0.0])

  def testSnapshotRestore(self):
    """[SequenceRegressor] Restore brings back a snapshot"""
    steps, side = Batch(P1, 8, seed=8)
    model = network.SequenceRegressor.ForSpec(P1, network.CI, hidden=4)
    snapshot = model.Snapshot()
    expected = model.Predict(steps, side)
    model.TrainStep(steps, side, np.ones(8))
    self.assertFalse(np.array_equal(model.Predict(steps, side), expected))
    model.Restore(snapshot)
    np.testing.assert_array_equal(model.Predict(steps, side), expected)

  def testCheckpoint(self):
    """[SequenceRegressor] Save and Load reproduce predictions exactly"""
    steps, side = Batch(P2, 8, seed=9)
    model = network.SequenceRegressor.ForSpec(P2, network.RL, hidden=4, seed=3,
                                              learning_rate=0.01)
    model.TrainStep(steps, side, np.arange(8), actions=[0, 1] * 4)
    model.metadata = {'process': 'p2', 'epochs': 1}
    with tempfile.TemporaryDirectory() as directory:
      path = model.Save(os.path.join(directory, 'model.npz'))
      loaded = network.SequenceRegressor.Load(path)
    np.testing.assert_array_equal(loaded.Predict(steps, side),
                                  model.Predict(steps, side))
    self.assertEqual(loaded.optimizer.t, 1)
    self.assertEqual(loaded.optimizer.learning_rate, 0.01)
    self.assertEqual(loaded.metadata, model.metadata)
    for name in model.params:
      np.testing.assert_array_equal(loaded.optimizer.m[name],
                                    model.optimizer.m[name])

  def testBadCheckpoint(self):
    """[SequenceRegressor] Unreadable checkpoints raise CheckpointError"""
    with tempfile.TemporaryDirectory() as directory:
      path = os.path.join(directory, 'broken.npz')
      with open(path, 'wb') as broken:
        broken.write(b'not a checkpoint')
      self.assertRaises(network.CheckpointError,
                        network.SequenceRegressor.Load, path)
      self.assertRaises(network.CheckpointError,
                        network.SequenceRegressor.Load,
                        os.path.join(directory, 'missing.npz'))


class Stopping(unittest.TestCase):
  """Patience based early stopping."""
  def testScriptedScores(self):
    """[EarlyStopping] Stops after patience non-improving rounds"""
    stopper = network.EarlyStopping(patience=3)
    scores = [5, 4, 4.5, 4.2, 4.1]
    stops = [stopper.Update(score, step, lambda: 'state')
             for step, score in enumerate(scores, 1)]
    self.assertEqual(stops, [False, False, False, False, True])
    self.assertEqual(stopper.best, 4)
    self.assertEqual(stopper.best_step, 2)
    self.assertEqual(stopper.best_state, 'state')

  def testImprovementResets(self):
    """[EarlyStopping] An improvement resets the bad round counter"""
    stopper = network.EarlyStopping(patience=2, mode='max')
    self.assertFalse(stopper.Update(1.0, 1))
    self.assertFalse(stopper.Update(0.5, 2))
    self.assertFalse(stopper.Update(2.0, 3))
    self.assertEqual(stopper.bad_rounds, 0)
    self.assertFalse(stopper.Update(2.0, 4))
    self.assertTrue(stopper.Update(1.5, 5))
    self.assertEqual(stopper.best_step, 3)

  def testNoPatience(self):
    """[EarlyStopping] Patience None never stops"""
    stopper = network.EarlyStopping(patience=None)
    for step in range(100):
      self.assertFalse(stopper.Update(10.0, step))
    self.assertEqual(stopper.best_step, 0)

  def testBadMode(self):
    """[EarlyStopping] Unknown modes are rejected"""
    self.assertRaises(ValueError, network.EarlyStopping, 5, 'mean')


class Tabular(unittest.TestCase):
  """Exact conditional means."""
  def testWeightedMean(self):
    """[TabularEstimator] Predict returns the weighted label mean"""
    estimator = network.TabularEstimator().Fit([
        ('k', 0, 1.0), ('k', 0, 4.0, 2.0), ('k', 1, -1.0)])
    self.assertEqual(estimator.Predict('k', 0), 3.0)
    self.assertEqual(estimator.Predict('k', 1), -1.0)
    self.assertEqual(estimator.Count('k', 0), 2)
    self.assertEqual(len(estimator), 2)
    self.assertIn(('k', 1), estimator)

  def testNoData(self):
    """[TabularEstimator] Unseen pairs raise NoDataError"""
    estimator = network.TabularEstimator().Fit([('k', 0, 1.0)])
    self.assertRaises(network.NoDataError, estimator.Predict, 'k', 1)
    self.assertEqual(estimator.Count('x', 0), 0)


if __name__ == '__main__':
  unittest.main(testRunner=unittest.TextTestRunner(verbosity=2))
