#!/usr/bin/python3
"""Tests for the Q-learning agents, replay memory and the training loop."""

# Too many public methods
# pylint: disable=R0904

# Standard modules
import collections
import os
import tempfile
import unittest

# Third-party modules
import numpy as np

# Unittest target
from intervene import policies
from intervene import process
from intervene import qlearning
from intervene.process import INTERVENE, NEVER, P1, P2, WAIT

SLOW = unittest.skipUnless(os.environ.get('INTERVENE_SLOW'),
                           'set INTERVENE_SLOW=1 for long training runs')


def Dummy(reward):
  observation = process.StateSpace(P1)[0].Prefix(1)
  return qlearning.Transition(observation, WAIT, reward, None, True)


class Memory(unittest.TestCase):
  """Replay memory and exploration schedule."""
  def testFifo(self):
    """[ReplayMemory] Holds the newest 1024 of 1030 transitions"""
    memory = qlearning.ReplayMemory(1024)
    for number in range(1, 1031):
      memory.Push(Dummy(number))
    contents = memory.Contents()
    self.assertEqual(len(memory), 1024)
    self.assertTrue(memory.full)
    self.assertEqual(contents[0].reward, 7)
    self.assertEqual(contents[-1].reward, 1030)

  def testNotFull(self):
    """[ReplayMemory] Is not full below capacity"""
    memory = qlearning.ReplayMemory(4)
    memory.Push(Dummy(1))
    self.assertFalse(memory.full)
    self.assertEqual([item.reward for item in memory], [1])

  def testEpsilonSchedule(self):
    """[EpsilonSchedule] Decays linearly to its floor"""
    schedule = qlearning.EpsilonSchedule(1.0, 0.05, 5000)
    self.assertEqual(schedule(0), 1.0)
    self.assertAlmostEqual(schedule(2500), 0.525)
    self.assertAlmostEqual(schedule(5000), 0.05)
    self.assertAlmostEqual(schedule(10000), 0.05)
    self.assertEqual(qlearning.EpsilonSchedule(1.0, 0.2, 0)(0), 0.2)


class Acting(unittest.TestCase):
  """Epsilon-greedy action choice."""
  def setUp(self):
    self.agent = qlearning.TabularQAgent(P1)
    self.observation = process.StateSpace(P1)[0].Prefix(1)

  def testRandomActions(self):
    """[Act] With epsilon 1 both actions are drawn equally often"""
    rng = np.random.default_rng(31)
    self.agent.epsilon = 1.0
    draws = 10000
    intervened = sum(self.agent.Act(self.observation, rng)
                     for _ in range(draws))
    self.assertAlmostEqual(intervened / draws, 0.5, delta=0.02)

  def testGreedy(self):
    """[Act] With epsilon 0 the larger Q-value wins and ties wait"""
    rng = np.random.default_rng(32)
    self.agent.epsilon = 0.0
    key = qlearning.StateKey(self.observation)
    self.agent.q[key] = np.array([3.0, 5.0])
    self.assertEqual(self.agent.Act(self.observation, rng), INTERVENE)
    self.agent.q[key] = np.array([4.0, 4.0])
    self.assertEqual(self.agent.Act(self.observation, rng), WAIT)

  def testUnknownFirst(self):
    """[Act] The tabular agent tries never-updated actions before any other"""
    rng = np.random.default_rng(33)
    self.agent.epsilon = 0.0
    key = qlearning.StateKey(self.observation)
    self.agent.q[key] = np.array([3.0, np.nan])
    self.assertEqual(self.agent.Act(self.observation, rng), INTERVENE)
    self.agent.q[key] = np.array([np.nan, 3.0])
    self.assertEqual(self.agent.Act(self.observation, rng), WAIT)
    self.agent.q[key] = np.array([3.0, 1.0])
    self.assertEqual(self.agent.Act(self.observation, rng), WAIT)
    self.assertEqual(qlearning.GreedyAction(self.agent.q[key]), WAIT)

  def testUnknownValues(self):
    """[GreedyAction] Unknown Q-values lose against known ones"""
    self.assertEqual(qlearning.GreedyAction(np.array([np.nan, np.nan])), WAIT)
    self.assertEqual(qlearning.GreedyAction(np.array([np.nan, -3.0])),
                     INTERVENE)
    self.assertEqual(qlearning.GreedyAction(np.array([-3.0, np.nan])), WAIT)
    self.assertEqual(qlearning.BestValue(np.array([np.nan, np.nan])), 0.0)
    self.assertEqual(qlearning.BestValue(np.array([2.0, np.nan])), 2.0)

  def testStateKey(self):
    """[StateKey] Prior interventions are part of the state"""
    trace = process.StateSpace(P1)[0]
    self.assertNotEqual(qlearning.StateKey(trace.Prefix(2)),
                        qlearning.StateKey(trace.Prefix(2, 1)))


class TabularAgent(unittest.TestCase):
  """Tabular Q-map updates and checkpoints."""
  def testUpdate(self):
    """[TabularQAgent] The first update sets the target, later ones step"""
    agent = qlearning.TabularQAgent(P1, alpha=0.5)
    agent.Update('key', INTERVENE, 4.0)
    self.assertEqual(agent.q['key'][INTERVENE], 4.0)
    self.assertTrue(np.isnan(agent.q['key'][WAIT]))
    agent.Update('key', INTERVENE, 8.0)
    self.assertEqual(agent.q['key'][INTERVENE], 6.0)
    self.assertEqual(agent.visits['key'][INTERVENE], 2)

  def testDecayedUpdate(self):
    """[TabularQAgent] Decayed steps average the targets"""
    agent = qlearning.TabularQAgent(P1, alpha_decay=True)
    for target in (1.0, 2.0, 6.0):
      agent.Update('key', WAIT, target)
    self.assertAlmostEqual(agent.q['key'][WAIT], 3.0)

  def testSkipsUnexploredNextState(self):
    """[TabularQAgent] No bootstrap from a next state with unknown actions"""
    agent = qlearning.TabularQAgent(P1)
    trace = process.StateSpace(P1)[5]
    transition = qlearning.Transition(trace.Prefix(1), WAIT, 0,
                                      trace.Prefix(2), False)
    agent.Learn(transition, None)
    self.assertEqual(agent.skipped, 1)
    self.assertEqual(agent.q, {})
    agent.q[qlearning.StateKey(trace.Prefix(2))] = np.array([1.0, 3.0])
    agent.Learn(transition, None)
    self.assertEqual(agent.QValues(trace.Prefix(1))[WAIT], 3.0)

  def testUntrainedPolicy(self):
    """[ExtractPolicy] An untrained agent always waits"""
    policy = qlearning.ExtractPolicy(qlearning.TabularQAgent(P1))
    self.assertEqual(len(policy.decision), 584)
    self.assertEqual(set(policy.decision.values()), {WAIT})
    self.assertEqual(policies.EvaluatePolicyExact(
        policy, P1).expected_uplift_per_case, 0)

  def testCheckpoint(self):
    """[TabularQAgent] Save and Load keep the Q-map and visit counts"""
    agent = qlearning.TabularQAgent(P2, alpha=0.1, alpha_decay=True)
    trace = process.StateSpace(P2)[3]
    agent.Update(qlearning.StateKey(trace.Prefix(2)), WAIT, 7.5)
    agent.Update(qlearning.StateKey(trace.Prefix(3, 2)), INTERVENE, -95.0)
    with tempfile.TemporaryDirectory() as directory:
      path = agent.Save(os.path.join(directory, 'agent.npz'))
      loaded = qlearning.TabularQAgent.Load(path)
    self.assertEqual(loaded.spec, P2)
    self.assertEqual(loaded.alpha, 0.1)
    self.assertTrue(loaded.alpha_decay)
    self.assertEqual(set(loaded.q), set(agent.q))
    for key, values in agent.q.items():
      np.testing.assert_array_equal(loaded.q[key], values)
      np.testing.assert_array_equal(loaded.visits[key], agent.visits[key])

  def testBadCheckpoint(self):
    """[TabularQAgent] Missing checkpoints raise CheckpointError"""
    self.assertRaises(qlearning.CheckpointError, qlearning.TabularQAgent.Load,
                      '/nonexistent/agent.npz')


class TabularConvergence(unittest.TestCase):
  """Tabular Q-learning on p1 against the perfect policy."""
  @classmethod
  def setUpClass(cls):
    cls.perfect = policies.PerfectPolicyFor(P1)
    cls.agent = qlearning.TabularQAgent(P1, alpha=0.05, alpha_decay=True)
    cls.training = qlearning.TrainRL(
        P1, cls.agent, np.random.default_rng(41),
        epsilon=qlearning.EpsilonSchedule(1.0, 1.0, 0), eval_interval=10000,
        patience=None, min_transitions=0, max_transitions=600000)
    cls.policy = qlearning.ExtractPolicy(cls.agent)

  def testTransitionBudget(self):
    """[TrainRL] Training runs up to the transition budget"""
    self.assertGreaterEqual(self.training.transitions, 600000)
    self.assertEqual(len(self.training.curve), 60)
    self.assertEqual(list(self.training.Curve().columns),
                     ['transitions', 'eval_uplift', 'epsilon'])

  def testUplift(self):
    """[TrainRL] The greedy policy reaches 98% of the perfect uplift"""
    uplift = policies.EvaluatePolicyExact(self.policy, P1)
    self.assertGreaterEqual(uplift.expected_uplift_per_case,
                            0.98 * self.perfect.root_uplift)
    self.assertAlmostEqual(uplift.expected_uplift_per_case,
                           self.training.best_uplift)

  def testDecisions(self):
    """[TrainRL] Every prefix with a clear choice matches the perfect policy"""
    checked = 0
    for key, (v_intervene, v_wait) in self.perfect.value.items():
      if abs(v_intervene - v_wait) <= 0.1:
        continue
      checked += 1
      self.assertEqual(self.policy.decision[key], self.perfect.decision[key],
                       key)
    self.assertGreater(checked, 400)

  def testRarePrefixes(self):
    """[TrainRL] Prefixes reached once in 256 cases are decided correctly"""
    for key in ('p1|1|A:1,A:1', 'p1|1|A:5,A:1', 'p1|1|A:1,A:1,A:5',
                'p1|1|A:0,A:5'):
      self.assertEqual(self.policy.decision[key], self.perfect.decision[key],
                       key)
    self.assertEqual(self.perfect.decision['p1|1|A:1,A:1'], WAIT)
    self.assertEqual(self.perfect.decision['p1|1|A:1,A:1,A:5'], INTERVENE)

  def testTerminalValues(self):
    """[TabularQAgent] Terminal Q-values are the final outcomes"""
    for trace in process.StateSpace(P1):
      values = self.agent.QValues(trace.Prefix(3))
      if not np.isnan(values[WAIT]):
        self.assertEqual(values[WAIT], process.Outcome(trace, NEVER))
      if not np.isnan(values[INTERVENE]):
        self.assertEqual(values[INTERVENE], process.Outcome(
            trace, process.InterventionOption.AtEvent(3)))

  def testGuard(self):
    """[GreedyPolicy] The extracted policy never intervenes twice"""
    for trace in process.StateSpace(P1)[:64]:
      self.assertFalse(self.policy.Decide(trace.Prefix(3, 1)))

  def testBellmanResidual(self):
    """[TabularQAgent] Replayed transitions are close to their targets"""
    memory = qlearning.ReplayMemory(2048)
    rng = np.random.default_rng(42)
    self.agent.epsilon = 0.0
    while not memory.full:
      episode, observation = process.Reset(P1, rng)
      done = False
      while not done and not memory.full:
        action = self.agent.Act(observation, rng)
        next_observation, reward, done = episode.Step(action)
        memory.Push(qlearning.Transition(observation, action, reward,
                                         next_observation, done))
        observation = next_observation
    self.assertLess(self.agent.BellmanResidual(memory), 2.0)


class EarlyStoppingWindow(unittest.TestCase):
  """When training may stop and which state it keeps."""
  def testWaitsForEpsilonFloor(self):
    """[TrainRL] Patience only starts once epsilon reached its floor"""
    agent = qlearning.TabularQAgent(P1, alpha_decay=True)
    training = qlearning.TrainRL(
        P1, agent, np.random.default_rng(56),
        epsilon=qlearning.EpsilonSchedule(1.0, 0.05, 3000), eval_interval=500,
        patience=1, min_transitions=3000, max_transitions=30000)
    self.assertEqual(training.curve[0][0], 500)
    self.assertGreaterEqual(training.transitions, 3500)
    self.assertGreaterEqual(training.best_transitions, 3000)
    self.assertEqual(training.best_uplift,
                     max(row[1] for row in training.curve if row[0] >= 3000))

  def testShorterThanDecay(self):
    """[TrainRL] Runs ending before the epsilon floor keep their final state"""
    agent = qlearning.TabularQAgent(P1)
    training = qlearning.TrainRL(P1, agent, np.random.default_rng(57),
                                 eval_interval=300, patience=2,
                                 min_transitions=0, max_transitions=900)
    self.assertEqual(training.transitions, 900)
    self.assertEqual(training.best_transitions, 900)
    self.assertEqual(training.best_uplift, training.curve[-1][1])

  def testUnevenBudget(self):
    """[TrainRL] A budget off the evaluation grid still records a best state"""
    agent = qlearning.TabularQAgent(P1)
    training = qlearning.TrainRL(P1, agent, np.random.default_rng(58),
                                 eval_interval=1000, patience=None,
                                 min_transitions=0, max_transitions=301)
    self.assertEqual(training.transitions, 303)
    self.assertEqual(len(training.curve), 1)
    self.assertEqual(training.best_transitions, 303)


class NeuralAgent(unittest.TestCase):
  """Neural Q-function."""
  def testLearnsWhenMemoryFull(self):
    """[NeuralQAgent] Trains on the whole memory once it is full"""
    agent = qlearning.NeuralQAgent(P2, hidden=4, seed=1)
    memory = qlearning.ReplayMemory(8)
    rng = np.random.default_rng(51)
    steps = 0
    for steps in qlearning.RunEpisode(agent, rng, memory):
      pass
    self.assertEqual(steps, 5)
    self.assertEqual(agent.train_steps, 0)
    for steps in qlearning.RunEpisode(agent, rng, memory, steps):
      pass
    self.assertEqual(steps, 10)
    self.assertEqual(agent.train_steps, 3)
    self.assertEqual(agent.model.optimizer.t, 3)

  def testQTable(self):
    """[NeuralQAgent] Q-values come as (wait, intervene) pairs"""
    agent = qlearning.NeuralQAgent(P1, hidden=4)
    prefixes = process.EnumeratePrefixes(P1)
    table = agent.QTable(prefixes)
    self.assertEqual(table.shape, (584, 2))
    np.testing.assert_allclose(agent.QValues(prefixes[7]), table[7])
    self.assertEqual(agent.QTable([]).shape, (0, 2))

  def testShortTraining(self):
    """[TrainRL] A short neural run restores its best evaluated state"""
    agent = qlearning.NeuralQAgent(P1, hidden=4, seed=2)
    training = qlearning.TrainRL(P1, agent, np.random.default_rng(52),
                                 memory_size=32,
                                 epsilon=qlearning.EpsilonSchedule(1.0, 0.05,
                                                                   120),
                                 eval_interval=60, patience=2,
                                 min_transitions=0, max_transitions=300)
    self.assertLessEqual(training.transitions, 302)
    uplift = policies.EvaluatePolicyExact(qlearning.ExtractPolicy(agent), P1)
    self.assertAlmostEqual(uplift.expected_uplift_per_case,
                           training.best_uplift)
    self.assertEqual(training.best_uplift,
                     max(row[1] for row in training.curve if row[0] >= 120))
    self.assertGreaterEqual(training.best_transitions, 120)

  def testEncodedReplay(self):
    """[EncodedReplay] Holds the encodings of exactly the remembered transitions"""
    agent = qlearning.NeuralQAgent(P2, hidden=4, seed=3)
    memory = qlearning.ReplayMemory(8)
    rng = np.random.default_rng(54)
    steps = 0
    for _episode in range(3):
      for steps in qlearning.RunEpisode(agent, rng, memory, steps):
        pass
    replay = agent._replay
    self.assertIs(replay.memory, memory)
    self.assertEqual(replay.size, 8)
    self.assertEqual(replay.position, 15 % 8)
    stored = collections.Counter(
        (replay.steps[row].tobytes(), int(replay.actions[row]),
         float(replay.rewards[row]), bool(replay.live[row]))
        for row in range(replay.size))
    expected = collections.Counter(
        (agent.Encode(item.state).steps.tobytes(), item.action,
         float(item.reward), not item.done) for item in memory)
    self.assertEqual(stored, expected)
    for row in np.flatnonzero(replay.live):
      self.assertTrue(replay.next_steps[row].any())

  def testFreshMemory(self):
    """[EncodedReplay] A new memory gets its own encoded copy"""
    agent = qlearning.NeuralQAgent(P1, hidden=4, seed=4)
    rng = np.random.default_rng(55)
    first = qlearning.ReplayMemory(4)
    for _steps in qlearning.RunEpisode(agent, rng, first):
      pass
    second = qlearning.ReplayMemory(4)
    second.Push(first.Contents()[0])
    agent.Observe(first.Contents()[1], second)
    self.assertIs(agent._replay.memory, second)
    self.assertEqual(agent._replay.size, 2)

  @SLOW
  def testNeuralP1(self):
    """[TrainRL] Neural Q-learning on p1 beats the RCT and never policies"""
    agent = qlearning.NeuralQAgent(P1, seed=0)
    qlearning.TrainRL(P1, agent, np.random.default_rng(53),
                      max_transitions=60000)
    uplift = policies.EvaluatePolicyExact(qlearning.ExtractPolicy(agent), P1)
    self.assertGreater(uplift.expected_uplift_per_case, 0)


if __name__ == '__main__':
  unittest.main(testRunner=unittest.TextTestRunner(verbosity=2))
