"""Test the lander dynamics, candidate state spaces, candidate rewards and the offline guard"""
from dataclasses import replace
import logging
import math
from unittest import TestCase

import numpy as np

from opeselect.env import (DEFAULT_LANDER, DEFAULT_REWARDS, LEFT, MAIN, NOOP, REWARD_F,
                           REWARD_F_R1, REWARD_F_R2, REWARD_F_R3, RIGHT, S_LESS, S_MORE, S_ORIG,
                           UNION_FEATURES, EpisodeDoneError, LanderEnv, LanderState,
                           LiveEnvironmentError, RewardComponents, RewardSpec, StateSpaceSpec,
                           apply_reward_spec, lander_reset, lander_step, live_environment_allowed,
                           offline_only, project_state, shaping)
from opeselect.funcapprox import ShapeError
from opeselect.seeding import rng_stream

logging.basicConfig(level=logging.INFO)


class TestLanderDynamics(TestCase):
    """Test lander_reset() and lander_step()"""

    def setUp(self):
        self.hover = LanderState(0.0, 0.5, 0.0, 0.0, 0.0, 0.0)

    def test_reset(self):
        """Spawns are level, at the spawn altitude and reproducible per seed"""
        a = lander_reset(3)
        b = lander_reset(3)
        assert a == b
        assert a.y == DEFAULT_LANDER.spawn_altitude
        assert a.theta == 0.0 and a.omega == 0.0
        assert abs(a.vx) <= DEFAULT_LANDER.spawn_velocity_range
        assert lander_reset(4) != a

    def test_noop_falls(self):
        """Without thrust only gravity acts and no fuel is spent"""
        step = lander_step(self.hover, NOOP)
        assert math.isclose(step.state.vy, -DEFAULT_LANDER.gravity * DEFAULT_LANDER.dt)
        assert step.state.vx == 0.0
        assert step.components.action_based == 0.0
        assert not step.done

    def test_main_engine(self):
        """The main engine outweighs gravity and costs the main fuel rate"""
        c = DEFAULT_LANDER
        step = lander_step(self.hover, MAIN)
        assert math.isclose(step.state.vy, (c.thrust_main - c.gravity) * c.dt)
        assert step.components.action_based == -c.fuel_main

    def test_side_engines(self):
        """Side engines push and twist in opposite directions"""
        left = lander_step(self.hover, LEFT)
        right = lander_step(self.hover, RIGHT)
        assert left.state.vx > 0.0 > right.state.vx
        assert left.state.omega < 0.0 < right.state.omega
        assert left.components.action_based == -DEFAULT_LANDER.fuel_side

    def test_landing(self):
        """Touching down slowly on the pad ends the episode with the landing bonus"""
        state = LanderState(0.05, 0.001, 0.0, -0.2, 0.0, 0.0)
        step = lander_step(state, NOOP)
        assert step.done and not step.truncated
        assert step.state.y == 0.0
        assert step.components.terminal == DEFAULT_LANDER.landing_bonus
        assert step.state.contact_left == 1.0 and step.state.contact_right == 1.0

    def test_crash(self):
        """Touching down off the pad or too fast is a crash"""
        off_pad = lander_step(LanderState(0.5, 0.001, 0.0, -0.2, 0.0, 0.0), NOOP)
        assert off_pad.components.terminal == -DEFAULT_LANDER.crash_penalty
        too_fast = lander_step(LanderState(0.0, 0.001, 0.0, -2.0, 0.0, 0.0), NOOP)
        assert too_fast.components.terminal == -DEFAULT_LANDER.crash_penalty

    def test_truncation(self):
        """Exhausting the step budget truncates with a zero terminal component"""
        config = replace(DEFAULT_LANDER, max_steps=3)
        step = lander_step(self.hover, NOOP, config, step_index=2)
        assert step.done and step.truncated
        assert step.components.terminal == 0.0
        assert not lander_step(self.hover, NOOP, config, step_index=1).done

    def test_step_after_done(self):
        """Stepping a finished episode raises EpisodeDoneError"""
        with self.assertRaises(EpisodeDoneError):
            lander_step(LanderState(0.0, 0.0, 0.0, 0.0, 0.0, 0.0), NOOP)
        with self.assertRaises(EpisodeDoneError):
            lander_step(self.hover, NOOP, step_index=DEFAULT_LANDER.max_steps)
        with self.assertRaises(ValueError):
            lander_step(self.hover, 7)

    def test_shaping_telescopes(self):
        """State-based components of an episode sum to the change in shaping potential"""
        env = LanderEnv(replace(DEFAULT_LANDER, max_steps=60))
        env.reset(5)
        start = env.state
        total = 0.0
        rng = np.random.default_rng(0)
        while not env.done:
            total += env.step(int(rng.integers(4))).components.state_based
        assert math.isclose(total, shaping(env.state) - shaping(start), abs_tol=1e-9)

    def test_env_wrapper(self):
        """LanderEnv refuses to step before reset and after the episode ends"""
        env = LanderEnv(replace(DEFAULT_LANDER, max_steps=2))
        with self.assertRaises(EpisodeDoneError):
            env.step(NOOP)
        s0 = env.reset(1)
        assert s0.shape == (len(UNION_FEATURES),)
        env.step(NOOP)
        result = env.step(NOOP)
        assert result.truncated and env.done
        with self.assertRaises(EpisodeDoneError):
            env.step(NOOP)

    def test_state_validation(self):
        """Contact flags must be 0 or 1 and values finite"""
        with self.assertRaises(ValueError):
            LanderState(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, contact_left=0.5)
        with self.assertRaises(ValueError):
            LanderState(0.0, math.nan, 0.0, 0.0, 0.0, 0.0)
        vec = self.hover.as_vector()
        assert LanderState.from_vector(vec) == self.hover
        with self.assertRaises(ShapeError):
            LanderState.from_vector(vec[:5])


class TestOfflineGuard(TestCase):
    """Test offline_only()"""

    def test_guard_blocks_live_calls(self):
        """reset and step fail inside the guard and work again after it"""
        state = lander_reset(0)
        with offline_only():
            assert not live_environment_allowed()
            with self.assertRaises(LiveEnvironmentError):
                lander_reset(0)
            with self.assertRaises(LiveEnvironmentError):
                lander_step(state, NOOP)
            with offline_only():
                pass
            assert not live_environment_allowed()
        assert live_environment_allowed()
        lander_step(state, NOOP)

    def test_guard_released_on_error(self):
        """An exception inside the guard still releases it"""
        with self.assertRaises(KeyError):
            with offline_only():
                raise KeyError('x')
        assert live_environment_allowed()


class TestStateSpaces(TestCase):
    """Test StateSpaceSpec and project_state()"""

    def test_default_candidates(self):
        """S_orig keeps everything, S_more adds two noise features, S_less drops positions"""
        union = np.arange(8.0)
        np.testing.assert_array_equal(project_state(union, S_ORIG), union)
        np.testing.assert_array_equal(project_state(union, S_LESS), union[2:])
        more = project_state(union, S_MORE, rng_stream(0, S_MORE.noise_seed_stream))
        assert more.shape == (10,)
        np.testing.assert_array_equal(more[:8], union)
        assert S_MORE.output_dim == 10 and S_LESS.output_dim == 6

    def test_projection_order_and_batch(self):
        """Indices are kept in spec order, batches project row by row"""
        spec = StateSpaceSpec('swap', (3, 0))
        batch = np.arange(16.0).reshape(2, 8)
        np.testing.assert_array_equal(project_state(batch, spec), [[3.0, 0.0], [11.0, 8.0]])

    def test_noise_reproducible(self):
        """Noise features come from the given stream only"""
        union = np.zeros((4, 8))
        a = project_state(union, S_MORE, S_MORE.noise_rng(1))
        b = project_state(union, S_MORE, S_MORE.noise_rng(1))
        c = project_state(union, S_MORE, S_MORE.noise_rng(2))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert S_ORIG.noise_rng(1) is None
        with self.assertRaises(ValueError):
            project_state(union, S_MORE)

    def test_spec_validation(self):
        """Duplicate, negative and out-of-range indices are rejected"""
        with self.assertRaises(ValueError):
            StateSpaceSpec('dup', (1, 1))
        with self.assertRaises(ShapeError):
            StateSpaceSpec('neg', (-1,))
        with self.assertRaises(ShapeError):
            project_state(np.zeros(8), StateSpaceSpec('far', (8,)))

    def test_from_features(self):
        """Specs can be built from union feature names"""
        spec = StateSpaceSpec.from_features('v', ['vx', 'vy'])
        assert spec.indices == (2, 3)
        with self.assertRaises(ValueError):
            StateSpaceSpec.from_features('bad', ['altitude'])
        assert StateSpaceSpec('n', (0,), noise_dims=1).noise_seed_stream == 'noise-n'


class TestRewardSpecs(TestCase):
    """Test RewardSpec and apply_reward_spec()"""

    def test_default_candidates(self):
        """f is the sum of all components, the variants drop components"""
        rc = RewardComponents(2.0, -0.3, 100.0)
        assert math.isclose(apply_reward_spec(rc, REWARD_F), 101.7)
        assert apply_reward_spec(rc, REWARD_F_R1) == 100.0
        assert math.isclose(apply_reward_spec(rc, REWARD_F_R2), 99.7)
        assert apply_reward_spec(rc, REWARD_F_R3) == 102.0
        assert [r.name for r in DEFAULT_REWARDS] == ['f', 'f_r1', 'f_r2', 'f_r3']

    def test_arrays_and_weights(self):
        """Component arrays give one reward per row, weights scale components"""
        spec = RewardSpec('w', weights=(2.0, 0.0, 0.5))
        comps = np.array([[1.0, 1.0, 2.0], [0.0, -1.0, 0.0]])
        np.testing.assert_allclose(apply_reward_spec(comps, spec), [3.0, 0.0])
        np.testing.assert_allclose(apply_reward_spec(comps, REWARD_F), [4.0, -1.0])

    def test_validation(self):
        """A reward must include a component and have three finite weights"""
        with self.assertRaises(ValueError):
            RewardSpec('none', False, False, False)
        with self.assertRaises(ValueError):
            RewardSpec('short', weights=(1.0, 1.0))
        with self.assertRaises(ValueError):
            RewardSpec('inf', weights=(1.0, math.inf, 1.0))
