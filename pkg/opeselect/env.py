"""The simplified 2-D lander, candidate state spaces and candidate reward functions.

The lander is a point-mass hull with an angle, integrated with semi-implicit Euler steps. Its
reward is kept in three components (state-based shaping, action-based fuel cost, terminal bonus or
penalty) so that any reward candidate can be rebuilt offline from the logged components.

The union feature vector of a lander state is ``(x, y, vx, vy, theta, omega, contact_left,
contact_right)``. Candidate state spaces are projections of that vector, optionally with appended
standard-normal noise features.

Live stepping can be switched off with :func:`offline_only`; every offline stage of the pipeline
runs inside it, so an accidental environment call fails loudly instead of leaking ground truth
into selection.
"""
from contextlib import contextmanager
from dataclasses import dataclass, astuple
import logging
import math
from typing import Iterator, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from opeselect.funcapprox import ShapeError
from opeselect.seeding import rng_stream


NOOP, LEFT, MAIN, RIGHT = 0, 1, 2, 3
ACTION_NAMES = ('noop', 'left', 'main', 'right')
UNION_FEATURES = ('x', 'y', 'vx', 'vy', 'theta', 'omega', 'contact_left', 'contact_right')
COMPONENT_NAMES = ('state_based', 'action_based', 'terminal')


class EpisodeDoneError(ValueError):
    """Raised when stepping a lander state whose episode has already ended."""


class LiveEnvironmentError(RuntimeError):
    """Raised when the live environment is touched inside an offline-only section."""


_offline_depth = 0


@contextmanager
def offline_only() -> Iterator[None]:
    """Forbids lander reset and step calls for the duration of the block."""
    global _offline_depth
    _offline_depth += 1
    try:
        yield
    finally:
        _offline_depth -= 1


def live_environment_allowed() -> bool:
    """True unless called inside an offline_only() block."""
    return _offline_depth == 0


def _check_live(fn_name: str) -> None:
    if not live_environment_allowed():
        raise LiveEnvironmentError(f'{fn_name}: live environment used inside an offline-only '
                                   'section')


@dataclass(frozen=True)
class LanderConfig:
    """Physical and reward constants of the lander.

    Lengths are in pad-centered units with the spawn altitude at 1.0; time is in the same units as
    ``dt``. Velocities are per unit time.
    """
    dt: float = 0.02
    gravity: float = 1.6
    thrust_main: float = 4.0
    thrust_side: float = 0.4
    torque_side: float = 0.05
    max_steps: int = 500
    landing_bonus: float = 100.0
    crash_penalty: float = 100.0
    fuel_main: float = 0.3
    fuel_side: float = 0.03
    shaping_position: float = 100.0
    shaping_velocity: float = 100.0
    shaping_angle: float = 100.0
    spawn_altitude: float = 1.0
    spawn_velocity_range: float = 0.3
    pad_half_width: float = 0.2
    vy_tolerance: float = 0.5
    theta_tolerance: float = 0.3
    leg_span: float = 0.05


DEFAULT_LANDER = LanderConfig()


@dataclass(frozen=True)
class LanderState:
    """Kinematic state of the lander plus leg-contact flags."""
    x: float
    y: float
    vx: float
    vy: float
    theta: float
    omega: float
    contact_left: float = 0.0
    contact_right: float = 0.0

    def __post_init__(self):
        if self.contact_left not in (0.0, 1.0) or self.contact_right not in (0.0, 1.0):
            raise ValueError(f'LanderState: contact flags must be 0.0 or 1.0, got '
                             f'{self.contact_left}, {self.contact_right}')
        if not all(math.isfinite(v) for v in astuple(self)):
            raise ValueError(f'LanderState: non-finite component in {astuple(self)}')

    def as_vector(self) -> np.ndarray:
        """Returns the union feature vector, length 8."""
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_vector(cls, vec: Sequence[float]) -> 'LanderState':
        """Builds a state from an 8-vector in UNION_FEATURES order."""
        if len(vec) != len(UNION_FEATURES):
            raise ShapeError(f'LanderState.from_vector: expected {len(UNION_FEATURES)} values, '
                             f'got {len(vec)}')
        return cls(*(float(v) for v in vec))


@dataclass(frozen=True)
class RewardComponents:
    """The three logged reward components of one transition."""
    state_based: float = 0.0
    action_based: float = 0.0
    terminal: float = 0.0

    def as_tuple(self) -> Tuple[float, float, float]:
        return self.state_based, self.action_based, self.terminal


class LanderStep(NamedTuple):
    """Result of lander_step(). ``truncated`` implies ``done``."""
    state: LanderState
    components: RewardComponents
    done: bool
    truncated: bool


@dataclass(frozen=True)
class StateSpaceSpec:
    """A candidate state space: a projection of the union vector plus optional noise features.

    Parameters:
        name:
            Candidate identifier, e.g. ``'S_orig'``.
        indices:
            Ordered, unique positions of the union vector to keep.
        noise_dims:
            Number of standard-normal features appended after the projection.
        noise_seed_stream:
            Label of the RNG stream the noise features are drawn from.
    """
    name: str
    indices: Tuple[int, ...]
    noise_dims: int = 0
    noise_seed_stream: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'indices', tuple(int(i) for i in self.indices))
        if len(set(self.indices)) != len(self.indices):
            raise ValueError(f'StateSpaceSpec: {self.name}: duplicate indices {self.indices}')
        if any(i < 0 for i in self.indices):
            raise ShapeError(f'StateSpaceSpec: {self.name}: negative index in {self.indices}')
        if self.noise_dims < 0:
            raise ValueError(f'StateSpaceSpec: {self.name}: noise_dims must be >= 0')
        if self.noise_dims > 0 and not self.noise_seed_stream:
            object.__setattr__(self, 'noise_seed_stream', f'noise-{self.name}')

    @property
    def output_dim(self) -> int:
        """Dimension of the projected vector: kept indices plus noise features."""
        return len(self.indices) + self.noise_dims

    @classmethod
    def from_features(cls,
                      name: str,
                      features: Sequence[str],
                      feature_names: Sequence[str] = UNION_FEATURES,
                      noise_dims: int = 0) -> 'StateSpaceSpec':
        """Builds a spec from union feature names instead of positions.

        Raises:
            ValueError: if a feature name is not in ``feature_names``.
        """
        missing = [f for f in features if f not in feature_names]
        if missing:
            raise ValueError(f'StateSpaceSpec.from_features: {name}: unknown features {missing}')
        return cls(name, tuple(list(feature_names).index(f) for f in features), noise_dims)

    def noise_rng(self, seed: int) -> Optional[np.random.Generator]:
        """The generator noise features are drawn from under ``seed``; None without noise."""
        if self.noise_dims == 0:
            return None
        return rng_stream(seed, self.noise_seed_stream)


@dataclass(frozen=True)
class RewardSpec:
    """A candidate reward function: a weighted sum over included reward components."""
    name: str
    include_state_based: bool = True
    include_action_based: bool = True
    include_terminal: bool = True
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, 'weights', tuple(float(w) for w in self.weights))
        if len(self.weights) != len(COMPONENT_NAMES):
            raise ValueError(f'RewardSpec: {self.name}: need {len(COMPONENT_NAMES)} weights')
        if not (self.include_state_based or self.include_action_based or self.include_terminal):
            raise ValueError(f'RewardSpec: {self.name}: at least one component must be included')
        if not all(math.isfinite(w) for w in self.weights):
            raise ValueError(f'RewardSpec: {self.name}: weights must be finite')

    @property
    def coefficients(self) -> np.ndarray:
        """Effective per-component multipliers; zero for excluded components."""
        flags = (self.include_state_based, self.include_action_based, self.include_terminal)
        return np.array([w if f else 0.0 for w, f in zip(self.weights, flags)])


S_ORIG = StateSpaceSpec('S_orig', tuple(range(8)))
S_MORE = StateSpaceSpec('S_more', tuple(range(8)), noise_dims=2)
S_LESS = StateSpaceSpec('S_less', tuple(range(2, 8)))
DEFAULT_STATE_SPACES = (S_ORIG, S_MORE, S_LESS)

REWARD_F = RewardSpec('f')
REWARD_F_R1 = RewardSpec('f_r1', include_state_based=False, include_action_based=False)
REWARD_F_R2 = RewardSpec('f_r2', include_state_based=False)
REWARD_F_R3 = RewardSpec('f_r3', include_action_based=False)
DEFAULT_REWARDS = (REWARD_F, REWARD_F_R1, REWARD_F_R2, REWARD_F_R3)


def shaping(state: LanderState, config: LanderConfig = DEFAULT_LANDER) -> float:
    """Shaping potential: the negative weighted distance, speed and tilt of the lander."""
    return -(config.shaping_position * math.hypot(state.x, state.y)
             + config.shaping_velocity * math.hypot(state.vx, state.vy)
             + config.shaping_angle * abs(state.theta))


def lander_reset(seed: int, config: LanderConfig = DEFAULT_LANDER) -> LanderState:
    """Spawns the lander above the pad.

    The lander starts at ``(0, spawn_altitude)``, level and not rotating. Horizontal and vertical
    velocities are drawn uniformly from ``[-spawn_velocity_range, spawn_velocity_range]`` on the
    ``lander-spawn`` stream of ``seed``.

    Raises:
        LiveEnvironmentError: inside an offline_only() block.
    """
    _check_live('lander_reset')
    r = config.spawn_velocity_range
    if r > 0.0:
        vx, vy = rng_stream(seed, 'lander-spawn').uniform(-r, r, size=2)
    else:
        vx, vy = 0.0, 0.0
    return LanderState(0.0, config.spawn_altitude, float(vx), float(vy), 0.0, 0.0, 0.0, 0.0)


def lander_step(state: LanderState,
                action: int,
                config: LanderConfig = DEFAULT_LANDER,
                step_index: int = 0) -> LanderStep:
    """Advances the lander by one time step.

    Args:
        state: Current state; must not be touched down.
        action: One of NOOP, LEFT, MAIN, RIGHT.
        config: Physical and reward constants.
        step_index: Number of steps already taken in this episode.

    Returns:
        A LanderStep. The episode ends on touchdown (``y <= 0``) with the landing bonus or crash
        penalty as terminal component, or on exhausting ``max_steps`` with a zero terminal
        component and ``truncated`` set.

    Raises:
        EpisodeDoneError: if the state is already on the ground or the step budget is spent.
        ValueError: on an unknown action.
        LiveEnvironmentError: inside an offline_only() block.
    """
    _check_live('lander_step')
    if state.y <= 0.0 or step_index >= config.max_steps:
        raise EpisodeDoneError(f'lander_step: episode already done (y={state.y}, '
                               f'step_index={step_index})')
    if action not in (NOOP, LEFT, MAIN, RIGHT):
        raise ValueError(f'lander_step: unknown action {action}')
    ax, ay, alpha, fuel = 0.0, -config.gravity, 0.0, 0.0
    if action == MAIN:
        ax -= math.sin(state.theta) * config.thrust_main
        ay += math.cos(state.theta) * config.thrust_main
        fuel = -config.fuel_main
    elif action == LEFT:
        ax += config.thrust_side
        alpha -= config.torque_side
        fuel = -config.fuel_side
    elif action == RIGHT:
        ax -= config.thrust_side
        alpha += config.torque_side
        fuel = -config.fuel_side
    dt = config.dt
    vx = state.vx + ax * dt
    vy = state.vy + ay * dt
    omega = state.omega + alpha * dt
    x = state.x + vx * dt
    y = state.y + vy * dt
    theta = state.theta + omega * dt
    touchdown = y <= 0.0
    y = max(y, 0.0)
    left_tip = y - config.leg_span * math.sin(theta)
    right_tip = y + config.leg_span * math.sin(theta)
    new_state = LanderState(x, y, vx, vy, theta, omega,
                            1.0 if left_tip <= 0.0 else 0.0,
                            1.0 if right_tip <= 0.0 else 0.0)
    terminal = 0.0
    truncated = False
    if touchdown:
        landed = (abs(x) < config.pad_half_width and abs(vy) < config.vy_tolerance
                  and abs(theta) < config.theta_tolerance)
        terminal = config.landing_bonus if landed else -config.crash_penalty
        logging.debug('lander_step: touchdown at step %s x=%.3f vy=%.3f theta=%.3f landed=%s',
                      step_index, x, vy, theta, landed)
    elif step_index + 1 >= config.max_steps:
        truncated = True
    components = RewardComponents(shaping(new_state, config) - shaping(state, config), fuel,
                                  terminal)
    return LanderStep(new_state, components, touchdown or truncated, truncated)


class LanderEnv:
    """Stateful wrapper around lander_reset() / lander_step() that tracks the step budget.

    Parameters:
        config:
            Lander constants. Defaults to DEFAULT_LANDER.
    """
    n_actions = len(ACTION_NAMES)
    feature_names = UNION_FEATURES

    def __init__(self, config: LanderConfig = DEFAULT_LANDER):
        self.config = config
        self.state: Optional[LanderState] = None
        self.steps = 0
        self.done = True

    def reset(self, seed: int) -> np.ndarray:
        """Starts a new episode and returns its initial union vector."""
        self.state = lander_reset(seed, self.config)
        self.steps = 0
        self.done = False
        return self.state.as_vector()

    def step(self, action: int) -> LanderStep:
        """Takes one step in the current episode."""
        if self.done or self.state is None:
            raise EpisodeDoneError('LanderEnv.step: call reset() before stepping a finished '
                                   'episode')
        result = lander_step(self.state, action, self.config, self.steps)
        self.state = result.state
        self.steps += 1
        self.done = result.done
        return result


def project_state(union_vec: np.ndarray,
                  spec: StateSpaceSpec,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Projects union vectors into a candidate state space.

    Args:
        union_vec: A union vector of shape (d,) or a batch of shape (n, d).
        spec: The candidate state space.
        rng: Generator for the noise features; required when ``spec.noise_dims > 0``. Each call
            advances it by one standard-normal draw per noise feature and row.

    Returns:
        The kept features in ``spec.indices`` order followed by the noise features.

    Raises:
        ShapeError: if an index is outside the union vector.
        ValueError: if noise is requested without a generator.
    """
    v = np.asarray(union_vec, dtype=np.float64)
    single = v.ndim == 1
    if single:
        v = v[np.newaxis, :]
    if spec.indices and max(spec.indices) >= v.shape[1]:
        raise ShapeError(f'project_state: {spec.name}: index {max(spec.indices)} out of bounds '
                         f'for union dimension {v.shape[1]}')
    out = v[:, list(spec.indices)]
    if spec.noise_dims:
        if rng is None:
            raise ValueError(f'project_state: {spec.name}: noise features need an rng stream')
        out = np.hstack([out, rng.standard_normal((v.shape[0], spec.noise_dims))])
    return out[0] if single else out


def apply_reward_spec(components: RewardComponents | np.ndarray, spec: RewardSpec) \
        -> float | np.ndarray:
    """Evaluates a candidate reward from logged components.

    Args:
        components: A RewardComponents, or an array of shape (n, 3) in COMPONENT_NAMES order.
        spec: The candidate reward.

    Returns:
        The weighted sum over included components: a float, or an (n,) array for array input.
    """
    if isinstance(components, RewardComponents):
        total = 0.0
        for c, v in zip(spec.coefficients, components.as_tuple()):
            total += float(c) * v
        return total
    return np.asarray(components, dtype=np.float64) @ spec.coefficients
