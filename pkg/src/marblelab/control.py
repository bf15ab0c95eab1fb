"""Goal-reaching controllers over the 14-D keypoint state.

Planning never touches images: the encoder runs once per control step
to build the state, and the cross-entropy method (CEM) then evaluates
action sequences purely through the learned dynamics model.  With the
default 250 particles, horizon 10, and 120 iterations one plan costs
exactly 300,000 model forward passes.  A hand-tunable proportional
controller over the same keypoint displacement serves as the baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import ACTION_DIM, DynamicsModel, StateCodec, rollout_batch
from .keypoints import FRAME_SIZE, PIXEL_HALF, Keypoint
from .keypoint_ae import KeypointAutoencoder, active_keypoint, encode_batch


@dataclass
class Goal:
    finger: str                 # "left" or "right"
    target: Keypoint

    def __post_init__(self):
        if self.finger not in ("left", "right"):
            raise ValueError(f"finger must be 'left' or 'right', got {self.finger!r}")
        if not (0.0 <= self.target.x <= FRAME_SIZE - 1 and 0.0 <= self.target.y <= FRAME_SIZE - 1):
            raise ValueError("goal target outside the frame")
        if self.target.i < 0:
            raise ValueError("goal intensity must be >= 0")


@dataclass
class CEMConfig:
    particles: int = 250
    horizon: int = 10
    max_iters: int = 120
    elite_fraction: float = 0.1
    a_max: float = 0.05
    init_std: float = 0.025       # a_max / 2
    min_std: float = 0.001        # a_max / 50
    smoothing: float = 0.25       # fraction of the old mean/std kept per refit
    intensity_weight: float = 32.0
    # with early_stop the search may terminate once the refit std
    # collapses below min_std on every dimension; off by default so the
    # forward-pass budget is exactly particles * horizon * max_iters.
    early_stop: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.particles < 2:
            raise ValueError("particles must be >= 2")
        if not 0.0 < self.elite_fraction < 1.0:
            raise ValueError("elite_fraction must be in (0, 1)")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class PGain:
    """3x8 matrix taking (dx, dy, di) keypoint displacement to an action."""

    gains: np.ndarray

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=float)
        if self.gains.shape != (3, ACTION_DIM):
            raise ValueError(f"gains must be 3x{ACTION_DIM}, got {self.gains.shape}")
        if not np.all(np.isfinite(self.gains)):
            raise ValueError("gains must be finite")


@dataclass
class PlanResult:
    best_actions: np.ndarray          # (T, 8)
    best_cost: float
    cost_trace: list[float] = field(default_factory=list)
    forward_passes: int = 0
    iterations: int = 0


def _goal_slice(goal: Goal) -> slice:
    return slice(0, 3) if goal.finger == "left" else slice(3, 6)


def trajectory_costs(states: np.ndarray, goal: Goal, intensity_weight: float) -> np.ndarray:
    """Summed per-step weighted Euclidean distance to the goal keypoint.

    states: (..., T, 14) normalized; returns one cost per leading index.
    Intensity differences count at intensity_weight pixels per unit so
    they trade off against the (x, y) error on a common scale.
    """
    sl = _goal_slice(goal)
    kp = np.asarray(states)[..., sl]
    dx = (kp[..., 0] + 1.0) * PIXEL_HALF - goal.target.x
    dy = (kp[..., 1] + 1.0) * PIXEL_HALF - goal.target.y
    di = (kp[..., 2] - goal.target.i) * intensity_weight
    return np.sqrt(dx**2 + dy**2 + di**2).sum(axis=-1)


def cost(states: np.ndarray, goal: Goal, intensity_weight: float = 32.0) -> float:
    """Cost of a single (T, 14) state sequence."""
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[0] < 1:
        raise ValueError("need at least one state")
    return float(trajectory_costs(states, goal, intensity_weight))


def cem_plan(
    model: DynamicsModel,
    s0: np.ndarray,
    goal: Goal,
    config: CEMConfig,
    init_mean: np.ndarray | None = None,
) -> PlanResult:
    """Cross-entropy search over (horizon, 8) action sequences.

    Samples particles from a diagonal Gaussian clipped to [-a_max,
    a_max], refits mean/std to the elite fraction with smoothing, floors
    the std at min_std, and tracks the best sequence ever scored.
    Deterministic for a fixed seed.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    t, p = config.horizon, config.particles
    mean = np.zeros((t, ACTION_DIM)) if init_mean is None else np.array(init_mean, dtype=float)
    std = np.full((t, ACTION_DIM), config.init_std)
    n_elite = max(1, int(round(config.elite_fraction * p)))

    best_actions = np.clip(mean, -config.a_max, config.a_max)
    best_cost = np.inf
    trace: list[float] = []
    passes = 0
    iterations = 0

    s0_batch = np.broadcast_to(np.asarray(s0, dtype=float), (p, len(s0)))
    for _ in range(config.max_iters):
        actions = rng.normal(mean, std, size=(p, t, ACTION_DIM))
        np.clip(actions, -config.a_max, config.a_max, out=actions)
        states = rollout_batch(model, s0_batch, actions)
        passes += p * t
        iterations += 1
        costs = trajectory_costs(states, goal, config.intensity_weight)

        order = np.argsort(costs, kind="stable")
        if costs[order[0]] < best_cost:
            best_cost = float(costs[order[0]])
            best_actions = actions[order[0]].copy()
        trace.append(best_cost)

        elite = actions[order[:n_elite]]
        fit_mean = elite.mean(axis=0)
        fit_std = elite.std(axis=0)
        mean = config.smoothing * mean + (1.0 - config.smoothing) * fit_mean
        std = config.smoothing * std + (1.0 - config.smoothing) * fit_std
        collapsed = bool(np.all(std <= config.min_std))
        std = np.maximum(std, config.min_std)
        if config.early_stop and collapsed:
            break

    return PlanResult(best_actions, best_cost, trace, passes, iterations)


def mpc_step(
    model: DynamicsModel,
    s0: np.ndarray,
    goal: Goal,
    config: CEMConfig,
    init_mean: np.ndarray | None = None,
) -> np.ndarray:
    """First action of the replanned best sequence."""
    return cem_plan(model, s0, goal, config, init_mean).best_actions[0]


def p_control(gain: PGain, s: np.ndarray, goal: Goal, a_max: float = 0.05) -> np.ndarray:
    """a = clamp(gains^T (dx, dy, di), +-a_max); linear before the clamp."""
    sl = _goal_slice(goal)
    kp = np.asarray(s, dtype=float)[sl]
    disp = np.array(
        [
            goal.target.x - (kp[0] + 1.0) * PIXEL_HALF,
            goal.target.y - (kp[1] + 1.0) * PIXEL_HALF,
            goal.target.i - kp[2],
        ]
    )
    return np.clip(gain.gains.T @ disp, -a_max, a_max)


def sample_goal(
    current: Keypoint,
    rng: np.random.Generator,
    finger: str = "left",
    min_dist: float = 16.0,
    margin: float = 2.0,
    intensity: float = 1.0,
    max_tries: int = 100000,
) -> Goal:
    """Uniform (x, y) over the margin-inset frame, rejected until the
    goal sits at least min_dist pixels from the current keypoint."""
    if not (0.0 <= current.x <= FRAME_SIZE - 1 and 0.0 <= current.y <= FRAME_SIZE - 1):
        raise ValueError("current keypoint outside the frame")
    lo, hi = margin, FRAME_SIZE - 1 - margin
    for _ in range(max_tries):
        x, y = rng.uniform(lo, hi, 2)
        if (x - current.x) ** 2 + (y - current.y) ** 2 >= min_dist**2:
            return Goal(finger, Keypoint(float(x), float(y), float(intensity)))
    raise RuntimeError("goal sampling failed; the feasible region is empty")


@dataclass
class StepRecord:
    step: int
    dist_px: float
    intensity: float
    dropped: bool


def _observe(sim, ae: KeypointAutoencoder, codec: StateCodec) -> np.ndarray:
    """Render both fingers, encode once, pack the state."""
    frame_l, frame_r = sim.render_pair()
    kps = encode_batch(ae, np.stack([frame_l, frame_r]))
    k_left = active_keypoint(kps[0])
    k_right = active_keypoint(kps[1])
    return codec.build_state(k_left, k_right, sim.joints.angles)


def _record(step: int, s: np.ndarray, goal: Goal, dropped: bool) -> StepRecord:
    sl = _goal_slice(goal)
    kp = s[sl]
    dist = float(
        np.hypot((kp[0] + 1.0) * PIXEL_HALF - goal.target.x, (kp[1] + 1.0) * PIXEL_HALF - goal.target.y)
    )
    return StepRecord(step, dist, float(kp[2]), dropped)


def run_episode(
    sim,
    ae: KeypointAutoencoder,
    codec: StateCodec,
    controller,
    goal: Goal,
    n_steps: int = 20,
) -> list[StepRecord]:
    """Closed loop: observe, ask the controller for an action, step.

    The sim must already be reset.  controller(state, step) -> action.
    Returns one record per visited state (executed steps + 1); stops
    early when the marble drops.
    """
    records = []
    s = _observe(sim, ae, codec)
    records.append(_record(0, s, goal, sim.dropped))
    for step in range(1, n_steps + 1):
        action = controller(s, step)
        sim.step(action)
        s = _observe(sim, ae, codec)
        records.append(_record(step, s, goal, sim.dropped))
        if sim.dropped:
            break
    return records


def run_episode_mpc(
    sim,
    ae: KeypointAutoencoder,
    model: DynamicsModel,
    codec: StateCodec,
    config: CEMConfig,
    n_steps: int = 20,
    seed: int = 0,
    goal: Goal | None = None,
) -> tuple[Goal, list[StepRecord]]:
    """Reset, sample a goal from the first observation, run MPC."""
    sim.reset()
    rng = np.random.default_rng(seed)
    if goal is None:
        s = _observe(sim, ae, codec)
        current = codec.unpack_state(s)[0]
        goal = sample_goal(current, rng, finger="left")

    def controller(state, step):
        cfg = replace(config, seed=int(rng.integers(2**31)))
        return mpc_step(model, state, goal, cfg)

    return goal, run_episode(sim, ae, codec, controller, goal, n_steps)


def run_episode_p(
    sim,
    ae: KeypointAutoencoder,
    codec: StateCodec,
    gain: PGain,
    goal: Goal,
    n_steps: int = 20,
    a_max: float = 0.05,
) -> list[StepRecord]:
    """Reset and run the proportional baseline toward a given goal."""
    sim.reset()

    def controller(state, step):
        return p_control(gain, state, goal, a_max)

    return run_episode(sim, ae, codec, controller, goal, n_steps)
