"""14-D state representation and the learned transition model.

The state packs both fingers' active keypoints and the eight joint
angles as [x_l, y_l, i_l, x_r, y_r, i_r, j1..j8].  Model-facing values
are normalized: pixel coordinates to [-1, 1] over the frame, joints to
[-1, 1] over their limits, intensities left on their calibrated [0, ~1]
scale.  A three-hidden-layer tanh MLP consumes (state, action / a_max)
and predicts a state delta; the residual form makes "no command, no
change" an easy function to represent, and zero-action augmentation
makes it an explicit training target.

predict/rollout are pure given the parameters; the planner calls the
batched variants with hundreds of particles at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import load_arrays, save_arrays
from .keypoints import PIXEL_HALF, Keypoint
from .netutil import configure_torch

STATE_DIM = 14
ACTION_DIM = 8
KP_SLICES = (slice(0, 3), slice(3, 6))   # left, right keypoint triples
COORD_DIMS = (0, 1, 3, 4)
INTENSITY_DIMS = (2, 5)
JOINT_DIMS = tuple(range(6, 14))

# pixel-equivalent weighting of an intensity unit, matching the planner
# cost's convention
INTENSITY_PX_WEIGHT = 32.0


@dataclass(frozen=True)
class StateCodec:
    """Normalization constants between physical and model units."""

    joint_lo: np.ndarray
    joint_hi: np.ndarray

    @classmethod
    def from_sim_config(cls, config) -> "StateCodec":
        return cls(config.joint_lo(), config.joint_hi())

    def build_state(self, k_left, k_right, joints: np.ndarray) -> np.ndarray:
        """Pack (keypoint, keypoint, joints) into the normalized 14-vector."""
        kl = k_left.as_array() if isinstance(k_left, Keypoint) else np.asarray(k_left, float)
        kr = k_right.as_array() if isinstance(k_right, Keypoint) else np.asarray(k_right, float)
        q = np.asarray(joints, dtype=float)
        if kl.shape != (3,) or kr.shape != (3,) or q.shape != (ACTION_DIM,):
            raise ValueError(
                f"expected two (3,) keypoints and (8,) joints, got {kl.shape}, {kr.shape}, {q.shape}"
            )
        s = np.empty(STATE_DIM)
        for sl, kp in zip(KP_SLICES, (kl, kr)):
            s[sl.start + 0] = kp[0] / PIXEL_HALF - 1.0
            s[sl.start + 1] = kp[1] / PIXEL_HALF - 1.0
            s[sl.start + 2] = kp[2]
        s[6:] = 2.0 * (q - self.joint_lo) / (self.joint_hi - self.joint_lo) - 1.0
        return s

    def unpack_state(self, s: np.ndarray) -> tuple[Keypoint, Keypoint, np.ndarray]:
        s = np.asarray(s, dtype=float)
        if s.shape != (STATE_DIM,):
            raise ValueError(f"expected a ({STATE_DIM},) state, got {s.shape}")
        kps = []
        for sl in KP_SLICES:
            kps.append(
                Keypoint(
                    (s[sl.start + 0] + 1.0) * PIXEL_HALF,
                    (s[sl.start + 1] + 1.0) * PIXEL_HALF,
                    s[sl.start + 2],
                )
            )
        q = self.joint_lo + (s[6:] + 1.0) * (self.joint_hi - self.joint_lo) / 2.0
        return kps[0], kps[1], q

    def keypoints_px(self, states: np.ndarray) -> np.ndarray:
        """(..., 14) normalized states -> (..., 2, 3) keypoints in pixels."""
        states = np.asarray(states, dtype=float)
        out = np.stack([states[..., 0:3], states[..., 3:6]], axis=-2).copy()
        out[..., 0] = (out[..., 0] + 1.0) * PIXEL_HALF
        out[..., 1] = (out[..., 1] + 1.0) * PIXEL_HALF
        return out


@dataclass
class Transitions:
    """Flat (s, a, s') arrays plus provenance ids; rows are tuples."""

    s: np.ndarray          # (N, 14) normalized
    a: np.ndarray          # (N, 8) radians
    s_next: np.ndarray     # (N, 14)
    episode_ids: np.ndarray
    steps: np.ndarray

    def __len__(self) -> int:
        return len(self.s)

    def validate(self) -> None:
        n = len(self.s)
        shapes = (
            self.s.shape == (n, STATE_DIM)
            and self.a.shape == (n, ACTION_DIM)
            and self.s_next.shape == (n, STATE_DIM)
            and self.episode_ids.shape == (n,)
            and self.steps.shape == (n,)
        )
        if not shapes:
            raise ValueError("inconsistent transition array shapes")
        for name, arr in (("s", self.s), ("a", self.a), ("s_next", self.s_next)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in transition field '{name}'")


def concat_transitions(parts: list[Transitions]) -> Transitions:
    return Transitions(
        np.concatenate([p.s for p in parts]),
        np.concatenate([p.a for p in parts]),
        np.concatenate([p.s_next for p in parts]),
        np.concatenate([p.episode_ids for p in parts]),
        np.concatenate([p.steps for p in parts]),
    )


def augment_transitions(
    transitions: Transitions, zero_fraction: float, rng: np.random.Generator
) -> Transitions:
    """Append ceil(zero_fraction * N) tuples (s, 0, s) with s resampled
    from the input states.  The model otherwise never sees evidence that
    a zero command leaves the state alone."""
    if not 0.0 <= zero_fraction < 1.0:
        raise ValueError("zero_fraction must be in [0, 1)")
    n = len(transitions)
    extra = math.ceil(zero_fraction * n)
    if extra == 0:
        return transitions
    idx = rng.integers(0, n, size=extra)
    states = transitions.s[idx]
    zeros = Transitions(
        states.copy(),
        np.zeros((extra, ACTION_DIM)),
        states.copy(),
        np.full(extra, -1, dtype=transitions.episode_ids.dtype),
        np.full(extra, -1, dtype=transitions.steps.dtype),
    )
    return concat_transitions([transitions, zeros])


class DynamicsModel(nn.Module):
    """Residual MLP: s' = clip(s + g(s, a / a_max)).

    tanh keeps the network smooth for finite-difference gradient
    validation.  Clipping bounds: coordinates and joints in [-1, 1],
    intensities at >= 0.
    """

    def __init__(self, hidden: int = 128, layers: int = 3, a_max: float = 0.05):
        super().__init__()
        self.hidden = hidden
        self.layers = layers
        self.a_max = a_max
        dims = [STATE_DIM + ACTION_DIM] + [hidden] * layers + [STATE_DIM]
        mods: list[nn.Module] = []
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            mods.append(nn.Linear(din, dout))
            if i < len(dims) - 2:
                mods.append(nn.Tanh())
        self.net = nn.Sequential(*mods)

        lo = np.full(STATE_DIM, -1.0)
        hi = np.full(STATE_DIM, 1.0)
        for d in INTENSITY_DIMS:
            lo[d], hi[d] = 0.0, np.inf
        self.register_buffer("_lo", torch.from_numpy(lo).float())
        self.register_buffer("_hi", torch.from_numpy(hi).float())

    def forward(self, s: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        delta = self.net(torch.cat([s, a / self.a_max], dim=-1))
        return torch.clamp(s + delta, self._lo, self._hi)


def _check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {name}")
    return arr


def predict(model: DynamicsModel, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return predict_batch(model, np.asarray(s)[None], np.asarray(a)[None])[0]


def predict_batch(model: DynamicsModel, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    st = torch.from_numpy(_check_finite("state", s))
    at = torch.from_numpy(_check_finite("action", a))
    with torch.no_grad():
        out = model(st, at)
    return out.numpy().astype(np.float64)


def rollout(model: DynamicsModel, s0: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Autoregressive T-step rollout; returns states s_1..s_T."""
    actions = np.asarray(actions, dtype=float).reshape(-1, ACTION_DIM)
    out = rollout_batch(model, np.asarray(s0)[None], actions[None])
    return out[0]


def rollout_batch(model: DynamicsModel, s0: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """(N, 14) starts and (N, T, 8) action sequences -> (N, T, 14) states."""
    st = torch.from_numpy(_check_finite("state", s0))
    at = torch.from_numpy(_check_finite("actions", actions))
    n, t = at.shape[0], at.shape[1]
    states = torch.empty((n, t, STATE_DIM))
    with torch.no_grad():
        cur = st
        for step in range(t):
            cur = model(cur, at[:, step])
            states[:, step] = cur
    return states.numpy().astype(np.float64)


@dataclass
class DynTrainConfig:
    hidden: int = 128
    layers: int = 3
    a_max: float = 0.05
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 60
    seed: int = 0


def dynamics_loss(model: DynamicsModel, s, a, s_next) -> torch.Tensor:
    return torch.mean((model(s, a) - s_next) ** 2)


def train_dynamics(
    train_tuples: Transitions,
    config: DynTrainConfig,
    val_tuples: Transitions | None = None,
) -> tuple[DynamicsModel, list[tuple[int, float, float]]]:
    """Adam on MSE over (s, a) -> s'; returns (model, loss log).

    The log rows are (epoch, train_loss, val_loss) with epoch 0 holding
    the untrained validation loss in both columns.  Falls back to the
    training tuples for validation when no held-out split is given.
    """
    if len(train_tuples) < 1:
        raise ValueError("need at least one training tuple")
    train_tuples.validate()
    if val_tuples is None or len(val_tuples) == 0:
        val_tuples = train_tuples
    configure_torch()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    model = DynamicsModel(config.hidden, config.layers, config.a_max)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    def as_tensors(t: Transitions):
        return (
            torch.from_numpy(t.s.astype(np.float32)),
            torch.from_numpy(t.a.astype(np.float32)),
            torch.from_numpy(t.s_next.astype(np.float32)),
        )

    s_tr, a_tr, s2_tr = as_tensors(train_tuples)
    s_va, a_va, s2_va = as_tensors(val_tuples)

    def val_loss() -> float:
        with torch.no_grad():
            return float(dynamics_loss(model, s_va, a_va, s2_va))

    initial = val_loss()
    log: list[tuple[int, float, float]] = [(0, initial, initial)]
    n = len(train_tuples)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size])
            opt.zero_grad()
            batch_loss = dynamics_loss(model, s_tr[idx], a_tr[idx], s2_tr[idx])
            if not torch.isfinite(batch_loss):
                raise RuntimeError(f"non-finite dynamics loss at epoch {epoch}")
            batch_loss.backward()
            opt.step()
            total += float(batch_loss.detach()) * len(idx)
            seen += len(idx)
        log.append((epoch, total / seen, val_loss()))
    model.eval()
    return model, log


def zero_action_drift(model: DynamicsModel, states: np.ndarray) -> float:
    """Mean pixel-equivalent drift of f(s, 0) from s over the keypoint dims.

    Coordinates count at their pixel scale, intensities at
    INTENSITY_PX_WEIGHT pixels per unit.
    """
    states = np.asarray(states, dtype=float)
    pred = predict_batch(model, states, np.zeros((len(states), ACTION_DIM)))
    diff = pred - states
    scale = np.zeros(STATE_DIM)
    for d in COORD_DIMS:
        scale[d] = PIXEL_HALF
    for d in INTENSITY_DIMS:
        scale[d] = INTENSITY_PX_WEIGHT
    err = diff * scale
    kp_dims = list(COORD_DIMS) + list(INTENSITY_DIMS)
    return float(np.mean(np.linalg.norm(err[:, kp_dims], axis=1)))


def one_step_keypoint_rmse_px(model: DynamicsModel, tuples: Transitions) -> float:
    """RMSE of predicted vs actual next keypoint coordinates, in pixels."""
    pred = predict_batch(model, tuples.s, tuples.a)
    diff = (pred - tuples.s_next)[:, list(COORD_DIMS)] * PIXEL_HALF
    return float(np.sqrt(np.mean(diff**2)))


def save_dynamics(model: DynamicsModel, codec: StateCodec, path) -> None:
    arrays = {
        "cfg.hidden": np.array(float(model.hidden)),
        "cfg.layers": np.array(float(model.layers)),
        "cfg.a_max": np.array(model.a_max),
        "norm.joint_lo": codec.joint_lo.astype(np.float64),
        "norm.joint_hi": codec.joint_hi.astype(np.float64),
    }
    for name, tensor in model.state_dict().items():
        arrays[f"param.{name}"] = tensor.detach().numpy().astype(np.float64)
    save_arrays(path, arrays)


def load_dynamics(path) -> tuple[DynamicsModel, StateCodec]:
    arrays = load_arrays(path)
    model = DynamicsModel(
        hidden=int(arrays["cfg.hidden"]),
        layers=int(arrays["cfg.layers"]),
        a_max=float(arrays["cfg.a_max"]),
    )
    state = {
        name[len("param.") :]: torch.from_numpy(arr).float()
        for name, arr in arrays.items()
        if name.startswith("param.")
    }
    model.load_state_dict(state)
    model.eval()
    codec = StateCodec(arrays["norm.joint_lo"], arrays["norm.joint_hi"])
    return model, codec
