"""Two-finger tactile marble simulator.

Each finger is a planar 4-link chain; their tips face each other across a
grip axis and squeeze a marble.  Tip motion tangential to the grip axis
rolls the marble in-plane (the sensor's u axis); fingertip roll (the sum
of a finger's joint angles) rolls it out of plane with lever arm equal to
the marble radius (the v axis).  The contact advances by
``roll_slip_ratio`` times the mean of the two surface displacements plus
Gaussian slip noise, so the marble both rolls and slips.  Squeeze depth is
the marble diameter minus the tip gap; the marble is dropped when depth
falls below a threshold or a contact leaves the sensing field.

Rendering is a qualitative analog of a gel sensor under three-LED
illumination: a fixed tri-color gradient background plus a radial contact
disk whose radius and brightness grow with squeeze depth.

All randomness flows through explicitly passed numpy generators; a sim
instance must not be shared between concurrent callers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .episode_io import Episode
from .keypoints import (
    FIELD_H_MM,
    FIELD_W_MM,
    FRAME_SIZE,
    Keypoint,
    field_to_pixel,
)


@dataclass
class SimConfig:
    # four links per finger, mm, base to tip
    link_lengths: tuple[float, float, float, float] = (14.0, 12.0, 10.0, 8.0)
    # distance between the two finger bases along the grip axis, mm.
    # At the nominal pose this leaves a 13.2 mm tip gap, i.e. a 2.8 mm
    # squeeze on a 16 mm marble: deep enough that the slow loss of chain
    # extension under random commands takes ~20 steps to reach the drop
    # threshold.
    base_separation: float = 99.82
    # nominal grip pose, radians (left base..tip, then right base..tip)
    nominal_angles: tuple[float, ...] = (0.25, -0.2, 0.15, -0.1, 0.25, -0.2, 0.15, -0.1)
    # joint limits are nominal +- this halfwidth, radians
    joint_halfwidth: float = 0.6
    marble_diameter: float = 16.0
    roll_slip_ratio: float = 0.9
    slip_noise_std: float = 0.05          # mm per step per contact axis
    drop_depth_threshold: float = 0.2     # mm
    a_max: float = 0.05                   # rad per command component
    max_depth: float = 4.0                # mm, full-scale squeeze for intensity 1.0
    reset_perturb: float = 0.004          # rad, uniform joint perturbation at reset
    reset_offset: float = 1.5             # mm, uniform marble offset from field center
    reset_jitter: float = 0.3             # mm, per-finger contact scatter
    pixel_noise_std: float = 0.01
    contact_radius_base: float = 3.0      # px at zero depth
    contact_radius_scale: float = 4.0     # px per sqrt(mm)
    seed: int = 0

    def joint_lo(self) -> np.ndarray:
        return np.asarray(self.nominal_angles, dtype=float) - self.joint_halfwidth

    def joint_hi(self) -> np.ndarray:
        return np.asarray(self.nominal_angles, dtype=float) + self.joint_halfwidth


@dataclass
class JointState:
    angles: np.ndarray          # (8,) radians
    lo: np.ndarray
    hi: np.ndarray

    def clamped(self, new_angles: np.ndarray) -> "JointState":
        return JointState(np.clip(new_angles, self.lo, self.hi), self.lo, self.hi)


@dataclass
class MarbleState:
    contact_left: np.ndarray    # (u, v) mm on the left sensor, origin at field center
    contact_right: np.ndarray
    depth: float                # squeeze depth, mm, 0 when not held
    held: bool


@dataclass
class SurfacePose:
    position: np.ndarray        # (x, y) mm in the grip plane
    orientation: float          # radians


def nominal_joints(config: SimConfig) -> JointState:
    return JointState(
        np.asarray(config.nominal_angles, dtype=float).copy(),
        config.joint_lo(),
        config.joint_hi(),
    )


def _chain_pose(base_xy, base_orientation, sign, angles, links) -> SurfacePose:
    pos = np.array(base_xy, dtype=float)
    theta = base_orientation
    for q, length in zip(angles, links):
        theta += sign * q
        pos = pos + length * np.array([math.cos(theta), math.sin(theta)])
    return SurfacePose(pos, theta)


def fk(joints: JointState, config: SimConfig) -> tuple[SurfacePose, SurfacePose]:
    """Tip poses of both fingers in the shared grip plane.

    The right finger mirrors the left about the plane's axis of symmetry:
    its base axis points back toward the left finger and its joints bend
    with opposite world-frame sign, so equal joint vectors give mirrored
    tip poses.
    """
    half = config.base_separation / 2.0
    q = np.asarray(joints.angles, dtype=float)
    left = _chain_pose((-half, 0.0), 0.0, +1.0, q[:4], config.link_lengths)
    right = _chain_pose((half, 0.0), math.pi, -1.0, q[4:], config.link_lengths)
    return left, right


def grip_gap(joints: JointState, config: SimConfig) -> float:
    """Tip separation projected on the base axis (the squeeze direction).

    The grip axis is the fixed line between the two finger bases, so only
    motion along it squeezes or releases the marble; tip motion across it
    rolls the marble instead.
    """
    left, right = fk(joints, config)
    return float(right.position[0] - left.position[0])


def _in_field(contact: np.ndarray) -> bool:
    return abs(contact[0]) <= FIELD_W_MM / 2 and abs(contact[1]) <= FIELD_H_MM / 2


def surface_displacements(
    old_l: SurfacePose,
    old_r: SurfacePose,
    new_l: SurfacePose,
    new_r: SurfacePose,
    roll_l: float,
    roll_r: float,
    marble_radius: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-finger tangential surface displacement (du, dv) in mm.

    du is the tip translation perpendicular to the grip axis (the in-plane
    direction, y in the grip plane); dv is the fingertip roll angle change
    times the marble radius (curved-fingertip analog for out-of-plane
    rolling).
    """
    disp_l = np.array([float(new_l.position[1] - old_l.position[1]), marble_radius * roll_l])
    disp_r = np.array([float(new_r.position[1] - old_r.position[1]), marble_radius * roll_r])
    return disp_l, disp_r


def advance_contacts(
    marble: MarbleState,
    disp_l: np.ndarray,
    disp_r: np.ndarray,
    roll_slip_ratio: float,
    slip_noise_std: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Roll/slip update: both contacts advance by the mean surface motion."""
    mean_disp = 0.5 * (disp_l + disp_r)
    noise_l = rng.normal(0.0, slip_noise_std, 2) if slip_noise_std > 0 else np.zeros(2)
    noise_r = rng.normal(0.0, slip_noise_std, 2) if slip_noise_std > 0 else np.zeros(2)
    new_l = marble.contact_left + roll_slip_ratio * mean_disp + noise_l
    new_r = marble.contact_right + roll_slip_ratio * mean_disp + noise_r
    return new_l, new_r


def step(
    joints: JointState,
    marble: MarbleState,
    action: np.ndarray,
    config: SimConfig,
    rng: np.random.Generator,
) -> tuple[JointState, MarbleState]:
    """Apply one 8-D angular displacement command.

    Dropped marbles stay dropped until reset; dropping is a valid state,
    not an error.
    """
    a = np.clip(np.asarray(action, dtype=float), -config.a_max, config.a_max)
    new_joints = joints.clamped(joints.angles + a)

    if not marble.held:
        return new_joints, MarbleState(
            marble.contact_left.copy(), marble.contact_right.copy(), 0.0, False
        )

    old_l, old_r = fk(joints, config)
    new_l, new_r = fk(new_joints, config)
    dq = new_joints.angles - joints.angles
    disp_l, disp_r = surface_displacements(
        old_l, old_r, new_l, new_r,
        roll_l=float(np.sum(dq[:4])),
        roll_r=float(np.sum(dq[4:])),
        marble_radius=config.marble_diameter / 2.0,
    )
    contact_l, contact_r = advance_contacts(
        marble, disp_l, disp_r, config.roll_slip_ratio, config.slip_noise_std, rng
    )

    gap = float(new_r.position[0] - new_l.position[0])
    depth = max(0.0, config.marble_diameter - gap)
    held = depth >= config.drop_depth_threshold and _in_field(contact_l) and _in_field(contact_r)
    if not held:
        depth = 0.0
    return new_joints, MarbleState(contact_l, contact_r, depth, held)


_BACKGROUND_CACHE: dict[int, np.ndarray] = {}


def background_image(size: int = FRAME_SIZE) -> np.ndarray:
    """Fixed tri-color illumination gradient (three-LED analog)."""
    if size not in _BACKGROUND_CACHE:
        u = np.linspace(0.0, 1.0, size, dtype=np.float64)
        xx, yy = np.meshgrid(u, u)
        bg = np.empty((size, size, 3), dtype=np.float64)
        bg[:, :, 0] = 0.32 + 0.20 * xx
        bg[:, :, 1] = 0.32 + 0.20 * yy
        bg[:, :, 2] = 0.32 + 0.20 * (1.0 - 0.5 * (xx + yy))
        _BACKGROUND_CACHE[size] = bg
    return _BACKGROUND_CACHE[size].copy()


# whitish contact disk, slightly warm
_DISK_COLOR = np.array([1.0, 0.92, 0.85])


def contact_radius_px(depth: float, config: SimConfig) -> float:
    return config.contact_radius_base + config.contact_radius_scale * math.sqrt(max(depth, 0.0))


def render(
    marble: MarbleState,
    finger: str,
    config: SimConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Render one finger's 64x64x3 tactile frame in [0, 1]."""
    frame = background_image()
    if marble.held:
        contact = marble.contact_left if finger == "left" else marble.contact_right
        cx, cy = field_to_pixel(contact[0], contact[1])
        radius = contact_radius_px(marble.depth, config)
        amp = 0.25 + 0.55 * min(marble.depth / config.max_depth, 1.0)
        grid = np.arange(FRAME_SIZE, dtype=np.float64)
        xx, yy = np.meshgrid(grid, grid)
        rho2 = ((xx - cx) ** 2 + (yy - cy) ** 2) / (radius * radius)
        bump = np.exp(-(rho2 ** 2))
        frame += amp * bump[:, :, None] * _DISK_COLOR
    if config.pixel_noise_std > 0:
        frame = frame + rng.normal(0.0, config.pixel_noise_std, frame.shape)
    return np.clip(frame, 0.0, 1.0).astype(np.float32)


def ground_truth_keypoint(marble: MarbleState, finger: str, config: SimConfig) -> Keypoint:
    """Oracle keypoint: contact position in pixels, intensity = normalized depth."""
    contact = marble.contact_left if finger == "left" else marble.contact_right
    x, y = field_to_pixel(contact[0], contact[1])
    intensity = 0.0
    if marble.held:
        intensity = min(max(marble.depth / config.max_depth, 0.0), 1.0)
    x = min(max(x, 0.0), FRAME_SIZE - 1.0)
    y = min(max(y, 0.0), FRAME_SIZE - 1.0)
    return Keypoint(x, y, intensity)


def reset(config: SimConfig, rng: np.random.Generator) -> tuple[JointState, MarbleState]:
    """Nominal grip pose plus small perturbation, marble near field center.

    Perturbations that would start below the drop threshold are resampled
    (the physical analog always re-seats the marble); the exact nominal
    pose is the fallback.
    """
    nominal = nominal_joints(config)
    joints = nominal
    for _ in range(20):
        pert = rng.uniform(-config.reset_perturb, config.reset_perturb, 8)
        candidate = nominal.clamped(nominal.angles + pert)
        depth = config.marble_diameter - grip_gap(candidate, config)
        if depth >= config.drop_depth_threshold + 0.3:
            joints = candidate
            break
    else:
        joints = nominal
        depth = config.marble_diameter - grip_gap(joints, config)

    offset = rng.uniform(-config.reset_offset, config.reset_offset, 2)
    contact_l = offset + rng.normal(0.0, config.reset_jitter, 2)
    contact_r = offset + rng.normal(0.0, config.reset_jitter, 2)
    half = np.array([FIELD_W_MM / 2 - 0.5, FIELD_H_MM / 2 - 0.5])
    contact_l = np.clip(contact_l, -half, half)
    contact_r = np.clip(contact_r, -half, half)
    marble = MarbleState(contact_l, contact_r, max(depth, 0.0), True)
    return joints, marble


def collect_episode(
    config: SimConfig,
    n_commands: int,
    rng: np.random.Generator,
    episode_id: int = 0,
    seed: int = 0,
) -> Episode:
    """Reset, then issue uniformly sampled displacement commands.

    Records a frame pair, the joint angles, and the oracle keypoints at
    every step (initial state included), stopping early at a drop with the
    drop step recorded.  The post-drop frame pair is kept, so frames per
    finger always equal actions + 1.
    """
    if n_commands < 1:
        raise ValueError("n_commands must be >= 1")
    joints, marble = reset(config, rng)

    frames_l = [render(marble, "left", config, rng)]
    frames_r = [render(marble, "right", config, rng)]
    joints_log = [joints.angles.copy()]
    gt_l = [ground_truth_keypoint(marble, "left", config).as_array()]
    gt_r = [ground_truth_keypoint(marble, "right", config).as_array()]
    actions = []
    drop_step = None

    for t in range(1, n_commands + 1):
        action = rng.uniform(-config.a_max, config.a_max, 8)
        joints, marble = step(joints, marble, action, config, rng)
        actions.append(action)
        frames_l.append(render(marble, "left", config, rng))
        frames_r.append(render(marble, "right", config, rng))
        joints_log.append(joints.angles.copy())
        gt_l.append(ground_truth_keypoint(marble, "left", config).as_array())
        gt_r.append(ground_truth_keypoint(marble, "right", config).as_array())
        if not marble.held:
            drop_step = t
            break

    return Episode(
        episode_id=episode_id,
        seed=seed,
        frames_left=frames_l,
        frames_right=frames_r,
        joints=np.stack(joints_log),
        actions=np.stack(actions),
        gt_left=np.stack(gt_l),
        gt_right=np.stack(gt_r),
        drop_step=drop_step,
    )


class MarbleSim:
    """Stateful wrapper holding (joints, marble) for control loops.

    Instances are independent and may run in parallel, but a single
    instance is not safe for concurrent callers.
    """

    def __init__(self, config: SimConfig, seed: int):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.joints: JointState | None = None
        self.marble: MarbleState | None = None

    def reset(self) -> None:
        self.joints, self.marble = reset(self.config, self.rng)

    def step(self, action: np.ndarray) -> None:
        self.joints, self.marble = step(self.joints, self.marble, action, self.config, self.rng)

    def render_pair(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            render(self.marble, "left", self.config, self.rng),
            render(self.marble, "right", self.config, self.rng),
        )

    def gt_keypoint(self, finger: str) -> Keypoint:
        return ground_truth_keypoint(self.marble, finger, self.config)

    @property
    def dropped(self) -> bool:
        return self.marble is not None and not self.marble.held
