"""Episode persistence: binary PPM frames plus a meta.json per episode.

Layout for one episode under a dataset root:

    ep_<id>/
      meta.json        joints, actions, oracle keypoints, drop step, seed
      l_<step>.ppm     left-finger frame, binary PPM (P6, maxval 255)
      r_<step>.ppm     right-finger frame

The PPM header is exactly ``P6\\n64 64\\n255\\n`` followed by 12288 bytes.
Pixels are quantized to 8 bits on save; loading inverts saving exactly up
to that quantization.  meta.json is written with sorted keys so the bytes
are reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

META_FORMAT_VERSION = 1


class EpisodeIOError(Exception):
    """Missing or corrupt episode file; the message names the file."""


@dataclass
class Episode:
    episode_id: int
    seed: int
    frames_left: list[np.ndarray]     # float32 (64, 64, 3) in [0, 1]
    frames_right: list[np.ndarray]
    joints: np.ndarray                # (n_frames, 8) radians
    actions: np.ndarray               # (n_frames - 1, 8) radians
    gt_left: np.ndarray               # (n_frames, 3) oracle keypoints (x, y, i)
    gt_right: np.ndarray
    drop_step: int | None = None
    config_hash: str = ""

    @property
    def n_frames(self) -> int:
        return len(self.frames_left)

    @property
    def n_actions(self) -> int:
        return len(self.actions)


def write_ppm(path: str | Path, frame: np.ndarray) -> None:
    """Write a float [0,1] HxWx3 frame as binary PPM (P6, maxval 255)."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected HxWx3 frame, got shape {frame.shape}")
    h, w = frame.shape[:2]
    data = quantize(frame).tobytes()
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data)


def quantize(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def dequantize(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / 255.0)


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary PPM into a float32 [0,1] HxWx3 array."""
    path = Path(path)
    if not path.exists():
        raise EpisodeIOError(f"missing frame file {path.name} in {path.parent}")
    blob = path.read_bytes()
    if not blob.startswith(b"P6"):
        raise EpisodeIOError(f"{path.name}: not a binary PPM (bad magic)")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comment lines permitted
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(blob):
            raise EpisodeIOError(f"{path.name}: truncated PPM header")
        c = blob[pos : pos + 1]
        if c == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos : pos + 1].isspace():
                pos += 1
            tokens.append(blob[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise EpisodeIOError(f"{path.name}: malformed PPM header") from exc
    if maxval != 255:
        raise EpisodeIOError(f"{path.name}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    data = blob[pos : pos + w * h * 3]
    if len(data) != w * h * 3:
        raise EpisodeIOError(f"{path.name}: expected {w * h * 3} pixel bytes, got {len(data)}")
    return dequantize(np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3))


def episode_dir(root: str | Path, episode_id: int) -> Path:
    return Path(root) / f"ep_{episode_id}"


def save_episode(episode: Episode, root: str | Path) -> Path:
    """Write one episode directory; returns its path."""
    out = episode_dir(root, episode.episode_id)
    out.mkdir(parents=True, exist_ok=True)
    for t, (fl, fr) in enumerate(zip(episode.frames_left, episode.frames_right)):
        write_ppm(out / f"l_{t}.ppm", fl)
        write_ppm(out / f"r_{t}.ppm", fr)
    meta = {
        "format_version": META_FORMAT_VERSION,
        "episode_id": episode.episode_id,
        "seed": episode.seed,
        "n_frames": episode.n_frames,
        "n_actions": episode.n_actions,
        "drop_step": episode.drop_step,
        "config_hash": episode.config_hash,
        "joints": episode.joints.tolist(),
        "actions": episode.actions.tolist(),
        "gt_left": episode.gt_left.tolist(),
        "gt_right": episode.gt_right.tolist(),
    }
    with open(out / "meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")
    return out


def load_episode(path: str | Path) -> Episode:
    """Inverse of save_episode up to 8-bit pixel quantization."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise EpisodeIOError(f"missing meta.json in {path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise EpisodeIOError(f"corrupt meta.json in {path}: {exc}") from exc
    n_frames = meta["n_frames"]
    frames_l = [read_ppm(path / f"l_{t}.ppm") for t in range(n_frames)]
    frames_r = [read_ppm(path / f"r_{t}.ppm") for t in range(n_frames)]
    return Episode(
        episode_id=meta["episode_id"],
        seed=meta["seed"],
        frames_left=frames_l,
        frames_right=frames_r,
        joints=np.asarray(meta["joints"], dtype=float),
        actions=np.asarray(meta["actions"], dtype=float).reshape(meta["n_actions"], 8),
        gt_left=np.asarray(meta["gt_left"], dtype=float),
        gt_right=np.asarray(meta["gt_right"], dtype=float),
        drop_step=meta["drop_step"],
        config_hash=meta.get("config_hash", ""),
    )
