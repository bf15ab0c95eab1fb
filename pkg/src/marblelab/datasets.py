"""Dataset collection, manifests, and encoder-built transition sets.

A dataset directory holds ``ep_<i>/`` episode directories plus a
``manifest.json`` recording per-episode seeds, the train/val split, and
a hash of the simulator config.  Collection parallelizes over episodes;
every episode's generator seed derives from (master_seed, index), so the
bytes on disk do not depend on the worker count.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .configio import config_hash, dataclass_to_kv
from .dynamics import StateCodec, Transitions, concat_transitions
from .episode_io import Episode, episode_dir, load_episode, save_episode
from .keypoint_ae import KeypointAutoencoder, active_keypoint, encode_batch
from .sim import SimConfig, collect_episode

MANIFEST_NAME = "manifest.json"


@dataclass
class CollectConfig:
    n_episodes: int = 300
    n_commands: int = 20
    val_fraction: float = 0.2
    workers: int = 1


def episode_seed(master_seed: int, index: int) -> int:
    """Per-episode generator seed; stable under any worker layout."""
    return int(np.random.SeedSequence(master_seed, spawn_key=(index,)).generate_state(1)[0])


def _collect_one(args) -> dict:
    sim_config, n_commands, master_seed, index, out_dir, cfg_hash = args
    seed = episode_seed(master_seed, index)
    rng = np.random.default_rng(seed)
    episode = collect_episode(sim_config, n_commands, rng, episode_id=index, seed=seed)
    episode.config_hash = cfg_hash
    save_episode(episode, out_dir)
    return {
        "id": index,
        "seed": seed,
        "n_frames": episode.n_frames,
        "n_actions": episode.n_actions,
        "drop_step": episode.drop_step,
    }


def run_collection(
    sim_config: SimConfig,
    collect_config: CollectConfig,
    out_dir: str | Path,
    master_seed: int,
) -> dict:
    """Collect episodes into out_dir and write the manifest.

    Per-episode failures are recorded in the manifest's ``failures``
    list and do not abort the run.  The last ``val_fraction`` of episode
    indices form the validation split.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_hash(dataclass_to_kv(sim_config, "sim"))
    n = collect_config.n_episodes
    n_val = int(round(n * collect_config.val_fraction))
    jobs = [
        (sim_config, collect_config.n_commands, master_seed, i, out_dir, cfg_hash)
        for i in range(n)
    ]

    results: dict[int, dict] = {}
    failures: list[dict] = []
    if collect_config.workers > 1:
        with ProcessPoolExecutor(max_workers=collect_config.workers) as pool:
            for job, meta in zip(jobs, pool.map(_collect_one, jobs)):
                results[job[3]] = meta
    else:
        for job in jobs:
            try:
                results[job[3]] = _collect_one(job)
            except OSError as exc:
                failures.append({"id": job[3], "error": str(exc)})

    episodes = []
    for i in range(n):
        if i not in results:
            continue
        meta = results[i]
        meta["split"] = "val" if i >= n - n_val else "train"
        episodes.append(meta)

    manifest = {
        "format_version": 1,
        "master_seed": master_seed,
        "config_hash": cfg_hash,
        "n_episodes": n,
        "n_commands": collect_config.n_commands,
        "val_fraction": collect_config.val_fraction,
        "n_train": sum(e["split"] == "train" for e in episodes),
        "n_val": sum(e["split"] == "val" for e in episodes),
        "episodes": episodes,
        "failures": failures,
    }
    with open(out_dir / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return manifest


def load_manifest(dataset_dir: str | Path) -> dict:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {dataset_dir}")
    return json.loads(path.read_text())


def load_split_episodes(dataset_dir: str | Path, split: str | None = None) -> list[Episode]:
    manifest = load_manifest(dataset_dir)
    out = []
    for meta in manifest["episodes"]:
        if split is not None and meta["split"] != split:
            continue
        out.append(load_episode(episode_dir(dataset_dir, meta["id"])))
    return out


def frames_and_truth(episodes: list[Episode]) -> tuple[np.ndarray, np.ndarray]:
    """Pool both fingers' frames (uint8) with oracle keypoints alongside."""
    from .episode_io import quantize

    frames, truth = [], []
    for ep in episodes:
        for f, g in zip(ep.frames_left, ep.gt_left):
            frames.append(quantize(f))
            truth.append(g)
        for f, g in zip(ep.frames_right, ep.gt_right):
            frames.append(quantize(f))
            truth.append(g)
    return np.stack(frames), np.stack(truth)


def encode_episode_states(
    episode: Episode, model: KeypointAutoencoder, codec: StateCodec
) -> np.ndarray:
    """Per-step normalized 14-D states for one episode."""
    kl = encode_batch(model, np.stack([f for f in episode.frames_left]))
    kr = encode_batch(model, np.stack([f for f in episode.frames_right]))
    states = np.empty((episode.n_frames, 14))
    for t in range(episode.n_frames):
        states[t] = codec.build_state(
            active_keypoint(kl[t]), active_keypoint(kr[t]), episode.joints[t]
        )
    return states


def build_transition_dataset(
    episodes: list[Episode],
    model: KeypointAutoencoder,
    codec: StateCodec,
    csv_path: str | Path | None = None,
) -> Transitions:
    """Encode episodes into consecutive (s, a, s') tuples.

    An episode contributes one tuple per executed action, including the
    transition into a drop; nothing crosses episode boundaries.
    """
    parts = []
    for ep in episodes:
        states = encode_episode_states(ep, model, codec)
        n = ep.n_actions
        parts.append(
            Transitions(
                states[:n],
                np.asarray(ep.actions, dtype=float),
                states[1 : n + 1],
                np.full(n, ep.episode_id, dtype=np.int64),
                np.arange(n, dtype=np.int64),
            )
        )
    if not parts:
        raise ValueError("no episodes to build transitions from")
    transitions = concat_transitions(parts)
    transitions.validate()
    if csv_path is not None:
        write_transitions_csv(csv_path, transitions)
    return transitions


_CSV_HEADER = (
    ["episode_id", "step"]
    + [f"s{i}" for i in range(14)]
    + [f"a{i}" for i in range(8)]
    + [f"sp{i}" for i in range(14)]
)


def write_transitions_csv(path: str | Path, transitions: Transitions) -> None:
    lines = [",".join(_CSV_HEADER)]
    for i in range(len(transitions)):
        row = [str(int(transitions.episode_ids[i])), str(int(transitions.steps[i]))]
        row += ["%.17g" % v for v in transitions.s[i]]
        row += ["%.17g" % v for v in transitions.a[i]]
        row += ["%.17g" % v for v in transitions.s_next[i]]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_transitions_csv(path: str | Path) -> Transitions:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != ",".join(_CSV_HEADER):
        raise ValueError(f"{path}: unexpected transitions CSV header")
    n = len(lines) - 1
    s = np.empty((n, 14))
    a = np.empty((n, 8))
    s_next = np.empty((n, 14))
    episode_ids = np.empty(n, dtype=np.int64)
    steps = np.empty(n, dtype=np.int64)
    for i, line in enumerate(lines[1:]):
        vals = line.split(",")
        episode_ids[i], steps[i] = int(vals[0]), int(vals[1])
        s[i] = [float(v) for v in vals[2:16]]
        a[i] = [float(v) for v in vals[16:24]]
        s_next[i] = [float(v) for v in vals[24:38]]
    return Transitions(s, a, s_next, episode_ids, steps)


def write_loss_csv(path: str | Path, log: list[tuple[int, float, float]]) -> None:
    lines = ["epoch,train_loss,val_loss"]
    for epoch, train, val in log:
        lines.append("%d,%.10g,%.10g" % (epoch, train, val))
    Path(path).write_text("\n".join(lines) + "\n")
