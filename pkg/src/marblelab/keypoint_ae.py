"""Keypoint-bottleneck autoencoder for tactile frames.

A small residual conv encoder turns a 64x64x3 frame into K non-negative
16x16 feature maps.  Each map is summarized as a keypoint (x, y, i): the
spatial soft-argmax of the map plus its mean activation.  The decoder
sees only these keypoints, re-rendered as Gaussian blobs on empty maps,
and must reproduce the frame; a learned background image handles
everything the blobs cannot.  Squeezing the frame through K triples
forces the contact's position and pressure into interpretable
coordinates.

Training adds an intensity-sum sparsity term and an intensity-weighted
repulsion between keypoint pairs, so in practice a single keypoint
latches onto the contact and the rest go dark.

Reported intensities are normalized by ``i_scale``, the 99th percentile
of active-keypoint raw intensity on the training set, so a full-pressure
contact reads close to 1.0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import load_arrays, save_arrays
from .keypoints import FRAME_SIZE, Keypoint
from .netutil import configure_torch

MAP_SIZE = 16


def map_to_frame(m: float, stride: float = 4.0) -> float:
    """Feature-map coordinate to frame pixels, aligning pixel centers."""
    return m * stride + (stride - 1.0) / 2.0


def frame_to_map(p: float, stride: float = 4.0) -> float:
    return (p - (stride - 1.0) / 2.0) / stride


def soft_argmax(fmap: np.ndarray, tau: float = 1.0) -> tuple[float, float]:
    """(x, y) expectation of pixel coordinates under softmax(map / tau).

    Always lies inside the map rectangle.  An all-zero map has no
    preferred location; the uniform softmax then lands exactly on the
    map center, and a warning flags the degenerate input.
    """
    v = np.asarray(fmap, dtype=np.float64)
    h, w = v.shape
    if not np.any(v):
        warnings.warn("all-zero feature map: soft_argmax falls back to the map center")
    z = (v - v.max()) / tau
    p = np.exp(z)
    p /= p.sum()
    x = float(p.sum(axis=0) @ np.arange(w))
    y = float(p.sum(axis=1) @ np.arange(h))
    return x, y


def intensity(fmap: np.ndarray) -> float:
    return float(np.mean(fmap))


def render_blob(
    k: Keypoint,
    sigma: float,
    h: int = MAP_SIZE,
    w: int = MAP_SIZE,
    frame_size: int = FRAME_SIZE,
) -> np.ndarray:
    """Gaussian bump of amplitude k.i centered at the keypoint.

    The keypoint lives in frame pixels; the blob is drawn in map
    coordinates (stride frame_size / w).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    stride = frame_size / w
    mx = frame_to_map(k.x, stride)
    my = frame_to_map(k.y, stride)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    d2 = (xs[None, :] - mx) ** 2 + (ys[:, None] - my) ** 2
    return k.i * np.exp(-d2 / (2.0 * sigma * sigma))


def loss(
    frame: np.ndarray,
    reconstruction: np.ndarray,
    keypoints: np.ndarray,
    weights: tuple[float, float, float] = (1.0, 0.01, 0.05),
    sigma_sep: float = 2.0,
    sep_eps: float = 0.01,
) -> float:
    """w_rec * MSE + w_sparse * sum(i) + w_sep * pairwise repulsion.

    The repulsion term is
    sum_{k != k'} tanh(i_k/e) tanh(i_k'/e) exp(-d^2 / (2 sigma_sep^2))
    with distances in map coordinates.  The saturating gate keeps
    zero-intensity keypoints free to overlap (so reconstructing a frame
    with all intensities zero costs exactly nothing) while bright
    coincident keypoints pay nearly the full penalty; because tanh is
    flat at saturation, repulsion pushes active keypoints apart in
    position instead of draining their intensities, which is what keeps
    the one surviving keypoint alive during training.
    """
    w_rec, w_sparse, w_sep = weights
    if min(weights) < 0:
        raise ValueError("loss weights must be non-negative")
    kp = np.asarray(keypoints, dtype=np.float64)
    rec = np.mean((np.asarray(frame, np.float64) - np.asarray(reconstruction, np.float64)) ** 2)
    sparse = float(kp[:, 2].sum())
    xy_map = frame_to_map(kp[:, :2])
    gate = np.tanh(kp[:, 2] / sep_eps)
    d2 = np.sum((xy_map[:, None, :] - xy_map[None, :, :]) ** 2, axis=2)
    rep = gate[:, None] * gate[None, :] * np.exp(-d2 / (2.0 * sigma_sep * sigma_sep))
    sep = float(rep.sum() - np.trace(rep))
    return float(w_rec * rec + w_sparse * sparse + w_sep * sep)


def augment_image(
    frame: np.ndarray,
    rng: np.random.Generator,
    delta: float = 0.1,
    gamma_range: tuple[float, float] = (0.8, 1.25),
) -> np.ndarray:
    """Lighting jitter: per-channel gain in [1-delta, 1+delta], then gamma."""
    scale = rng.uniform(1.0 - delta, 1.0 + delta, size=3)
    gamma = rng.uniform(gamma_range[0], gamma_range[1])
    out = np.clip(np.asarray(frame, np.float64) * scale, 0.0, 1.0) ** gamma
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def active_index(keypoints: np.ndarray) -> int:
    """Index of the highest-intensity keypoint; ties go to the lowest index."""
    kp = np.asarray(keypoints)
    return int(np.argmax(kp[:, 2]))


def active_keypoint(keypoints: np.ndarray) -> Keypoint:
    kp = np.asarray(keypoints, dtype=np.float64)
    if len(kp) < 1:
        raise ValueError("need at least one keypoint")
    x, y, i = kp[active_index(kp)]
    return Keypoint(float(x), float(y), float(i))


@dataclass
class TrainConfig:
    k: int = 8
    blob_sigma: float = 1.5       # map pixels
    tau: float = 1.0
    base_channels: int = 16
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 8
    w_rec: float = 1.0
    w_sparse: float = 0.01
    w_sep: float = 0.05
    sigma_sep: float = 2.0        # map pixels
    sep_eps: float = 0.01         # intensity scale of the repulsion gate
    aug_delta: float = 0.1
    aug_gamma_lo: float = 0.8
    aug_gamma_hi: float = 1.25
    # The auxiliary terms follow a schedule.  Warmup epochs train
    # reconstruction only (pruning keypoints the decoder does not rely
    # on yet just kills them all); the next aux_prune_epochs apply the
    # full sparsity/repulsion pressure, which is when redundant
    # keypoints die; afterwards the pressure drops to aux_polish_scale.
    # A small but nonzero polish keeps dead keypoints dead without the
    # steady drain that would otherwise pull the survivor's intensity
    # to zero (Adam turns even a tiny constant gradient into full-size
    # steps, and the decoder can always re-amplify a shrinking blob, so
    # a permanent linear penalty has no stable equilibrium).
    aux_warmup_epochs: int = 1
    aux_prune_epochs: int = 2
    aux_polish_scale: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.blob_sigma <= 0 or self.sigma_sep <= 0:
            raise ValueError("blob sigmas must be positive")
        if min(self.w_rec, self.w_sparse, self.w_sep) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.aux_warmup_epochs < 0 or self.aux_prune_epochs < 0:
            raise ValueError("aux schedule epochs must be non-negative")
        if self.aux_polish_scale < 0:
            raise ValueError("aux_polish_scale must be non-negative")

    def aux_scale_at(self, epoch: int) -> float:
        """Auxiliary-loss multiplier for a 1-based epoch index."""
        if epoch <= self.aux_warmup_epochs:
            return 0.0
        if epoch <= self.aux_warmup_epochs + self.aux_prune_epochs:
            return 1.0
        return self.aux_polish_scale


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.skip = (
            nn.Identity() if cin == cout and stride == 1 else nn.Conv2d(cin, cout, 1, stride)
        )
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.conv2(self.act(self.conv1(x))) + self.skip(x))


class KeypointAutoencoder(nn.Module):
    """Encoder -> K keypoints -> blob re-render -> decoder.

    All activations are smooth (SiLU / softplus / sigmoid) so analytic
    gradients can be validated against central finite differences.  The
    decoder adds a learned full-resolution background image before the
    output sigmoid; blobs only need to explain the contact.
    """

    def __init__(
        self,
        k: int = 8,
        base_channels: int = 16,
        frame_size: int = FRAME_SIZE,
        tau: float = 1.0,
        blob_sigma: float = 1.5,
    ):
        super().__init__()
        if frame_size % 4 != 0:
            raise ValueError("frame_size must be divisible by 4")
        self.k = k
        self.base_channels = base_channels
        self.frame_size = frame_size
        self.map_size = frame_size // 4
        self.tau = tau
        self.blob_sigma = blob_sigma

        c = base_channels
        self.stem = nn.Conv2d(3, c, 3, 1, 1)
        self.blocks = nn.Sequential(
            _ResBlock(c, c, 2),
            _ResBlock(c, 2 * c, 2),
            _ResBlock(2 * c, 2 * c, 1),
            _ResBlock(2 * c, 2 * c, 1),
        )
        self.head = nn.Conv2d(2 * c, k, 1)
        # start the maps near dark: with zero-ish activations the K
        # soft-argmaxes all sit at the map center, and a bright start
        # would hand the pairwise repulsion term a huge gradient that
        # crushes every intensity before the decoder learns to use blobs
        nn.init.constant_(self.head.bias, -2.0)
        self.act = nn.SiLU()
        self.softplus = nn.Softplus()
        # the decoder is deliberately light: at full resolution every
        # channel is expensive, and the learned background carries most
        # of the image anyway
        self.dec1 = nn.ConvTranspose2d(k, c, 4, 2, 1)
        self.dec2 = nn.ConvTranspose2d(c, max(c // 2, 4), 4, 2, 1)
        self.dec3 = nn.Conv2d(max(c // 2, 4), 3, 3, 1, 1)
        self.background = nn.Parameter(torch.zeros(3, frame_size, frame_size))
        self.register_buffer("i_scale", torch.ones(()))

        grid = torch.arange(self.map_size, dtype=torch.float32)
        self.register_buffer("_grid", grid)

    def feature_maps(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) -> (B, K, S/4, S/4), non-negative."""
        return self.softplus(self.head(self.blocks(self.act(self.stem(frames)))))

    def maps_to_keypoints(self, maps: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-map soft-argmax (map coords) and mean activation."""
        b, k, h, w = maps.shape
        p = torch.softmax(maps.reshape(b, k, h * w) / self.tau, dim=2).reshape(b, k, h, w)
        grid = self._grid.to(maps.dtype)
        x = (p.sum(dim=2) * grid).sum(dim=2)
        y = (p.sum(dim=3) * grid).sum(dim=2)
        i = maps.mean(dim=(2, 3))
        return torch.stack([x, y], dim=2), i

    def render_blobs(self, xy_map: torch.Tensor, i_raw: torch.Tensor) -> torch.Tensor:
        grid = self._grid.to(xy_map.dtype)
        dx2 = (grid[None, None, None, :] - xy_map[:, :, 0, None, None]) ** 2
        dy2 = (grid[None, None, :, None] - xy_map[:, :, 1, None, None]) ** 2
        return i_raw[:, :, None, None] * torch.exp(
            -(dx2 + dy2) / (2.0 * self.blob_sigma**2)
        )

    def decode_maps(self, blobs: torch.Tensor) -> torch.Tensor:
        h = self.act(self.dec1(blobs))
        h = self.act(self.dec2(h))
        return torch.sigmoid(self.dec3(h) + self.background)

    def forward(self, frames: torch.Tensor):
        maps = self.feature_maps(frames)
        xy_map, i_raw = self.maps_to_keypoints(maps)
        recon = self.decode_maps(self.render_blobs(xy_map, i_raw))
        return recon, xy_map, i_raw


def _to_torch_frames(frames: np.ndarray) -> torch.Tensor:
    """(B, S, S, 3) uint8 or float -> (B, 3, S, S) float32 in [0, 1]."""
    arr = np.asarray(frames)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    return t.permute(0, 3, 1, 2)


def encode_batch(model: KeypointAutoencoder, frames: np.ndarray) -> np.ndarray:
    """Frames (B, S, S, 3) -> keypoints (B, K, 3) in frame pixels.

    Intensities are divided by the model's i_scale calibration constant.
    """
    arr = np.asarray(frames)
    if arr.ndim != 4 or arr.shape[1] != model.frame_size or arr.shape[3] != 3:
        raise ValueError(
            f"expected (B, {model.frame_size}, {model.frame_size}, 3) frames, got {arr.shape}"
        )
    stride = model.frame_size / model.map_size
    with torch.no_grad():
        maps = model.feature_maps(_to_torch_frames(arr))
        xy_map, i_raw = model.maps_to_keypoints(maps)
        xy = map_to_frame(xy_map.numpy().astype(np.float64), stride)
        i = (i_raw / model.i_scale).numpy().astype(np.float64)
    return np.concatenate([xy, i[:, :, None]], axis=2)


def encode(model: KeypointAutoencoder, frame: np.ndarray) -> list[Keypoint]:
    kp = encode_batch(model, np.asarray(frame)[None])[0]
    return [Keypoint(float(x), float(y), float(i)) for x, y, i in kp]


def decode(model: KeypointAutoencoder, keypoints: np.ndarray) -> np.ndarray:
    """Keypoints (K, 3) in frame pixels -> reconstructed frame (S, S, 3)."""
    kp = np.asarray(
        [k.as_array() if isinstance(k, Keypoint) else k for k in keypoints], dtype=np.float64
    )
    if kp.shape != (model.k, 3):
        raise ValueError(f"expected {model.k} keypoints of 3 values, got shape {kp.shape}")
    stride = model.frame_size / model.map_size
    with torch.no_grad():
        xy_map = torch.from_numpy(frame_to_map(kp[None, :, :2], stride)).float()
        i_raw = torch.from_numpy(kp[None, :, 2]).float() * model.i_scale
        frame = model.decode_maps(model.render_blobs(xy_map, i_raw))
    return frame[0].permute(1, 2, 0).numpy().astype(np.float32)


def training_loss(
    model: KeypointAutoencoder,
    inputs: torch.Tensor,
    targets: torch.Tensor,
    config: TrainConfig,
    aux_scale: float = 1.0,
) -> torch.Tensor:
    recon, xy_map, i_raw = model(inputs)
    rec = torch.mean((targets - recon) ** 2)
    sparse = i_raw.sum(dim=1).mean()
    gate = torch.tanh(i_raw / config.sep_eps)
    d2 = torch.sum((xy_map[:, :, None, :] - xy_map[:, None, :, :]) ** 2, dim=3)
    rep = gate[:, :, None] * gate[:, None, :] * torch.exp(-d2 / (2.0 * config.sigma_sep**2))
    sep = (rep.sum(dim=(1, 2)) - rep.diagonal(dim1=1, dim2=2).sum(dim=1)).mean()
    return config.w_rec * rec + aux_scale * (config.w_sparse * sparse + config.w_sep * sep)


def _batched_val_loss(model, frames, config) -> float:
    total, n = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(frames), 256):
            batch = _to_torch_frames(frames[start : start + 256])
            total += float(training_loss(model, batch, batch, config)) * len(batch)
            n += len(batch)
    return total / max(n, 1)


def calibrate_i_scale(model: KeypointAutoencoder, frames: np.ndarray) -> float:
    """Set i_scale to the 99th percentile of active raw intensity."""
    raws = []
    with torch.no_grad():
        for start in range(0, len(frames), 256):
            maps = model.feature_maps(_to_torch_frames(frames[start : start + 256]))
            _, i_raw = model.maps_to_keypoints(maps)
            raws.append(i_raw.numpy().max(axis=1))
    scale = float(np.percentile(np.concatenate(raws), 99))
    if scale > 0:
        model.i_scale.fill_(scale)
    return float(model.i_scale)


def train_autoencoder(
    train_frames: np.ndarray,
    val_frames: np.ndarray,
    config: TrainConfig,
) -> tuple[KeypointAutoencoder, list[tuple[int, float, float]]]:
    """Minibatch Adam on the keypoint bottleneck; returns (model, loss log).

    Inputs get lighting augmentation; the reconstruction target stays
    clean, so the intensity channel is not asked to encode illumination.
    The loss log holds (epoch, train_loss, val_loss) rows; epoch 0 is the
    pre-training validation baseline in both columns.
    """
    config.validate()
    if len(train_frames) == 0:
        raise ValueError("training set is empty")
    configure_torch()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    model = KeypointAutoencoder(
        k=config.k,
        base_channels=config.base_channels,
        tau=config.tau,
        blob_sigma=config.blob_sigma,
    )
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    initial = _batched_val_loss(model, val_frames if len(val_frames) else train_frames, config)
    log: list[tuple[int, float, float]] = [(0, initial, initial)]

    n = len(train_frames)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        aux = config.aux_scale_at(epoch)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            clean = np.asarray(train_frames)[idx]
            if clean.dtype == np.uint8:
                clean = clean.astype(np.float32) / 255.0
            aug_frames = np.stack(
                [
                    augment_image(
                        f, rng, config.aug_delta, (config.aug_gamma_lo, config.aug_gamma_hi)
                    )
                    for f in clean
                ]
            )
            inputs = _to_torch_frames(aug_frames)
            targets = _to_torch_frames(clean)
            opt.zero_grad()
            batch_loss = training_loss(model, inputs, targets, config, aux_scale=aux)
            if not torch.isfinite(batch_loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            batch_loss.backward()
            opt.step()
            total += float(batch_loss.detach()) * len(idx)
            seen += len(idx)
        val = _batched_val_loss(model, val_frames if len(val_frames) else train_frames, config)
        log.append((epoch, total / seen, val))

    calibrate_i_scale(model, np.asarray(train_frames))
    model.eval()
    return model, log


_CFG_KEYS = ("k", "base_channels", "frame_size", "tau", "blob_sigma")


def save_autoencoder(model: KeypointAutoencoder, path) -> None:
    arrays = {f"cfg.{key}": np.array(float(getattr(model, key))) for key in _CFG_KEYS}
    for name, tensor in model.state_dict().items():
        arrays[f"param.{name}"] = tensor.detach().numpy().astype(np.float64)
    save_arrays(path, arrays)


def load_autoencoder(path) -> KeypointAutoencoder:
    arrays = load_arrays(path)
    model = KeypointAutoencoder(
        k=int(arrays["cfg.k"]),
        base_channels=int(arrays["cfg.base_channels"]),
        frame_size=int(arrays["cfg.frame_size"]),
        tau=float(arrays["cfg.tau"]),
        blob_sigma=float(arrays["cfg.blob_sigma"]),
    )
    state = {
        name[len("param.") :]: torch.from_numpy(arr).float()
        for name, arr in arrays.items()
        if name.startswith("param.")
    }
    model.load_state_dict(state)
    model.eval()
    return model
