"""Occupancy networks over pooled volumes, plus bounding-box extraction.

One model family serves two jobs. Trained on high-resolution coordinates it
upsamples a pooled volume into a fine occupancy field; trained for box
extraction it may instead classify coordinates of the pooled grid itself
(``coord_resolution="low"``), in which case the training labels are the
max-pooled originals.

The encoder is a small convolutional residual network ending in a fixed
adaptive pooling, so one parameter set accepts any input dims. The decoder
is a per-coordinate MLP conditioned on the encoder's latent either through
conditional batch normalization or by concatenating the (repeated) latent
onto each coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn
from ..inference import BoundingBox
from ..nn import functional as F
from ..rng import make_rng
from ..sampling import CoordinateBatch
from ..voxel import VoxelVolume, average_pool

_INIT_STREAM = 21

CONDITIONINGS = ("cbn", "concat")
WIDTHS = ("wide", "shallow")


@dataclass(frozen=True)
class OnetConfig:
    conditioning: str = "cbn"
    width: str = "shallow"
    encoder_blocks: int = 5
    decoder_blocks: int = 5
    input_downsample: int = 8
    threshold: float = 0.5
    latent_dim: int = 128
    base_channels: int = 16
    decoder_hidden: int = 64
    coord_resolution: str = "high"

    def __post_init__(self) -> None:
        if self.conditioning not in CONDITIONINGS:
            raise ValueError(f"conditioning must be one of {CONDITIONINGS}, got {self.conditioning!r}")
        if self.width not in WIDTHS:
            raise ValueError(f"width must be one of {WIDTHS}, got {self.width!r}")
        if self.encoder_blocks < 1 or self.decoder_blocks < 1:
            raise ValueError("block counts must be >= 1")
        if self.input_downsample < 1:
            raise ValueError(f"input_downsample must be >= 1, got {self.input_downsample}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.latent_dim < 1 or self.base_channels < 1 or self.decoder_hidden < 1:
            raise ValueError("latent_dim, base_channels and decoder_hidden must be >= 1")
        if self.coord_resolution not in ("high", "low"):
            raise ValueError(f"coord_resolution must be 'high' or 'low', got {self.coord_resolution!r}")

    @property
    def encoder_channels(self) -> int:
        return self.base_channels * (2 if self.width == "wide" else 1)


@dataclass(frozen=True)
class LatentCode:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if not np.isfinite(values).all():
            raise ValueError("latent code contains non-finite values")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]


def normalize_coords(coords, dims) -> np.ndarray:
    """Map integer voxel coordinates onto [0, 1]^3 by per-axis division."""
    if isinstance(coords, CoordinateBatch):
        coords = coords.coords
    coords = np.asarray(coords, dtype=np.float32)
    return coords / np.asarray(dims, dtype=np.float32)


class OnetEncoder(nn.Module):
    """Convolutional residual encoder producing one latent vector per volume.

    Channels double once after the second block; average pooling follows the
    first two blocks whenever the spatial extent allows. A fixed adaptive
    pooling decouples the latent projection from the input dims.
    """

    def __init__(self, cfg: OnetConfig, rng, dtype=np.float32):
        c = cfg.encoder_channels
        # the stem output feeds the first block's standardizer, so no bias
        self.stem = nn.Conv3d(1, c, 3, rng, dtype, bias=False)
        outs = [c if i < 2 else 2 * c for i in range(cfg.encoder_blocks)]
        ins = [c] + outs[:-1]
        self.blocks = [
            nn.ResidualBlockConv3d(ci, co, rng, activation=F.leaky_relu, dtype=dtype)
            for ci, co in zip(ins, outs)
        ]
        self.final_norm = nn.BatchNorm(outs[-1], dtype=dtype)
        self.head = nn.Dense(outs[-1] * 64, cfg.latent_dim, rng, dtype)

    def __call__(self, x, training: bool = False):
        h = self.stem(x)
        for i, block in enumerate(self.blocks):
            h = block(h, training)
            if i < 2:
                h = self._pool_if_possible(h)
        h = F.leaky_relu(self.final_norm(h, training))
        b, d, hh, w, c = h.data.shape
        if min(d, hh, w) < 4:
            h = F.pad_right3d(h, (max(d, 4), max(hh, 4), max(w, 4)))
        h = F.adaptive_avg_pool3d(h, (4, 4, 4))
        return self.head(F.reshape(h, (b, 64 * c)))

    @staticmethod
    def _pool_if_possible(h):
        b, d, hh, w, c = h.data.shape
        if min(d, hh, w) < 2:
            return h
        target = (d + d % 2, hh + hh % 2, w + w % 2)
        return F.avg_pool3d(F.pad_right3d(h, target), 2)


class OnetDecoder(nn.Module):
    """Per-coordinate MLP classifier conditioned on a latent vector."""

    def __init__(self, cfg: OnetConfig, rng, dtype=np.float32):
        H, L = cfg.decoder_hidden, cfg.latent_dim
        self.cbn = cfg.conditioning == "cbn"
        cond_dim = L if self.cbn else None
        self.input = nn.Dense(3 if self.cbn else 3 + L, H, rng, dtype)
        self.blocks = [
            nn.ResidualBlockFC(H, H, rng, activation=F.leaky_relu, cond_dim=cond_dim, dtype=dtype)
            for _ in range(cfg.decoder_blocks)
        ]
        if self.cbn:
            self.final_norm = nn.ConditionalBatchNorm(H, L, rng, dtype=dtype)
        else:
            self.final_norm = nn.BatchNorm(H, dtype=dtype)
        # zero logits at initialization: every coordinate starts at 0.5
        self.head = nn.Dense(H, 1, rng, dtype, zero_init=True)

    def __call__(self, coords01, latent, training: bool = False):
        b, n, _ = coords01.data.shape
        if self.cbn:
            h = self.input(coords01)
            cond = latent
        else:
            h = self.input(F.concat([coords01, F.repeat_middle(latent, n)], axis=-1))
            cond = None
        for block in self.blocks:
            h = block(h, cond, training)
        if self.cbn:
            h = self.final_norm(h, cond, training)
        else:
            h = self.final_norm(h, training)
        out = F.sigmoid(self.head(F.leaky_relu(h)))
        return F.reshape(out, (b, n))


class OnetModel(nn.Module):
    def __init__(self, cfg: OnetConfig, seed: int = 0, dtype=np.float32):
        rng = make_rng(seed, _INIT_STREAM)
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.training = False
        self.encoder = OnetEncoder(cfg, rng, dtype)
        self.decoder = OnetDecoder(cfg, rng, dtype)

    def train(self) -> "OnetModel":
        self.training = True
        return self

    def eval(self) -> "OnetModel":
        self.training = False
        return self

    def encode(self, vols) -> nn.Tensor:
        return self.encoder(vols, self.training)

    def decode(self, coords01, latent) -> nn.Tensor:
        return self.decoder(coords01, latent, self.training)

    def __call__(self, vols, coords01) -> nn.Tensor:
        return self.decode(coords01, self.encode(vols))


def _as_model(params, cfg: OnetConfig) -> OnetModel:
    if isinstance(params, OnetModel):
        return params
    model = OnetModel(cfg)
    model.load_state_dict(params)
    return model


def onet_encode(vol: VoxelVolume, cfg: OnetConfig, params) -> LatentCode:
    """Pool a volume by the configured factor and encode it (eval mode)."""
    model = _as_model(params, cfg).eval()
    pooled = average_pool(vol, cfg.input_downsample) if cfg.input_downsample > 1 else vol
    x = nn.Tensor(pooled.data[None, :, :, :, None].astype(model.dtype))
    with nn.no_grad():
        z = model.encode(x)
    return LatentCode(z.data[0])


def onet_decode(coords, latent: LatentCode, cfg: OnetConfig, params, dims=None) -> np.ndarray:
    """Occupancy probabilities for a coordinate query against one latent.

    ``coords`` is either a CoordinateBatch / integer array in the voxel frame
    (``dims`` required for unit-cube normalization) or a float array already
    normalized to [0, 1]^3.
    """
    model = _as_model(params, cfg).eval()
    if isinstance(coords, CoordinateBatch) or np.issubdtype(np.asarray(coords).dtype, np.integer):
        if dims is None:
            raise ValueError("integer coordinates need dims for normalization")
        c01 = normalize_coords(coords, dims)
    else:
        c01 = np.asarray(coords, dtype=np.float32)
    if c01.ndim != 2 or c01.shape[1] != 3:
        raise ValueError(f"expected (n, 3) coordinates, got shape {c01.shape}")
    with nn.no_grad():
        probs = model.decode(
            nn.Tensor(c01[None].astype(model.dtype)),
            nn.Tensor(latent.values[None].astype(model.dtype)),
        )
    return probs.data[0].copy()


def extract_bounding_box(occupied, margin: int = 10, dims=None) -> BoundingBox:
    """Box around predicted-occupied coordinates, widened by ``margin``.

    Empty input yields the empty box. When ``dims`` is given the result is
    clamped to the volume bounds.
    """
    if isinstance(occupied, CoordinateBatch):
        occupied = occupied.coords
    occupied = np.asarray(occupied)
    if occupied.dtype == bool:
        occupied = np.argwhere(occupied)
    box = BoundingBox.from_points(occupied).expand(margin)
    if dims is not None:
        box = box.clamp(dims)
    return box
