"""Window-pyramid segmentation models.

A pyramid is a stack of equally shaped windows around one location, each
level covering a d-times larger region at d-times coarser resolution. Every
level gets its own encoder (independent weights, identical architecture);
the per-level encodings are concatenated and decoded either into a dense
probability grid over the level-0 window (grid decoder) or into per-query
occupancies at window-local coordinates (coordinate decoder).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn
from ..nn import functional as F
from ..rng import make_rng
from ..sampling import CoordinateBatch
from ..voxel import Pyramid

_INIT_STREAM = 22

DECODERS = ("cnn", "onet")


@dataclass(frozen=True)
class HiLoConfig:
    window_size: int = 16
    downsampling_factor: int = 2
    levels: int = 2
    decoder: str = "cnn"
    encoder_blocks: int = 6
    cnn_decoder_blocks: int = 7
    onet_decoder_blocks: int = 3
    threshold: float = 0.5
    batch_size: int = 16
    base_channels: int = 6
    decoder_hidden: int = 64

    def __post_init__(self) -> None:
        if self.window_size < 4 or self.window_size % 2 != 0:
            raise ValueError(f"window_size must be even and >= 4, got {self.window_size}")
        if self.downsampling_factor < 2:
            raise ValueError(f"downsampling_factor must be >= 2, got {self.downsampling_factor}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.decoder not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if min(self.encoder_blocks, self.cnn_decoder_blocks, self.onet_decoder_blocks) < 1:
            raise ValueError("block counts must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_channels < 1 or self.decoder_hidden < 1:
            raise ValueError("base_channels and decoder_hidden must be >= 1")

    @property
    def kind(self) -> str:
        return "hilo-cnn" if self.decoder == "cnn" else "hilo-onet"


def coordinate_pool_schedule(window_size: int, blocks: int) -> list[bool]:
    """Which encoder blocks are followed by a pooling in the coordinate path.

    Pooling follows the leading blocks for as long as the spatial side stays
    even and at least 3 after halving, which bounds the flattened encoding
    that feeds the decoder's first dense layer.
    """
    schedule = []
    side = window_size
    pooling = True
    for _ in range(blocks):
        pooling = pooling and side % 2 == 0 and side // 2 >= 3
        schedule.append(pooling)
        if pooling:
            side //= 2
    return schedule


class HiLoEncoder(nn.Module):
    """Per-level window encoder: a stem and a chain of residual blocks.

    The grid path pools once after the first block and keeps the spatial
    map; the coordinate path pools by the schedule above and flattens.
    """

    def __init__(self, cfg: HiLoConfig, rng, dtype=np.float32):
        c = cfg.base_channels
        self.grid_output = cfg.decoder == "cnn"
        self.stem = nn.Conv3d(1, c, 3, rng, dtype, bias=False)
        self.blocks = [
            nn.ResidualBlockConv3d(c, c, rng, dtype=dtype) for _ in range(cfg.encoder_blocks)
        ]
        if self.grid_output:
            self.pools = [i == 0 for i in range(cfg.encoder_blocks)]
        else:
            self.pools = coordinate_pool_schedule(cfg.window_size, cfg.encoder_blocks)

    def __call__(self, x, training: bool = False):
        h = self.stem(x)
        for block, pool in zip(self.blocks, self.pools):
            h = block(h, training)
            if pool:
                h = F.avg_pool3d(h, 2)
        if self.grid_output:
            return h
        b = h.data.shape[0]
        return F.reshape(h, (b, int(np.prod(h.data.shape[1:]))))


class HiLoGridDecoder(nn.Module):
    """Concatenated feature maps to a window-sized probability grid.

    All but the last block run at the pooled resolution; one upsampling
    before the last block restores the window side, so the output aligns
    voxel-for-voxel with the level-0 window. Upsampling late keeps the
    expensive full-resolution maps down to a single block, which is what
    bounds the training-memory peak.
    """

    def __init__(self, cfg: HiLoConfig, rng, dtype=np.float32):
        c = cfg.base_channels
        ins = [cfg.levels * c] + [c] * (cfg.cnn_decoder_blocks - 1)
        self.blocks = [nn.ResidualBlockConv3d(ci, c, rng, dtype=dtype) for ci in ins]
        self.final_norm = nn.BatchNorm(c, dtype=dtype)
        self.head = nn.Conv3d(c, 1, 3, rng, dtype, zero_init=True)

    def __call__(self, h, training: bool = False):
        last = len(self.blocks) - 1
        for i, block in enumerate(self.blocks):
            if i == last:
                h = F.upsample_nearest3d(h, 2)
            h = block(h, training)
        h = F.selu(self.final_norm(h, training))
        out = F.sigmoid(self.head(h))
        b, d, hh, w, _ = out.data.shape
        return F.reshape(out, (b, d, hh, w))


class HiLoCoordDecoder(nn.Module):
    """Per-coordinate classifier on concat(window coords, encodings)."""

    def __init__(self, cfg: HiLoConfig, encoding_dim: int, rng, dtype=np.float32):
        H = cfg.decoder_hidden
        self.input = nn.Dense(3 + encoding_dim, H, rng, dtype)
        self.blocks = [
            nn.ResidualBlockFC(H, H, rng, activation=F.selu, dtype=dtype)
            for _ in range(cfg.onet_decoder_blocks)
        ]
        self.final_norm = nn.BatchNorm(H, dtype=dtype)
        self.head = nn.Dense(H, 1, rng, dtype, zero_init=True)

    def __call__(self, coords01, encoding, training: bool = False):
        b, n, _ = coords01.data.shape
        h = self.input(F.concat([coords01, F.repeat_middle(encoding, n)], axis=-1))
        for block in self.blocks:
            h = block(h, None, training)
        out = F.sigmoid(self.head(F.selu(self.final_norm(h, training))))
        return F.reshape(out, (b, n))


class HiLoModel(nn.Module):
    def __init__(self, cfg: HiLoConfig, seed: int = 0, dtype=np.float32):
        rng = make_rng(seed, _INIT_STREAM)
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.training = False
        self.encoders = [HiLoEncoder(cfg, rng, dtype) for _ in range(cfg.levels)]
        if cfg.decoder == "cnn":
            self.decoder = HiLoGridDecoder(cfg, rng, dtype)
        else:
            side = cfg.window_size
            for pool in coordinate_pool_schedule(cfg.window_size, cfg.encoder_blocks):
                if pool:
                    side //= 2
            self.decoder = HiLoCoordDecoder(
                cfg, cfg.levels * side**3 * cfg.base_channels, rng, dtype
            )

    def train(self) -> "HiLoModel":
        self.training = True
        return self

    def eval(self) -> "HiLoModel":
        self.training = False
        return self

    def forward_batch(self, level_inputs, coords01=None) -> nn.Tensor:
        """Levels are (B, w, w, w, 1) tensors, one per pyramid level."""
        if len(level_inputs) != len(self.encoders):
            raise ValueError(
                f"pyramid has {len(level_inputs)} levels, model expects {len(self.encoders)}"
            )
        encs = [enc(x, self.training) for enc, x in zip(self.encoders, level_inputs)]
        merged = encs[0] if len(encs) == 1 else F.concat(encs, axis=-1)
        if self.cfg.decoder == "cnn":
            if coords01 is not None:
                raise ValueError("the grid decoder takes no coordinate query")
            return self.decoder(merged, self.training)
        if coords01 is None:
            raise ValueError("the coordinate decoder needs a coordinate query")
        return self.decoder(coords01, merged, self.training)


def pyramid_to_tensors(pyr: Pyramid, dtype=np.float32) -> list[nn.Tensor]:
    return [nn.Tensor(level.data[None, :, :, :, None].astype(dtype)) for level in pyr.levels]


def stack_pyramids(pyrs) -> list[nn.Tensor]:
    """Batch several pyramids into one (B, w, w, w, 1) tensor per level."""
    counts = {p.level_count for p in pyrs}
    if len(counts) != 1:
        raise ValueError(f"pyramids disagree on level count: {sorted(counts)}")
    levels = []
    for i in range(counts.pop()):
        levels.append(nn.Tensor(np.stack([p.levels[i].data for p in pyrs])[..., None]))
    return levels


def hilo_forward(pyr: Pyramid, cfg: HiLoConfig, params, coords=None) -> np.ndarray:
    """Evaluate one pyramid in eval mode.

    Returns a (w, w, w) probability grid for the grid decoder, or per-query
    probabilities at window-local integer coordinates for the coordinate
    decoder. ``params`` is a state dict or an already-built model.
    """
    if pyr.level_count != cfg.levels:
        raise ValueError(f"pyramid has {pyr.level_count} levels, config expects {cfg.levels}")
    if isinstance(params, HiLoModel):
        model = params
    else:
        model = HiLoModel(cfg)
        model.load_state_dict(params)
    model.eval()
    levels = pyramid_to_tensors(pyr, model.dtype)
    coords01 = None
    if coords is not None:
        if isinstance(coords, CoordinateBatch):
            coords = coords.coords
        coords01 = nn.Tensor(
            np.asarray(coords, dtype=model.dtype)[None] / float(cfg.window_size)
        )
    with nn.no_grad():
        out = model.forward_batch(levels, coords01)
    return out.data[0].copy()
