"""Stochastic selection: coordinate sampling and pyramid location sampling.

Every sampler is a pure function of its inputs and a seed (or an explicit
generator stream), so runs are reproducible across thread schedules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLabelsError
from .rng import make_rng
from .voxel import LabelVolume

# Stream keys so different consumers of one root seed never collide.
_STREAM_BIASED = 101
_STREAM_UNIFORM = 102
_STREAM_PYRAMID = 103
_STREAM_BB = 104


@dataclass(frozen=True)
class SamplerConfig:
    """Coordinate/location sampling parameters.

    ``shape_fraction`` is the share of coordinates drawn uniformly from the
    positive (gun) voxels; the rest are uniform over the whole grid.
    ``redraw_prob`` is the probability that a pyramid location whose window
    misses the gun is redrawn. ``redraw_scope`` selects which part of the
    pyramid must contain a gun voxel to stop the redraw: the level-0 window
    ("level0", default) or the full footprint of the top level ("any").
    """

    n_train_coords: int = 2**14
    n_test_coords: int = 2**18
    n_hilo_coords: int = 2**11
    shape_fraction: float = 0.6
    redraw_prob: float = 0.9
    redraw_scope: str = "level0"
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_train_coords", "n_test_coords", "n_hilo_coords"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("shape_fraction", "redraw_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.redraw_scope not in ("level0", "any"):
            raise ValueError(f"redraw_scope must be 'level0' or 'any', got {self.redraw_scope!r}")


@dataclass(frozen=True)
class CoordinateBatch:
    """Parallel integer coordinates and binary labels on one grid resolution."""

    coords: np.ndarray  # (n, 3) int64
    labels: np.ndarray  # (n,) uint8
    resolution_tag: str = "high"

    def __post_init__(self) -> None:
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must have shape (n, 3), got {self.coords.shape}")
        if self.labels.shape != (self.coords.shape[0],):
            raise ValueError("labels must parallel coords")
        if self.resolution_tag not in ("high", "low"):
            raise ValueError(f"resolution_tag must be 'high' or 'low', got {self.resolution_tag!r}")

    def __len__(self) -> int:
        return self.coords.shape[0]


def _flat_to_coords(flat: np.ndarray, dims) -> np.ndarray:
    return np.stack(np.unravel_index(flat, dims), axis=1).astype(np.int64)


def sample_uniform_coords(dims, n: int, seed, resolution_tag: str = "high") -> CoordinateBatch:
    """Draw n i.i.d. uniform coordinates over the grid (labels all zero)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = make_rng(seed, _STREAM_UNIFORM)
    dims = tuple(int(v) for v in dims)
    flat = rng.integers(0, int(np.prod(dims)), size=n)
    return CoordinateBatch(
        coords=_flat_to_coords(flat, dims),
        labels=np.zeros(n, dtype=np.uint8),
        resolution_tag=resolution_tag,
    )


def sample_biased_coords(
    labels: LabelVolume,
    cfg: SamplerConfig,
    n: int,
    rng: np.random.Generator | None = None,
    resolution_tag: str = "high",
) -> CoordinateBatch:
    """Draw coordinates biased toward the positive voxels.

    round(n * shape_fraction) coordinates come uniformly (with replacement)
    from the positive voxels, the remainder uniformly from the whole grid;
    the result is shuffled and labeled by direct lookup.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if rng is None:
        rng = make_rng(cfg.seed, _STREAM_BIASED)
    data = labels.data
    n_pos = int(round(n * cfg.shape_fraction))
    parts = []
    if n_pos > 0:
        pos_flat = np.flatnonzero(data.reshape(-1))
        if pos_flat.size == 0:
            raise DegenerateLabelsError(
                "biased sampling with shape_fraction > 0 requires at least one positive voxel"
            )
        parts.append(pos_flat[rng.integers(0, pos_flat.size, size=n_pos)])
    if n - n_pos > 0:
        parts.append(rng.integers(0, data.size, size=n - n_pos))
    flat = np.concatenate(parts)
    rng.shuffle(flat)
    coords = _flat_to_coords(flat, data.shape)
    return CoordinateBatch(
        coords=coords,
        labels=data.reshape(-1)[flat].astype(np.uint8),
        resolution_tag=resolution_tag,
    )


def _window_has_positive(data: np.ndarray, center, side: int) -> bool:
    lo = [c - side // 2 for c in center]
    sl = tuple(slice(max(a, 0), min(a + side, n)) for a, n in zip(lo, data.shape))
    if any(s.start >= s.stop for s in sl):
        return False
    return bool(data[sl].any())


def sample_pyramid_location(
    labels: LabelVolume,
    cfg: SamplerConfig,
    w: int,
    d: int,
    levels: int,
    rng: np.random.Generator | None = None,
) -> tuple[int, int, int]:
    """Draw a pyramid center, redrawing gun-free locations with ``redraw_prob``.

    A uniform center is drawn over the volume; if the probe window around it
    contains no positive voxel the draw is rejected with probability
    ``redraw_prob`` and repeated. Termination holds for all-negative volumes
    because every redraw is still accepted with probability 1 - redraw_prob.
    """
    if rng is None:
        rng = make_rng(cfg.seed, _STREAM_PYRAMID)
    data = labels.data
    dims = data.shape
    side = w if cfg.redraw_scope == "level0" else w * d ** (levels - 1)
    while True:
        center = tuple(int(rng.integers(0, n)) for n in dims)
        if _window_has_positive(data, center, side):
            return center
        if rng.random() >= cfg.redraw_prob:
            return center


def sample_location_in_bb(bb, seed) -> tuple[int, int, int]:
    """Uniform integer coordinate inside a non-empty axis-aligned box."""
    if bb.is_empty:
        raise ValueError("cannot sample a location from an empty bounding box")
    rng = make_rng(seed, _STREAM_BB)
    return tuple(int(rng.integers(lo, hi + 1)) for lo, hi in zip(bb.min, bb.max))
