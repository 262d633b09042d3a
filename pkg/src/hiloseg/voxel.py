"""Dense voxel volumes, pooling, zero-padded window extraction, moving pyramids.

All volumes use one canonical layout: a C-contiguous array indexed
``[x, y, z]``, x slowest, z fastest. Material values live in [0, 1] after
normalization; 0 is air. Out-of-range reads (window extraction, pyramid
levels crossing the border) yield zeros, which is semantically "air".

Volumes and labels are treated as immutable after construction; every
operation here is a pure function returning new arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Triple = tuple[int, int, int]


def _check_triple(value, name: str) -> Triple:
    t = tuple(int(v) for v in value)
    if len(t) != 3:
        raise ValueError(f"{name} must have exactly three components, got {value!r}")
    return t  # type: ignore[return-value]


@dataclass(frozen=True)
class VoxelVolume:
    """A dense scalar volume with material values in [0, 1].

    Args:
        data: array of shape (nx, ny, nz); cast to float32 and made contiguous.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3-dimensional, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("volume must contain at least one voxel")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"volume values must lie in [0, 1], found range [{lo}, {hi}]")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> Triple:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class LabelVolume:
    """A binary volume; 1 marks a target (gun) voxel."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.uint8)
        if arr.ndim != 3:
            raise ValueError(f"label data must be 3-dimensional, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("label volume must contain at least one voxel")
        if arr.max(initial=0) > 1:
            raise ValueError("label values must be exactly 0 or 1")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> Triple:
        return self.data.shape  # type: ignore[return-value]

    @property
    def positive_count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class Window:
    """A cubic chunk read from a volume, zero-padded where it left the bounds.

    ``origin`` is the window's start corner in source-volume coordinates and
    may be negative; ``data`` has shape (size, size, size).
    """

    origin: Triple
    size: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.shape != (self.size, self.size, self.size):
            raise ValueError(
                f"window data shape {self.data.shape} does not match size {self.size}"
            )


@dataclass(frozen=True)
class Pyramid:
    """A moving pyramid: a stack of equally sized windows around one center.

    Level l covers a region of side ``window_size * downsampling_factor**l``
    centered at ``center`` and is average-pooled back down to
    ``window_size`` per axis, so memory is linear in the level count.
    """

    center: Triple
    window_size: int
    downsampling_factor: int
    levels: tuple[Window, ...]

    def __post_init__(self) -> None:
        w = self.window_size
        for lvl in self.levels:
            if lvl.data.shape != (w, w, w):
                raise ValueError("all pyramid levels must share the window size")

    @property
    def level_count(self) -> int:
        return len(self.levels)

    @property
    def nbytes(self) -> int:
        return sum(lvl.data.nbytes for lvl in self.levels)


def _pooled_array(arr: np.ndarray, factor: int, reducer: str) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"pooling factor must be a positive integer, got {factor}")
    if factor == 1:
        return arr.copy()
    nx, ny, nz = arr.shape
    pad = [(0, (-n) % factor) for n in (nx, ny, nz)]
    if any(p[1] for p in pad):
        arr = np.pad(arr, pad)  # zero padding dilutes means, per the border rule
    ox, oy, oz = (s // factor for s in arr.shape)
    blocks = arr.reshape(ox, factor, oy, factor, oz, factor)
    if reducer == "mean":
        # accumulate in float64 so large blocks keep bounded rounding error
        return blocks.mean(axis=(1, 3, 5), dtype=np.float64).astype(np.float32)
    return blocks.max(axis=(1, 3, 5))


def average_pool(vol: VoxelVolume, factor: int) -> VoxelVolume:
    """Downsample a volume by block-averaging ``factor``-sized cubes.

    Dims that do not divide evenly are zero-padded up to the next multiple
    first, so padded voxels contribute zeros to the boundary means.
    """
    return VoxelVolume(_pooled_array(vol.data, factor, "mean"))


def max_pool(labels: LabelVolume, factor: int) -> LabelVolume:
    """Downsample labels; an output voxel is 1 iff any source voxel in its block is 1."""
    return LabelVolume(_pooled_array(labels.data, factor, "max"))


def extract_window(vol: VoxelVolume | LabelVolume, origin, w: int) -> Window:
    """Read the w-cube starting at ``origin``; voxels outside the volume read as 0.

    Works for volumes and labels alike; the window keeps the source dtype.
    """
    if w < 1:
        raise ValueError(f"window size must be a positive integer, got {w}")
    origin = _check_triple(origin, "origin")
    src = vol.data
    out = np.zeros((w, w, w), dtype=src.dtype)
    src_lo = [max(o, 0) for o in origin]
    src_hi = [min(o + w, n) for o, n in zip(origin, src.shape)]
    if all(lo < hi for lo, hi in zip(src_lo, src_hi)):
        dst = tuple(slice(lo - o, hi - o) for o, lo, hi in zip(origin, src_lo, src_hi))
        out[dst] = src[tuple(slice(lo, hi) for lo, hi in zip(src_lo, src_hi))]
    return Window(origin=origin, size=w, data=out)


def build_pyramid(vol: VoxelVolume, center, w: int, d: int, levels: int) -> Pyramid:
    """Build the moving pyramid around ``center``.

    Level 0 is the raw window of side w at ``center - w//2``. Level l extracts
    a window of side ``w * d**l`` (zero-padded at borders, so padding happens
    before pooling) and average-pools it by ``d**l`` back to side w.
    """
    if levels < 1:
        raise ValueError(f"level count must be >= 1, got {levels}")
    if d < 2:
        raise ValueError(f"downsampling factor must be >= 2, got {d}")
    if w < 1:
        raise ValueError(f"window size must be a positive integer, got {w}")
    center = _check_triple(center, "center")
    out = []
    for lvl in range(levels):
        side = w * d**lvl
        origin = tuple(c - side // 2 for c in center)
        win = extract_window(vol, origin, side)
        if lvl == 0:
            out.append(win)
        else:
            pooled = _pooled_array(win.data, d**lvl, "mean")
            out.append(Window(origin=win.origin, size=w, data=pooled))
    return Pyramid(center=center, window_size=w, downsampling_factor=d, levels=tuple(out))
