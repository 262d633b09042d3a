"""Memory-bounded 3D semantic segmentation on voxel volumes.

The package trains and runs two model families without ever holding a full
high-resolution scan in working memory: occupancy networks that decode
per-coordinate labels from a latent code of a heavily pooled volume, and
window-pyramid networks whose input is a stack of progressively coarser
windows around one location. Everything downstream (tiled inference,
multiresolution occupancy evaluation, bounded training queues) exists to
keep the peak footprint proportional to window size, not scan size.
"""

from .errors import DegenerateLabelsError, DivergenceError, FormatError
from .rng import make_rng
from .voxel import (
    LabelVolume,
    Pyramid,
    VoxelVolume,
    Window,
    average_pool,
    build_pyramid,
    extract_window,
    max_pool,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateLabelsError",
    "DivergenceError",
    "FormatError",
    "LabelVolume",
    "Pyramid",
    "VoxelVolume",
    "Window",
    "average_pool",
    "build_pyramid",
    "extract_window",
    "make_rng",
    "max_pool",
    "__version__",
]
