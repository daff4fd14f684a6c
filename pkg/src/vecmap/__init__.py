"""Toolkit for vectorized online HD-map pipelines.

Modules:
  map_model  - polyline map types, resampling/normalization/clipping, map file I/O
  matching   - permutation-invariant costs, optimal assignment, training loss
  metrics    - Chamfer-distance Average Precision evaluation
  streaming  - BEV warping, GRU fusion, query propagation, the streaming step
  attention  - deformable sampling and multi-point decoder forward kernels
  geosplit   - coverage rasters, overlap audits, train/val split generation
  cli        - the ``vecmap`` command-line tool
"""

__version__ = "0.1.0"

from .map_model import (
    CLASS_NAMES,
    CLOSED,
    OPEN,
    LocalMap,
    MapInstance,
    PerceptionRange,
    Polyline,
    RigidTransform,
    clip_to_range,
    denormalize,
    normalize,
    read_vmap,
    resample_polyline,
    write_vmap,
)

__all__ = [
    "CLASS_NAMES",
    "CLOSED",
    "OPEN",
    "LocalMap",
    "MapInstance",
    "PerceptionRange",
    "Polyline",
    "RigidTransform",
    "clip_to_range",
    "denormalize",
    "normalize",
    "read_vmap",
    "resample_polyline",
    "write_vmap",
    "__version__",
]
