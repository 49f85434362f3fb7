"""Semantic plane-prior refinement of truncated signed distance volumes.

Floor voxels are pushed toward horizontal surfaces and wall voxels toward
vertical ones by penalizing the normals derived from the TSDF itself.  The
package also carries the evaluation pipeline (depth rendering, masking,
re-fusion, point metrics, coverage) and a synthetic room generator.
"""

from .volume import (
    GridSpec,
    TsdfVolume,
    SemanticVolume,
    VolumeFormatError,
    LABEL_OTHER,
    LABEL_FLOOR,
    LABEL_WALLS,
    LABEL_UNKNOWN,
)

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "TsdfVolume",
    "SemanticVolume",
    "VolumeFormatError",
    "LABEL_OTHER",
    "LABEL_FLOOR",
    "LABEL_WALLS",
    "LABEL_UNKNOWN",
    "__version__",
]
