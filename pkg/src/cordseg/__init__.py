"""cordseg: two-stage spinal cord and lesion segmentation toolkit.

Detection of the cord centerline with a 2D dilated-convolution U-net plus
global curve optimization, followed by 3D patch-based segmentation, with a
full evaluation-metric suite and a synthetic phantom generator.
"""

from .volume import Mask, Volume, read_mask, read_volume, reorient, resample, write_volume

__version__ = "0.1.0"

__all__ = [
    "Mask",
    "Volume",
    "read_mask",
    "read_volume",
    "reorient",
    "resample",
    "write_volume",
    "__version__",
]
