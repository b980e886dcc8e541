"""Similarity-weighted multi-view label fusion for anisotropic volumes.

The subpackages are plain modules of pure functions over numpy arrays:

- :mod:`viewfusion.volume` grid containers, resampling, patches
- :mod:`viewfusion.ssim` per-view structural-similarity weights
- :mod:`viewfusion.fusion` EM fusion and majority voting
- :mod:`viewfusion.oan` organ-attention inference and loss arithmetic
- :mod:`viewfusion.metrics` DSC and surface distance
- :mod:`viewfusion.phantom` seeded synthetic test data
- :mod:`viewfusion.io` ``VFV1`` files, theta matrices, manifests
"""
__version__ = "0.1.0"

from .errors import (
    AbsentLabelError,
    DegenerateVoxelError,
    FormatError,
    GeometryMismatchError,
    NumericError,
    PatchError,
    ShapeError,
    SpecError,
    UndefinedMetricError,
    ViewFusionError,
    VolumeError,
)
from .fusion import (
    FusionConfig,
    FusionResult,
    compute_prior,
    e_step,
    init_theta,
    m_step,
    majority_vote,
    run_fusion,
    run_fusion_voi,
    structure_voi,
)
from .io import ChannelVolume, read_theta, read_volume, write_theta, write_volume
from .metrics import StructureReport, avg_surface_distance, dsc, evaluate
from .phantom import PhantomSpec, ViewCorruption, corrupt_view, default_spec, gen_phantom
from .ssim import SsimConfig, similarity_map, ssim_patch
from .volume import (
    LabelVolume,
    ProbVolume,
    ScalarVolume,
    extract_patch2,
    extract_patch3,
    resample_isotropic,
)
