"""Feature-based 3D deformable image registration.

The pipeline computes dense per-voxel features (hand-crafted self-similarity
descriptors or externally supplied ones), optionally compresses channels with
randomized PCA, finds an initial displacement field by a coupled convex
discrete search over a control grid, and refines it with Adam on a trilinear
warp objective. Displacements follow the pullback convention: a field u on
the fixed grid maps fixed-space points into moving space, and the warped
image is moving(x + u(x)).
"""

from .adam_refine import AdamConfig, LossSample, LossValue, loss_and_grad, refine
from .convex import ConvexConfig, CostVolume, build_cost_volume, candidate_table, coupled_convex
from .errors import (
    BadMagicError,
    ConfigError,
    DataError,
    FormatError,
    GeometryError,
    NonFiniteDataError,
    NumericalAbortError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    VersionError,
    VoxregError,
)
from .features import (
    FeatureVolume,
    MindConfig,
    PcaBasis,
    PcaConfig,
    fit_pca,
    ingest_features,
    load_basis,
    mind_ssc,
    project,
    reconstruct,
    save_basis,
    upsample_features,
    volume_to_features,
)
from .fields import (
    RESOLUTION_CONTROL,
    RESOLUTION_FULL,
    DisplacementField,
    control_grid_dims,
    control_point_coords,
    invert_field,
    sample_field,
    upsample_field,
    zero_field,
)
from .io_formats import (
    read_displacement,
    read_fvl1,
    read_labels,
    read_nifti,
    write_displacement,
    write_fvl1,
    write_nifti,
)
from .metrics import (
    LabelVolume,
    MetricsReport,
    dice,
    evaluate,
    jacobian_determinant,
    jacobian_stats,
    read_report,
    warp_labels,
    write_report,
)
from .pipeline import RegistrationConfig, RegistrationResult, register, warp_volume
from .synth import SynthConfig, endpoint_error, make_blobs, make_pair, make_texture, random_smooth_field
from .volume import GridGeometry, Volume3, preprocess_ct, preprocess_mri, resample, sample_trilinear

__version__ = "0.1.0"
