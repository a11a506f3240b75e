"""voxmap: inter-subject deformable registration of 3D density volumes and
supervoxel-wise robust association mapping, with a synthetic phantom cohort
for end-to-end validation."""

from .fieldstats import (AggregateMaps, InverseConsistency, RegionStats,
                         StreamingMoments, cohort_aggregates, dice,
                         inverse_consistency, invert_field,
                         jacobian_determinant)
from .manifest import (CohortManifest, ManifestError, SubjectRecord,
                       read_manifest, write_manifest)
from .nifti import (NiftiError, read_field, read_volume, write_field,
                    write_volume)
from .phantom import (CohortSpec, PhantomSpec, PlantedEffect, generate_cohort,
                      generate_phantom, generate_subject)
from .preprocess import (PreprocessedSubject, PreprocessError,
                         preprocess_subject)
from .registration import (AffineInit, DisplacementField, EnergyBreakdown,
                           EnergyTrace, StageConfig, affine_to_field,
                           bbox_affine_init, channel_energy,
                           default_stage_configs, graphcut_sweep,
                           register_deformable, warp, warp_labels)
from .stats import (AssociationMap, FeatureMatrix, PearsonResult,
                    TemplateScore, associate, build_feature_matrix,
                    explicit_correlation_table, iqr_filter, pearson,
                    select_template)
from .supervoxels import (SupervoxelDecomposition, slic_cluster,
                          supervoxel_means)
from .volume import (BoundingBox, GeometryError, LabelVolume, Volume,
                     gaussian_downsample, mask_bounding_box, median_filter,
                     trilinear_sample)

__version__ = "0.1.0"
