"""Skeleton-relative garment refitting.

Garments are stored as blends of per-bone local coordinates, transferred
between avatars by swapping bone frames, then refined by gradient descent
over small bone-local residuals under contact, shape-preservation, and
regularization losses.
"""

from .config import LossWeights, RefitConfig
from .contact import (BodyIndex, ContactError, ContactPairs, FitRegion,
                      bone_guided_pairs, build_fit_region,
                      penetration_fractions, signed_distances, tightness_gap)
from .losses import ConnectPairs, LossReport, Objective
from .mesh import (DifferentialCache, Mesh, MeshError, boundary_loops,
                   build_differential_cache, build_edge_topology,
                   compute_cotangent_weights, dihedral_angles)
from .multires import (HierarchyError, LayerConnections, LayerPlan,
                       RefitResult, SamplingMap, build_layer_plan,
                       combine_meshes, detect_connections, downsample,
                       run_coarse_to_fine, run_multilayer, run_sequence,
                       upsample)
from .optim import (AdamW, OptimizationError, RefitState, ResidualSet,
                    benchmark_global_offsets, build_state,
                    constrain_weight_residual, decode,
                    displacement_magnitudes, dominant_bones, run,
                    spread_statistic)
from .sceneio import (SceneBundle, SceneIOError, load_obj, load_scene,
                      load_skeleton, load_trace, load_weights, save_obj,
                      save_result, save_scene, save_skeleton, save_trace,
                      save_weights)
from .skeleton import (Bone, BoneBlendCoords, BoneFrames, Skeleton,
                       SkeletonError, VertexBoneWeights, blend, build_frames,
                       encode_garment, transform_skeleton)
from .synth import (GarmentSpec, SceneParams, avatar_mesh, build_humanoid,
                    capsules_of, generate_scene, sequence_scene_params,
                    skin_weights, standard_scene_params, tube_garment,
                    two_layer_scene_params, union_sdf)
from .transfer import (RefitProblem, inherit_weights, nearest_vertex_indices,
                       transfer, transfer_mesh)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "BodyIndex", "Bone", "BoneBlendCoords", "BoneFrames",
    "ConnectPairs", "ContactError", "ContactPairs", "DifferentialCache",
    "FitRegion", "GarmentSpec", "HierarchyError", "LayerConnections",
    "LayerPlan", "LossReport", "LossWeights", "Mesh", "MeshError",
    "Objective", "OptimizationError", "RefitConfig", "RefitProblem",
    "RefitResult", "RefitState", "ResidualSet", "SamplingMap", "SceneBundle",
    "SceneIOError", "SceneParams", "Skeleton", "SkeletonError",
    "VertexBoneWeights", "avatar_mesh", "benchmark_global_offsets", "blend",
    "bone_guided_pairs", "boundary_loops",
    "build_differential_cache", "build_edge_topology", "build_fit_region",
    "build_frames", "build_humanoid", "build_layer_plan", "build_state",
    "capsules_of", "combine_meshes", "compute_cotangent_weights",
    "constrain_weight_residual", "decode", "detect_connections",
    "dihedral_angles", "displacement_magnitudes", "dominant_bones",
    "downsample", "encode_garment", "generate_scene",
    "inherit_weights", "load_obj", "load_scene", "load_skeleton",
    "load_trace", "load_weights", "nearest_vertex_indices",
    "penetration_fractions", "run", "run_coarse_to_fine", "run_multilayer",
    "run_sequence", "save_obj", "save_result", "save_scene", "save_skeleton",
    "save_trace", "save_weights", "sequence_scene_params", "signed_distances",
    "skin_weights", "spread_statistic", "standard_scene_params",
    "tightness_gap", "transfer", "transfer_mesh", "transform_skeleton",
    "tube_garment", "two_layer_scene_params", "union_sdf", "upsample",
]
