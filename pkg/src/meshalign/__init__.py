"""Self-supervised category-level alignment of neural meshes and pose
estimation from distilled prototypes."""
from .alignment import AlignmentConfig, AlignmentResult, align_category, align_pair
from .camera import Camera
from .evaluate import EvalReport, MultiReferenceReport, evaluate_alignment, random_rotation_accuracy
from .mesh import NeuralMesh, SimilarityTransform
from .pose import PoseHypothesis, PrototypeModel, distill_prototype, pose_init_templates, pose_refine, rotation_error
from .reconstruction import PointCloud, ReconstructionConfig, bake_features, reconstruct
from .synthetic import SyntheticCategorySpec, generate_synthetic_category
from .video import FilterConfig, VideoCaptureSet, filter_video

__version__ = "0.1.0"

__all__ = [
    "AlignmentConfig", "AlignmentResult", "align_category", "align_pair", "Camera", "EvalReport",
    "MultiReferenceReport", "evaluate_alignment", "random_rotation_accuracy", "NeuralMesh", "SimilarityTransform",
    "PoseHypothesis", "PrototypeModel", "distill_prototype", "pose_init_templates", "pose_refine",
    "rotation_error", "PointCloud", "ReconstructionConfig", "bake_features", "reconstruct",
    "SyntheticCategorySpec", "generate_synthetic_category", "FilterConfig", "VideoCaptureSet", "filter_video",
]
