"""Specimen-to-cavity registration with regularized Kelvinlet fields."""
from .config import MODES, PipelineConfig
from .dataset_io import CaseBundle, load_case, save_case
from .deformable import RegistrationResult, register
from .evaluation import LooReport, paired_ttest, run_loo, summarize_reference_tables
from .geometry import FiducialSet, PointCloud, RigidTransform, SimilarityTransform, TriMesh
from .kelvinlet import ElasticConstants, KelvinletField, deform_point
from .overlay import compose_marker_frame, export_overlay
from .phantom import PhantomSpec, build_phantom, generate_case

__version__ = "0.1.0"
