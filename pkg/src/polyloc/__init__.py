"""polyloc: camera localization against triangle-mesh scene models."""

from .estimate import (AveragingConfig, LocalizationResult, RansacConfig,
                       covis_components, estimate_with_covisibility, loransac_pose,
                       p3p, p3p_batch, position_average)
from .geom import (CameraIntrinsics, Pose, PoseError, pose_error, pose_from_projective,
                   pose_to_projective, project, undistort_points, unproject)
from .lift import (DatabaseView, Match2D2D, Match2D3D, group_matches, lift_individual,
                   lift_triangulate, merge_matches)
from .mesh import (DepthMap, RenderStyle, TriangleMesh, load_mesh, lookup_depth,
                   render_depth, render_image, save_mesh)
from .pipeline import (EvalThresholds, Pipeline, PipelineConfig, evaluate, localize_all,
                       render_db_views, run_query)
from .synth import SceneParams, SyntheticScene, generate_matches, generate_scene

__version__ = "0.1.0"
