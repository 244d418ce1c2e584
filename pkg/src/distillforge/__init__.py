"""distillforge: score-distillation optimization (SDS / VSD / SSD) over a
deformable tetrahedral head representation, with analytic denoiser oracles
that make gradients and convergence claims checkable at desk scale."""

from .config import RunConfig, apply_profile, load_config
from .diffusion import (Condition, DenoiserOracle, GuidanceSpec, NoiseSchedule,
                        TimePolicy, add_noise, build_schedule, cfg_compose,
                        omega, sample_time)
from .distill import (DistillResult, SurrogateDenoiser, reparam_loss, sds_step,
                      ssd_step, vsd_step)
from .fields import (AnalyticSDFField, ColorField, ImplicitField,
                     edit_mode_freeze, init_sdf_fit, map_keypoints)
from .hashgrid import HashConfig, HashEncoding
from .metrics import chamfer_distance, mean_color_error, reference_color
from .oracles import GaussianOracle, MixtureOracle, RenderAnchoredOracle
from .render import (CameraPose, CameraRanges, LandmarkMap, RenderOutput,
                     composite, project_landmarks, rasterize, sample_camera,
                     view_tag)
from .template import TemplateSDF, ellipsoid_nose_target, head_template
from .tetra import Mesh, TetGrid, marching_tets, regularize

__version__ = "0.1.0"
