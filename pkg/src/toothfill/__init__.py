"""Tooth crown completion with context- and antagonist-conditioned diffusion on SDF grids."""

__version__ = "0.1.0"

from .geometry import (  # noqa: E402
    TAU,
    Primitive,
    SdfGrid,
    SimplexNoiseParams,
    csg_difference,
    csg_intersection,
    csg_union,
    cube_grid,
    eval_primitive,
    perturb_with_simplex,
    sample_to_grid,
    simplex_noise,
)
from .meshio import LabeledArch, TriangleMesh, load_arch, marching_cubes, mesh_to_sdf, save_arch  # noqa: E402
from .phantom import generate_phantom_arch, generate_phantom_pair  # noqa: E402
from .augment import (  # noqa: E402
    AugmentConfig,
    CompletionSample,
    build_dataset,
    build_sample,
    extract_tooth_context,
    synthesize_damage,
)
from .diffusion import (  # noqa: E402
    GuidanceConfig,
    NoiseSchedule,
    RespacedSchedule,
    SecondMomentResampler,
    cfg_mix,
    complete,
    linear_schedule,
    p_sample_step,
    q_sample,
    respace,
    train_step,
)
from .denoiser import DenoiserUNet, UNetConfig, gradient_check  # noqa: E402
from .metrics import MetricReport, antagonist_interference, chamfer, evaluate_sample, iou_voxel, l1_volume  # noqa: E402
