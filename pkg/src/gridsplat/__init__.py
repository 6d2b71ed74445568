"""CPU 3D Gaussian splatting trained jointly with a hash-grid radiance field.

The field supplies new splat positions (expected-depth harvesting),
view-dependent splat colors (a residual on degree-0 colors), and virtual
supervision views; no SfM/LiDAR initialization is required.
"""

import ctypes as _ctypes

try:
    # Keep glibc from returning large numpy temporaries to the OS each step:
    # refaulting those pages dominates runtime on sandboxed kernels.
    _libc = _ctypes.CDLL("libc.so.6")
    _libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    _libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
except OSError:  # non-glibc platform
    pass

from .densify import DensifyConfig, EditLog, HarvestReport, adaptive_density_control, harvest_points
from .field import (
    FieldConfig,
    RadianceField,
    render_field_image,
    render_ray,
    render_rays,
    sh_basis,
)
from .geometry import (
    Camera,
    SplatProjection,
    build_covariance,
    contract,
    project_splats,
)
from .metrics import gaussian_loss, psnr, ssim
from .rasterizer import (
    RenderOutput,
    SplatGradients,
    bin_and_sort,
    rasterize_backward,
    rasterize_forward,
)
from .scene_io import Dataset, Frame, load_dataset, load_splats, save_splats, write_manifest
from .splats import Splats, random_splats
from .synth import Primitive, SyntheticSceneSpec, generate_synthetic, toy_scene_spec, trace_image
from .train import (
    TrainConfig,
    TrainState,
    evaluate,
    image_loss_and_gradients,
    train,
    train_step,
)
from .warp import VirtualView, make_virtual_view, perturb_pose, warp_point

__version__ = "0.1.0"
