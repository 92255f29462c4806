"""Differentiable RF Gaussian splatting: directional spectrum reconstruction
at a fixed receiver from a learned cloud of 3D Gaussian virtual emitters."""

from .geometry import ViewPose, cull, equirect_jacobian, equirect_project, \
    pixel_to_direction, project_covariance, view_transform
from .image import SpectrumImage, load_rfsi, magnitude, save_pgm, save_rfsi
from .rasterizer import ParamGradients, RenderAux, rasterize_backward, \
    rasterize_forward, rasterize_reference
from .scene import GaussianCloud, SceneBounds, activate_opacity, \
    build_covariance, init_uniform, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
