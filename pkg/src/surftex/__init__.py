"""surftex: multi-view consistent mesh texturing.

Core pieces: a deterministic software rasterizer and its inverse, 3D-aware
attention biases for cross-view self-attention, a view-dependent latent
merge denoising loop, final multi-view texture baking, and surface-space UV
dilation. The generative denoiser sits behind a request/response contract so
the whole pipeline runs against either the deterministic synthetic backend
or a remote diffusion bridge.
"""

__version__ = "0.1.0"

from .attention import (
    BiasMatrix,
    BiasParams,
    DistanceMatrix,
    attention_bias,
    build_view_biases,
    pairwise_distance,
    replace_attention,
    reweigh_attention,
)
from .backends import (
    DenoiseRequest,
    DenoiseResponse,
    RemoteBackend,
    SyntheticBackend,
    ramp_target,
)
from .cameras import ViewCamera, make_camera_ring
from .config import RunConfig, desk_defaults
from .finalize import DilationParams, dilate, merge_final_textures
from .meshes import Mesh, face_adjacency, load_obj, normalize_mesh, save_obj
from .pipeline import run_pipeline
from .raster import (
    RenderedMaps,
    UVMaps,
    downsample_maps,
    inverse_render,
    render_latent,
    render_maps,
    render_uv_space_maps,
)
from .scheduler import (
    LatentTexture,
    NoiseSchedule,
    ViewWeightSchedule,
    blend_latents,
    make_schedule,
    merge_partial_textures,
    texture_ddpm_step,
)
