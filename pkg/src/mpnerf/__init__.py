"""Neural radiance fields whose 3D representation is a fixed set of posed images.

Sample points are projected onto every reference image, the colors there
are read by bilinear interpolation, and a small MLP turns the collected
features into color and density for volume rendering.
"""

__version__ = "0.1.0"

from .decoder import (  # noqa: E402
    Architecture,
    DecoderParams,
    baseline_forward,
    decoder_backward,
    decoder_forward,
    init_params,
    load_checkpoint,
    positional_encode,
    save_checkpoint,
)
from .geometry import Camera, Ray, invert_pose, project_point, ray_for_pixel  # noqa: E402
from .kernels import BACKEND  # noqa: E402
from .multiplane import (  # noqa: E402
    FeatureMode,
    ReferenceImage,
    ReferenceSet,
    build_feature_matrix,
    build_features,
    mix_references,
    sample_bilinear,
)
from .renderer import RenderConfig, composite, render_image, render_ray, stratified_sample  # noqa: E402
from .trainer import TrainConfig, adam_step, fit_scene, mse_loss, split_views, train_multi_object  # noqa: E402

__all__ = [
    "Architecture", "BACKEND", "Camera", "DecoderParams", "FeatureMode", "Ray", "ReferenceImage", "ReferenceSet",
    "RenderConfig", "TrainConfig", "adam_step", "baseline_forward", "build_feature_matrix", "build_features",
    "composite", "decoder_backward", "decoder_forward", "fit_scene", "init_params", "invert_pose",
    "load_checkpoint", "mix_references", "mse_loss", "positional_encode", "project_point", "ray_for_pixel",
    "render_image", "render_ray", "sample_bilinear", "save_checkpoint", "split_views", "stratified_sample",
    "train_multi_object",
]
