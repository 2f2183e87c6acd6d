"""Multi-weather Gaussian splatting with a differentiable CPU rasterizer."""

from .scene import (
    FEATURE_DIM,
    DECODER_HIDDEN_DIM,
    GaussianNode,
    GaussianPrimitives,
    Renderables,
    SceneGraph,
    SkyNode,
    WeatherDecoder,
    covariance3d,
    decode_color,
)
from .rasterizer import Camera, RenderOutput, Splats2D, composite_sky, project, rasterize, rasterize_backward

__all__ = [
    "FEATURE_DIM",
    "DECODER_HIDDEN_DIM",
    "GaussianNode",
    "GaussianPrimitives",
    "Renderables",
    "SceneGraph",
    "SkyNode",
    "WeatherDecoder",
    "covariance3d",
    "decode_color",
    "Camera",
    "RenderOutput",
    "Splats2D",
    "composite_sky",
    "project",
    "rasterize",
    "rasterize_backward",
]

__version__ = "0.1.0"
