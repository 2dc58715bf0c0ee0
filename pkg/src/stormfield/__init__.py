"""Deterministic 4D Gaussian weather particles, splat compositing, and
numerical kernels for multi-view consistent weather editing."""

from .camera import CameraFrame
from .dynamics import (RigidTransform, Toggles, align_field, recycle, relative_transform,
                       simulate, step)
from .errors import DegenerateInputError, StormfieldError, UnknownStyleError, ValidationError
from .field import (AttributeDistributions, FieldBounds, GaussianDist, ParticleSet, Severity,
                    VelocityModel, WeatherFieldConfig, WeatherType, preset, sample_field,
                    scale_severity)
from .kernels import (AdapterStack, AttentionBatch, FeatureGrid, adapter_forward,
                      adapter_register_style, scaled_dot_attention, temporal_attn, tv_attn,
                      view_attn)
from .metrics import (ColorHistogram, FlowField, bhattacharyya_distance, clip_ds, clip_s,
                      histogram_of, warp_error)
from .splatter import Splat2D, project, project_one, rasterize, render_sequence

__version__ = "0.1.0"

__all__ = [
    "AdapterStack",
    "AttentionBatch",
    "AttributeDistributions",
    "CameraFrame",
    "ColorHistogram",
    "DegenerateInputError",
    "FeatureGrid",
    "FieldBounds",
    "FlowField",
    "GaussianDist",
    "ParticleSet",
    "RigidTransform",
    "Severity",
    "Splat2D",
    "StormfieldError",
    "Toggles",
    "UnknownStyleError",
    "ValidationError",
    "VelocityModel",
    "WeatherFieldConfig",
    "WeatherType",
    "adapter_forward",
    "adapter_register_style",
    "align_field",
    "bhattacharyya_distance",
    "clip_ds",
    "clip_s",
    "histogram_of",
    "preset",
    "project",
    "project_one",
    "rasterize",
    "recycle",
    "relative_transform",
    "render_sequence",
    "sample_field",
    "scale_severity",
    "scaled_dot_attention",
    "simulate",
    "step",
    "temporal_attn",
    "tv_attn",
    "view_attn",
    "warp_error",
]
