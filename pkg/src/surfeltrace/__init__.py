"""Differentiable ray tracing and inverse rendering with 2D Gaussian surfels."""

from ._backend import BACKEND
from .scene import Gaussian2D, Ray, Scene, activate, gaussian_response, ray_splat_intersect, sh_eval
from .tracer import Tracer, TraceOptions, TraceResult, trace, trace_aggregate, trace_radiance

__all__ = [
    "BACKEND", "Gaussian2D", "Ray", "Scene", "Tracer", "TraceOptions", "TraceResult",
    "activate", "gaussian_response", "ray_splat_intersect", "sh_eval", "trace",
    "trace_aggregate", "trace_radiance",
]
__version__ = "0.1.0"
