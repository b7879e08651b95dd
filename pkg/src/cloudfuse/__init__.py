"""Cloud removal by diffusion with a learned, per-pixel fusion of a reference prediction."""
from .fusion import clamp_weight, fuse
from .networks import DenoiserBundle, UNetSpec, build_cnp, build_wa
from .reference import ReferenceModel, build_reference, register_reference
from .sampler import SamplerConfig, sample
from .schedule import Schedule, make_schedule

__version__ = "0.1.0"

__all__ = [
    "DenoiserBundle",
    "ReferenceModel",
    "SamplerConfig",
    "Schedule",
    "UNetSpec",
    "build_cnp",
    "build_reference",
    "build_wa",
    "clamp_weight",
    "fuse",
    "make_schedule",
    "register_reference",
    "sample",
]
