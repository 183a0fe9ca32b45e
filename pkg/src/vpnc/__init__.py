"""Viewport-based learned compression of 360-degree (ERP) images."""
from .backbone import LAMBDAS, MODEL_KINDS, CodecConfig
from .codec import coding_model, compress_erp, decompress_erp
from .geometry import ExtractionPlan, FieldOfView, ViewportCenter, default_plan, plan_coverage
from .model import ViewportCodec, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "LAMBDAS",
    "MODEL_KINDS",
    "CodecConfig",
    "ExtractionPlan",
    "FieldOfView",
    "ViewportCenter",
    "ViewportCodec",
    "coding_model",
    "compress_erp",
    "decompress_erp",
    "default_plan",
    "load_model",
    "plan_coverage",
    "save_model",
]
