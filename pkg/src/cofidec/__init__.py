"""Coarse-to-fine fused decoding with Wasserstein barycenters, on a synthetic
scene world that stands in for a vision-language model."""

from .bench import (
    Arm,
    ChairReport,
    ExperimentSpec,
    ObjectStats,
    PopeReport,
    SceneGenerator,
    chair_metrics,
    pope_eval,
    pope_questions,
    run_experiment,
)
from .decoding import DecodeConfig, DecodeError, DecodeResult, DecodeTrace, cofidec_decode, regular_decode, select_token
from .fusion import FusedStep, FusionConfig, fuse_distributions
from .ot import (
    Distribution,
    GroundMetric,
    SinkhornConfig,
    build_ground_metric,
    exact_wasserstein,
    lp_barycenter,
    sinkhorn,
    sinkhorn_barycenter,
)
from .views import ImageGrid, ViewParams, ViewSet, decompose
from .world import CaptionerParams, FeedbackSynthesizer, Scene, ToyCaptioner, make_world, render_scene

__version__ = "0.1.0"

__all__ = [
    "Arm",
    "ChairReport",
    "ExperimentSpec",
    "ObjectStats",
    "PopeReport",
    "SceneGenerator",
    "chair_metrics",
    "pope_eval",
    "pope_questions",
    "run_experiment",
    "DecodeConfig",
    "DecodeError",
    "DecodeResult",
    "DecodeTrace",
    "cofidec_decode",
    "regular_decode",
    "select_token",
    "FusedStep",
    "FusionConfig",
    "fuse_distributions",
    "Distribution",
    "GroundMetric",
    "SinkhornConfig",
    "build_ground_metric",
    "exact_wasserstein",
    "lp_barycenter",
    "sinkhorn",
    "sinkhorn_barycenter",
    "ImageGrid",
    "ViewParams",
    "ViewSet",
    "decompose",
    "CaptionerParams",
    "FeedbackSynthesizer",
    "Scene",
    "ToyCaptioner",
    "make_world",
    "render_scene",
]
