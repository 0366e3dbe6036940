"""Regular autoregressive decoding and the coarse-to-fine feedback pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .fusion import FusedStep, FusionConfig, fuse_distributions
from .ot import Distribution, GroundMetric
from .views import ImageGrid, ViewParams, ViewSet, decompose

STAGES = ("views", "responses", "feedback", "fusion", "selection")

# probabilities this close to the maximum count as tied for greedy selection
TIE_TOL = 1e-12


class DecodeError(RuntimeError):
    def __init__(self, stage: str, step: int | None, cause: BaseException):
        where = stage if step is None else f"{stage} (step {step})"
        super().__init__(f"{where}: {cause}")
        self.stage = stage
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class DecodeConfig:
    max_new_tokens: int = 64
    selection: str = "greedy"  # "greedy" | "sample"
    temperature: float = 1.0
    sample_seed: int = 0
    fusion: FusionConfig = field(default_factory=FusionConfig)
    views: ViewParams = field(default_factory=ViewParams)
    feedback_enabled: bool = True
    bos_id: int = 0
    eos_id: int = 1

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be at least 1")
        if self.selection not in ("greedy", "sample"):
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.selection == "sample" and not self.temperature > 0:
            raise ValueError("temperature must be positive when sampling")


@dataclass(frozen=True)
class StepRecord:
    p_v: Distribution
    p_c: Distribution | None
    p_f: Distribution | None
    fused: Distribution
    chosen: int
    per_source_cost: tuple[float, float, float] | None
    solver_status: str = "converged"


@dataclass
class DecodeTrace:
    steps: list[StepRecord] = field(default_factory=list)
    r0: list[int] = field(default_factory=list)
    rc: list[int] = field(default_factory=list)
    rf: list[int] = field(default_factory=list)
    rf_fallback: bool = False
    v_c: ImageGrid | None = None
    v_f: ImageGrid | None = None


@dataclass
class DecodeResult:
    tokens: list[int]
    truncated: bool
    trace: DecodeTrace | None = None


def select_token(d: Distribution, selection: str = "greedy", temperature: float = 1.0, seed=0) -> int:
    """Greedy argmax (lowest id on ties) or a seeded temperature-scaled draw.

    ``seed`` may be an int, a seed sequence, or a ``numpy.random.Generator``.
    """
    if selection == "greedy":
        best = d.probs.max()
        return int(d.support_ids[np.flatnonzero(d.probs >= best - TIE_TOL)[0]])
    if selection != "sample":
        raise ValueError(f"unknown selection {selection!r}")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    with np.errstate(divide="ignore"):
        logits = np.log(d.probs) / temperature
    logits -= logits.max()
    w = np.exp(logits)
    return int(d.support_ids[rng.choice(d.size, p=w / w.sum())])


def _select(d: Distribution, cfg: DecodeConfig, step: int) -> int:
    return select_token(d, cfg.selection, cfg.temperature, [cfg.sample_seed, step])


def _autoregress(next_step: Callable[[list[int], int], tuple[int, StepRecord | None]], cfg: DecodeConfig):
    tokens = [cfg.bos_id]
    records = []
    for step in range(cfg.max_new_tokens):
        tok, record = next_step(tokens, step)
        tokens.append(tok)
        if record is not None:
            records.append(record)
        if tok == cfg.eos_id:
            return tokens, False, records
    return tokens, True, records


def _regular(model, views, prompt, cfg: DecodeConfig, keep_records: bool):
    def next_step(prefix, step):
        try:
            d = model.next_distribution(views, prompt, prefix)
        except Exception as exc:
            raise DecodeError("responses", step, exc) from exc
        tok = _select(d, cfg, step)
        rec = StepRecord(d, None, None, d, tok, None) if keep_records else None
        return tok, rec

    return _autoregress(next_step, cfg)


def regular_decode(
    model,
    views: Sequence[ImageGrid],
    prompt: Sequence[int],
    cfg: DecodeConfig = DecodeConfig(),
    trace: bool = False,
) -> DecodeResult:
    """Sample or argmax straight from the model until EOS or the token budget."""
    tokens, truncated, records = _regular(model, list(views), list(prompt), cfg, trace)
    return DecodeResult(tokens, truncated, DecodeTrace(steps=records) if trace else None)


def generate_granular_responses(model, viewset: ViewSet, prompt, cfg: DecodeConfig = DecodeConfig()):
    """Greedy responses on the original, the coarse patches and the fine crops.

    Returns ``(r0, rc, rf, rf_fallback)``; with no fine crops ``rf`` falls
    back to ``r0`` and the flag is set.
    """
    greedy = replace(cfg, selection="greedy")
    r0 = regular_decode(model, [viewset.original], prompt, greedy).tokens
    rc = regular_decode(model, viewset.coarse_images, prompt, greedy).tokens
    if viewset.fine:
        return r0, rc, regular_decode(model, viewset.fine_images, prompt, greedy).tokens, False
    return r0, rc, list(r0), True


def cofidec_decode(
    model,
    synthesizer: Callable[[Sequence[int]], ImageGrid],
    image: ImageGrid,
    prompt: Sequence[int],
    cfg: DecodeConfig,
    metric: GroundMetric,
) -> DecodeResult:
    """Decode with per-token barycentric fusion of three conditionings.

    Stages: decompose ``image``; produce greedy responses on the original,
    coarse and fine views; synthesize a pseudo-image from the coarse and the
    fine response; then at every step fuse the model's distributions given
    the original image, the coarse pseudo-image and the fine pseudo-image.
    With ``feedback_enabled`` off this is exactly ``regular_decode`` on the
    original image.
    """
    prompt = list(prompt)
    if not cfg.feedback_enabled:
        tokens, truncated, records = _regular(model, [image], prompt, cfg, True)
        return DecodeResult(tokens, truncated, DecodeTrace(steps=records))

    try:
        viewset = decompose(image, cfg.views)
    except Exception as exc:
        raise DecodeError("views", None, exc) from exc
    try:
        r0, rc, rf, fallback = generate_granular_responses(model, viewset, prompt, cfg)
    except DecodeError:
        raise
    except Exception as exc:
        raise DecodeError("responses", None, exc) from exc
    try:
        v_c, v_f = synthesizer(rc), synthesizer(rf)
    except Exception as exc:
        raise DecodeError("feedback", None, exc) from exc

    trace = DecodeTrace(r0=r0, rc=rc, rf=rf, rf_fallback=fallback, v_c=v_c, v_f=v_f)

    def next_step(prefix, step):
        try:
            p_v = model.next_distribution([image], prompt, prefix)
            p_c = model.next_distribution([v_c], prompt, prefix)
            p_f = model.next_distribution([v_f], prompt, prefix)
        except Exception as exc:
            raise DecodeError("responses", step, exc) from exc
        try:
            fused: FusedStep = fuse_distributions(p_v, p_c, p_f, metric, cfg.fusion)
        except Exception as exc:
            raise DecodeError("fusion", step, exc) from exc
        try:
            tok = _select(fused.fused, cfg, step)
        except Exception as exc:
            raise DecodeError("selection", step, exc) from exc
        rec = StepRecord(p_v, p_c, p_f, fused.fused, tok, fused.per_source_cost, fused.solver_status)
        return tok, rec

    tokens, truncated, records = _autoregress(next_step, cfg)
    trace.steps = records
    return DecodeResult(tokens, truncated, trace)
