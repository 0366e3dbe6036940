"""Caption hallucination metrics, object-presence probing and the seeded
Regular vs CoFi-Dec experiment runner."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .decoding import DecodeConfig, cofidec_decode, regular_decode
from .formats import Report, fmt, format_report, write_atomic
from .ot import build_ground_metric
from .world import (
    CaptionerParams,
    FeedbackSynthesizer,
    Scene,
    ToyCaptioner,
    World,
    make_world,
    render_scene,
)

POPE_SETUPS = ("random", "popular", "adversarial")
ARM_MODES = ("regular", "cofidec")


@dataclass(frozen=True)
class ChairReport:
    chair_s: float
    chair_i: float
    recall: float
    avg_length: float
    n_captions: int


@dataclass(frozen=True)
class PopeReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    setup: str
    n_questions: int
    yes_ratio: float = 0.0
    n_skipped: int = 0


class NoPositivesError(ValueError):
    """Raised for a scene with no objects, which admits no positive question."""


def _mentions(tokens: Sequence[int], world: World) -> tuple[set[int], int]:
    """Distinct objects mentioned and the number of content (object/color) tokens."""
    n_vocab = len(world.vocab)
    objs: set[int] = set()
    content = 0
    for t in tokens:
        if not 0 <= t < n_vocab:
            raise ValueError(f"token id {t} is outside the {n_vocab}-token vocabulary")
        o = world.token_object(t)
        if o is not None:
            objs.add(o)
            content += 1
        elif world.token_color(t) is not None:
            content += 1
    return objs, content


def chair_metrics(captions: Sequence[Sequence[int]], scenes: Sequence[Scene], world: World) -> ChairReport:
    """Caption-level and mention-level hallucination rates.

    Each caption's mentions are its distinct objects. ``chair_i`` pools
    mentions over all captions; recall is averaged over scenes that contain
    at least one object.
    """
    if len(captions) != len(scenes):
        raise ValueError(f"{len(captions)} captions for {len(scenes)} scenes")
    if not captions:
        raise ValueError("at least one caption is required")
    hallucinated_captions = 0
    mentions = hallucinated = 0
    recalls = []
    lengths = []
    for tokens, scene in zip(captions, scenes):
        objs, content = _mentions(tokens, world)
        present = scene.present_objects
        bad = len(objs - present)
        mentions += len(objs)
        hallucinated += bad
        hallucinated_captions += bad > 0
        if present:
            recalls.append(len(objs & present) / len(present))
        lengths.append(content)
    return ChairReport(
        chair_s=hallucinated_captions / len(captions),
        chair_i=hallucinated / mentions if mentions else 0.0,
        recall=float(np.mean(recalls)) if recalls else 0.0,
        avg_length=float(np.mean(lengths)),
        n_captions=len(captions),
    )


@dataclass(frozen=True, eq=False)
class ObjectStats:
    frequency: np.ndarray
    cooccurrence: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frequency, dtype=np.float64)
        c = np.asarray(self.cooccurrence, dtype=np.float64)
        if f.ndim != 1 or c.shape != (f.size, f.size):
            raise ValueError("frequency and cooccurrence tables must cover the same objects")
        object.__setattr__(self, "frequency", f)
        object.__setattr__(self, "cooccurrence", c)

    @classmethod
    def from_world(cls, world: World) -> "ObjectStats":
        return cls(world.frequency, world.cooccurrence)


def _ranked(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    # highest score first, lower id on ties
    return candidates[np.argsort(-scores[candidates], kind="stable")]


def pope_questions(scene: Scene, setup: str, k: int, stats: ObjectStats, seed=0) -> list[tuple[int, bool]]:
    """Balanced yes/no object questions for one scene.

    ``k`` is clamped to what the scene can support: at most as many
    positives as objects present and negatives as objects absent. Positives
    are a seeded sample of present objects. Negatives are a seeded uniform
    sample of absent objects (``random``), the most frequent absent objects
    (``popular``) or the absent objects with the largest summed
    cooccurrence with the present ones (``adversarial``).
    """
    if setup not in POPE_SETUPS:
        raise ValueError(f"unknown setup {setup!r}; expected one of {POPE_SETUPS}")
    if k < 1:
        raise ValueError("k must be at least 1")
    n_obj = stats.frequency.size
    if len(scene.objects) != n_obj:
        raise ValueError("object statistics do not cover the scene vocabulary")
    present = np.array(sorted(scene.present_objects), dtype=np.int64)
    if present.size == 0:
        raise NoPositivesError("scene has no objects, so no positive question exists")
    absent = np.setdiff1d(np.arange(n_obj), present)
    k = min(k, present.size, absent.size) if absent.size else min(k, present.size)
    rng = np.random.default_rng(seed)
    positives = rng.choice(present, size=k, replace=False)
    if absent.size == 0:
        negatives = np.array([], dtype=np.int64)
    elif setup == "random":
        negatives = rng.choice(absent, size=k, replace=False)
    elif setup == "popular":
        negatives = _ranked(stats.frequency, absent)[:k]
    else:
        co = stats.cooccurrence * (1 - np.eye(n_obj))
        negatives = _ranked(co[present].sum(axis=0), absent)[:k]
    return [(int(o), True) for o in positives] + [(int(o), False) for o in negatives]


def confusion_report(truth: Sequence[bool], answers: Sequence[bool], setup: str, n_skipped: int = 0) -> PopeReport:
    t = np.asarray(truth, dtype=bool)
    a = np.asarray(answers, dtype=bool)
    n = t.size
    tp = int(np.sum(t & a))
    fp = int(np.sum(~t & a))
    fn = int(np.sum(t & ~a))
    tn = int(np.sum(~t & ~a))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return PopeReport(
        accuracy=(tp + tn) / n if n else 0.0,
        precision=precision,
        recall=recall,
        f1=f1,
        setup=setup,
        n_questions=n,
        yes_ratio=(tp + fp) / n if n else 0.0,
        n_skipped=n_skipped,
    )


def pope_eval(
    answerer: Callable[[int, int], bool],
    scenes: Sequence[Scene],
    setup: str,
    k: int = 3,
    seed: int = 0,
    stats: ObjectStats | None = None,
) -> PopeReport:
    """Ask every scene its questions and score the answers.

    ``answerer(i, obj)`` answers whether object ``obj`` is in ``scenes[i]``.
    Scenes without objects are skipped and counted.
    """
    if stats is None:
        raise ValueError("object statistics are required")
    truth, answers = [], []
    skipped = 0
    for i, scene in enumerate(scenes):
        try:
            qs = pope_questions(scene, setup, k, stats, [seed, i])
        except NoPositivesError:
            skipped += 1
            continue
        for obj, gt in qs:
            truth.append(gt)
            answers.append(bool(answerer(i, obj)))
    return confusion_report(truth, answers, setup, skipped)


def caption_answerer(captions: Sequence[Sequence[int]], world: World) -> Callable[[int, int], bool]:
    """Presence judged by whether the i-th caption mentions the object."""
    mentioned = [_mentions(c, world)[0] for c in captions]
    return lambda i, obj: obj in mentioned[i]


# -- experiment runner -----------------------------------------------------


@dataclass(frozen=True)
class SceneGenerator:
    """Scenes with a uniform object count, frequency-weighted distinct objects,
    distinct cells and uniform colors."""

    grid: tuple[int, int] = (4, 4)
    min_objects: int = 1
    max_objects: int = 3

    def __post_init__(self):
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("object count range must satisfy 0 <= min <= max")
        if self.max_objects > self.grid[0] * self.grid[1]:
            raise ValueError("more objects than grid cells")

    def generate(self, n: int, seed, world: World) -> list[Scene]:
        if self.max_objects > world.n_objects:
            raise ValueError("more objects per scene than object types")
        gw, gh = self.grid
        rng = np.random.default_rng(seed)
        scenes = []
        for _ in range(n):
            count = int(rng.integers(self.min_objects, self.max_objects + 1))
            objs = rng.choice(world.n_objects, size=count, replace=False, p=world.frequency)
            cells = rng.choice(gw * gh, size=count, replace=False)
            cols = rng.integers(0, len(world.colors), size=count)
            placements = tuple(
                (int(c % gw), int(c // gw), int(o), int(k)) for c, o, k in zip(cells, objs, cols)
            )
            scenes.append(Scene(gw, gh, placements, world.objects, world.colors))
        return scenes


@dataclass(frozen=True)
class Arm:
    name: str
    mode: str = "regular"
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def __post_init__(self):
        if self.mode not in ARM_MODES:
            raise ValueError(f"unknown arm mode {self.mode!r}; expected one of {ARM_MODES}")
        if not self.name or "/" in self.name or any(ch.isspace() for ch in self.name):
            raise ValueError(f"arm name {self.name!r} must be nonempty without '/' or whitespace")


@dataclass(frozen=True, eq=False)
class ExperimentSpec:
    n_scenes: int = 200
    generator: SceneGenerator = field(default_factory=SceneGenerator)
    seeds: tuple[int, ...] = (7,)
    cell_px: int = 8
    noise_sd: float = 0.05
    captioner: CaptionerParams = field(default_factory=CaptionerParams)
    arms: tuple[Arm, ...] = (Arm("regular", "regular"), Arm("cofidec", "cofidec"))
    pope_setups: tuple[str, ...] = POPE_SETUPS
    k: int = 3
    metric_kind: str = "squared_euclidean"
    world: World | None = None
    output: str | None = None

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be at least 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not self.arms:
            raise ValueError("at least one arm is required")
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ValueError("arm names must be unique")
        for s in self.pope_setups:
            if s not in POPE_SETUPS:
                raise ValueError(f"unknown POPE setup {s!r}")
        if self.k < 1:
            raise ValueError("k must be at least 1")

    def resolved_world(self) -> World:
        return self.world if self.world is not None else make_world()


@dataclass
class ArmRun:
    captions: list[list[int] | None]
    failures: list[tuple[int, str]]


@dataclass
class SeedRun:
    seed: int
    scenes: list[Scene]
    arms: dict[str, ArmRun]
    metrics: dict[str, dict[str, float]]


def _decode_arm(arm: Arm, spec: ExperimentSpec, world, captioner, metric, images) -> ArmRun:
    synth = FeedbackSynthesizer(world, spec.cell_px)
    captions: list[list[int] | None] = []
    failures = []
    for i, img in enumerate(images):
        try:
            if arm.mode == "regular":
                res = regular_decode(captioner, [img], [], arm.decode)
            else:
                res = cofidec_decode(captioner, synth, img, [], arm.decode, metric)
            captions.append(res.tokens)
        except Exception as exc:  # recorded per scene; the run continues
            captions.append(None)
            failures.append((i, f"{type(exc).__name__}: {exc}"))
    return ArmRun(captions, failures)


def run_seed(spec: ExperimentSpec, seed: int) -> SeedRun:
    world = spec.resolved_world()
    captioner = ToyCaptioner(world, spec.captioner)
    metric = build_ground_metric(world.vocab.embeddings, spec.metric_kind)
    stats = ObjectStats.from_world(world)
    scenes = spec.generator.generate(spec.n_scenes, seed, world)
    images = [render_scene(sc, spec.cell_px, spec.noise_sd, [seed, i], world.palette) for i, sc in enumerate(scenes)]
    arms, metrics = {}, {}
    for arm in spec.arms:
        run = _decode_arm(arm, spec, world, captioner, metric, images)
        arms[arm.name] = run
        ok = [i for i, c in enumerate(run.captions) if c is not None]
        caps = [run.captions[i] for i in ok]
        sc_ok = [scenes[i] for i in ok]
        m: dict[str, float] = {"failures": float(len(run.failures))}
        if ok:
            chair = chair_metrics(caps, sc_ok, world)
            for key in ("chair_s", "chair_i", "recall", "avg_length", "n_captions"):
                m[f"chair/{key}"] = float(getattr(chair, key))
            answer = caption_answerer(caps, world)
            for setup in spec.pope_setups:
                pope = pope_eval(answer, sc_ok, setup, spec.k, seed, stats)
                for key in ("accuracy", "precision", "recall", "f1", "yes_ratio", "n_questions"):
                    m[f"pope-{setup}/{key}"] = float(getattr(pope, key))
        metrics[arm.name] = m
    return SeedRun(seed, scenes, arms, metrics)


def describe(spec: ExperimentSpec) -> list[tuple[str, str]]:
    """Config echo, using the same keys a spec file accepts."""
    p = spec.captioner
    rows = [
        ("bench.n_scenes", str(spec.n_scenes)),
        ("bench.grid", f"{spec.generator.grid[0]},{spec.generator.grid[1]}"),
        ("bench.objects", f"{spec.generator.min_objects},{spec.generator.max_objects}"),
        ("bench.seeds", ",".join(str(s) for s in spec.seeds)),
        ("bench.k", str(spec.k)),
        ("bench.pope_setups", ",".join(spec.pope_setups)),
        ("bench.arms", ",".join(a.name for a in spec.arms)),
        ("render.cell_px", str(spec.cell_px)),
        ("render.noise_sd", fmt(spec.noise_sd)),
        ("metric.kind", spec.metric_kind),
        ("captioner.beta", fmt(p.bias_beta)),
        ("captioner.evidence_noise", fmt(p.evidence_noise)),
        ("captioner.resolution_penalty", fmt(p.resolution_penalty)),
        ("captioner.seed", str(p.seed)),
    ]
    for arm in spec.arms:
        d, f = arm.decode, arm.decode.fusion
        pre = f"arm.{arm.name}"
        rows += [
            (f"{pre}.mode", arm.mode),
            (f"{pre}.decode.max_new_tokens", str(d.max_new_tokens)),
            (f"{pre}.decode.selection", d.selection),
            (f"{pre}.decode.feedback_enabled", str(d.feedback_enabled).lower()),
            (f"{pre}.fusion.solver", f.solver),
            (f"{pre}.fusion.top_k", str(f.top_k)),
            (f"{pre}.fusion.weights", ",".join(fmt(w) for w in f.weights)),
            (f"{pre}.fusion.epsilon", fmt(f.sinkhorn.epsilon)),
            (f"{pre}.views.grid", f"{d.views.grid[0]},{d.views.grid[1]}"),
            (f"{pre}.views.m", str(d.views.m)),
        ]
    return rows


def build_report(spec: ExperimentSpec, runs: Sequence[SeedRun]) -> Report:
    world = spec.resolved_world()
    report = Report()
    report.section("config").extend(describe(spec))
    stats = report.section("object_stats")
    stats.append(("frequency", ",".join(fmt(x) for x in world.frequency)))
    for i, row in enumerate(world.cooccurrence):
        stats.append((f"cooccurrence.{world.objects[i]}", ",".join(fmt(x) for x in row)))

    repeated = len(runs) > 1
    for arm in spec.arms:
        per_seed = [r.metrics[arm.name] for r in runs]
        keys = [k for k in per_seed[0] if k != "failures"]
        for r in per_seed[1:]:
            keys += [k for k in r if k != "failures" and k not in keys]
        suites: dict[str, list[str]] = {}
        for key in keys:
            suite, metric = key.split("/", 1)
            suites.setdefault(suite, []).append(metric)
        for suite, names in suites.items():
            rows = report.section(f"{arm.name}/{suite}")
            for metric in names:
                vals = np.array([m[f"{suite}/{metric}"] for m in per_seed if f"{suite}/{metric}" in m])
                rows.append((metric, fmt(vals.mean())))
                if repeated:
                    rows.append((f"{metric}.std", fmt(vals.std())))
        fail_rows = report.section(f"{arm.name}/failures")
        fail_rows.append(("count", str(sum(len(r.arms[arm.name].failures) for r in runs))))
        for r in runs:
            for i, msg in r.arms[arm.name].failures:
                fail_rows.append((f"seed{r.seed}.scene{i}", msg.replace("\n", " ")))
    report.section("seeds").append(("seeds", ",".join(str(r.seed) for r in runs)))
    return report


def run_experiment(spec: ExperimentSpec, output: str | None = None) -> Report:
    """Run every seed, write the report to ``output`` (or ``spec.output``) and return it."""
    runs = [run_seed(spec, s) for s in spec.seeds]
    report = build_report(spec, runs)
    path = output or spec.output
    if path:
        write_atomic(path, format_report(report, ["cofidec experiment report"]))
    return report
