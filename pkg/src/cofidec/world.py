"""Synthetic scene world standing in for the vision-language model and the
text-to-image generator.

Scenes are grids of cells, each holding at most one (object, color)
placement. A placement renders as a ``cell_px`` square block over three
channels:

* channel 0 -- object tone, optionally modulated by a +/- checkerboard
  texture. Textured objects share their mean tone with a solid twin, so
  2x average pooling makes the pair indistinguishable;
* channel 1 -- color value (always >= 0.25 on foreground);
* channel 2 -- a 0/1 checkerboard marking foreground.

``ToyCaptioner`` reads those signatures back out of arbitrary views and
mixes the resulting evidence with a cooccurrence language prior.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .ot import Distribution
from .views import ImageGrid

BOS, EOS, AND, SEP = "BOS", "EOS", "AND", "SEP"
STRUCTURAL = (BOS, EOS, AND, SEP)

DEFAULT_OBJECTS = ("cube", "sphere", "cone", "cylinder", "torus", "pyramid")
DEFAULT_COLORS = ("red", "green", "blue", "yellow")
# two strongly coupled pairs: cube<->cylinder and cone<->torus
DEFAULT_TRAP_PAIRS = ((0, 3), (2, 4))
DEFAULT_FREQUENCY = (0.25, 0.2, 0.2, 0.15, 0.1, 0.1)

FOREGROUND_MIN = 0.125


@dataclass(frozen=True, eq=False)
class Palette:
    tone: np.ndarray  # per object, channel 0 mean
    texture: np.ndarray  # per object, checkerboard amplitude on channel 0
    color_value: np.ndarray  # per color, channel 1
    match_tol: float

    @classmethod
    def default(cls, n_objects: int, n_colors: int) -> "Palette":
        """Solid objects first, then textured twins of the interior solid tones."""
        n_tex = n_objects // 3
        n_solid = n_objects - n_tex
        solid = np.linspace(0.2, 0.8, n_solid) if n_solid > 1 else np.array([0.5])
        tone = np.concatenate([solid, solid[1 : 1 + n_tex]])
        if tone.size < n_objects:
            raise ValueError(f"cannot build a palette for {n_objects} objects")
        texture = np.zeros(n_objects)
        texture[n_solid:] = np.minimum(0.3, np.minimum(tone[n_solid:], 1 - tone[n_solid:]))
        spacing = float(np.diff(solid).min()) if n_solid > 1 else 1.0
        color_value = np.linspace(0.25, 1.0, n_colors) if n_colors > 1 else np.array([1.0])
        return cls(tone, texture, color_value, min(0.08, spacing / 2.5))


@dataclass(frozen=True, eq=False)
class CaptionVocab:
    tokens: tuple[str, ...]
    embeddings: np.ndarray

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("token names must be unique")
        if EOS not in self.tokens:
            raise ValueError("vocabulary must contain EOS")
        emb = np.array(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(self.tokens):
            raise ValueError("need exactly one embedding vector per token")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def id(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown token {name!r}") from None

    def ids(self, names: Sequence[str]) -> list[int]:
        return [self.id(n) for n in names]

    def names(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def default_embeddings(n_tokens: int, eos: int) -> np.ndarray:
    """EOS at the origin, every other token on a private axis.

    Squared distances are 1 between any two content or structural tokens
    and 0.5 from any token to EOS, so when sources disagree on what to say
    next, stopping is the cheapest compromise.
    """
    emb = np.eye(n_tokens) * np.sqrt(0.5)
    emb[eos] = 0.0
    return emb


@dataclass(frozen=True, eq=False)
class World:
    objects: tuple[str, ...]
    colors: tuple[str, ...]
    vocab: CaptionVocab
    palette: Palette
    cooccurrence: np.ndarray
    frequency: np.ndarray

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def object_token(self, obj: int) -> int:
        return len(STRUCTURAL) + len(self.colors) + obj

    def color_token(self, color: int) -> int:
        return len(STRUCTURAL) + color

    def token_object(self, token: int) -> int | None:
        obj = token - len(STRUCTURAL) - len(self.colors)
        return obj if 0 <= obj < self.n_objects else None

    def token_color(self, token: int) -> int | None:
        col = token - len(STRUCTURAL)
        return col if 0 <= col < len(self.colors) else None

    @property
    def bos(self) -> int:
        return self.vocab.id(BOS)

    @property
    def eos(self) -> int:
        return self.vocab.id(EOS)

    @property
    def and_(self) -> int:
        return self.vocab.id(AND)

    @property
    def sep(self) -> int:
        return self.vocab.id(SEP)


def default_cooccurrence(n_objects: int, pairs=DEFAULT_TRAP_PAIRS, strength: float = 20.0):
    co = np.ones((n_objects, n_objects)) - np.eye(n_objects)
    for a, b in pairs:
        if a < n_objects and b < n_objects:
            co[a, b] = co[b, a] = strength
    return co


def make_world(
    objects=DEFAULT_OBJECTS,
    colors=DEFAULT_COLORS,
    cooccurrence=None,
    frequency=None,
    embeddings=None,
) -> World:
    objects, colors = tuple(objects), tuple(colors)
    tokens = STRUCTURAL + colors + objects
    if embeddings is None:
        embeddings = default_embeddings(len(tokens), tokens.index(EOS))
    if cooccurrence is None:
        cooccurrence = default_cooccurrence(len(objects))
    co = np.array(cooccurrence, dtype=np.float64)
    if co.shape != (len(objects), len(objects)) or co.min() < 0:
        raise ValueError("cooccurrence must be a nonnegative objects x objects matrix")
    if frequency is None:
        if objects == DEFAULT_OBJECTS:
            frequency = DEFAULT_FREQUENCY
        else:
            frequency = np.full(len(objects), 1.0 / len(objects))
    freq = np.asarray(frequency, dtype=np.float64)
    if freq.shape != (len(objects),) or freq.min() < 0 or freq.sum() <= 0:
        raise ValueError("frequency needs one nonnegative weight per object with a positive sum")
    return World(
        objects,
        colors,
        CaptionVocab(tokens, embeddings),
        Palette.default(len(objects), len(colors)),
        co,
        freq / freq.sum(),
    )


@dataclass(frozen=True)
class Scene:
    grid_w: int
    grid_h: int
    placements: tuple[tuple[int, int, int, int], ...]  # (cell_x, cell_y, object, color)
    objects: tuple[str, ...] = DEFAULT_OBJECTS
    colors: tuple[str, ...] = DEFAULT_COLORS

    def __post_init__(self):
        if self.grid_w < 1 or self.grid_h < 1:
            raise ValueError("scene grid must be at least 1x1")
        placements = tuple(tuple(int(v) for v in p) for p in self.placements)
        seen = set()
        for x, y, o, c in placements:
            if not (0 <= x < self.grid_w and 0 <= y < self.grid_h):
                raise ValueError(f"cell ({x}, {y}) outside {self.grid_w}x{self.grid_h} grid")
            if (x, y) in seen:
                raise ValueError(f"cell ({x}, {y}) holds more than one placement")
            if not 0 <= o < len(self.objects):
                raise ValueError(f"object id {o} out of range")
            if not 0 <= c < len(self.colors):
                raise ValueError(f"color id {c} out of range")
            seen.add((x, y))
        object.__setattr__(self, "placements", placements)
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "colors", tuple(self.colors))

    @property
    def present_objects(self) -> frozenset[int]:
        return frozenset(p[2] for p in self.placements)


def render_scene(
    scene: Scene,
    cell_px: int = 8,
    noise_sd: float = 0.0,
    seed: int = 0,
    palette: Palette | None = None,
) -> ImageGrid:
    if cell_px < 2:
        raise ValueError("cell_px must be at least 2")
    if noise_sd < 0:
        raise ValueError("noise_sd must be nonnegative")
    if palette is None:
        palette = Palette.default(len(scene.objects), len(scene.colors))
    h, w = scene.grid_h * cell_px, scene.grid_w * cell_px
    px = np.zeros((h, w, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    checker = ((xx + yy) % 2 == 0).astype(np.float64)
    sign = 2 * checker - 1
    for cx, cy, obj, col in scene.placements:
        sl = (slice(cy * cell_px, (cy + 1) * cell_px), slice(cx * cell_px, (cx + 1) * cell_px))
        px[sl + (0,)] = palette.tone[obj] + palette.texture[obj] * sign[sl]
        px[sl + (1,)] = palette.color_value[col]
        px[sl + (2,)] = checker[sl]
    if noise_sd > 0:
        rng = np.random.default_rng(seed)
        px = np.clip(px + rng.normal(0.0, noise_sd, px.shape), 0.0, 1.0)
    return ImageGrid(px)


@dataclass(frozen=True, eq=False)
class CaptionerParams:
    """Knobs of the toy captioner.

    ``bias_beta`` weights the cooccurrence prior against visual evidence.
    ``coverage_gain`` maps the fraction of a view covered by an object to
    detection strength (strength = min(1, gain * fraction)), so zoomed-in
    views see objects more clearly. Detections on pooled views are scaled
    by ``(1 - resolution_penalty)`` per halving of resolution.
    """

    bias_beta: float = 0.0
    cooccurrence: np.ndarray | None = None
    evidence_noise: float = 0.0
    resolution_penalty: float = 0.2
    seed: int = 0
    coverage_gain: float = 4.0
    evidence_floor: float = 0.05
    detect_threshold: float = 0.1
    prior_eos: float = 0.05

    def __post_init__(self):
        if not 0 <= self.bias_beta <= 1:
            raise ValueError("bias_beta must lie in [0, 1]")
        if not 0 <= self.resolution_penalty <= 1:
            raise ValueError("resolution_penalty must lie in [0, 1]")
        if self.evidence_noise < 0:
            raise ValueError("evidence_noise must be nonnegative")
        if self.cooccurrence is not None:
            co = np.array(self.cooccurrence, dtype=np.float64)
            if co.ndim != 2 or co.shape[0] != co.shape[1] or co.min() < 0:
                raise ValueError("cooccurrence must be a square nonnegative matrix")
            object.__setattr__(self, "cooccurrence", co)


class ConditionalModel(Protocol):
    def next_distribution(self, views: Sequence[ImageGrid], prompt: Sequence[int], prefix: Sequence[int]) -> Distribution: ...


class MalformedPrefixError(ValueError):
    pass


def _row_normalized(co: np.ndarray) -> np.ndarray:
    co = co * (1 - np.eye(co.shape[0]))
    sums = co.sum(axis=1, keepdims=True)
    uniform = (1 - np.eye(co.shape[0])) / max(1, co.shape[0] - 1)
    return np.where(sums > 0, co / np.where(sums > 0, sums, 1), uniform)


def signature_strengths(view: ImageGrid, palette: Palette, gain: float, penalty: float) -> np.ndarray:
    """Per-object detection strength for one view.

    The view is cut into aligned 2x2 windows; a foreground window is matched
    to the nearest (mean tone, mean absolute deviation) palette signature.
    """
    px = view.pixels
    h, w, c = px.shape
    n_obj = palette.tone.size
    h2, w2 = h // 2 * 2, w // 2 * 2
    if c < 2 or h2 == 0 or w2 == 0:
        return np.zeros(n_obj)
    blocks = px[:h2, :w2].reshape(h2 // 2, 2, w2 // 2, 2, c)
    tone = blocks[..., 0]
    m0 = tone.mean(axis=(1, 3))
    d0 = np.abs(tone - m0[:, None, :, None]).mean(axis=(1, 3))
    fg = blocks[..., 1].mean(axis=(1, 3)) >= FOREGROUND_MIN
    dist = np.hypot(m0[..., None] - palette.tone, d0[..., None] - palette.texture)
    best = dist.argmin(axis=-1)
    ok = fg & (dist.min(axis=-1) <= palette.match_tol)
    counts = np.bincount(best[ok], minlength=n_obj)
    frac = counts * 4.0 / (h * w)
    levels = math.log2(view.scale) if view.scale > 1 else 0.0
    return np.minimum(1.0, gain * frac) * (1.0 - penalty) ** levels


def _view_key(view: ImageGrid) -> bytes:
    h = hashlib.blake2b(view.pixels.tobytes(), digest_size=16)
    h.update(repr((view.pixels.shape, view.scale)).encode())
    return h.digest()


class ToyCaptioner:
    """Grammar-constrained captioner over the world's vocabulary.

    Captions are ``BOS obj AND obj ... EOS``. At every step the next-token
    distribution is ``(1 - beta) * evidence + beta * prior``:

    * evidence comes from object signatures detected in the views (max over
      views per object). After an object, it asks to continue while
      detected objects remain unmentioned; once they are all mentioned it
      stops with probability equal to the weakest detection strength,
      rising toward 1 for every extra mention beyond the detected count.
      Before a new object the evidence covers only unmentioned detections;
      when none remain, the mass not spent on stopping is spread evenly
      over the unmentioned objects;
    * the prior scores unmentioned objects by cooccurrence with those
      already mentioned, and asks to continue in proportion to the
      strongest such association.

    The prompt is accepted for interface compatibility and ignored.
    """

    def __init__(self, world: World, params: CaptionerParams = CaptionerParams()):
        self.world = world
        self.params = params
        co = params.cooccurrence if params.cooccurrence is not None else world.cooccurrence
        if co.shape != (world.n_objects, world.n_objects):
            raise ValueError("cooccurrence size does not match the object vocabulary")
        self._prior = _row_normalized(co)
        # detection is a pure function of the view; memoized by content digest
        self._cache: dict[bytes, np.ndarray] = {}

    def detect(self, views: Sequence[ImageGrid]) -> np.ndarray:
        """Per-object detection strength in [0, 1], aggregated by max over views."""
        if not views:
            raise ValueError("at least one view is required")
        p = self.params
        keys = [_view_key(v) for v in views]
        per_view = []
        for key, v in zip(keys, views):
            if key not in self._cache:
                self._cache[key] = signature_strengths(
                    v, self.world.palette, p.coverage_gain, p.resolution_penalty
                )
            per_view.append(self._cache[key])
        s = np.max(per_view, axis=0)
        if p.evidence_noise > 0:
            digest = hashlib.blake2b(b"".join(keys), digest_size=8)
            rng = np.random.default_rng([p.seed, int.from_bytes(digest.digest(), "little")])
            s = np.clip(s + p.evidence_noise * rng.standard_normal(s.size), 0.0, 1.0)
        return s

    def _state(self, prefix: Sequence[int]) -> tuple[str, list[int]]:
        world = self.world
        if not prefix or prefix[0] != world.bos:
            raise MalformedPrefixError("prefix must begin with BOS")
        mentioned = []
        for t in prefix[1:]:
            if t == world.eos:
                raise MalformedPrefixError("prefix already contains EOS")
            if t == world.bos:
                raise MalformedPrefixError("BOS may only open the prefix")
            obj = world.token_object(t)
            if obj is not None and obj not in mentioned:
                mentioned.append(obj)
        last = prefix[-1]
        if last in (world.bos, world.and_, world.sep):
            state = "start"
        elif world.token_color(last) is not None:
            state = "color"
        elif world.token_object(last) is not None:
            state = "after_object"
        else:
            raise MalformedPrefixError(f"unexpected token id {last}")
        return state, mentioned

    def next_distribution(self, views, prompt, prefix) -> Distribution:
        world, p = self.world, self.params
        state, mentioned = self._state(list(prefix))
        s = self.detect(list(views))
        n_obj = world.n_objects
        detected = s >= p.detect_threshold
        unmentioned = np.ones(n_obj, dtype=bool)
        unmentioned[mentioned] = False
        remaining = detected & unmentioned
        excess = max(0, len(mentioned) - int(detected.sum()))
        clarity = float(s[detected].min()) if detected.any() else 1.0
        if remaining.any():
            stop = 0.0
        else:
            stop = 1.0 - (1.0 - clarity) * 0.5**excess

        co = self._prior
        if mentioned:
            assoc = co[mentioned].sum(axis=0) * unmentioned
        else:
            assoc = unmentioned.astype(np.float64)
        if mentioned and unmentioned.any():
            strongest = float(co[np.ix_(mentioned, np.flatnonzero(unmentioned))].max())
        else:
            strongest = 0.0

        ev = np.zeros(len(world.vocab))
        prior = np.zeros(len(world.vocab))
        obj_tokens = np.array([world.object_token(o) for o in range(n_obj)])
        if state in ("start", "color"):
            if remaining.any():
                ev[obj_tokens] = np.where(remaining, np.maximum(s, p.evidence_floor), 0.0)
            else:
                # everything seen is named: stop, or guess among the unnamed with the leftover doubt
                doubt = 1.0 - stop if state == "start" else 1.0
                if unmentioned.any():
                    ev[obj_tokens] = doubt * unmentioned / unmentioned.sum()
                    ev[world.eos] = 1.0 - doubt
                else:
                    ev[world.eos] = 1.0
            if assoc.sum() > 0:
                prior[obj_tokens] = assoc / assoc.sum()
                if state == "start":
                    prior *= 1 - p.prior_eos
                    prior[world.eos] = p.prior_eos
            else:
                prior[world.eos] = 1.0
            if state == "color" and ev[world.eos] > 0:
                # a dangling color can only be completed by an object
                ev[world.eos] = 0.0
                prior[world.eos] = 0.0
                if ev.sum() == 0:
                    ev[obj_tokens] = 1.0
                if prior.sum() == 0:
                    prior[obj_tokens] = 1.0
        else:
            ev[world.and_] = 1.0 - stop
            ev[world.eos] = stop
            prior[world.and_] = strongest
            prior[world.eos] = 1.0 - strongest
        ev /= ev.sum()
        prior /= prior.sum()
        mix = (1 - p.bias_beta) * ev + p.bias_beta * prior
        return Distribution.full(mix / mix.sum())


class ReplayModel:
    """Replays per-step distributions recorded elsewhere, indexed by prefix length."""

    def __init__(self, steps: Sequence[Distribution]):
        self.steps = list(steps)

    def next_distribution(self, views, prompt, prefix) -> Distribution:
        t = len(prefix) - 1
        if not 0 <= t < len(self.steps):
            raise IndexError(f"no recorded distribution for step {t}")
        return self.steps[t]


@dataclass(frozen=True)
class ParsedCaption:
    scene: Scene
    warnings: int


def parse_caption(tokens: Sequence[int], world: World) -> ParsedCaption:
    """Read ``[color] object`` phrases separated by AND/SEP into a scene.

    Phrases are laid out row-major on the smallest square-ish grid that fits
    them (width ceil(sqrt(n))). Objects without a color get color 0.
    Anything that does not fit the grammar is skipped and counted.
    """
    phrases: list[tuple[int, int]] = []
    warnings = 0
    color: int | None = None
    obj: int | None = None

    def close():
        nonlocal color, obj, warnings
        if obj is not None:
            phrases.append((obj, 0 if color is None else color))
        elif color is not None:
            warnings += 1
        color = obj = None

    tokens = list(tokens)
    for i, t in enumerate(tokens):
        if t == world.bos:
            if i != 0:
                warnings += 1
            continue
        if t == world.eos:
            warnings += len(tokens) - i - 1
            break
        if t in (world.and_, world.sep):
            close()
            continue
        o, c = world.token_object(t), world.token_color(t)
        if o is not None and obj is None:
            obj = o
        elif c is not None and color is None and obj is None:
            color = c
        else:
            warnings += 1
    close()
    n = len(phrases)
    width = max(1, math.ceil(math.sqrt(n)))
    height = max(1, math.ceil(n / width))
    placements = tuple((i % width, i // width, o, c) for i, (o, c) in enumerate(phrases))
    return ParsedCaption(Scene(width, height, placements, world.objects, world.colors), warnings)


def synthesize_feedback(text: Sequence[int], world: World, cell_px: int = 8, seed: int = 0) -> ImageGrid:
    """Noiseless rendering of the scene a caption describes."""
    return render_scene(parse_caption(text, world).scene, cell_px, 0.0, seed, world.palette)


@dataclass(frozen=True)
class FeedbackSynthesizer:
    world: World
    cell_px: int = 8
    seed: int = 0

    def __call__(self, text: Sequence[int]) -> ImageGrid:
        return synthesize_feedback(text, self.world, self.cell_px, self.seed)


def scene_signatures(image: ImageGrid, scene_cells: tuple[int, int], palette: Palette) -> list[tuple[int, int]]:
    """Decode the (object, color) signature of every occupied cell of a rendered image."""
    gw, gh = scene_cells
    cell = image.width // gw
    out = []
    for cy in range(gh):
        for cx in range(gw):
            block = image.pixels[cy * cell : (cy + 1) * cell, cx * cell : (cx + 1) * cell]
            if block[..., 1].mean() < FOREGROUND_MIN:
                continue
            tone = block[..., 0]
            m0 = tone.mean()
            d0 = np.abs(tone - m0).mean()
            obj = int(np.argmin(np.hypot(m0 - palette.tone, d0 - palette.texture)))
            col = int(np.argmin(np.abs(block[..., 1].mean() - palette.color_value)))
            out.append((obj, col))
    return out
