"""Typed access to ``key = value`` configuration files.

Keys are dotted. Every accepted key is listed in ``KEYS``; anything else is
rejected with the offending line number. Arm-specific overrides for the
benchmark use ``arm.<name>.<key>`` with any ``decode.``, ``fusion.`` or
``views.`` key.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Callable

from .bench import POPE_SETUPS, Arm, ExperimentSpec, SceneGenerator
from .decoding import DecodeConfig
from .formats import ConfigEntry, FormatError, parse_cfg, parse_cost, parse_emb
from .fusion import FusionConfig
from .ot import METRIC_KINDS, GroundMetric, SinkhornConfig, build_ground_metric
from .views import ViewParams
from .world import DEFAULT_COLORS, DEFAULT_OBJECTS, CaptionerParams, World, make_world


class ConfigError(FormatError):
    pass


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _ints(n: int | None) -> Callable[[str], tuple[int, ...]]:
    def parse(s: str):
        vals = tuple(int(v) for v in s.split(","))
        if n is not None and len(vals) != n:
            raise ValueError(f"expected {n} comma-separated integers")
        return vals

    return parse


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(","))


def _names(s: str) -> tuple[str, ...]:
    vals = tuple(v.strip() for v in s.split(","))
    if any(not v for v in vals):
        raise ValueError("empty name in list")
    return vals


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s

    return parse


def _auto(inner: Callable[[str], Any]) -> Callable[[str], Any]:
    return lambda s: None if s == "auto" else inner(s)


def _none_or(inner: Callable[[str], Any]) -> Callable[[str], Any]:
    return lambda s: None if s == "none" else inner(s)


ARM_KEYS: dict[str, Callable[[str], Any]] = {
    "decode.max_new_tokens": int,
    "decode.selection": _choice("greedy", "sample"),
    "decode.temperature": float,
    "decode.sample_seed": int,
    "decode.feedback_enabled": _bool,
    "fusion.weights": _floats,
    "fusion.top_k": int,
    "fusion.smoothing_alpha": float,
    "fusion.solver": _choice("exact_lp", "sinkhorn"),
    "fusion.epsilon": float,
    "fusion.max_iter": int,
    "fusion.tol": float,
    "fusion.min_prob": _auto(float),
    "fusion.scaling": _none_or(float),
    "views.grid": _ints(2),
    "views.m": int,
    "views.crop": _auto(_ints(2)),
    "views.downsample": int,
    "views.window": _auto(int),
}

KEYS: dict[str, Callable[[str], Any]] = {
    **ARM_KEYS,
    "captioner.beta": float,
    "captioner.evidence_noise": float,
    "captioner.resolution_penalty": float,
    "captioner.seed": int,
    "captioner.coverage_gain": float,
    "captioner.evidence_floor": float,
    "captioner.detect_threshold": float,
    "captioner.prior_eos": float,
    "captioner.cooccurrence": str,
    "render.cell_px": int,
    "render.noise_sd": float,
    "render.seed": int,
    "metric.kind": _choice(*METRIC_KINDS),
    "metric.embeddings": str,
    "metric.cost": str,
    "world.objects": _names,
    "world.colors": _names,
    "world.frequency": _floats,
    "bench.n_scenes": int,
    "bench.grid": _ints(2),
    "bench.objects": _ints(2),
    "bench.seeds": _ints(None),
    "bench.k": int,
    "bench.pope_setups": lambda s: tuple(_choice(*POPE_SETUPS)(v) for v in _names(s)),
    "bench.arms": _names,
}

_ARM_MODE = _choice("regular", "cofidec")


@dataclass
class Config:
    values: dict[str, Any]
    lines: dict[str, int]
    base_dir: str = "."
    source: str | None = None

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def has(self, key: str) -> bool:
        return key in self.values

    def path(self, key: str) -> str | None:
        v = self.values.get(key)
        if v is None:
            return None
        return v if os.path.isabs(v) else os.path.join(self.base_dir, v)

    def error(self, key: str, message: str) -> ConfigError:
        return ConfigError(f"{key}: {message}", self.lines.get(key), self.source)


def _parser_for(key: str):
    if key in KEYS:
        return KEYS[key]
    parts = key.split(".")
    if len(parts) >= 3 and parts[0] == "arm":
        rest = ".".join(parts[2:])
        if rest == "mode":
            return _ARM_MODE
        return ARM_KEYS.get(rest)
    return None


def parse_config(text: str, source: str | None = None, base_dir: str = ".") -> Config:
    entries: dict[str, ConfigEntry] = parse_cfg(text, source)
    values, lines = {}, {}
    for key, entry in entries.items():
        parser = _parser_for(key)
        if parser is None:
            raise ConfigError(f"unknown key {key!r}", entry.line, source)
        try:
            values[key] = parser(entry.value)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", entry.line, source) from None
        lines[key] = entry.line
    return Config(values, lines, base_dir, source)


def load_config(path: str | None) -> Config:
    if path is None:
        return Config({}, {})
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, path, os.path.dirname(os.path.abspath(path)))


def _read(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _build(cfg: Config, keys: list[str], factory: Callable[[], Any]):
    """Run ``factory`` and attribute a validation failure to the first given key."""
    try:
        return factory()
    except ValueError as exc:
        present = [k for k in keys if cfg.has(k)]
        raise cfg.error(present[0] if present else keys[0], str(exc)) from None


def decode_config(cfg: Config, prefix: str = "", base: DecodeConfig | None = None) -> DecodeConfig:
    """Decode settings from ``<prefix>decode.*``, ``fusion.*`` and ``views.*``.

    Keys missing under ``prefix`` fall back to the unprefixed ones, then to
    the defaults.
    """

    def get(key, default):
        if prefix and cfg.has(prefix + key):
            return cfg.get(prefix + key)
        return cfg.get(key, default)

    def keys_of(group):
        return [prefix + k for k in ARM_KEYS if k.startswith(group)] + [k for k in ARM_KEYS if k.startswith(group)]

    base = base or DecodeConfig()
    sk = base.fusion.sinkhorn
    sinkhorn = _build(
        cfg,
        keys_of("fusion."),
        lambda: SinkhornConfig(
            epsilon=get("fusion.epsilon", sk.epsilon),
            max_iter=get("fusion.max_iter", sk.max_iter),
            tol=get("fusion.tol", sk.tol),
            min_prob=get("fusion.min_prob", sk.min_prob),
            scaling=get("fusion.scaling", sk.scaling),
        ),
    )
    fu = base.fusion
    fusion = _build(
        cfg,
        keys_of("fusion."),
        lambda: FusionConfig(
            weights=get("fusion.weights", fu.weights),
            top_k=get("fusion.top_k", fu.top_k),
            smoothing_alpha=get("fusion.smoothing_alpha", fu.smoothing_alpha),
            solver=get("fusion.solver", fu.solver),
            sinkhorn=sinkhorn,
        ),
    )
    vp = base.views
    views = _build(
        cfg,
        keys_of("views."),
        lambda: ViewParams(
            grid=get("views.grid", vp.grid),
            m=get("views.m", vp.m),
            crop_size=get("views.crop", vp.crop_size),
            downsample_factor=get("views.downsample", vp.downsample_factor),
            window=get("views.window", vp.window),
        ),
    )
    return _build(
        cfg,
        keys_of("decode."),
        lambda: DecodeConfig(
            max_new_tokens=get("decode.max_new_tokens", base.max_new_tokens),
            selection=get("decode.selection", base.selection),
            temperature=get("decode.temperature", base.temperature),
            sample_seed=get("decode.sample_seed", base.sample_seed),
            fusion=fusion,
            views=views,
            feedback_enabled=get("decode.feedback_enabled", base.feedback_enabled),
        ),
    )


def load_world(cfg: Config, objects=None, colors=None) -> World:
    """World from ``world.*`` keys; explicit ``objects``/``colors`` win (e.g. from a scene file)."""
    objects = tuple(objects or cfg.get("world.objects", DEFAULT_OBJECTS))
    colors = tuple(colors or cfg.get("world.colors", DEFAULT_COLORS))
    co = None
    path = cfg.path("captioner.cooccurrence")
    if path:
        co = parse_cost(_read(path), path)
    emb = None
    emb_path = cfg.path("metric.embeddings")
    if emb_path:
        emb = parse_emb(_read(emb_path), emb_path)
    return _build(
        cfg,
        ["world.objects", "world.colors", "world.frequency", "captioner.cooccurrence", "metric.embeddings"],
        lambda: make_world(objects, colors, co, cfg.get("world.frequency"), emb),
    )


def load_metric(cfg: Config, world: World) -> GroundMetric:
    path = cfg.path("metric.cost")
    if path:
        return _build(cfg, ["metric.cost"], lambda: GroundMetric(parse_cost(_read(path), path)))
    kind = cfg.get("metric.kind", "squared_euclidean")
    return build_ground_metric(world.vocab.embeddings, kind)


def captioner_params(cfg: Config) -> CaptionerParams:
    d = CaptionerParams()
    return _build(
        cfg,
        [k for k in KEYS if k.startswith("captioner.")],
        lambda: CaptionerParams(
            bias_beta=cfg.get("captioner.beta", d.bias_beta),
            evidence_noise=cfg.get("captioner.evidence_noise", d.evidence_noise),
            resolution_penalty=cfg.get("captioner.resolution_penalty", d.resolution_penalty),
            seed=cfg.get("captioner.seed", d.seed),
            coverage_gain=cfg.get("captioner.coverage_gain", d.coverage_gain),
            evidence_floor=cfg.get("captioner.evidence_floor", d.evidence_floor),
            detect_threshold=cfg.get("captioner.detect_threshold", d.detect_threshold),
            prior_eos=cfg.get("captioner.prior_eos", d.prior_eos),
        ),
    )


def experiment_spec(cfg: Config, seeds: tuple[int, ...] | None = None, output: str | None = None) -> ExperimentSpec:
    """Benchmark spec; arms default to one regular and one cofidec arm."""
    world = load_world(cfg)
    base = decode_config(cfg)
    names = cfg.get("bench.arms", ("regular", "cofidec"))
    declared = {k.split(".")[1] for k in cfg.values if k.startswith("arm.")}
    unknown = sorted(declared - set(names))
    if unknown:
        key = next(k for k in cfg.values if k.startswith(f"arm.{unknown[0]}."))
        raise cfg.error(key, f"arm {unknown[0]!r} is not listed in bench.arms")
    arms = []
    for name in names:
        mode = cfg.get(f"arm.{name}.mode", name if name in ("regular", "cofidec") else None)
        if mode is None:
            raise cfg.error("bench.arms", f"arm {name!r} needs arm.{name}.mode")
        arms.append(_build(cfg, ["bench.arms"], lambda: Arm(name, mode, decode_config(cfg, f"arm.{name}.", base))))
    lo, hi = cfg.get("bench.objects", (1, 3))
    d = ExperimentSpec()
    return _build(
        cfg,
        [k for k in KEYS if k.startswith(("bench.", "render."))],
        lambda: ExperimentSpec(
            n_scenes=cfg.get("bench.n_scenes", d.n_scenes),
            generator=SceneGenerator(tuple(cfg.get("bench.grid", (4, 4))), lo, hi),
            seeds=tuple(seeds) if seeds else tuple(cfg.get("bench.seeds", d.seeds)),
            cell_px=cfg.get("render.cell_px", d.cell_px),
            noise_sd=cfg.get("render.noise_sd", d.noise_sd),
            captioner=captioner_params(cfg),
            arms=tuple(arms),
            pope_setups=cfg.get("bench.pope_setups", d.pope_setups),
            k=cfg.get("bench.k", d.k),
            metric_kind=cfg.get("metric.kind", d.metric_kind),
            world=world,
            output=output,
        ),
    )
