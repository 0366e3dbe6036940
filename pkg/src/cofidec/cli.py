"""``cofidec`` command-line entry point.

Every command validates its inputs, computes all outputs in memory and only
then writes them; if any write fails the files already written are removed.
Exit status is 0 on success, 1 on a runtime or validation failure and 2 on
a usage error.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from typing import Sequence

from .bench import run_experiment
from .config import (
    captioner_params,
    decode_config,
    experiment_spec,
    load_config,
    load_metric,
    load_world,
)
from .decoding import cofidec_decode, regular_decode, select_token
from .formats import (
    fmt,
    format_caption,
    format_dist,
    format_grid,
    format_trace,
    parse_cost,
    parse_dist,
    parse_dump,
    parse_emb,
    parse_grid,
    parse_scene,
    write_atomic,
)
from .fusion import fuse_distributions
from .ot import (
    METRIC_KINDS,
    GroundMetric,
    SinkhornConfig,
    SupportMismatchError,
    barycenter_objective,
    build_ground_metric,
    lp_barycenter,
    sinkhorn_barycenter,
)
from .views import ViewParams, decompose
from .world import FeedbackSynthesizer, ToyCaptioner, render_scene


class CliError(Exception):
    pass


def _read(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}") from None


def _write_all(outputs: Sequence[tuple[str, str]]) -> None:
    """Write each (path, text) atomically; undo earlier writes if a later one fails."""
    written = []
    try:
        for path, text in outputs:
            write_atomic(path, text)
            written.append(path)
    except OSError as exc:
        for path in written:
            os.unlink(path)
        raise CliError(f"cannot write {path}: {exc.strerror or exc}") from None


def _int_pair(s: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated integers, got {s!r}") from None
    return a, b


def _float_list(s: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


# -- barycenter ------------------------------------------------------------


def cmd_barycenter(args) -> int:
    if args.cost is None and args.embeddings is None:
        raise CliError("one of --cost or --embeddings is required")
    if args.cost is not None and args.embeddings is not None:
        raise CliError("--cost and --embeddings are mutually exclusive")
    dists = [parse_dist(_read(p), p) for p in args.dists]
    if args.cost is not None:
        metric = GroundMetric(parse_cost(_read(args.cost), args.cost))
    else:
        metric = build_ground_metric(parse_emb(_read(args.embeddings), args.embeddings), args.metric)
    top = max(int(d.support_ids[-1]) for d in dists)
    if metric.size <= top:
        raise SupportMismatchError(f"cost covers {metric.size} tokens but distributions use id {top}")
    weights = args.weights
    if weights is not None and len(weights) != len(dists):
        raise CliError(f"{len(weights)} weights for {len(dists)} distributions")
    if args.solver == "exact":
        result = lp_barycenter(dists, weights, metric)
    else:
        result = sinkhorn_barycenter(dists, weights, metric, SinkhornConfig(epsilon=args.epsilon))
    objective = barycenter_objective(result.barycenter, dists, weights, metric)
    comments = [f"objective = {fmt(objective)}", f"solver = {args.solver}"]
    if args.solver == "sinkhorn":
        comments.append(f"converged = {str(result.converged).lower()}")
    _write_all([(args.out, format_dist(result.barycenter, comments))])
    return 0


# -- decode ----------------------------------------------------------------


def cmd_decode(args) -> int:
    cfg = load_config(args.config)
    if args.scene is not None:
        scene = parse_scene(_read(args.scene), args.scene)
        world = load_world(cfg, scene.objects, scene.colors)
        image = render_scene(
            scene,
            cfg.get("render.cell_px", 8),
            cfg.get("render.noise_sd", 0.0),
            cfg.get("render.seed", 0),
            world.palette,
        )
    else:
        world = load_world(cfg)
        image = parse_grid(_read(args.image), args.image)
    dcfg = replace(decode_config(cfg), bos_id=world.bos, eos_id=world.eos)
    model = ToyCaptioner(world, captioner_params(cfg))
    want_trace = args.trace is not None
    if args.mode == "regular":
        result = regular_decode(model, [image], [], dcfg, trace=want_trace)
    else:
        synth = FeedbackSynthesizer(world, cfg.get("render.cell_px", 8))
        result = cofidec_decode(model, synth, image, [], dcfg, load_metric(cfg, world))
    outputs = [(args.out, format_caption(result.tokens, world.vocab.names(result.tokens), result.truncated))]
    if want_trace:
        outputs.append((args.trace, format_trace(result.trace)))
    _write_all(outputs)
    return 0


# -- views -----------------------------------------------------------------


def cmd_views(args) -> int:
    image = parse_grid(_read(args.image), args.image)
    params = ViewParams(
        grid=args.n,
        m=args.m,
        crop_size=args.crop,
        downsample_factor=args.downsample,
        window=args.window,
    )
    vs = decompose(image, params)
    files = []
    manifest = [f"views {len(vs.coarse)} {len(vs.fine)}"]
    for i, p in enumerate(vs.coarse):
        name = f"patch_{i}.grid"
        files.append((name, format_grid(p.image)))
        manifest.append(f"patch {i} {' '.join(map(str, p.region))} {p.image.scale} {name}")
    for j, c in enumerate(vs.fine):
        name = f"crop_{j}.grid"
        files.append((name, format_grid(c.pixels)))
        manifest.append(f"crop {j} {' '.join(map(str, c.region))} {fmt(c.saliency_score)} {name}")
    files.append(("manifest.txt", "\n".join(manifest) + "\n"))

    created_dir = not os.path.isdir(args.out)
    try:
        os.makedirs(args.out, exist_ok=True)
        staging = tempfile.mkdtemp(dir=args.out, prefix=".staging-")
    except OSError as exc:
        raise CliError(f"cannot write to {args.out}: {exc.strerror or exc}") from None
    moved = []
    ok = False
    try:
        for name, text in files:
            with open(os.path.join(staging, name), "w", newline="\n") as fh:
                fh.write(text)
        for name, _ in files:
            os.replace(os.path.join(staging, name), os.path.join(args.out, name))
            moved.append(name)
        ok = True
    except OSError as exc:
        for name in moved:
            os.unlink(os.path.join(args.out, name))
        raise CliError(f"cannot write to {args.out}: {exc.strerror or exc}") from None
    finally:
        shutil.rmtree(staging, ignore_errors=True)
        if created_dir and not ok:
            shutil.rmtree(args.out, ignore_errors=True)
    return 0


# -- bench -----------------------------------------------------------------


def cmd_bench(args) -> int:
    cfg = load_config(args.spec)
    spec = experiment_spec(cfg, tuple(args.seed) if args.seed else None, args.out)
    run_experiment(spec)
    return 0


# -- fuse-replay -----------------------------------------------------------


def cmd_fuse_replay(args) -> int:
    cfg = load_config(args.config)
    dcfg = decode_config(cfg)
    steps = parse_dump(_read(args.dump), args.dump)
    metric = GroundMetric(parse_cost(_read(args.cost), args.cost))
    out = []
    for t, (p_v, p_c, p_f) in enumerate(steps):
        try:
            fused = fuse_distributions(p_v, p_c, p_f, metric, dcfg.fusion)
            token = select_token(fused.fused, dcfg.selection, dcfg.temperature, [dcfg.sample_seed, t])
        except ValueError as exc:
            raise CliError(f"step {t}: {exc}") from None
        out.append(f"step {t}")
        out.append(f"token {token}")
        out.append(f"status {fused.solver_status}")
        out.append(format_dist(fused.fused).rstrip("\n"))
    _write_all([(args.out, "\n".join(out) + "\n")])
    return 0


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cofidec", description="Coarse-to-fine fused decoding tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("barycenter", help="Wasserstein barycenter of distribution files")
    b.add_argument("--dists", nargs="+", required=True, metavar="FILE")
    b.add_argument("--cost", metavar="FILE")
    b.add_argument("--embeddings", metavar="FILE")
    b.add_argument("--metric", choices=METRIC_KINDS, default="squared_euclidean")
    b.add_argument("--weights", type=_float_list)
    b.add_argument("--solver", choices=("exact", "sinkhorn"), default="exact")
    b.add_argument("--epsilon", type=float, default=0.01)
    b.add_argument("--out", required=True, metavar="FILE")
    b.set_defaults(func=cmd_barycenter)

    d = sub.add_parser("decode", help="caption a scene or image")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", metavar="FILE")
    src.add_argument("--image", metavar="FILE")
    d.add_argument("--config", metavar="FILE")
    d.add_argument("--mode", choices=("regular", "cofidec"), default="cofidec")
    d.add_argument("--trace", metavar="FILE")
    d.add_argument("--out", required=True, metavar="FILE")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("views", help="write the coarse patches and fine crops of an image")
    v.add_argument("--image", required=True, metavar="FILE")
    v.add_argument("--n", type=_int_pair, default=(2, 2), metavar="ROWS,COLS")
    v.add_argument("--m", type=int, default=2)
    v.add_argument("--crop", type=_int_pair, metavar="W,H")
    v.add_argument("--downsample", type=int, default=2)
    v.add_argument("--window", type=int)
    v.add_argument("--out", required=True, metavar="DIR")
    v.set_defaults(func=cmd_views)

    r = sub.add_parser("bench", help="run the seeded Regular vs CoFi-Dec experiment")
    r.add_argument("--spec", required=True, metavar="FILE")
    r.add_argument("--seed", type=int, action="append", help="repeatable; overrides bench.seeds")
    r.add_argument("--out", required=True, metavar="FILE")
    r.set_defaults(func=cmd_bench)

    f = sub.add_parser("fuse-replay", help="fuse recorded per-step distribution triples")
    f.add_argument("--dump", required=True, metavar="FILE")
    f.add_argument("--cost", required=True, metavar="FILE")
    f.add_argument("--config", metavar="FILE")
    f.add_argument("--out", required=True, metavar="FILE")
    f.set_defaults(func=cmd_fuse_replay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, RuntimeError, FloatingPointError, OSError) as exc:
        print(f"cofidec {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
