"""Line-oriented text formats.

Every format uses LF line endings, ``#`` comments and floats written with 17
significant digits, so ``parse(format(x)) == x`` bit for bit.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .decoding import DecodeTrace, StepRecord
from .ot import Distribution
from .views import ImageGrid
from .world import Scene


class FormatError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = ""
        if source:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.line = line


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _lines(text: str) -> list[tuple[int, list[str]]]:
    """Non-blank, non-comment lines as (1-based line number, tokens)."""
    out = []
    for no, raw in enumerate(text.split("\n"), 1):
        body = raw.split("#", 1)[0].strip()
        if body:
            out.append((no, body.split()))
    return out


class _Reader:
    def __init__(self, text: str, source: str | None = None):
        self.rows = _lines(text)
        self.pos = 0
        self.source = source

    def error(self, msg: str, line: int | None = None):
        if line is None:
            line = self.rows[self.pos - 1][0] if 0 < self.pos <= len(self.rows) else None
        return FormatError(msg, line, self.source)

    def done(self) -> bool:
        return self.pos >= len(self.rows)

    def peek(self):
        return None if self.done() else self.rows[self.pos]

    def next(self, what: str):
        if self.done():
            raise FormatError(f"unexpected end of input, expected {what}", None, self.source)
        row = self.rows[self.pos]
        self.pos += 1
        return row

    def header(self, keyword: str, nargs: int | tuple[int, ...]):
        no, toks = self.next(f"'{keyword}' header")
        allowed = (nargs,) if isinstance(nargs, int) else nargs
        if toks[0] != keyword or len(toks) - 1 not in allowed:
            raise self.error(f"expected '{keyword}' header with {nargs} fields, got {' '.join(toks)!r}", no)
        return no, [self._int(t, no) for t in toks[1:]]

    def _int(self, tok: str, no: int) -> int:
        try:
            return int(tok)
        except ValueError:
            raise self.error(f"expected an integer, got {tok!r}", no) from None

    def floats(self, toks: Sequence[str], no: int) -> list[float]:
        try:
            return [float(t) for t in toks]
        except ValueError:
            raise self.error(f"expected numbers, got {' '.join(toks)!r}", no) from None

    def finish(self):
        if not self.done():
            no, toks = self.rows[self.pos]
            raise self.error(f"unexpected trailing content {' '.join(toks)!r}", no)


# -- distributions ---------------------------------------------------------


def format_dist(d: Distribution, comments: Iterable[str] = ()) -> str:
    out = [f"dist {d.size}"]
    out += [f"{int(i)} {fmt(p)}" for i, p in zip(d.support_ids, d.probs)]
    out += [f"# {c}" for c in comments]
    return "\n".join(out) + "\n"


def _read_dist(r: _Reader) -> Distribution:
    _, (n,) = r.header("dist", 1)
    ids, probs = [], []
    for _ in range(n):
        no, toks = r.next("distribution entry")
        if len(toks) != 2:
            raise r.error("distribution entries are '<token_id> <prob>'", no)
        ids.append(r._int(toks[0], no))
        probs.append(r.floats(toks[1:], no)[0])
    try:
        return Distribution(np.array(probs), np.array(ids, dtype=np.int64))
    except ValueError as exc:
        raise r.error(str(exc)) from None


def parse_dist(text: str, source: str | None = None) -> Distribution:
    r = _Reader(text, source)
    d = _read_dist(r)
    r.finish()
    return d


# -- cost matrices and embeddings -------------------------------------------


def format_cost(costs: np.ndarray) -> str:
    c = np.asarray(costs, dtype=np.float64)
    out = [f"cost {c.shape[0]}"]
    out += [" ".join(fmt(x) for x in row) for row in c]
    return "\n".join(out) + "\n"


def parse_cost(text: str, source: str | None = None) -> np.ndarray:
    r = _Reader(text, source)
    _, (n,) = r.header("cost", 1)
    rows = []
    for _ in range(n):
        no, toks = r.next("cost row")
        if len(toks) != n:
            raise r.error(f"cost rows need {n} values, got {len(toks)}", no)
        rows.append(r.floats(toks, no))
    r.finish()
    return np.array(rows, dtype=np.float64).reshape(n, n)


def format_emb(embeddings: np.ndarray) -> str:
    e = np.asarray(embeddings, dtype=np.float64)
    out = [f"emb {e.shape[0]} {e.shape[1]}"]
    out += [f"{i} " + " ".join(fmt(x) for x in row) for i, row in enumerate(e)]
    return "\n".join(out) + "\n"


def parse_emb(text: str, source: str | None = None) -> np.ndarray:
    """Embeddings indexed by token id; ids must be exactly 0..n-1 in order."""
    r = _Reader(text, source)
    _, (n, dim) = r.header("emb", 2)
    rows = []
    for i in range(n):
        no, toks = r.next("embedding row")
        if len(toks) != dim + 1:
            raise r.error(f"embedding rows need an id and {dim} values", no)
        if r._int(toks[0], no) != i:
            raise r.error(f"expected token id {i}, got {toks[0]}", no)
        rows.append(r.floats(toks[1:], no))
    r.finish()
    return np.array(rows, dtype=np.float64).reshape(n, dim)


# -- images ----------------------------------------------------------------


def format_grid(img: ImageGrid) -> str:
    head = f"grid {img.width} {img.height} {img.channels}"
    if img.scale != 1:
        head += f" {img.scale}"
    flat = img.pixels.reshape(-1, img.channels)
    return head + "\n" + "\n".join(" ".join(fmt(v) for v in px) for px in flat) + "\n"


def parse_grid(text: str, source: str | None = None) -> ImageGrid:
    """Raster image; an optional fourth header field gives the pooling scale."""
    r = _Reader(text, source)
    no, head = r.header("grid", (3, 4))
    w, h, c = head[:3]
    scale = head[3] if len(head) == 4 else 1
    if min(w, h, c) < 1:
        raise r.error("grid dimensions must be positive", no)
    vals = []
    for _ in range(w * h):
        no, toks = r.next("pixel row")
        if len(toks) != c:
            raise r.error(f"pixel rows need {c} channel values", no)
        vals.append(r.floats(toks, no))
    r.finish()
    try:
        return ImageGrid.from_flat(w, h, c, np.array(vals), scale)
    except ValueError as exc:
        raise r.error(str(exc)) from None


# -- scenes ----------------------------------------------------------------


def format_scene(scene: Scene) -> str:
    out = [
        "# objects " + " ".join(scene.objects),
        "# colors " + " ".join(scene.colors),
        f"scene {scene.grid_w} {scene.grid_h}",
    ]
    out += [f"{x} {y} {scene.objects[o]} {scene.colors[c]}" for x, y, o, c in scene.placements]
    return "\n".join(out) + "\n"


def parse_scene(text: str, source: str | None = None, objects=None, colors=None) -> Scene:
    """Scene file; the object/color vocabularies come from header comments."""
    for raw in text.split("\n"):
        s = raw.strip()
        if s.startswith("# objects "):
            objects = tuple(s[len("# objects ") :].split())
        elif s.startswith("# colors "):
            colors = tuple(s[len("# colors ") :].split())
    if objects is None or colors is None:
        from .world import DEFAULT_COLORS, DEFAULT_OBJECTS

        objects = objects or DEFAULT_OBJECTS
        colors = colors or DEFAULT_COLORS
    r = _Reader(text, source)
    _, (gw, gh) = r.header("scene", 2)
    placements = []
    while not r.done():
        no, toks = r.next("placement")
        if len(toks) != 4:
            raise r.error("placements are '<x> <y> <object_name> <color_name>'", no)
        x, y = r._int(toks[0], no), r._int(toks[1], no)
        if toks[2] not in objects:
            raise r.error(f"unknown object {toks[2]!r}", no)
        if toks[3] not in colors:
            raise r.error(f"unknown color {toks[3]!r}", no)
        placements.append((x, y, objects.index(toks[2]), colors.index(toks[3])))
    try:
        return Scene(gw, gh, tuple(placements), tuple(objects), tuple(colors))
    except ValueError as exc:
        raise r.error(str(exc)) from None


# -- logits dumps ----------------------------------------------------------

SOURCES = ("v", "c", "f")


def format_dump(steps: Sequence[tuple[Distribution, Distribution, Distribution]]) -> str:
    out = []
    for t, triple in enumerate(steps):
        out.append(f"step {t}")
        for label, d in zip(SOURCES, triple):
            out.append(f"source {label}")
            out.append(format_dist(d).rstrip("\n"))
    return "\n".join(out) + "\n"


def parse_dump(text: str, source: str | None = None):
    r = _Reader(text, source)
    steps = []
    while not r.done():
        _, (t,) = r.header("step", 1)
        if t != len(steps):
            raise r.error(f"expected step {len(steps)}, got {t}")
        triple = []
        for label in SOURCES:
            no, toks = r.next(f"source {label}")
            if toks != ["source", label]:
                raise r.error(f"expected 'source {label}' at step {t}", no)
            triple.append(_read_dist(r))
        steps.append(tuple(triple))
    return steps


# -- captions --------------------------------------------------------------


def format_caption(tokens: Sequence[int], names: Sequence[str] | None = None, truncated: bool = False) -> str:
    out = [f"caption {len(tokens)}" + (" truncated" if truncated else "")]
    for i, t in enumerate(tokens):
        out.append(f"{int(t)} {names[i]}" if names is not None else f"{int(t)}")
    return "\n".join(out) + "\n"


def parse_caption_file(text: str, source: str | None = None) -> tuple[list[int], bool]:
    r = _Reader(text, source)
    no, toks = r.next("caption header")
    if toks[0] != "caption" or len(toks) not in (2, 3) or (len(toks) == 3 and toks[2] != "truncated"):
        raise r.error("expected 'caption <n> [truncated]'", no)
    n = r._int(toks[1], no)
    truncated = len(toks) == 3
    tokens = []
    for _ in range(n):
        no, toks = r.next("caption token")
        tokens.append(r._int(toks[0], no))
    r.finish()
    return tokens, truncated


# -- traces ----------------------------------------------------------------


def _inline_dist(d: Distribution | None) -> str:
    if d is None:
        return "-"
    return f"{d.size} " + " ".join(f"{int(i)} {fmt(p)}" for i, p in zip(d.support_ids, d.probs))


def _parse_inline_dist(toks: Sequence[str], r: _Reader, no: int) -> Distribution | None:
    if toks == ["-"]:
        return None
    n = r._int(toks[0], no)
    if len(toks) != 1 + 2 * n:
        raise r.error(f"inline distribution needs {n} id/prob pairs", no)
    ids = [r._int(t, no) for t in toks[1::2]]
    probs = r.floats(toks[2::2], no)
    try:
        return Distribution(np.array(probs), np.array(ids, dtype=np.int64))
    except ValueError as exc:
        raise r.error(str(exc), no) from None


def format_trace(trace: DecodeTrace) -> str:
    out = [f"trace {len(trace.steps)}"]
    for name in ("r0", "rc", "rf"):
        out.append(f"{name} " + " ".join(str(t) for t in getattr(trace, name)) if getattr(trace, name) else name)
    out.append(f"rf_fallback {int(trace.rf_fallback)}")
    for t, s in enumerate(trace.steps):
        costs = "-" if s.per_source_cost is None else " ".join(fmt(c) for c in s.per_source_cost)
        out.append(f"step {t} chosen {s.chosen} status {s.solver_status} costs {costs}")
        out.append("fused " + _inline_dist(s.fused))
        out.append("pv " + _inline_dist(s.p_v))
        out.append("pc " + _inline_dist(s.p_c))
        out.append("pf " + _inline_dist(s.p_f))
    return "\n".join(out) + "\n"


def parse_trace(text: str, source: str | None = None) -> DecodeTrace:
    """Inverse of :func:`format_trace`; pseudo-images are not stored."""
    r = _Reader(text, source)
    _, (n,) = r.header("trace", 1)
    trace = DecodeTrace()
    for name in ("r0", "rc", "rf"):
        no, toks = r.next(name)
        if toks[0] != name:
            raise r.error(f"expected '{name}' line", no)
        setattr(trace, name, [r._int(t, no) for t in toks[1:]])
    no, toks = r.next("rf_fallback")
    if toks[0] != "rf_fallback" or len(toks) != 2:
        raise r.error("expected 'rf_fallback <0|1>'", no)
    trace.rf_fallback = bool(r._int(toks[1], no))
    for t in range(n):
        no, toks = r.next("step line")
        if toks[:2] != ["step", str(t)] or toks[2] != "chosen" or toks[4] != "status" or toks[6] != "costs":
            raise r.error(f"malformed step line for step {t}", no)
        chosen = r._int(toks[3], no)
        status = toks[5]
        costs = None if toks[7:] == ["-"] else tuple(r.floats(toks[7:], no))
        if costs is not None and len(costs) != 3:
            raise r.error("expected three per-source costs", no)
        dists = {}
        for key in ("fused", "pv", "pc", "pf"):
            no, toks = r.next(key)
            if toks[0] != key:
                raise r.error(f"expected '{key}' line", no)
            dists[key] = _parse_inline_dist(toks[1:], r, no)
        trace.steps.append(
            StepRecord(dists["pv"], dists["pc"], dists["pf"], dists["fused"], chosen, costs, status)
        )
    r.finish()
    return trace


# -- key/value configs -----------------------------------------------------


@dataclass
class ConfigEntry:
    value: str
    line: int


def parse_cfg(text: str, source: str | None = None) -> dict[str, ConfigEntry]:
    entries: dict[str, ConfigEntry] = {}
    for no, raw in enumerate(text.split("\n"), 1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise FormatError(f"expected 'key = value', got {body!r}", no, source)
        key, value = (s.strip() for s in body.split("=", 1))
        if not key or not value:
            raise FormatError(f"expected 'key = value', got {body!r}", no, source)
        if key in entries:
            raise FormatError(f"duplicate key {key!r}", no, source)
        entries[key] = ConfigEntry(value, no)
    return entries


def format_cfg(values: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


# -- reports ---------------------------------------------------------------


@dataclass
class Report:
    sections: list[tuple[str, list[tuple[str, str]]]] = field(default_factory=list)

    def section(self, name: str) -> list[tuple[str, str]]:
        for n, rows in self.sections:
            if n == name:
                return rows
        rows: list[tuple[str, str]] = []
        self.sections.append((name, rows))
        return rows

    def get(self, section: str, key: str) -> str:
        for n, rows in self.sections:
            if n == section:
                for k, v in rows:
                    if k == key:
                        return v
        raise KeyError(f"[{section}] {key}")


def format_report(report: Report, comments: Iterable[str] = ()) -> str:
    out = [f"# {c}" for c in comments]
    for name, rows in report.sections:
        out.append(f"[{name}]")
        out += [f"{k} = {v}" for k, v in rows]
    return "\n".join(out) + "\n"


def parse_report(text: str, source: str | None = None) -> Report:
    report = Report()
    current = None
    for no, raw in enumerate(text.split("\n"), 1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("[") and body.endswith("]"):
            current = report.section(body[1:-1])
            continue
        if current is None or "=" not in body:
            raise FormatError(f"unexpected line {body!r}", no, source)
        k, v = (s.strip() for s in body.split("=", 1))
        current.append((k, v))
    return report


# -- output ----------------------------------------------------------------


def write_atomic(path: str, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
