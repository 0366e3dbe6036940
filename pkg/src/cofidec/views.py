"""Coarse/fine decomposition of an image into the multi-granular view set."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class ViewError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Row-major raster with values in [0, 1], stored as an (h, w, c) array.

    ``scale`` is the side length, in source pixels, covered by one pixel of
    this grid (1 for full resolution, k after k-fold average pooling).
    """

    pixels: np.ndarray
    scale: int = 1

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or 0 in px.shape:
            raise ValueError(f"pixels must be a nonempty (h, w, c) array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.scale < 1:
            raise ValueError("scale must be a positive integer")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_flat(cls, width: int, height: int, channels: int, values, scale: int = 1):
        values = np.asarray(values, dtype=np.float64)
        if values.size != width * height * channels:
            raise ValueError(
                f"expected {width * height * channels} values for {width}x{height}x{channels}, "
                f"got {values.size}"
            )
        return cls(values.reshape(height, width, channels), scale)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def crop(self, x: int, y: int, w: int, h: int) -> "ImageGrid":
        return ImageGrid(self.pixels[y : y + h, x : x + w], self.scale)

    def __eq__(self, other):
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return self.scale == other.scale and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    scores: np.ndarray  # (rows, cols) of windows
    window: int

    def __post_init__(self):
        s = np.array(self.scores, dtype=np.float64)
        if s.ndim != 2 or 0 in s.shape:
            raise ValueError("saliency scores must be a nonempty 2-D grid")
        if not np.all(np.isfinite(s)) or s.min() < 0:
            raise ValueError("saliency scores must be finite and nonnegative")
        if self.window < 1:
            raise ValueError("window must be positive")
        object.__setattr__(self, "scores", s)

    @classmethod
    def from_grid(cls, grid: "ImageGrid", window: int) -> "SaliencyMap":
        """Wrap an externally computed single-channel score grid."""
        if grid.channels != 1:
            raise ValueError("an external saliency grid must have exactly one channel")
        return cls(grid.pixels[:, :, 0], window)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class Patch:
    """A coarse view: pooled pixels plus the region of the original it covers."""

    region: tuple[int, int, int, int]
    image: ImageGrid


@dataclass(frozen=True)
class CropView:
    region: tuple[int, int, int, int]
    pixels: ImageGrid
    saliency_score: float


@dataclass(frozen=True)
class ViewSet:
    original: ImageGrid
    coarse: tuple[Patch, ...]
    fine: tuple[CropView, ...]

    @property
    def coarse_images(self) -> list[ImageGrid]:
        return [p.image for p in self.coarse]

    @property
    def fine_images(self) -> list[ImageGrid]:
        return [c.pixels for c in self.fine]


def _pool(px: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = px.shape
    return px.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def coarse_decompose(img: ImageGrid, grid: tuple[int, int], downsample_factor: int = 2) -> list[Patch]:
    """Tile ``img`` into rows x cols non-overlapping patches, each average-pooled.

    Patch boundaries sit at ``floor(i * size / count)``, so every patch is
    nonempty whenever the grid is no finer than the image. A block whose
    sides are not multiples of the factor is edge-padded before pooling.
    Patches are in row-major order.
    """
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise ViewError("grid must have at least one row and one column")
    if downsample_factor < 1:
        raise ViewError("downsample_factor must be at least 1")
    h, w = img.height, img.width
    if rows > h or cols > w:
        raise ViewError(f"grid {rows}x{cols} is finer than the {w}x{h} image")
    ys = [r * h // rows for r in range(rows + 1)]
    xs = [c * w // cols for c in range(cols + 1)]
    f = downsample_factor
    patches = []
    for r in range(rows):
        for c in range(cols):
            block = img.pixels[ys[r] : ys[r + 1], xs[c] : xs[c + 1]]
            bh, bw = block.shape[:2]
            block = np.pad(block, ((0, -bh % f), (0, -bw % f), (0, 0)), mode="edge")
            pooled = ImageGrid(_pool(block, f), img.scale * f)
            patches.append(Patch((xs[c], ys[r], bw, bh), pooled))
    return patches


def local_saliency(img: ImageGrid, window: int) -> SaliencyMap:
    """Channel-summed pixel variance over non-overlapping window x window cells."""
    if window < 1 or window > min(img.width, img.height):
        raise ViewError(f"window {window} must lie in [1, {min(img.width, img.height)}]")
    ny, nx = img.height // window, img.width // window
    px = img.pixels[: ny * window, : nx * window]
    blocks = px.reshape(ny, window, nx, window, img.channels)
    var = blocks.var(axis=(1, 3))
    return SaliencyMap(var.sum(axis=-1), window)


def fine_decompose(
    img: ImageGrid,
    saliency: SaliencyMap,
    m: int,
    crop_size: tuple[int, int],
) -> tuple[list[CropView], bool]:
    """Full-resolution crops centred on the ``m`` most salient windows.

    Ties go to the smaller row-major window index. Returns the crops in
    non-increasing saliency order and whether ``m`` had to be clamped.
    """
    if m < 1:
        raise ViewError("m must be at least 1")
    cw, ch = crop_size
    if not (1 <= cw <= img.width and 1 <= ch <= img.height):
        raise ViewError(f"crop size {crop_size} does not fit a {img.width}x{img.height} image")
    flat = saliency.scores.ravel()
    clamped = m > flat.size
    if clamped:
        warnings.warn(f"m={m} exceeds the {flat.size} saliency windows; clamped", stacklevel=2)
        m = flat.size
    order = np.argsort(-flat, kind="stable")[:m]
    win = saliency.window
    crops = []
    for idx in order:
        wy, wx = divmod(int(idx), saliency.width)
        cx, cy = wx * win + win // 2, wy * win + win // 2
        x0 = int(np.clip(cx - cw // 2, 0, img.width - cw))
        y0 = int(np.clip(cy - ch // 2, 0, img.height - ch))
        crops.append(CropView((x0, y0, cw, ch), img.crop(x0, y0, cw, ch), float(flat[idx])))
    return crops, clamped


def unify(original: ImageGrid, coarse, fine) -> ViewSet:
    """Validate and bundle the original, coarse patches and fine crops."""
    coarse = tuple(coarse)
    fine = tuple(fine)
    if not coarse:
        raise ViewError("at least one coarse patch is required")
    cover = np.zeros((original.height, original.width), dtype=np.int64)
    for p in coarse:
        x, y, w, h = p.region
        if w < 1 or h < 1 or x < 0 or y < 0 or x + w > original.width or y + h > original.height:
            raise ViewError(f"coarse patch region {p.region} is out of bounds")
        cover[y : y + h, x : x + w] += 1
    if cover.max() > 1:
        raise ViewError("coarse patches overlap")
    if cover.min() < 1:
        raise ViewError("coarse patches do not cover the image")
    for f in fine:
        x, y, w, h = f.region
        if w < 1 or h < 1 or x < 0 or y < 0 or x + w > original.width or y + h > original.height:
            raise ViewError(f"fine crop region {f.region} is out of bounds")
        if (f.pixels.width, f.pixels.height) != (w, h):
            raise ViewError(f"fine crop pixels do not match region {f.region}")
    return ViewSet(original, coarse, fine)


@dataclass(frozen=True)
class ViewParams:
    grid: tuple[int, int] = (2, 2)
    m: int = 2
    crop_size: tuple[int, int] | None = None  # None: a quarter of the image per side
    downsample_factor: int = 2
    window: int | None = None  # None: same as the crop width

    def resolve(self, img: ImageGrid) -> tuple[tuple[int, int], int]:
        crop = self.crop_size or (max(1, img.width // 4), max(1, img.height // 4))
        window = self.window or min(crop[0], img.width, img.height)
        return crop, window


def decompose(img: ImageGrid, params: ViewParams = ViewParams()) -> ViewSet:
    coarse = coarse_decompose(img, params.grid, params.downsample_factor)
    fine = []
    if params.m > 0:
        crop, window = params.resolve(img)
        fine, _ = fine_decompose(img, local_saliency(img, window), params.m, crop)
    return unify(img, coarse, fine)
