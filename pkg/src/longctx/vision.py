"""Dynamic-tile vision tokenization.

An image is resized to a grid of fixed-size tiles whose aspect ratio best
matches the input, with a full-image thumbnail appended when the grid has
more than one tile.  Each tile becomes a row-major sequence of patch
vectors, a seeded linear embedding, a 2x2 pixel shuffle that trades sequence
length for feature width, and a two-layer projector into the language
model's embedding space.  Video frames skip tiling: one tile per frame.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, ImageFormatError
from .kernels import gelu, matmul

IMAGE_MAGIC = b"IMG0"


@dataclass(frozen=True)
class TileGrid:
    rows: int
    cols: int
    include_thumbnail: bool

    @property
    def tile_count(self) -> int:
        return self.rows * self.cols + (1 if self.include_thumbnail else 0)


def select_tile_grid(width: int, height: int, max_tiles: int = 12) -> TileGrid:
    """Pick the rows x cols grid (product <= max_tiles) closest in aspect.

    Aspect deviation is measured on a log scale, so scaling the image does
    not change the choice.  Ties prefer fewer tiles, then more columns.  A
    thumbnail is included whenever the grid has more than one tile.
    """
    if width < 1 or height < 1:
        raise ConfigError(f"image extent {width}x{height} must be positive")
    if max_tiles < 1:
        raise ConfigError(f"max_tiles must be positive, got {max_tiles}")
    target = math.log(width / height)
    best = None
    best_key = None
    for rows in range(1, max_tiles + 1):
        for cols in range(1, max_tiles + 1):
            if rows * cols > max_tiles:
                continue
            deviation = abs(target - math.log(cols / rows))
            key = (deviation, rows * cols, -cols)
            if best_key is None or key < best_key:
                best_key = key
                best = (rows, cols)
    rows, cols = best
    return TileGrid(rows=rows, cols=cols, include_thumbnail=rows * cols > 1)


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.zeros(1, dtype=np.float64)
    return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))


def resize_bilinear(image, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize.

    Interpolation uses the ``v0 + w * (v1 - v0)`` form, so constant regions
    and exact grid points are preserved bit for bit.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3:
        raise DimensionError(f"expected (height, width, channels), got {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"output extent {out_h}x{out_w} must be positive")
    h, w = img.shape[:2]
    ys = _axis_coords(h, out_h)
    xs = _axis_coords(w, out_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[:, None, None]
    wx = (xs - x0).astype(np.float32)[None, :, None]
    top = img[y0]
    rows = top + wy * (img[y1] - top)
    left = rows[:, x0]
    return left + wx * (rows[:, x1] - left)


def tile_image(image, grid: TileGrid, tile_size: int = 448) -> list[np.ndarray]:
    """Resize to the grid extent and slice row-major; thumbnail comes last."""
    img = np.asarray(image, dtype=np.float32)
    resized = resize_bilinear(img, grid.rows * tile_size, grid.cols * tile_size)
    tiles = []
    for r in range(grid.rows):
        for c in range(grid.cols):
            tiles.append(
                resized[r * tile_size : (r + 1) * tile_size,
                        c * tile_size : (c + 1) * tile_size]
            )
    if grid.include_thumbnail:
        tiles.append(resize_bilinear(img, tile_size, tile_size))
    return tiles


def extract_patches(tile, patch_size: int = 14) -> np.ndarray:
    """Cut a square tile into row-major patch vectors.

    A 448-pixel tile with 14-pixel patches yields 1024 vectors of 588
    features (14 * 14 * 3), each patch flattened row-major.
    """
    t = np.asarray(tile, dtype=np.float32)
    if t.ndim != 3 or t.shape[0] != t.shape[1]:
        raise DimensionError(f"expected a square (side, side, channels) tile, got {t.shape}")
    side, _, channels = t.shape
    if side % patch_size != 0:
        raise DimensionError(f"tile side {side} not divisible by patch size {patch_size}")
    g = side // patch_size
    patches = t.reshape(g, patch_size, g, patch_size, channels)
    patches = patches.transpose(0, 2, 1, 3, 4)
    return patches.reshape(g * g, patch_size * patch_size * channels)


def pixel_shuffle(features, factor: int = 2) -> np.ndarray:
    """Concatenate each factor x factor cell of the token grid into one token.

    Tokens must form a square grid whose side divides by ``factor``; cell
    members are concatenated in row-major cell order, so the downsample
    preserves the multiset of feature values exactly.
    """
    x = np.asarray(features, dtype=np.float32)
    if x.ndim != 2:
        raise DimensionError(f"expected (tokens, features), got {x.shape}")
    n, d = x.shape
    g = math.isqrt(n)
    if g * g != n:
        raise DimensionError(f"{n} tokens do not form a square grid")
    if g % factor != 0:
        raise DimensionError(f"grid side {g} not divisible by shuffle factor {factor}")
    cells = x.reshape(g // factor, factor, g // factor, factor, d)
    cells = cells.transpose(0, 2, 1, 3, 4)
    return cells.reshape((g // factor) ** 2, factor * factor * d)


def pixel_unshuffle(features, factor: int = 2) -> np.ndarray:
    """Inverse of ``pixel_shuffle``; splits concatenated cells back out."""
    x = np.asarray(features, dtype=np.float32)
    if x.ndim != 2:
        raise DimensionError(f"expected (tokens, features), got {x.shape}")
    n, d = x.shape
    gf = math.isqrt(n)
    if gf * gf != n:
        raise DimensionError(f"{n} tokens do not form a square grid")
    if d % (factor * factor) != 0:
        raise DimensionError(f"feature width {d} does not split into {factor * factor} cells")
    base = d // (factor * factor)
    cells = x.reshape(gf, gf, factor, factor, base)
    cells = cells.transpose(0, 2, 1, 3, 4)
    return cells.reshape((gf * factor) ** 2, base)


@dataclass(frozen=True)
class VisionConfig:
    tile_size: int = 448
    patch_size: int = 14
    max_tiles: int = 12
    downsample_factor: int = 2
    vision_dim: int = 64
    proj_hidden: int = 256
    out_dim: int = 128

    def __post_init__(self):
        for name in ("tile_size", "patch_size", "max_tiles", "downsample_factor",
                     "vision_dim", "proj_hidden", "out_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.tile_size % self.patch_size != 0:
            raise ConfigError(
                f"tile size {self.tile_size} not divisible by patch size {self.patch_size}"
            )
        if (self.tile_size // self.patch_size) % self.downsample_factor != 0:
            raise ConfigError("patch grid side not divisible by the downsample factor")

    @property
    def patch_grid(self) -> int:
        return self.tile_size // self.patch_size

    @property
    def patches_per_tile(self) -> int:
        return self.patch_grid ** 2

    @property
    def tokens_per_tile(self) -> int:
        return self.patches_per_tile // (self.downsample_factor ** 2)

    @property
    def patch_features(self) -> int:
        return self.patch_size * self.patch_size * 3


def frame_token_budget(n_frames: int, tokens_per_frame: int = 256) -> int:
    """Tokens consumed by a video of ``n_frames`` single-tile frames."""
    if n_frames < 0:
        raise ConfigError(f"n_frames must be non-negative, got {n_frames}")
    if tokens_per_frame < 1:
        raise ConfigError(f"tokens_per_frame must be positive, got {tokens_per_frame}")
    return n_frames * tokens_per_frame


@dataclass
class VisualTokens:
    """Projected visual features ready to splice into a text sequence."""

    features: np.ndarray               # (count, out_dim) float32
    tile_count: int
    frame_index: np.ndarray | None = None  # (count,) int64 for video

    @property
    def count(self) -> int:
        return self.features.shape[0]


class VisionEncoder:
    """Seeded patch embedding plus pixel shuffle and two-layer projector."""

    def __init__(self, config: VisionConfig = VisionConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)

        def draw(*shape):
            return rng.uniform(-0.02, 0.02, size=shape).astype(np.float32)

        c = config
        shuffled = c.vision_dim * c.downsample_factor ** 2
        self.patch_weight = draw(c.patch_features, c.vision_dim)
        self.patch_bias = draw(c.vision_dim)
        self.proj_w1 = draw(shuffled, c.proj_hidden)
        self.proj_b1 = draw(c.proj_hidden)
        self.proj_w2 = draw(c.proj_hidden, c.out_dim)
        self.proj_b2 = draw(c.out_dim)

    def encode_tile(self, tile) -> np.ndarray:
        """Patch vectors through the linear embedding: (patches, vision_dim)."""
        patches = extract_patches(tile, self.config.patch_size)
        if patches.shape[1] != self.config.patch_features:
            raise DimensionError(
                f"patch width {patches.shape[1]} != configured {self.config.patch_features}"
            )
        return matmul(patches, self.patch_weight) + self.patch_bias

    def project(self, features) -> np.ndarray:
        """Two-layer projector: linear, GELU, linear."""
        hidden = gelu(matmul(features, self.proj_w1) + self.proj_b1)
        return matmul(hidden, self.proj_w2) + self.proj_b2

    def _tile_tokens(self, tile) -> np.ndarray:
        shuffled = pixel_shuffle(self.encode_tile(tile), self.config.downsample_factor)
        return self.project(shuffled)

    def encode_image(self, image, max_tiles: int | None = None) -> VisualTokens:
        """Dynamic-tile encoding: tokens_per_tile tokens for every tile."""
        img = np.asarray(image, dtype=np.float32)
        if img.ndim != 3:
            raise DimensionError(f"expected (height, width, channels), got {img.shape}")
        limit = self.config.max_tiles if max_tiles is None else max_tiles
        grid = select_tile_grid(img.shape[1], img.shape[0], limit)
        tiles = tile_image(img, grid, self.config.tile_size)
        features = np.concatenate([self._tile_tokens(t) for t in tiles], axis=0)
        return VisualTokens(features=features, tile_count=len(tiles))

    def encode_video(self, frames) -> VisualTokens:
        """One tile per frame, no thumbnails; frame_index maps tokens to frames."""
        blocks = []
        for frame in frames:
            resized = resize_bilinear(frame, self.config.tile_size, self.config.tile_size)
            blocks.append(self._tile_tokens(resized))
        if not blocks:
            features = np.zeros((0, self.config.out_dim), dtype=np.float32)
            return VisualTokens(features=features, tile_count=0,
                                frame_index=np.zeros(0, dtype=np.int64))
        features = np.concatenate(blocks, axis=0)
        frame_index = np.repeat(np.arange(len(blocks), dtype=np.int64),
                                self.config.tokens_per_tile)
        return VisualTokens(features=features, tile_count=len(blocks),
                            frame_index=frame_index)


def write_image_file(image, path) -> None:
    """Write the raw float32 image container: magic, u32 width, u32 height,
    then height x width x 3 little-endian float32 values, row-major."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected (height, width, 3), got {img.shape}")
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<II", img.shape[1], img.shape[0]))
        fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_image_file(path) -> np.ndarray:
    """Read an image container written by ``write_image_file``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != IMAGE_MAGIC:
        raise ImageFormatError("bad image magic")
    width, height = struct.unpack_from("<II", data, 4)
    payload = data[12:]
    if len(payload) != width * height * 3 * 4:
        raise ImageFormatError(
            f"payload of {len(payload)} bytes does not match {width}x{height}x3 float32"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(height, width, 3).copy()
