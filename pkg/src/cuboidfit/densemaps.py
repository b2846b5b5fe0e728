"""Dense float grids, bilinear lookup, pyramids, guided sampling and DGRD I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

DGRD_MAGIC = b"DGRD"
DGRD_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_MAX_ELEMENTS = 1 << 31

DEFAULT_LEVEL_SCALES = (1 / 8, 1 / 4, 1 / 2)


class GridFormatError(ValueError):
    """Malformed DGRD payload. ``field`` names the offending header field or region."""

    def __init__(self, message: str, field: str | None = None, path: str | None = None):
        self.field = field
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message}" + (f" (field: {field})" if field else ""))


@dataclass(frozen=True)
class DenseGrid:
    """Row-major (height, width, channels) float32 grid."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"grid must be (H, W, C) with positive sizes, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("grid entries must be finite")
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def constant(cls, height: int, width: int, value: float = 0.0, channels: int = 1) -> DenseGrid:
        return cls(np.full((height, width, channels), value, dtype=np.float32))


@dataclass(frozen=True)
class LevelMaps:
    features: DenseGrid
    feat_conf: DenseGrid
    edge: DenseGrid
    edge_conf: DenseGrid
    scale: float

    def __post_init__(self):
        shape = (self.features.height, self.features.width)
        for name in ("feat_conf", "edge", "edge_conf"):
            g = getattr(self, name)
            if (g.height, g.width) != shape:
                raise ValueError(f"{name} is {g.height}x{g.width}, features are {shape[0]}x{shape[1]}")
            if g.channels != 1:
                raise ValueError(f"{name} must have one channel")
        # Confidences are clamped into [0, 1] so pairwise products stay bounded.
        for name in ("feat_conf", "edge_conf"):
            g = getattr(self, name)
            if g.data.min() < 0 or g.data.max() > 1:
                object.__setattr__(self, name, DenseGrid(np.clip(g.data, 0.0, 1.0)))

    @property
    def height(self) -> int:
        return self.features.height

    @property
    def width(self) -> int:
        return self.features.width

    @cached_property
    def has_edges(self) -> bool:
        """False when the edge confidence is zero everywhere, so the edge term can skip this level."""
        return bool(np.any(self.edge_conf.data > 0))


@dataclass(frozen=True)
class Pyramid:
    levels: tuple

    def __post_init__(self):
        levels = tuple(self.levels)
        if len(levels) != 3:
            raise ValueError(f"a pyramid has exactly three levels, got {len(levels)}")
        widths = [lv.width for lv in levels]
        heights = [lv.height for lv in levels]
        if not (widths[0] <= widths[1] <= widths[2] and heights[0] <= heights[1] <= heights[2]):
            raise ValueError("pyramid levels must be ordered coarse to fine")
        object.__setattr__(self, "levels", levels)

    def __getitem__(self, i) -> LevelMaps:
        return self.levels[i]


def _cell_coords(shape_hw, p: np.ndarray):
    H, W = shape_hw
    x, y = p[:, 0], p[:, 1]
    valid = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    return valid, x0, y0, x1, y1, xs - x0, ys - y0


def sample_many(grid: DenseGrid, p: np.ndarray, with_gradient: bool = False):
    """Bilinear lookup at (N, 2) continuous pixels ``(x, y)``.

    Returns ``(values (N, C), valid (N,))`` and, if requested, the spatial
    gradient ``(N, C, 2)`` of the interpolant (constant within each cell).
    Out-of-bounds rows are zero and flagged invalid.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    data = grid.data
    valid, x0, y0, x1, y1, fx, fy = _cell_coords(data.shape[:2], p)
    v00 = data[y0, x0].astype(float)
    v01 = data[y0, x1].astype(float)
    v10 = data[y1, x0].astype(float)
    v11 = data[y1, x1].astype(float)
    fx_ = fx[:, None]
    fy_ = fy[:, None]
    top = v00 + fx_ * (v01 - v00)
    bot = v10 + fx_ * (v11 - v10)
    vals = top + fy_ * (bot - top)
    vals[~valid] = 0.0
    if not with_gradient:
        return vals, valid
    gx = (1 - fy_) * (v01 - v00) + fy_ * (v11 - v10)
    gy = bot - top
    grad = np.stack([gx, gy], axis=-1)
    grad[~valid] = 0.0
    return vals, valid, grad


def bilinear_sample(grid: DenseGrid, p) -> np.ndarray | None:
    vals, valid = sample_many(grid, np.asarray(p, dtype=float)[None])
    return vals[0] if valid[0] else None


def bilinear_gradient(grid: DenseGrid, p) -> np.ndarray | None:
    """Channels x 2 matrix of (d/dx, d/dy)."""
    _, valid, grad = sample_many(grid, np.asarray(p, dtype=float)[None], with_gradient=True)
    return grad[0] if valid[0] else None


def guided_sample(conf: DenseGrid, k: int, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """Draw ``k`` distinct pixels with probability proportional to ``conf ** gamma``.

    Uses exponential keys: each pixel gets ``E / w`` with ``E ~ Exp(1)`` and the
    ``k`` smallest keys win, which is equivalent to sequential weighted
    sampling without replacement. Returns integer ``(x, y)`` pairs.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    c = conf.data[:, :, 0].astype(float).ravel()
    positive = c > 0
    n_pos = int(positive.sum())
    if k > n_pos:
        raise ValueError(f"requested {k} points but only {n_pos} pixels have positive weight")
    w = np.where(positive, np.power(c, gamma, where=positive, out=np.zeros_like(c)), 0.0)
    keys = rng.standard_exponential(c.size)
    with np.errstate(divide="ignore"):
        keys = np.where(w > 0, keys / w, np.inf)
    if k == 0:
        return np.zeros((0, 2), dtype=np.int64)
    idx = np.argpartition(keys, k - 1)[:k]
    idx = idx[np.argsort(keys[idx], kind="stable")]
    return np.stack([idx % conf.width, idx // conf.width], axis=1)


def area_downsample(data: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resample (H, W, C) to (height, width) by exact area averaging."""
    H, W = data.shape[:2]
    if (H, W) == (height, width):
        return data.astype(float)
    Ay = _area_matrix(H, height)
    Ax = _area_matrix(W, width)
    C = data.shape[2]
    rows = (Ay @ data.astype(float).reshape(H, W * C)).reshape(height, W, C)
    return np.einsum("jw,iwc->ijc", Ax, rows, optimize=True)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    A = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = edges_out[i], edges_out[i + 1]
        for j in range(int(np.floor(a)), min(int(np.ceil(b)), n_in)):
            A[i, j] = min(b, j + 1) - max(a, j)
        A[i] /= A[i].sum()
    return A


def level_shape(height: int, width: int, scale: float) -> tuple[int, int]:
    return max(1, int(round(height * scale))), max(1, int(round(width * scale)))


def photometric_pyramid(image: DenseGrid, level_scales=DEFAULT_LEVEL_SCALES) -> Pyramid:
    """Use the image itself as the feature map at three resolutions.

    Confidence is one everywhere and the edge maps are zero with zero
    confidence, so the edge term contributes nothing.
    """
    levels = []
    for s in level_scales:
        h, w = level_shape(image.height, image.width, s)
        feats = area_downsample(image.data, h, w)
        levels.append(
            LevelMaps(
                features=DenseGrid(feats),
                feat_conf=DenseGrid.constant(h, w, 1.0),
                edge=DenseGrid.constant(h, w, 0.0),
                edge_conf=DenseGrid.constant(h, w, 0.0),
                scale=w / image.width,
            )
        )
    return Pyramid(tuple(levels))


def encode_grid(grid: DenseGrid) -> bytes:
    header = _HEADER.pack(DGRD_MAGIC, DGRD_VERSION, grid.height, grid.width, grid.channels)
    return header + grid.data.astype("<f4", copy=False).tobytes(order="C")


def decode_grid(buf: bytes, path: str | None = None) -> DenseGrid:
    if len(buf) < 4:
        raise GridFormatError("unexpected end of data", "magic", path)
    if buf[:4] != DGRD_MAGIC:
        raise GridFormatError("bad magic", "magic", path)
    if len(buf) < _HEADER.size:
        raise GridFormatError("unexpected end of data", "header", path)
    _, version, h, w, c = _HEADER.unpack_from(buf)
    if version != DGRD_VERSION:
        raise GridFormatError(f"unsupported version {version}", "version", path)
    for name, v in (("height", h), ("width", w), ("channels", c)):
        if v == 0:
            raise GridFormatError(f"{name} must be positive", name, path)
    n = h * w * c
    if n >= _MAX_ELEMENTS:
        raise GridFormatError("dimension overflow", "dimensions", path)
    expected = _HEADER.size + 4 * n
    if len(buf) < expected:
        raise GridFormatError("unexpected end of data", "data", path)
    if len(buf) > expected:
        raise GridFormatError(f"{len(buf) - expected} trailing bytes", "data", path)
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size).reshape(h, w, c)
    if not np.all(np.isfinite(data)):
        raise GridFormatError("non-finite value", "data", path)
    return DenseGrid(data.astype(np.float32))


def save_grid(grid: DenseGrid, path) -> None:
    Path(path).write_bytes(encode_grid(grid))


def load_grid(path) -> DenseGrid:
    return decode_grid(Path(path).read_bytes(), str(path))
