"""Posed frames with their dense maps and optional line segments."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .densemaps import Pyramid
from .geometry import Camera, Cuboid


@dataclass(frozen=True)
class LineSegment:
    p1: np.ndarray
    p2: np.ndarray

    def __post_init__(self):
        p1 = np.asarray(self.p1, dtype=float).reshape(2)
        p2 = np.asarray(self.p2, dtype=float).reshape(2)
        if not (np.all(np.isfinite(p1)) and np.all(np.isfinite(p2))):
            raise ValueError("line endpoints must be finite")
        if np.array_equal(p1, p2):
            raise ValueError("line endpoints must differ")
        object.__setattr__(self, "p1", p1)
        object.__setattr__(self, "p2", p2)

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.p1 + self.p2)


@dataclass(frozen=True)
class Correspondence:
    """A ground-truth surface point ``point`` observed at ``pixel`` in frame ``image``."""

    image: int
    pixel: np.ndarray
    point: np.ndarray


PyramidSource = Union[Pyramid, Callable[[], Pyramid]]


@dataclass
class Frame:
    """A posed image. ``source`` may be a pyramid or a zero-argument loader."""

    camera: Camera
    source: PyramidSource
    lines: np.ndarray | None = None  # (L, 4) pixel endpoints x1, y1, x2, y2
    _pyramid: Pyramid | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.lines is not None:
            lines = np.asarray(self.lines, dtype=float).reshape(-1, 4)
            degenerate = np.all(lines[:, :2] == lines[:, 2:], axis=1)
            self.lines = lines[~degenerate]

    @property
    def pyramid(self) -> Pyramid:
        if self._pyramid is None:
            self._pyramid = self.source if isinstance(self.source, Pyramid) else self.source()
        return self._pyramid

    def level_camera(self, level: int) -> Camera:
        lv = self.pyramid[level]
        return self.camera.scaled(lv.width, lv.height)

    @property
    def n_lines(self) -> int:
        return 0 if self.lines is None else len(self.lines)


@dataclass
class Scene:
    frames: list
    gt_correspondences: list = field(default_factory=list)
    gt_cuboid: Cuboid | None = None

    @property
    def cameras(self) -> list:
        return [f.camera for f in self.frames]

    @property
    def has_lines(self) -> bool:
        return any(f.n_lines for f in self.frames)

    def subset(self, indices) -> Scene:
        """Scene restricted to the given frames; correspondences are re-indexed."""
        indices = list(indices)
        remap = {old: new for new, old in enumerate(indices)}
        corr = [
            Correspondence(remap[c.image], c.pixel, c.point)
            for c in self.gt_correspondences
            if c.image in remap
        ]
        return Scene([self.frames[i] for i in indices], corr, self.gt_cuboid)
