"""Single-room fitting pipeline: initialize, optionally VP-refine, then coarse-to-fine."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .costs import CostConfig
from .geometry import Cuboid
from .initialization import DEFAULT_MARGIN, init_from_cameras, init_random, vp_refine_init
from .scene import Scene
from .solver import FitResult, LMConfig, coarse_to_fine

INIT_MODES = ("auto", "random", "provided")


@dataclass
class PipelineResult:
    initial: Cuboid  # after VP refinement, the input to coarse-to-fine
    fit: FitResult

    @property
    def final(self) -> Cuboid:
        return self.fit.final


def initial_cuboid(scene: Scene, rng: np.random.Generator, init: str = "auto", vp_iters: int = 5,
                   provided: Cuboid | None = None, margin: float = DEFAULT_MARGIN,
                   cost_config: CostConfig | None = None) -> Cuboid:
    if init not in INIT_MODES:
        raise ValueError(f"unknown init mode {init!r}")
    if init == "provided":
        if provided is None:
            raise ValueError("init mode 'provided' needs a cuboid")
        return provided
    cams = scene.cameras
    c0 = init_from_cameras(cams, margin, rng) if init == "auto" else init_random(cams, margin, rng)
    if vp_iters > 0 and scene.has_lines:
        c0 = vp_refine_init(c0, scene, vp_iters, margin, cost_config)
    return c0


def fit_scene(scene: Scene, cost_config: CostConfig, lm_config: LMConfig, rng: np.random.Generator,
              init: str = "auto", vp_iters: int = 5, provided: Cuboid | None = None,
              levels=(0, 1, 2)) -> PipelineResult:
    """The full single-room pipeline. ``rng`` drives the heading and the point sampling."""
    c0 = initial_cuboid(scene, rng, init, vp_iters, provided, cost_config=cost_config)
    return PipelineResult(c0, coarse_to_fine(c0, scene, cost_config, lm_config, rng, levels))
