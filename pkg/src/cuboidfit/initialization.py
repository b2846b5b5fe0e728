"""Starting cuboids from camera poses, with optional vanishing-point refinement."""

from __future__ import annotations

import numpy as np

from .costs import CostConfig
from .geometry import Cuboid, fit_offsets, random_rotation
from .scene import Scene
from .solver import LMConfig, lm_minimize

DEFAULT_MARGIN = 2.5


def init_from_cameras(cams, margin: float = DEFAULT_MARGIN, rng: np.random.Generator | None = None) -> Cuboid:
    """Cuboid whose up axis is the mean camera up direction.

    Cameras are assumed to be held roughly upright, so the mean of their
    negative y axes points up. The horizontal axes get a random heading.
    """
    if not cams:
        raise ValueError("need at least one camera")
    rng = rng if rng is not None else np.random.default_rng(0)
    up = -np.mean([c.R[1] for c in cams], axis=0)
    norm = np.linalg.norm(up)
    z = up / norm if norm >= 1e-6 else np.array([0.0, 0.0, 1.0])
    # Fixed helper axis, then a random heading in the plane orthogonal to z.
    helper = np.eye(3)[np.argmin(np.abs(z))]
    b1 = np.cross(z, helper)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(z, b1)
    theta = rng.uniform(0.0, 2 * np.pi)
    x = np.cos(theta) * b1 + np.sin(theta) * b2
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Cuboid(R, fit_offsets(R, cams, margin))


def init_random(cams, margin: float = DEFAULT_MARGIN, rng: np.random.Generator | None = None) -> Cuboid:
    rng = rng if rng is not None else np.random.default_rng(0)
    R = random_rotation(rng)
    return Cuboid(R, fit_offsets(R, cams, margin))


def vp_refine_init(cub: Cuboid, scene: Scene, iters: int = 5, margin: float = DEFAULT_MARGIN,
                   cost_config: CostConfig | None = None) -> Cuboid:
    """A few LM iterations on the vanishing-point term alone, then refit the offsets."""
    cams = scene.cameras
    if not scene.has_lines or iters <= 0:
        return Cuboid(cub.R, fit_offsets(cub.R, cams, margin))
    base = cost_config or CostConfig()
    vp_only = CostConfig(
        alpha=0.0, beta=base.beta if base.beta > 0 else 1.0, tau=base.tau, feat_weight=0.0,
        huber_scale=base.huber_scale, points_per_image=base.points_per_image, gamma=base.gamma,
        edge_points_per_edge=base.edge_points_per_edge,
    )
    res = lm_minimize(cub, scene, 0, vp_only, LMConfig(iters=iters, containment_margin=0.0))
    R = res.state.R
    return Cuboid(R, fit_offsets(R, cams, margin))
