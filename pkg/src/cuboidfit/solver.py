"""Levenberg-Marquardt over the cuboid tangent and the coarse-to-fine driver."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .costs import CostConfig, sample_points, total_cost
from .geometry import Cuboid, GeometryError, expand_to_contain, retract, warp_many, project_many
from .scene import Scene

logger = logging.getLogger(__name__)

SCALE_NAMES = ("coarse", "medium", "fine")
SUCCESS_THRESHOLD_PX = 3.0


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class LMConfig:
    damping_init: tuple = (0.1,) * 9
    damping_up: float = 10.0
    damping_down: float = 0.1
    mode: str = "fixed"  # "fixed" or "converge"
    iters: int = 15  # outer iterations in fixed mode, cap in converge mode
    rel_tol: float = 1e-6
    step_tol: float = 1e-8
    max_retries: int = 10
    containment_margin: float = 0.1

    def __post_init__(self):
        if self.mode not in ("fixed", "converge"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if min(self.damping_init) <= 0:
            raise ValueError("damping must be positive")
        if not (self.damping_up > 1 and 0 < self.damping_down < 1):
            raise ValueError("damping_up must exceed 1 and damping_down lie in (0, 1)")
        if self.iters < 0 or self.containment_margin < 0:
            raise ValueError("iters and containment_margin must be non-negative")

    @classmethod
    def converge(cls, **kw) -> LMConfig:
        kw.setdefault("iters", 100)
        return cls(mode="converge", **kw)


class Problem(Protocol):
    """What the LM loop needs: a cost with normal equations and a retraction."""

    dim: int

    def evaluate(self, state): ...  # -> (cost, H, g)

    def retract(self, state, delta): ...


@dataclass
class LMResult:
    state: object
    costs: list  # cost before the first and after every outer iteration
    iterations: int
    accepted: int
    no_progress: bool = False


def lm_solve(problem: Problem, state, config: LMConfig, damping=None) -> LMResult:
    """Minimize with per-parameter additive damping ``J^T W J + diag(lambda)``.

    A step is accepted only if the cost drops; otherwise damping grows and the
    step is retried up to ``max_retries`` times within the same iteration.
    """
    lam = np.array(config.damping_init if damping is None else damping, dtype=float)
    if lam.size != problem.dim:
        lam = np.full(problem.dim, float(lam.flat[0]))
    start = state
    cost, H, g = problem.evaluate(state)
    costs = [cost]
    accepted = 0
    it = 0
    while it < config.iters:
        it += 1
        step_taken = None
        solved_any = False
        for _ in range(config.max_retries + 1):
            A = H + np.diag(lam)
            try:
                factor = cho_factor(A)
            except LinAlgError:
                lam *= config.damping_up
                continue
            solved_any = True
            delta = -cho_solve(factor, g)
            if not np.all(np.isfinite(delta)):
                lam *= config.damping_up
                continue
            try:
                cand = problem.retract(state, delta)
            except GeometryError:
                lam *= config.damping_up
                continue
            c_cost, c_H, c_g = problem.evaluate(cand)
            if c_cost < cost:
                step_taken = delta
                lam *= config.damping_down
                break
            lam *= config.damping_up
        if not solved_any:
            logger.warning("normal equations singular beyond damping rescue")
            return LMResult(start, costs, it, accepted, no_progress=True)
        if step_taken is None:
            costs.append(cost)
            if config.mode == "converge":
                break
            continue
        prev = cost
        state, cost, H, g = cand, c_cost, c_H, c_g
        costs.append(cost)
        accepted += 1
        if config.mode == "converge":
            if prev - cost <= config.rel_tol * max(abs(prev), 1e-300):
                break
            if np.linalg.norm(step_taken) <= config.step_tol:
                break
    return LMResult(state, costs, it, accepted)


class CuboidProblem:
    """Single-cuboid cost at one pyramid level with fixed sample points."""

    dim = 9

    def __init__(self, scene: Scene, level: int, cost_config: CostConfig, points, margin: float):
        self.scene = scene
        self.level = level
        self.cost_config = cost_config
        self.points = points
        self.margin = margin
        self.cameras = scene.cameras

    def evaluate(self, cub: Cuboid):
        ev = total_cost(cub, self.scene, self.level, self.cost_config, self.points)
        H, g = ev.normal_equations()
        return ev.total, H, g

    def retract(self, cub: Cuboid, delta) -> Cuboid:
        return expand_to_contain(retract(cub, delta), self.cameras, self.margin)


def lm_minimize(c0: Cuboid, scene: Scene, level: int, cost_config: CostConfig, lm_config: LMConfig,
                rng: np.random.Generator | None = None, points=None) -> LMResult:
    """Fit one pyramid level. Sample points are drawn once from ``rng``."""
    if points is None and cost_config.feat_weight > 0:
        points = sample_points(scene, level, cost_config, rng if rng is not None else np.random.default_rng(0))
    c0 = expand_to_contain(c0, scene.cameras, lm_config.containment_margin)
    problem = CuboidProblem(scene, level, cost_config, points, lm_config.containment_margin)
    return lm_solve(problem, c0, lm_config)


@dataclass
class FitResult:
    cuboids: dict = field(default_factory=dict)  # scale name -> Cuboid
    costs: dict = field(default_factory=dict)  # scale name -> cost trajectory
    iterations: dict = field(default_factory=dict)
    success: dict = field(default_factory=dict)  # scale name -> solver made progress without failing
    initial: Cuboid | None = None

    @property
    def final(self) -> Cuboid:
        return self.cuboids[list(self.cuboids)[-1]] if self.cuboids else self.initial

    @property
    def no_progress(self) -> bool:
        return not all(self.success.values())


def coarse_to_fine(c0: Cuboid, scene: Scene, cost_config: CostConfig, lm_config: LMConfig,
                   rng: np.random.Generator, levels=(0, 1, 2)) -> FitResult:
    """Run LM at each requested level, each starting from the previous result.

    ``levels=(0,)`` stops after the coarse scale.
    """
    result = FitResult(initial=c0)
    cub = c0
    for lv in levels:
        name = SCALE_NAMES[lv]
        res = lm_minimize(cub, scene, lv, cost_config, lm_config, rng)
        if res.no_progress:
            logger.warning("%s scale made no progress; continuing from the last valid cuboid", name)
        cub = res.state
        result.cuboids[name] = cub
        result.costs[name] = res.costs
        result.iterations[name] = res.iterations
        result.success[name] = not res.no_progress
    return result


def warp_residuals(cub: Cuboid, cameras, correspondences) -> np.ndarray:
    """Pixel offsets between warped GT pixels and projected GT points over all ordered pairs."""
    by_image = {}
    for c in correspondences:
        by_image.setdefault(c.image, []).append(c)
    out = []
    for i, items in sorted(by_image.items()):
        x = np.array([c.pixel for c in items], dtype=float)
        X = np.array([c.point for c in items], dtype=float)
        for j, cam_j in enumerate(cameras):
            if j == i:
                continue
            wr = warp_many(cub, cameras[i], cam_j, x)
            p, _, front = project_many(cam_j, X)
            ok = wr.valid & front
            out.append(wr.pixels[ok] - p[ok])
    return np.concatenate(out) if out else np.zeros((0, 2))


def warp_error(cub: Cuboid, cameras, correspondences) -> float:
    """Root of the mean squared warp discrepancy, in pixels.

    Only successfully warped points count. Raises if none do.
    """
    if not correspondences:
        raise SolverError("no ground-truth correspondences")
    res = warp_residuals(cub, cameras, correspondences)
    if len(res) == 0:
        raise SolverError("no correspondence could be warped")
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))))
