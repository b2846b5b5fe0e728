"""Residual blocks for the featuremetric, edge and vanishing-point terms.

Every block carries residuals, a Jacobian with respect to the 9-dim cuboid
tangent and per-row weights, so the solver can form the weighted normal
equations ``J^T W J`` and ``J^T W r`` without knowing which term it is
looking at.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .densemaps import guided_sample, sample_many
from .geometry import (
    Camera,
    Cuboid,
    WarpResult,
    edge_points_with_jacobian,
    project_many,
    projection_jacobian,
    skew,
    warp_jacobian_many,
    warp_many,
)
from .scene import LineSegment, Scene

logger = logging.getLogger(__name__)

TERMS = ("feat", "edge", "vp")


@dataclass(frozen=True)
class CostConfig:
    alpha: float = 0.05
    beta: float = 40.0
    tau: float = 0.05
    huber_scale: float = 1.0
    points_per_image: int = 512
    gamma: float = 4.0
    edge_points_per_edge: int = 40
    feat_weight: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "tau", "huber_scale", "gamma", "feat_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.points_per_image < 1 or self.edge_points_per_edge < 1:
            raise ValueError("point counts must be at least 1")

    def term_weights(self, scene: Scene) -> dict:
        # No line segments means no VP term.
        beta = self.beta if scene.has_lines else 0.0
        return {"feat": self.feat_weight, "edge": self.alpha, "vp": beta}


@dataclass
class ResidualBlock:
    values: np.ndarray  # (n,)
    jacobian: np.ndarray | None  # (n, 9)
    weights: np.ndarray  # (n,)
    term: str
    cost: float  # robustified weighted cost of this term
    keys: np.ndarray  # (n,) stable row identifiers

    @classmethod
    def empty(cls, term: str, with_jacobian: bool = True) -> ResidualBlock:
        return cls(np.zeros(0), np.zeros((0, 9)) if with_jacobian else None, np.zeros(0), term, 0.0,
                   np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.values)

    def gradient(self) -> np.ndarray:
        """``J^T W r``; half the gradient of the cost with weights frozen."""
        return np.einsum("n,nk->k", self.weights * self.values, self.jacobian)

    def hessian(self) -> np.ndarray:
        return np.einsum("n,nk,nl->kl", self.weights, self.jacobian, self.jacobian)


def huber_cost(sq_norm: np.ndarray, scale: float) -> np.ndarray:
    """Huber loss expressed on the squared norm."""
    if scale <= 0:
        return sq_norm.copy()
    k2 = scale * scale
    return np.where(sq_norm <= k2, sq_norm, 2.0 * scale * np.sqrt(sq_norm) - k2)


def huber_weight(sq_norm: np.ndarray, scale: float) -> np.ndarray:
    """IRLS weight ``min(1, scale / |r|)``, the derivative of ``huber_cost``."""
    if scale <= 0:
        return np.ones_like(sq_norm)
    norm = np.sqrt(sq_norm)
    return np.where(norm <= scale, 1.0, scale / np.maximum(norm, 1e-300))


def sample_points(scene: Scene, level: int, config: CostConfig, rng: np.random.Generator) -> list:
    """Guided point sets per image for one pyramid level.

    The request is capped at the number of pixels with positive confidence,
    which matters on small coarse levels.
    """
    points = []
    for frame in scene.frames:
        conf = frame.pyramid[level].feat_conf
        k = min(config.points_per_image, int(np.count_nonzero(conf.data > 0)))
        points.append(guided_sample(conf, k, config.gamma, rng).astype(float))
    return points


def featuremetric_block(cub: Cuboid, scene: Scene, level: int, points: list, config: CostConfig,
                        with_jacobian: bool = True) -> ResidualBlock:
    frames = scene.frames
    n_img = len(frames)
    cams = [f.level_camera(level) for f in frames]
    maps = [f.pyramid[level] for f in frames]
    max_pts = max((len(p) for p in points), default=0)
    D = maps[0].features.channels if maps else 0
    vals, jacs, wts, keys = [], [], [], []
    cost = 0.0
    for i in range(n_img):
        x = points[i]
        if len(x) == 0:
            continue
        f_i, ok_i = sample_many(maps[i].features, x)
        c_i, _ = sample_many(maps[i].feat_conf, x)
        for j in range(n_img):
            if i == j:
                continue
            wr = warp_many(cub, cams[i], cams[j], x)
            valid = wr.valid & ok_i
            if not valid.any():
                continue
            idx = np.nonzero(valid)[0]
            p = wr.pixels[idx]
            if with_jacobian:
                f_j, ok_j, grad = sample_many(maps[j].features, p, with_gradient=True)
            else:
                f_j, ok_j = sample_many(maps[j].features, p)
            c_j, _ = sample_many(maps[j].feat_conf, p)
            idx = idx[ok_j]
            r = f_i[idx] - f_j[ok_j]
            conf = (c_i[idx, 0] * c_j[ok_j, 0])
            sq = np.einsum("nd,nd->n", r, r)
            cost += float(np.sum(conf * huber_cost(sq, config.huber_scale)))
            w = conf * huber_weight(sq, config.huber_scale)
            vals.append(r.ravel())
            wts.append(np.repeat(w, D))
            pair = i * n_img + j
            keys.append(((pair * max_pts + idx)[:, None] * D + np.arange(D)).ravel())
            if with_jacobian:
                sub = _subset(wr, np.nonzero(wr.valid & ok_i)[0][ok_j])
                dw = warp_jacobian_many(cub, cams[i], cams[j], sub)
                jacs.append((-grad[ok_j] @ dw).reshape(-1, 9))
    return _assemble("feat", vals, jacs, wts, keys, cost, with_jacobian)


def _subset(wr: WarpResult, idx: np.ndarray) -> WarpResult:
    return WarpResult(wr.pixels[idx], wr.valid[idx], wr.points[idx], wr.faces[idx], wr.depths[idx],
                      wr.rays[idx], wr.cam_points[idx])


def _assemble(term, vals, jacs, wts, keys, cost, with_jacobian) -> ResidualBlock:
    if not vals:
        return ResidualBlock.empty(term, with_jacobian)
    return ResidualBlock(
        np.concatenate(vals),
        np.concatenate(jacs) if with_jacobian else None,
        np.concatenate(wts),
        term,
        cost,
        np.concatenate(keys),
    )


def edge_block(cub: Cuboid, scene: Scene, level: int, config: CostConfig,
               with_jacobian: bool = True) -> ResidualBlock:
    n_edge = config.edge_points_per_edge
    X, dX = edge_points_with_jacobian(cub, n_edge)
    vals, jacs, wts, keys = [], [], [], []
    cost = 0.0
    for i, frame in enumerate(scene.frames):
        lv = frame.pyramid[level]
        if not lv.has_edges:
            continue
        cam = frame.level_camera(level)
        p, Xc, front = project_many(cam, X)
        idx = np.nonzero(front)[0]
        if with_jacobian:
            e, ok, grad = sample_many(lv.edge, p[idx], with_gradient=True)
        else:
            e, ok = sample_many(lv.edge, p[idx])
        w, _ = sample_many(lv.edge_conf, p[idx])
        idx_ok = idx[ok]
        r = e[ok, 0]
        w = w[ok, 0]
        cost += float(np.sum(w * r * r))
        vals.append(r)
        wts.append(w)
        keys.append(i * len(X) + idx_ok)
        if with_jacobian:
            dp = projection_jacobian(cam, Xc[idx_ok]) @ cam.R
            jacs.append(np.einsum("nc,nck,nkl->nl", grad[ok, 0, :], dp, dX[idx_ok]))
    return _assemble("edge", vals, jacs, wts, keys, cost, with_jacobian)


def normalize_lines(cam: Camera, lines: np.ndarray) -> np.ndarray:
    """Pixel endpoints (L, 4) to intrinsics-free coordinates."""
    lines = np.asarray(lines, dtype=float).reshape(-1, 4)
    out = lines.copy()
    out[:, [0, 2]] = (lines[:, [0, 2]] - cam.cx) / cam.fx
    out[:, [1, 3]] = (lines[:, [1, 3]] - cam.cy) / cam.fy
    return out


def _dvp_many(lines: np.ndarray, V: np.ndarray, with_grad: bool = False):
    """Distances (L, K) of each line's first endpoint to the line joining its
    midpoint and each vanishing point; optionally d/dv, shape (L, K, 3)."""
    L = len(lines)
    m = np.stack([0.5 * (lines[:, 0] + lines[:, 2]), 0.5 * (lines[:, 1] + lines[:, 3]), np.ones(L)], axis=1)
    l1 = np.stack([lines[:, 0], lines[:, 1], np.ones(L)], axis=1)
    lhat = np.cross(m[:, None, :], V[None, :, :])  # (L, K, 3)
    a = np.einsum("lkc,lc->lk", lhat, l1)
    b = np.hypot(lhat[..., 0], lhat[..., 1])
    degenerate = b < 1e-12
    bs = np.where(degenerate, 1.0, b)
    dist = np.where(degenerate, np.inf, np.abs(a) / bs)
    if not with_grad:
        return dist, None
    dl = np.sign(a)[..., None] * l1[:, None, :] / bs[..., None]
    dl[..., :2] -= (np.abs(a) / bs**3)[..., None] * lhat[..., :2]
    # lhat = m x v  =>  d lhat / d v = [m]x
    dv = np.einsum("lkc,lcd->lkd", dl, skew(m))
    dv[degenerate] = 0.0
    return dist, dv


def dvp(line, vp) -> float:
    """Endpoint-to-(midpoint, vanishing point) line distance for one segment.

    ``line`` is a :class:`LineSegment` or ``(x1, y1, x2, y2)`` in normalized
    coordinates; ``vp`` is homogeneous. Returns ``inf`` for a degenerate line.
    """
    if isinstance(line, LineSegment):
        line = np.concatenate([line.p1, line.p2])
    dist, _ = _dvp_many(np.asarray(line, dtype=float).reshape(1, 4), np.asarray(vp, dtype=float).reshape(1, 3))
    return float(dist[0, 0])


def vp_block(cub: Cuboid, scene: Scene, config: CostConfig, with_jacobian: bool = True) -> ResidualBlock:
    vals, jacs, wts, keys = [], [], [], []
    cost = 0.0
    offset = 0
    for frame in scene.frames:
        if not frame.n_lines:
            continue
        cam = frame.camera
        lines = normalize_lines(cam, frame.lines)
        M = cam.R @ cub.R.T
        V = M.T  # rows are the three cuboid-axis directions in the camera frame
        dist, dv = _dvp_many(lines, V, with_grad=with_jacobian)
        k = np.argmin(dist, axis=1)
        rows = np.arange(len(lines))
        best = dist[rows, k]
        capped = best >= config.tau
        r = np.where(capped, config.tau, best)
        cost += float(np.sum(r * r))
        vals.append(r)
        wts.append(np.ones(len(r)))
        keys.append(offset + rows)
        offset += len(lines)
        if with_jacobian:
            J = np.zeros((len(lines), 9))
            # v_k' = M (I - [w]x) e_k  =>  d v_k / d w = M [e_k]x
            E = np.eye(3)[k]
            dvdw = M[None] @ skew(E)
            J[:, :3] = np.einsum("lc,lcd->ld", dv[rows, k], dvdw)
            J[capped] = 0.0
            jacs.append(J)
    return _assemble("vp", vals, jacs, wts, keys, cost, with_jacobian)


@dataclass
class CostEvaluation:
    total: float
    blocks: dict  # term -> ResidualBlock (only terms with nonzero weight)
    weights: dict  # term -> scalar multiplier

    def normal_equations(self):
        """Weighted ``(J^T W J, J^T W r)`` summed over terms in fixed order."""
        H = np.zeros((9, 9))
        g = np.zeros(9)
        for term in TERMS:
            if term in self.blocks and len(self.blocks[term]):
                c = self.weights[term]
                H += c * self.blocks[term].hessian()
                g += c * self.blocks[term].gradient()
        return H, g

    @property
    def n_rows(self) -> int:
        return sum(len(b) for b in self.blocks.values())


def total_cost(cub: Cuboid, scene: Scene, level: int, config: CostConfig, points: list | None = None,
               rng: np.random.Generator | None = None, with_jacobian: bool = True) -> CostEvaluation:
    """Weighted sum of the three terms at one pyramid level.

    Terms with zero weight are skipped entirely. ``points`` are the guided
    samples for the featuremetric term; drawn from ``rng`` when omitted.
    """
    weights = config.term_weights(scene)
    blocks = {}
    if weights["feat"] > 0:
        if points is None:
            points = sample_points(scene, level, config, rng if rng is not None else np.random.default_rng(0))
        blocks["feat"] = featuremetric_block(cub, scene, level, points, config, with_jacobian)
    if weights["edge"] > 0:
        blocks["edge"] = edge_block(cub, scene, level, config, with_jacobian)
    if weights["vp"] > 0:
        blocks["vp"] = vp_block(cub, scene, config, with_jacobian)
    total = 0.0
    for term in TERMS:
        if term in blocks:
            total += weights[term] * blocks[term].cost
    return CostEvaluation(total, blocks, weights)
