"""Small random scenes for cost and solver tests: smooth random feature maps, no rendering."""

import numpy as np
from scipy.ndimage import gaussian_filter

from cuboidfit.costs import total_cost
from cuboidfit.densemaps import DenseGrid, LevelMaps, Pyramid, level_shape
from cuboidfit.geometry import Cuboid, project_many, retract, so3_exp
from cuboidfit.scene import Frame, Scene
from cuboidfit.synthscene import place_cameras, random_room_cuboid, render_edge_map


def smooth_field(rng, h, w, channels, sigma=2.0):
    noise = rng.normal(size=(h, w, channels))
    out = np.stack([gaussian_filter(noise[:, :, c], sigma, mode="wrap") for c in range(channels)], axis=2)
    return out / out.std()


def axis_lines(cub, cam, rng, n=12, noise_px=0.0):
    """Projections of short 3D segments parallel to the cuboid axes, optionally jittered."""
    out = []
    tries = 0
    while len(out) < n and tries < 50 * n:
        tries += 1
        u = cub.lo + cub.extents * rng.uniform(0.05, 0.95, 3)
        axis = rng.integers(3)
        v = u.copy()
        v[axis] += 0.6
        P, _, front = project_many(cam, cub.to_world(np.array([u, v])))
        if not front.all() or not all(cam.in_image(p) for p in P):
            continue
        if np.linalg.norm(P[1] - P[0]) < 4:
            continue
        out.append(P.ravel() + rng.normal(scale=noise_px, size=4))
    return np.array(out).reshape(-1, 4)


def random_scene(seed, n_cams=3, size=(40, 30), channels=2, edges=True, lines=True, scales=(0.25, 0.5, 1.0),
                 conf="random"):
    """Cuboid, cameras and random maps. Returns ``(gt_cuboid, scene)``."""
    rng = np.random.default_rng(seed)
    cub = random_room_cuboid(rng)
    cams = place_cameras(cub, n_cams, rng, size[0], size[1], 90.0)
    frames = []
    for cam in cams:
        levels = []
        for s in scales:
            h, w = level_shape(size[1], size[0], s)
            feats = smooth_field(rng, h, w, channels, sigma=1.5)
            fc = rng.uniform(0.3, 1.0, (h, w)) if conf == "random" else np.ones((h, w))
            if edges:
                edge = render_edge_map(cub, cam.scaled(w, h))
                ec = rng.uniform(0.3, 1.0, (h, w))
            else:
                edge, ec = np.zeros((h, w)), np.zeros((h, w))
            levels.append(LevelMaps(DenseGrid(feats), DenseGrid(fc), DenseGrid(edge), DenseGrid(ec), w / size[0]))
        frames.append(Frame(cam, Pyramid(tuple(levels)), axis_lines(cub, cam, rng, noise_px=0.5) if lines else None))
    return cub, Scene(frames, [], cub)


def perturb(cub, rng, deg=3.0, offset=0.2):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = so3_exp(axis * np.deg2rad(rng.uniform(0, deg))) @ cub.R
    return Cuboid(R, cub.d + rng.uniform(-offset, offset, 6))


def tangent_step(cub, k, h):
    e = np.zeros(9)
    e[k] = h
    return retract(cub, e)


def block_residuals(cub, scene, level, cfg, points):
    """Residual values keyed by stable row id, per term."""
    ev = total_cost(cub, scene, level, cfg, points, with_jacobian=False)
    return {t: dict(zip(b.keys.tolist(), b.values)) for t, b in ev.blocks.items()}


def fd_gradient(cub, scene, level, cfg, points, h=1e-6):
    """``J^T W r`` by central differences of the residuals, weights frozen at ``cub``.

    Rows are matched by key so a row that appears or vanishes under the
    perturbation does not pollute the difference.
    """
    ev = total_cost(cub, scene, level, cfg, points)
    g = np.zeros(9)
    for k in range(9):
        plus = block_residuals(tangent_step(cub, k, h), scene, level, cfg, points)
        minus = block_residuals(tangent_step(cub, k, -h), scene, level, cfg, points)
        for term, block in ev.blocks.items():
            acc = 0.0
            for key, r0, w in zip(block.keys.tolist(), block.values, block.weights):
                if key in plus[term] and key in minus[term]:
                    acc += w * r0 * (plus[term][key] - minus[term][key]) / (2 * h)
            g[k] += ev.weights[term] * acc
    return g, ev
