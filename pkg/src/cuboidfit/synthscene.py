"""Deterministic synthetic cuboid rooms with exact ground truth.

A room is a textured box observed by a handful of upright pinhole cameras.
Images are rendered by casting one ray per sub-pixel sample and looking up a
procedural value-noise texture on the hit face, so every quantity used by the
fitting code (depths, edges, line segments, 2D-3D correspondences) is known
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .densemaps import (
    DEFAULT_LEVEL_SCALES,
    DenseGrid,
    LevelMaps,
    Pyramid,
    area_downsample,
    level_shape,
)
from .geometry import EDGES, Camera, Cuboid, raycast_many, so3_exp
from .scene import Correspondence, Frame, Scene

N_OCTAVES = 4
EDGE_SIGMA_PX = 2.0
SEAM_WIDTH = 0.015
NEAR_PLANE = 1e-3


class PlacementError(RuntimeError):
    """Camera placement failed: the room is too small for the requested clearance."""


@dataclass
class RoomTexture:
    """Four-octave value noise per face plus dark axis-parallel seams.

    Face coordinates are the two in-plane cuboid-frame coordinates measured
    from the face's low corner, in meters.
    """

    seed: int
    base_cell: float = 1.2
    lattices: dict = field(default_factory=dict, repr=False)
    seams: dict = field(default_factory=dict, repr=False)

    def build(self, cub: Cuboid, n_seams: int = 6) -> RoomTexture:
        rng = np.random.default_rng(self.seed)
        for face in range(6):
            a, b = [x for x in range(3) if x != face // 2]
            size = np.array([cub.extents[a], cub.extents[b]])
            octaves = []
            for o in range(N_OCTAVES):
                cell = self.base_cell / 2**o
                n = np.ceil(size / cell).astype(int) + 2
                octaves.append((cell, rng.uniform(0.0, 1.0, size=(n[0], n[1], 3))))
            self.lattices[face] = octaves
            seams = []
            for _ in range(n_seams):
                along = int(rng.integers(2))
                length = rng.uniform(0.3, 1.5)
                start = rng.uniform(0.1, max(0.11, size[along] - length - 0.1))
                length = min(length, size[along] - start - 0.05)
                across = rng.uniform(0.15, size[1 - along] - 0.15)
                seams.append((along, start, start + length, across))
            self.seams[face] = seams
        return self

    def lookup(self, face: np.ndarray, st: np.ndarray) -> np.ndarray:
        out = np.zeros((len(face), 3))
        for f in range(6):
            m = face == f
            if not m.any():
                continue
            c = st[m]
            val = np.zeros((len(c), 3))
            amp_total = 0.0
            for o, (cell, lat) in enumerate(self.lattices[f]):
                amp = 0.5**o
                val += amp * _value_noise(lat, c / cell)
                amp_total += amp
            val = 0.15 + 0.7 * val / amp_total
            shade = np.ones(len(c))
            for along, s0, s1, across in self.seams[f]:
                pos = c[:, along]
                off = c[:, 1 - along] - across
                gap = np.maximum(np.maximum(s0 - pos, pos - s1), 0.0)
                dist2 = off**2 + gap**2
                shade *= 1.0 - 0.6 * np.exp(-dist2 / (2 * SEAM_WIDTH**2))
            out[m] = val * shade[:, None]
        return out

    def seam_segments(self, cub: Cuboid) -> list:
        """World-space endpoints of every seam."""
        segs = []
        for f in range(6):
            axis = f // 2
            a, b = [x for x in range(3) if x != axis]
            for along, s0, s1, across in self.seams[f]:
                ends = []
                for s in (s0, s1):
                    u = np.zeros(3)
                    u[axis] = cub.d[f]
                    local = (s, across) if along == 0 else (across, s)
                    u[a] = cub.lo[a] + local[0]
                    u[b] = cub.lo[b] + local[1]
                    ends.append(cub.to_world(u))
                segs.append(tuple(ends))
        return segs


def _value_noise(lat: np.ndarray, p: np.ndarray) -> np.ndarray:
    i = np.clip(np.floor(p).astype(int), 0, np.array(lat.shape[:2]) - 2)
    f = p - i
    f = f * f * f * (f * (f * 6 - 15) + 10)  # quintic fade
    i0, j0 = i[:, 0], i[:, 1]
    fx, fy = f[:, :1], f[:, 1:]
    top = lat[i0, j0] * (1 - fy) + lat[i0, j0 + 1] * fy
    bot = lat[i0 + 1, j0] * (1 - fy) + lat[i0 + 1, j0 + 1] * fy
    return top * (1 - fx) + bot * fx


def face_coordinates(cub: Cuboid, points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    u = cub.to_local(points)
    st = np.zeros((len(points), 2))
    for f in range(6):
        m = faces == f
        a, b = [x for x in range(3) if x != f // 2]
        st[m, 0] = u[m, a] - cub.lo[a]
        st[m, 1] = u[m, b] - cub.lo[b]
    return st


def pixel_grid(width: int, height: int, supersample: int = 1) -> np.ndarray:
    """Sample positions (H*W*s*s, 2) ordered row-major by pixel, then sub-sample."""
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    ys, xs = np.mgrid[0:height, 0:width]
    sx = xs[:, :, None, None] + offs[None, None, None, :]
    sy = ys[:, :, None, None] + offs[None, None, :, None]
    sx, sy = np.broadcast_arrays(sx, sy)
    return np.stack([sx.ravel(), sy.ravel()], axis=1)


def render_rgb(cub: Cuboid, texture: RoomTexture, cam: Camera, supersample: int = 2) -> np.ndarray:
    pix = pixel_grid(cam.width, cam.height, supersample)
    rays = cam.pixel_rays(pix)
    points, faces, _, valid = raycast_many(cub, cam.center[None], rays)
    if not valid.all():
        raise ValueError("camera is not inside the room")
    rgb = texture.lookup(faces, face_coordinates(cub, points, faces))
    return rgb.reshape(cam.height, cam.width, supersample * supersample, 3).mean(axis=2)


def render_depth(cub: Cuboid, cam: Camera) -> np.ndarray:
    """Z-depth per pixel center (NaN where the ray misses)."""
    pix = pixel_grid(cam.width, cam.height)
    points, _, _, valid = raycast_many(cub, cam.center[None], cam.pixel_rays(pix))
    z = (points @ cam.R.T + cam.t)[:, 2]
    return np.where(valid, z, np.nan).reshape(cam.height, cam.width)


def clip_segment_to_view(cam: Camera, A: np.ndarray, B: np.ndarray, near: float = NEAR_PLANE,
                         frustum: bool = True):
    """Clip a world segment to the camera frustum and project it.

    Returns ``(p1, p2)`` pixel endpoints or None if nothing is visible.
    """
    a = cam.R @ A + cam.t
    b = cam.R @ B + cam.t
    planes = [np.array([0.0, 0.0, 1.0, -near])]
    if frustum:
        W, H = cam.width - 1, cam.height - 1
        # x_pix >= 0 etc. written as linear inequalities on camera-frame points.
        planes += [
            np.array([cam.fx, 0.0, cam.cx, 0.0]),
            np.array([-cam.fx, 0.0, W - cam.cx, 0.0]),
            np.array([0.0, cam.fy, cam.cy, 0.0]),
            np.array([0.0, -cam.fy, H - cam.cy, 0.0]),
        ]
    t0, t1 = 0.0, 1.0
    for pl in planes:
        fa = pl[:3] @ a + pl[3]
        fb = pl[:3] @ b + pl[3]
        if fa < 0 and fb < 0:
            return None
        if fa < 0:
            t0 = max(t0, fa / (fa - fb))
        elif fb < 0:
            t1 = min(t1, fa / (fa - fb))
    if t1 <= t0:
        return None
    p = []
    for t in (t0, t1):
        X = a + t * (b - a)
        p.append(np.array([cam.fx * X[0] / X[2] + cam.cx, cam.fy * X[1] / X[2] + cam.cy]))
    return p[0], p[1]


def cuboid_edge_segments(cub: Cuboid) -> list:
    V = cub.vertices()
    segs = []
    for a, fb, fc in EDGES:
        bits = [0, 0, 0]
        bits[fb // 2] = fb % 2
        bits[fc // 2] = fc % 2
        ends = []
        for s in (0, 1):
            bits[a] = s
            ends.append(V[(bits[0] << 2) | (bits[1] << 1) | bits[2]])
        segs.append(tuple(ends))
    return segs


def render_edge_map(cub: Cuboid, cam: Camera, sigma: float = EDGE_SIGMA_PX) -> np.ndarray:
    """``1 - exp(-dist^2 / 2 sigma^2)`` of the distance to the projected cuboid edges.

    Values are 0 on edges and approach 1 away from them, so squaring the
    sampled value is smallest when cuboid edges project onto image edges.
    """
    pix = pixel_grid(cam.width, cam.height)
    best = np.full(len(pix), np.inf)
    for A, B in cuboid_edge_segments(cub):
        seg = clip_segment_to_view(cam, A, B, frustum=False)
        if seg is None:
            continue
        p1, p2 = seg
        ab = p2 - p1
        denom = ab @ ab
        t = np.clip(((pix - p1) @ ab) / denom, 0, 1) if denom > 0 else np.zeros(len(pix))
        dist = np.linalg.norm(pix - (p1 + t[:, None] * ab), axis=1)
        best = np.minimum(best, dist)
    return (1.0 - np.exp(-best**2 / (2 * sigma**2))).reshape(cam.height, cam.width)


def view_lines(cub: Cuboid, texture: RoomTexture, cam: Camera, min_length: float = 5.0) -> np.ndarray:
    out = []
    for A, B in texture.seam_segments(cub):
        seg = clip_segment_to_view(cam, A, B)
        if seg is None or np.linalg.norm(seg[1] - seg[0]) < min_length:
            continue
        out.append(np.concatenate(seg))
    return np.array(out).reshape(-1, 4)


@dataclass
class SynthRoom:
    gt_cuboid: Cuboid
    cameras: list
    texture_seed: int
    images: list  # DenseGrid RGB per camera
    gt_depth: list  # (H, W) arrays
    gt_lines: list  # (L, 4) pixel arrays
    gt_correspondences: list
    level_scales: tuple = DEFAULT_LEVEL_SCALES
    texture: RoomTexture | None = field(default=None, repr=False)

    def pyramid(self, i: int, edges: bool = False) -> Pyramid:
        """Photometric pyramid of view ``i``; with ``edges`` the GT edge maps are attached."""
        return room_pyramid(self.gt_cuboid, self.cameras[i], self.images[i], self.level_scales, edges)

    def scene(self, edges: bool = False, lines: bool = False) -> Scene:
        frames = [
            Frame(cam, self.pyramid(i, edges), self.gt_lines[i] if lines else None)
            for i, cam in enumerate(self.cameras)
        ]
        return Scene(frames, list(self.gt_correspondences), self.gt_cuboid)


def room_pyramid(cub: Cuboid, cam: Camera, image: DenseGrid, level_scales, edges: bool) -> Pyramid:
    levels = []
    for s in level_scales:
        h, w = level_shape(image.height, image.width, s)
        feats = area_downsample(image.data, h, w)
        if edges:
            lc = cam.scaled(w, h)
            edge = DenseGrid(render_edge_map(cub, lc))
            edge_conf = DenseGrid.constant(h, w, 1.0)
        else:
            edge = DenseGrid.constant(h, w, 0.0)
            edge_conf = DenseGrid.constant(h, w, 0.0)
        levels.append(LevelMaps(DenseGrid(feats), DenseGrid.constant(h, w, 1.0), edge, edge_conf, w / image.width))
    return Pyramid(tuple(levels))


def random_room_cuboid(rng: np.random.Generator, extents_range=(3.5, 6.0), height_range=(2.5, 3.2),
                       max_tilt_deg: float = 20.0) -> Cuboid:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(0.0, max_tilt_deg))
    R = so3_exp(axis * angle)
    ext = np.array([rng.uniform(*extents_range), rng.uniform(*extents_range), rng.uniform(*height_range)])
    lo = -ext / 2 + rng.uniform(-1.0, 1.0, 3)
    d = np.empty(6)
    d[0::2] = lo
    d[1::2] = lo + ext
    return Cuboid(R, d)


def place_cameras(cub: Cuboid, n_cameras: int, rng: np.random.Generator, width: int, height: int,
                  fov_deg: float, clearance: float = 0.3, region: tuple = (0.2, 0.8)) -> list:
    """Upright cameras spread over the room, each looking at a point near its middle.

    Horizontal positions are drawn from the ``region`` fraction of each
    extent, at a standing height above the floor; positions closer than
    ``clearance`` to any face are rejected.
    """
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    up = cub.R[2]
    cams = []
    attempts = 0
    while len(cams) < n_cameras:
        attempts += 1
        if attempts > 1000:
            raise PlacementError(f"placed {len(cams)} of {n_cameras} cameras after 1000 attempts")
        u = cub.lo + cub.extents * rng.uniform(region[0], region[1], 3)
        u[2] = cub.lo[2] + rng.uniform(1.1, 1.7)
        target = cub.lo + cub.extents * rng.uniform(0.3, 0.7, 3)
        target[2] = cub.lo[2] + rng.uniform(0.5, 1.5)
        horiz = np.hypot(*(target - u)[:2])
        if np.any(u - cub.lo < clearance) or np.any(cub.hi - u < clearance) or horiz < 0.5:
            continue
        center = cub.to_world(u)
        cam = Camera.look_at(center, cub.to_world(target), up, f, f, (width - 1) / 2, (height - 1) / 2,
                             width, height)
        roll = rng.uniform(-0.05, 0.05)
        Rr = so3_exp(np.array([0.0, 0.0, roll]))
        cams.append(Camera(Rr @ cam.R, Rr @ cam.t, cam.fx, cam.fy, cam.cx, cam.cy, width, height))
    return cams


def sample_correspondences(cub: Cuboid, cams: list, per_view: int, rng: np.random.Generator) -> list:
    out = []
    for i, cam in enumerate(cams):
        pix = rng.uniform((0, 0), (cam.width - 1, cam.height - 1), size=(per_view, 2))
        points, _, _, valid = raycast_many(cub, cam.center[None], cam.pixel_rays(pix))
        out.extend(Correspondence(i, p, X) for p, X, ok in zip(pix, points, valid) if ok)
    return out


def render_room(cub: Cuboid, cams: list, texture_seed: int, rng: np.random.Generator,
                level_scales=DEFAULT_LEVEL_SCALES, n_correspondences: int = 100,
                texture: RoomTexture | None = None) -> SynthRoom:
    texture = texture if texture is not None else RoomTexture(texture_seed).build(cub)
    images = [DenseGrid(render_rgb(cub, texture, cam)) for cam in cams]
    depths = [render_depth(cub, cam) for cam in cams]
    lines = [view_lines(cub, texture, cam) for cam in cams]
    corr = sample_correspondences(cub, cams, n_correspondences, rng)
    return SynthRoom(cub, cams, texture_seed, images, depths, lines, corr, tuple(level_scales), texture)


def generate_room(seed: int, extents_range=(3.5, 6.0), n_cameras: int = 5, image_size=(160, 120),
                  fov_deg: float = 90.0, level_scales=DEFAULT_LEVEL_SCALES, height_range=(2.5, 3.2),
                  n_correspondences: int = 100) -> SynthRoom:
    """A random textured room with ``n_cameras`` views; fully determined by ``seed``."""
    if n_cameras < 2:
        raise ValueError("need at least two cameras")
    if min(extents_range) <= 0 or min(height_range) <= 0:
        raise ValueError("extents must be positive")
    rng = np.random.default_rng(seed)
    cub = random_room_cuboid(rng, extents_range, height_range)
    width, height = image_size
    cams = place_cameras(cub, n_cameras, rng, width, height, fov_deg)
    texture_seed = int(rng.integers(2**63))
    return render_room(cub, cams, texture_seed, rng, level_scales, n_correspondences)


@dataclass
class StreamFrame:
    """One frame of a multi-room stream; rendering happens on first access."""

    camera: Camera
    room: int


@dataclass
class RoomStream:
    rooms: list  # GT cuboids
    textures: list
    frames: list  # StreamFrame
    level_scales: tuple = DEFAULT_LEVEL_SCALES

    def image(self, k: int) -> DenseGrid:
        sf = self.frames[k]
        return DenseGrid(render_rgb(self.rooms[sf.room], self.textures[sf.room], sf.camera))

    def frame(self, k: int, edges: bool = False, lines: bool = True, image: DenseGrid | None = None) -> Frame:
        sf = self.frames[k]
        cub = self.rooms[sf.room]
        tex = self.textures[sf.room]

        def load():
            img = image if image is not None else self.image(k)
            return room_pyramid(cub, sf.camera, img, self.level_scales, edges)

        return Frame(sf.camera, load, view_lines(cub, tex, sf.camera) if lines else None)

    def scene_frames(self, edges: bool = False, lines: bool = True) -> list:
        return [self.frame(k, edges, lines) for k in range(len(self.frames))]


def generate_two_room_stream(seed: int, frames_per_room=(10, 10), subsample_factor: int = 60,
                             image_size=(160, 120), fov_deg: float = 90.0,
                             level_scales=DEFAULT_LEVEL_SCALES) -> RoomStream:
    """Two adjacent rooms sharing orientation and floor/ceiling heights.

    The rooms are separated along the shared x axis by a 0.2 m wall. Cameras
    visit room 0, then room 1; every view is rendered against the room that
    contains its camera. The stream holds ``subsample_factor`` times as many
    frames as will survive subsampling, with the surviving ones at indices
    that are multiples of ``subsample_factor``.
    """
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = so3_exp(axis * np.deg2rad(rng.uniform(0, 20)))
    z_lo = rng.uniform(-1.6, -1.2)
    z_hi = z_lo + rng.uniform(2.5, 3.2)
    x0 = rng.uniform(-4.5, -3.5)
    x1 = x0 + rng.uniform(4.0, 5.5)
    x2 = x1 + 0.2
    x3 = x2 + rng.uniform(4.0, 5.5)
    y_a = rng.uniform(-2.5, -2.0), rng.uniform(2.0, 2.5)
    y_b = y_a[0] + rng.uniform(-0.5, 0.5), y_a[1] + rng.uniform(-0.5, 0.5)
    rooms = [
        Cuboid(R, (x0, x1, y_a[0], y_a[1], z_lo, z_hi)),
        Cuboid(R, (x2, x3, y_b[0], y_b[1], z_lo, z_hi)),
    ]
    textures = [RoomTexture(int(rng.integers(2**63))).build(c) for c in rooms]
    width, height = image_size
    frames = []
    for r, n in enumerate(frames_per_room):
        kept = place_cameras(rooms[r], n, rng, width, height, fov_deg)
        for cam in kept:
            frames.append(StreamFrame(cam, r))
            # Filler frames repeat the kept pose; subsampling drops them.
            for _ in range(subsample_factor - 1):
                frames.append(StreamFrame(cam, r))
    return RoomStream(rooms, textures, frames, tuple(level_scales))
