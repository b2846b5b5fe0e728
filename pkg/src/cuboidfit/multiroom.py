"""Sequential multi-room estimation over a posed frame stream.

Frames are subsampled, buffered until enough have accumulated, and each new
room is fitted together with the rooms accepted so far. Rooms can share
their orientation, their floor and ceiling heights, and have their wall
offsets re-optimized when a new room joins.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .costs import CostConfig, sample_points, total_cost
from .geometry import EDGES, Cuboid, expand_to_contain, fit_offsets, retract
from .initialization import DEFAULT_MARGIN
from .manifest import matrix_to_quaternion as quaternion_wxyz
from .metrics import iou3d
from .pipeline import fit_scene
from .scene import Scene
from .solver import SCALE_NAMES, LMConfig, lm_solve

logger = logging.getLogger(__name__)

# Offsets in the local 9-vector tangent (dw, dd): walls are x/y faces, floor and ceiling z faces.
_ROT = (0, 1, 2)
_WALLS = (3, 4, 5, 6)
_FLOOR_CEIL = (7, 8)


@dataclass(frozen=True)
class MultiRoomConfig:
    subsample_factor: int = 60
    frames_per_room: int = 8
    overlap_iou_max: float = 0.01
    share_orientation: bool = True
    share_floor_ceiling: bool = True
    share_walls: bool = True

    def __post_init__(self):
        if self.subsample_factor < 1:
            raise ValueError("subsample_factor must be at least 1")
        if self.frames_per_room < 2:
            raise ValueError("frames_per_room must be at least 2")
        if not 0.0 <= self.overlap_iou_max <= 1.0:
            raise ValueError("overlap_iou_max must lie in [0, 1]")
        if self.share_floor_ceiling and not self.share_orientation:
            raise ValueError("floor/ceiling sharing needs a shared orientation")

    @classmethod
    def unshared(cls, **kw) -> MultiRoomConfig:
        return cls(share_orientation=False, share_floor_ceiling=False, share_walls=False, **kw)


@dataclass
class RoomRecord:
    cuboid: Cuboid
    frames: list  # indices into the original stream
    scene: Scene


@dataclass
class Layout:
    rooms: list = field(default_factory=list)  # RoomRecord, in acceptance order
    shared_orientation: bool = True
    shared_floor_ceiling: bool = True
    proposals: list = field(default_factory=list)  # stream indices of every fitted candidate
    rejected: int = 0
    no_progress: bool = False  # some fit could not take a single step

    @property
    def cuboids(self) -> list:
        return [r.cuboid for r in self.rooms]

    @property
    def rotation(self) -> np.ndarray | None:
        if not self.rooms or not self.shared_orientation:
            return None
        return self.rooms[0].cuboid.R

    @property
    def floor_ceiling(self) -> tuple | None:
        if not self.rooms or not self.shared_floor_ceiling:
            return None
        d = self.rooms[0].cuboid.d
        return float(d[4]), float(d[5])

    def to_json(self) -> dict:
        rot = self.rotation
        fc = self.floor_ceiling
        return {
            "rotation_wxyz": None if rot is None else quaternion_wxyz(rot),
            "floor_ceiling": None if fc is None else list(fc),
            "rooms": [
                {
                    "rotation_wxyz": quaternion_wxyz(r.cuboid.R),
                    "offsets": [float(v) for v in r.cuboid.d],
                    "walls": [float(v) for v in r.cuboid.d[:4]],
                    "frames": [int(i) for i in r.frames],
                }
                for r in self.rooms
            ],
            "proposals": [[int(i) for i in p] for p in self.proposals],
            "rejected": self.rejected,
        }

    def to_obj(self) -> str:
        lines = []
        for k, cub in enumerate(self.cuboids):
            lines.append(f"o room{k}")
            for v in cub.vertices():
                lines.append("v {:.9f} {:.9f} {:.9f}".format(*v))
            base = 8 * k + 1
            for axis, b, c in EDGES:
                i0, i1 = _edge_vertex_indices(axis, b, c)
                lines.append(f"l {base + i0} {base + i1}")
        return "\n".join(lines) + "\n"


def _edge_vertex_indices(axis: int, face_b: int, face_c: int) -> tuple:
    # Same ordering as Cuboid.vertices: bit (2 - k) is set when coordinate k takes its hi value.
    bits = (face_b % 2) << (2 - face_b // 2) | (face_c % 2) << (2 - face_c // 2)
    return bits, bits | (1 << (2 - axis))


class JointProblem:
    """Several cuboids whose tangent coordinates are partly shared.

    Each room maps the joint tangent to its own 9-vector through a 0/1
    selection matrix, so the joint normal equations are sums of the
    per-room ones pulled back through those matrices.
    """

    def __init__(self, scenes: list, level: int, cost_config: CostConfig, points: list,
                 maps: list, share_floor_ceiling: bool, share_orientation: bool, margin: float):
        self.scenes = scenes
        self.level = level
        self.cost_config = cost_config
        self.points = points
        self.maps = maps
        self.dim = maps[0].shape[1]
        self.share_floor_ceiling = share_floor_ceiling
        self.share_orientation = share_orientation
        self.margin = margin

    def evaluate(self, cubs):
        cost = 0.0
        H = np.zeros((self.dim, self.dim))
        g = np.zeros(self.dim)
        for cub, scene, pts, P in zip(cubs, self.scenes, self.points, self.maps):
            ev = total_cost(cub, scene, self.level, self.cost_config, pts)
            h_r, g_r = ev.normal_equations()
            cost += ev.total
            H += P.T @ h_r @ P
            g += P.T @ g_r
        return cost, H, g

    def retract(self, cubs, delta):
        out = [
            expand_to_contain(retract(cub, P @ delta), scene.cameras, self.margin)
            for cub, scene, P in zip(cubs, self.scenes, self.maps)
        ]
        return unify_shared(out, self.share_orientation, self.share_floor_ceiling)


def unify_shared(cubs: list, orientation: bool, floor_ceiling: bool) -> list:
    """Make shared quantities identical; containment may have pushed one room's floor or ceiling out."""
    if not (orientation or floor_ceiling) or len(cubs) < 2:
        return cubs
    R = cubs[0].R
    z_lo = min(c.d[4] for c in cubs)
    z_hi = max(c.d[5] for c in cubs)
    out = []
    for c in cubs:
        d = c.d.copy()
        if floor_ceiling:
            d[4], d[5] = z_lo, z_hi
        out.append(Cuboid(R if orientation else c.R, d))
    return out


def tangent_maps(n_rooms: int, config: MultiRoomConfig) -> list:
    """Selection matrices from the joint tangent to each room's 9-vector.

    The newest room (last) is always fully free. Earlier rooms only take
    part through the shared coordinates, plus their walls if enabled.
    """
    cols = []  # per room, a dict local index -> joint column
    next_col = 0

    def new_cols(n):
        nonlocal next_col
        out = list(range(next_col, next_col + n))
        next_col += n
        return out

    shared_rot = new_cols(3) if config.share_orientation else None
    shared_fc = new_cols(2) if config.share_floor_ceiling else None
    for r in range(n_rooms):
        newest = r == n_rooms - 1
        m = {}
        if shared_rot is not None:
            m.update(zip(_ROT, shared_rot))
        elif newest:
            m.update(zip(_ROT, new_cols(3)))
        if shared_fc is not None:
            m.update(zip(_FLOOR_CEIL, shared_fc))
        elif newest:
            m.update(zip(_FLOOR_CEIL, new_cols(2)))
        if newest or config.share_walls:
            m.update(zip(_WALLS, new_cols(4)))
        cols.append(m)
    maps = []
    for m in cols:
        P = np.zeros((9, next_col))
        for local, joint in m.items():
            P[local, joint] = 1.0
        maps.append(P)
    return maps


def joint_coarse_to_fine(cubs: list, scenes: list, config: MultiRoomConfig, cost_config: CostConfig,
                         lm_config: LMConfig, rng: np.random.Generator) -> tuple[list, bool]:
    """Joint LM over all levels. Rooms without free coordinates are held fixed and not evaluated."""
    maps = tangent_maps(len(cubs), config)
    active = [r for r, P in enumerate(maps) if P.any()]
    state = [cubs[r] for r in active]
    act_scenes = [scenes[r] for r in active]
    act_maps = [maps[r] for r in active]
    margin = lm_config.containment_margin
    state = unify_shared([expand_to_contain(c, s.cameras, margin) for c, s in zip(state, act_scenes)],
                         config.share_orientation, config.share_floor_ceiling)
    progress = True
    for level in range(len(SCALE_NAMES)):
        points = [sample_points(s, level, cost_config, rng) if cost_config.feat_weight > 0 else None
                  for s in act_scenes]
        problem = JointProblem(act_scenes, level, cost_config, points, act_maps,
                               config.share_floor_ceiling, config.share_orientation, margin)
        res = lm_solve(problem, state, lm_config)
        progress &= not res.no_progress
        state = res.state
    out = list(cubs)
    for r, c in zip(active, state):
        out[r] = c
    if config.share_orientation or config.share_floor_ceiling:
        out = unify_shared(out, config.share_orientation, config.share_floor_ceiling)
    return out, progress


def _new_room_init(scene: Scene, prev: Cuboid, config: MultiRoomConfig) -> Cuboid:
    """Shared rotation from the accepted rooms, walls from the new cameras with the usual margin."""
    d = fit_offsets(prev.R, scene.cameras, DEFAULT_MARGIN)
    if config.share_floor_ceiling:
        d[4:6] = prev.d[4:6]
    return Cuboid(prev.R, d)


def multiroom_run(frames: list, config: MultiRoomConfig, cost_config: CostConfig, lm_config: LMConfig,
                  rng: np.random.Generator, vp_iters: int = 5) -> Layout:
    """Walk the stream and return the accepted rooms.

    After a room is accepted, frames are skipped while the camera center is
    still inside it. A candidate is accepted only if its IoU with every
    accepted room is at most ``overlap_iou_max``.
    """
    layout = Layout(shared_orientation=config.share_orientation,
                    shared_floor_ceiling=config.share_floor_ceiling)
    kept = list(range(0, len(frames), config.subsample_factor))
    buffer = []
    for idx in kept:
        frame = frames[idx]
        if layout.rooms and layout.rooms[-1].cuboid.contains(frame.camera.center[None])[0]:
            continue
        buffer.append(idx)
        if len(buffer) < config.frames_per_room:
            continue
        scene = Scene([frames[i] for i in buffer])
        layout.proposals.append(list(buffer))
        if not layout.rooms or not config.share_orientation:
            res = fit_scene(scene, cost_config, lm_config, rng, vp_iters=vp_iters)
            layout.no_progress |= res.fit.no_progress
            candidate = res.final
            refit = [r.cuboid for r in layout.rooms]
            if layout.rooms and (config.share_floor_ceiling or config.share_walls):
                cubs, progress = joint_coarse_to_fine(refit + [candidate],
                                                      [r.scene for r in layout.rooms] + [scene],
                                                      config, cost_config, lm_config, rng)
                layout.no_progress |= not progress
                refit, candidate = cubs[:-1], cubs[-1]
        else:
            c0 = _new_room_init(scene, layout.rooms[-1].cuboid, config)
            cubs, progress = joint_coarse_to_fine([r.cuboid for r in layout.rooms] + [c0],
                                                  [r.scene for r in layout.rooms] + [scene],
                                                  config, cost_config, lm_config, rng)
            layout.no_progress |= not progress
            refit, candidate = cubs[:-1], cubs[-1]
        overlap = max((iou3d(candidate, c) for c in refit), default=0.0)
        if overlap <= config.overlap_iou_max:
            for rec, c in zip(layout.rooms, refit):
                rec.cuboid = c
            layout.rooms.append(RoomRecord(candidate, list(buffer), scene))
            logger.info("accepted room %d from frames %s", len(layout.rooms) - 1, buffer)
        else:
            layout.rejected += 1
            logger.info("rejected candidate from frames %s: IoU %.4f with an accepted room", buffer, overlap)
        buffer = []
    return layout
