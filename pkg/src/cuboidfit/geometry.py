"""Cuboid and camera geometry: projection, ray casting, the inter-view warp.

Conventions
-----------
* A cuboid is ``(R, d)``. ``R`` maps world points into the cuboid-axis frame,
  ``u = R @ X``, and ``d = (x_lo, x_hi, y_lo, y_hi, z_lo, z_hi)`` are the face
  offsets in that frame. Face ``f`` lies on the plane ``u[f // 2] == d[f]``.
* Cameras map world to camera as ``X_cam = R @ X + t`` with x right, y down,
  z forward. Integer pixel coordinates are pixel centers.
* The 9-dim tangent is ``(dw, dd)``: ``R <- expm([dw]x) @ R`` and ``d <- d + dd``.

Most functions come in a scalar form that mirrors the math and a batched
``*_many`` form used by the cost assembly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations, product

import numpy as np
from scipy.spatial.transform import Rotation

FACE_NAMES = ("x_lo", "x_hi", "y_lo", "y_hi", "z_lo", "z_hi")

# Edges as (varying axis, face index on the first fixed axis, face index on the second).
EDGES = tuple(
    (a, 2 * b + sb, 2 * c + sc)
    for a in range(3)
    for b, c in [tuple(x for x in range(3) if x != a)]
    for sb, sc in product((0, 1), (0, 1))
)

BEHIND_EPS = 1e-6
GRAZING_EPS = 1e-7


class GeometryError(ValueError):
    """Raised when a cuboid or tangent update violates its invariants."""


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix, batched over leading dimensions."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for a single axis-angle vector."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians.

    atan2 of sine and cosine keeps full precision near 0, where arccos of the
    trace alone bottoms out around 1e-8 rad.
    """
    c = (np.trace(R) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, c))


def cube_symmetries() -> np.ndarray:
    """The 24 proper rotations mapping the coordinate axes onto themselves."""
    mats = []
    for perm in permutations(range(3)):
        for signs in product((1.0, -1.0), repeat=3):
            S = np.zeros((3, 3))
            S[np.arange(3), perm] = signs
            if np.linalg.det(S) > 0:
                mats.append(S)
    return np.array(mats)


@dataclass(frozen=True)
class Cuboid:
    R: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        d = np.array(self.d, dtype=float).reshape(6)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(d)):
            raise GeometryError("cuboid parameters must be finite")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("cuboid rotation is not a proper rotation")
        if np.any(d[0::2] >= d[1::2]):
            raise GeometryError(f"cuboid offsets must satisfy lo < hi, got {d.tolist()}")
        R.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "d", d)

    @property
    def lo(self) -> np.ndarray:
        return self.d[0::2]

    @property
    def hi(self) -> np.ndarray:
        return self.d[1::2]

    @property
    def extents(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    @property
    def center(self) -> np.ndarray:
        """World-frame center."""
        return self.R.T @ (0.5 * (self.lo + self.hi))

    def to_local(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.R.T

    def to_world(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, dtype=float) @ self.R

    def face_normal(self, face: int) -> np.ndarray:
        """Outward unit normal of ``face`` in world coordinates."""
        sign = 1.0 if face % 2 else -1.0
        return sign * self.R[face // 2]

    def vertices(self) -> np.ndarray:
        """The 8 corners in world coordinates, index bits = (x_hi, y_hi, z_hi)."""
        u = np.array([[self.d[2 * a + ((k >> (2 - a)) & 1)] for a in range(3)] for k in range(8)])
        return self.to_world(u)

    def contains(self, X: np.ndarray, margin: float = 0.0) -> np.ndarray:
        u = self.to_local(X)
        return np.all((u > self.lo + margin) & (u < self.hi - margin), axis=-1)

    def permuted(self, S: np.ndarray) -> Cuboid:
        """Same box, described with cuboid axes relabelled by the signed permutation ``S``."""
        R_new = S @ self.R
        lo = S @ self.lo
        hi = S @ self.hi
        d = np.empty(6)
        d[0::2] = np.minimum(lo, hi)
        d[1::2] = np.maximum(lo, hi)
        return Cuboid(R_new, d)

    def replace(self, R=None, d=None) -> Cuboid:
        return Cuboid(self.R if R is None else R, self.d if d is None else d)


@dataclass(frozen=True)
class Camera:
    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("camera rotation is not a proper rotation")
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise GeometryError("image dimensions must be at least 1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def look_at(cls, center, target, up, fx, fy, cx, cy, width, height) -> Camera:
        """Camera at ``center`` looking toward ``target`` with image-up roughly along ``up``."""
        center = np.asarray(center, dtype=float)
        z = np.asarray(target, dtype=float) - center
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=float))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ center, fx, fy, cx, cy, width, height)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, width: int, height: int) -> Camera:
        """Intrinsics for a resampled image of the given size (pixel-center convention)."""
        sx = width / self.width
        sy = height / self.height
        return Camera(
            self.R, self.t,
            self.fx * sx, self.fy * sy,
            (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
            width, height,
        )

    def pixel_rays(self, x: np.ndarray) -> np.ndarray:
        """Unit world-frame ray directions through pixels ``x`` of shape (N, 2)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d_cam = np.stack([(x[:, 0] - self.cx) / self.fx, (x[:, 1] - self.cy) / self.fy, np.ones(len(x))], axis=1)
        d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
        return d_cam @ self.R

    def in_image(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p)
        return (p[..., 0] >= 0) & (p[..., 0] <= self.width - 1) & (p[..., 1] >= 0) & (p[..., 1] <= self.height - 1)


@dataclass(frozen=True)
class CuboidTangent:
    dw: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dd: np.ndarray = field(default_factory=lambda: np.zeros(6))

    @classmethod
    def from_vector(cls, v) -> CuboidTangent:
        v = np.asarray(v, dtype=float).reshape(9)
        return cls(v[:3].copy(), v[3:].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dw, self.dd])

    def __neg__(self) -> CuboidTangent:
        return CuboidTangent(-np.asarray(self.dw), -np.asarray(self.dd))


@dataclass(frozen=True)
class FaceHit:
    point: np.ndarray
    face: int
    depth: float


def retract(cub: Cuboid, delta) -> Cuboid:
    """Apply a tangent step: rotation is updated on the left, offsets additively."""
    if not isinstance(delta, CuboidTangent):
        delta = CuboidTangent.from_vector(delta)
    dw = np.asarray(delta.dw, dtype=float)
    dd = np.asarray(delta.dd, dtype=float)
    if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(dd))):
        raise GeometryError("tangent step must be finite")
    R = so3_exp(dw) @ cub.R if np.any(dw) else cub.R
    # Re-orthonormalize to keep drift below the 1e-9 invariant over long runs.
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return Cuboid(R, cub.d + dd)


def project(cam: Camera, X) -> np.ndarray | None:
    """Pinhole projection of a world point; None when it is behind the camera."""
    Xc = cam.R @ np.asarray(X, dtype=float) + cam.t
    if Xc[2] <= BEHIND_EPS:
        return None
    return np.array([cam.fx * Xc[0] / Xc[2] + cam.cx, cam.fy * Xc[1] / Xc[2] + cam.cy])


def project_many(cam: Camera, X: np.ndarray):
    """Batched projection. Returns ``(pixels, camera-frame points, valid)``."""
    Xc = np.asarray(X, dtype=float) @ cam.R.T + cam.t
    z = Xc[:, 2]
    valid = z > BEHIND_EPS
    zs = np.where(valid, z, 1.0)
    p = np.stack([cam.fx * Xc[:, 0] / zs + cam.cx, cam.fy * Xc[:, 1] / zs + cam.cy], axis=1)
    return p, Xc, valid


def projection_jacobian(cam: Camera, Xc: np.ndarray) -> np.ndarray:
    """d(pixel)/d(camera-frame point), shape (N, 2, 3)."""
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    J = np.zeros((len(Xc), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / z**2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / z**2
    return J


def raycast_many(cub: Cuboid, origins: np.ndarray, dirs: np.ndarray):
    """Exit points of rays starting strictly inside the cuboid.

    Returns ``(points, faces, depths, valid)``; ``valid`` is False for rays whose
    origin is not inside the cuboid.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    origins, dirs = np.broadcast_arrays(origins, dirs)
    uo = origins @ cub.R.T
    uv = dirs @ cub.R.T
    inside = np.all((uo > cub.lo) & (uo < cub.hi), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(uv > 0, cub.hi, cub.lo)
        tax = np.where(uv != 0, (bound - uo) / uv, np.inf)
    tax = np.where(tax > 1e-9, tax, np.inf)
    axis = np.argmin(tax, axis=1)
    rows = np.arange(len(uo))
    t = tax[rows, axis]
    valid = inside & np.isfinite(t)
    t = np.where(valid, t, 0.0)
    faces = 2 * axis + (uv[rows, axis] > 0)
    points = origins + t[:, None] * dirs
    return points, faces, t, valid


def raycast_cuboid(cub: Cuboid, origin, direction) -> FaceHit | None:
    """First face hit along a ray from an interior origin."""
    points, faces, depths, valid = raycast_many(cub, origin, direction)
    if not valid[0]:
        return None
    return FaceHit(points[0], int(faces[0]), float(depths[0]))


def _grazing(cub: Cuboid, points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Hits within GRAZING_EPS of a face other than their own."""
    u = points @ cub.R.T
    near = (np.abs(u - cub.lo) < GRAZING_EPS) | (np.abs(u - cub.hi) < GRAZING_EPS)
    near[np.arange(len(u)), faces // 2] = False
    return near.any(axis=1)


@dataclass
class WarpResult:
    pixels: np.ndarray  # (N, 2) pixels in image j
    valid: np.ndarray  # (N,) bool
    points: np.ndarray  # (N, 3) world hit points
    faces: np.ndarray  # (N,)
    depths: np.ndarray  # (N,) ray parameter of the hit
    rays: np.ndarray  # (N, 3) unit world rays from camera i
    cam_points: np.ndarray  # (N, 3) hit points in camera j's frame


def _same_camera(a: Camera, b: Camera) -> bool:
    if a is b:
        return True
    return (np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t)
            and (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height))


def warp_many(cub: Cuboid, cam_i: Camera, cam_j: Camera, x: np.ndarray, check_bounds: bool = True) -> WarpResult:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    rays = cam_i.pixel_rays(x)
    points, faces, depths, hit = raycast_many(cub, cam_i.center[None], rays)
    hit &= ~_grazing(cub, points, faces)
    p, Xc, front = project_many(cam_j, points)
    if _same_camera(cam_i, cam_j):
        # Same view: the round trip is the identity, so skip its rounding error.
        p = x.copy()
    valid = hit & front
    if check_bounds:
        valid &= cam_j.in_image(p)
    return WarpResult(p, valid, points, faces, depths, rays, Xc)


def warp(cub: Cuboid, cam_i: Camera, cam_j: Camera, x) -> np.ndarray | None:
    """Map pixel ``x`` of image i to image j through the cuboid surface."""
    res = warp_many(cub, cam_i, cam_j, np.asarray(x, dtype=float)[None])
    return res.pixels[0] if res.valid[0] else None


def hit_jacobian(cub: Cuboid, origin: np.ndarray, wr: WarpResult) -> np.ndarray:
    """d(hit point)/d(tangent) for rays from a fixed origin, shape (N, 3, 9).

    The hit point moves along its ray; only the hit face's offset and the
    rotation enter.
    """
    n = len(wr.points)
    axis = wr.faces // 2
    e = np.zeros((n, 3))
    e[np.arange(n), axis] = 1.0
    u = wr.points @ cub.R.T
    normals = cub.R[axis]  # plane normal (unsigned) in world
    denom = np.einsum("ij,ij->i", normals, wr.rays)
    dt = np.zeros((n, 9))
    dt[:, :3] = -np.cross(u, e) / denom[:, None]
    dt[np.arange(n), 3 + wr.faces] = 1.0 / denom
    return wr.rays[:, :, None] * dt[:, None, :]


def warp_jacobian_many(cub: Cuboid, cam_i: Camera, cam_j: Camera, wr: WarpResult) -> np.ndarray:
    """Analytic d(warped pixel)/d(tangent), shape (N, 2, 9)."""
    dX = hit_jacobian(cub, cam_i.center, wr)
    dp = projection_jacobian(cam_j, wr.cam_points) @ cam_j.R
    return dp @ dX


def warp_jacobian(cub: Cuboid, cam_i: Camera, cam_j: Camera, x) -> np.ndarray:
    wr = warp_many(cub, cam_i, cam_j, np.asarray(x, dtype=float)[None], check_bounds=False)
    if not wr.valid[0]:
        raise GeometryError("warp is undefined at this pixel")
    return warp_jacobian_many(cub, cam_i, cam_j, wr)[0]


def vanishing_points(cub: Cuboid, cam: Camera) -> np.ndarray:
    """The three cuboid-axis vanishing directions in camera frame, as rows.

    Each is unit length with its largest-magnitude entry positive.
    """
    V = (cam.R @ cub.R.T).T.copy()
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    idx = np.argmax(np.abs(V), axis=1)
    signs = np.sign(V[np.arange(3), idx])
    return V * signs[:, None]


def camera_centers(cams) -> np.ndarray:
    return np.array([c.center for c in cams]).reshape(-1, 3)


def expand_to_contain(cub: Cuboid, cams, margin: float) -> Cuboid:
    """Grow faces outward so that every camera center is at least ``margin`` inside."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if len(cams) == 0:
        return cub
    u = camera_centers(cams) @ cub.R.T
    lo = np.minimum(cub.lo, u.min(axis=0) - margin)
    hi = np.maximum(cub.hi, u.max(axis=0) + margin)
    if np.array_equal(lo, cub.lo) and np.array_equal(hi, cub.hi):
        return cub
    d = np.empty(6)
    d[0::2] = lo
    d[1::2] = hi
    return Cuboid(cub.R, d)


def fit_offsets(R: np.ndarray, cams, margin: float) -> np.ndarray:
    """Offsets of the tightest box with rotation ``R`` keeping cameras ``margin`` inside."""
    u = camera_centers(cams) @ np.asarray(R).T
    d = np.empty(6)
    d[0::2] = u.min(axis=0) - margin
    d[1::2] = u.max(axis=0) + margin
    return d


def edge_parameters(n_per_edge: int) -> np.ndarray:
    if n_per_edge < 1:
        raise ValueError("n_per_edge must be at least 1")
    return (np.arange(n_per_edge) + 0.5) / n_per_edge


def sample_edge_points(cub: Cuboid, n_per_edge: int) -> np.ndarray:
    """Evenly spaced points on the 12 edges, shape (12 * n_per_edge, 3)."""
    u, _ = _edge_samples_local(cub, n_per_edge)
    return cub.to_world(u)


def _edge_samples_local(cub: Cuboid, n_per_edge: int):
    """Local coordinates of edge samples and d(u)/d(offsets), shapes (M, 3), (M, 3, 6)."""
    s = edge_parameters(n_per_edge)
    us, dus = [], []
    for a, fb, fc in EDGES:
        u = np.zeros((len(s), 3))
        du = np.zeros((len(s), 3, 6))
        u[:, a] = cub.d[2 * a] + s * (cub.d[2 * a + 1] - cub.d[2 * a])
        du[:, a, 2 * a] = 1.0 - s
        du[:, a, 2 * a + 1] = s
        u[:, fb // 2] = cub.d[fb]
        du[:, fb // 2, fb] = 1.0
        u[:, fc // 2] = cub.d[fc]
        du[:, fc // 2, fc] = 1.0
        us.append(u)
        dus.append(du)
    return np.concatenate(us), np.concatenate(dus)


def edge_points_with_jacobian(cub: Cuboid, n_per_edge: int):
    """World edge samples and d(X)/d(tangent), shapes (M, 3) and (M, 3, 9).

    Samples keep their fractional position along the edge, so they slide with
    the two end faces as well as moving with the two faces defining the edge.
    """
    u, du = _edge_samples_local(cub, n_per_edge)
    X = cub.to_world(u)
    J = np.zeros((len(u), 3, 9))
    J[:, :, :3] = cub.R.T @ skew(u)
    J[:, :, 3:] = np.einsum("ji,mjk->mik", cub.R, du)
    return X, J


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return Rotation.from_quat(q).as_matrix()
