"""Layout metrics: 3D IoU, Chamfer distance, symmetric rotation error, AUC, depth and normals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, Cuboid, cube_symmetries, raycast_many, rotation_angle

_SYMMETRIES = cube_symmetries()
_PLANE_EPS = 1e-10
AUC_THRESHOLDS = (1.0, 20.0)
NORMAL_THRESHOLD_DEG = 10.0


class MetricsError(ValueError):
    pass


def _box_faces(cub: Cuboid) -> list:
    """Six quads in world coordinates, counter-clockwise seen from outside."""
    faces = []
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        for side in (0, 1):
            quad = []
            for vb, vc in ((0, 0), (1, 0), (1, 1), (0, 1)):
                u = np.zeros(3)
                u[a] = cub.d[2 * a + side]
                u[b] = cub.d[2 * b + vb]
                u[c] = cub.d[2 * c + vc]
                quad.append(u)
            quad = np.array(quad)
            if side == 0:
                quad = quad[::-1]
            faces.append(cub.to_world(quad))
    return faces


def _halfspaces(cub: Cuboid) -> list:
    """(n, c) with the box being the intersection of n.x <= c."""
    out = []
    for f in range(6):
        n = cub.face_normal(f)
        c = cub.d[f] if f % 2 else -cub.d[f]
        out.append((n, c))
    return out


def _clip_polygon(poly: np.ndarray, n: np.ndarray, c: float) -> np.ndarray:
    dist = poly @ n - c
    inside = dist <= _PLANE_EPS
    out = []
    k = len(poly)
    for i in range(k):
        j = (i + 1) % k
        if inside[i]:
            out.append(poly[i])
        if inside[i] != inside[j]:
            t = dist[i] / (dist[i] - dist[j])
            out.append(poly[i] + t * (poly[j] - poly[i]))
    return _dedupe_ring(np.array(out).reshape(-1, 3))


def _dedupe_ring(poly: np.ndarray) -> np.ndarray:
    if len(poly) == 0:
        return poly
    keep = [0]
    for i in range(1, len(poly)):
        if np.linalg.norm(poly[i] - poly[keep[-1]]) > 1e-12:
            keep.append(i)
    if len(keep) > 1 and np.linalg.norm(poly[keep[-1]] - poly[keep[0]]) <= 1e-12:
        keep.pop()
    return poly[keep]


def _cap_polygon(points: np.ndarray, n: np.ndarray) -> np.ndarray | None:
    uniq = []
    for p in points:
        if all(np.linalg.norm(p - q) > 1e-9 for q in uniq):
            uniq.append(p)
    if len(uniq) < 3:
        return None
    P = np.array(uniq)
    center = P.mean(axis=0)
    e1 = P[0] - center
    if np.linalg.norm(e1) < 1e-15:
        e1 = P[1] - center
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    rel = P - center
    ang = np.arctan2(rel @ e2, rel @ e1)
    return P[np.argsort(ang, kind="stable")]


def clip_polyhedron(faces: list, n: np.ndarray, c: float) -> list:
    """Keep the part of a closed convex polyhedron where ``n.x <= c``."""
    all_pts = np.concatenate(faces)
    if np.all(all_pts @ n - c <= _PLANE_EPS):
        return faces
    out = []
    on_plane = []
    for poly in faces:
        clipped = _clip_polygon(poly, n, c)
        if len(clipped) >= 3:
            out.append(clipped)
        if len(clipped):
            on_plane.extend(p for p in clipped if abs(p @ n - c) <= _PLANE_EPS)
    cap = _cap_polygon(np.array(on_plane).reshape(-1, 3), n) if on_plane else None
    if cap is not None:
        out.append(cap)
    return out


def polyhedron_volume(faces: list) -> float:
    """Divergence theorem over fan-triangulated outward-oriented faces."""
    vol = 0.0
    for poly in faces:
        v0 = poly[0]
        for i in range(1, len(poly) - 1):
            vol += np.dot(v0, np.cross(poly[i], poly[i + 1]))
    return vol / 6.0


def intersection_volume(a: Cuboid, b: Cuboid) -> float:
    faces = _box_faces(a)
    for n, c in _halfspaces(b):
        faces = clip_polyhedron(faces, n, c)
        if not faces:
            return 0.0
    return max(polyhedron_volume(faces), 0.0)


def iou3d(a: Cuboid, b: Cuboid) -> float:
    """Exact intersection over union of two oriented boxes."""
    va = polyhedron_volume(_box_faces(a))
    vb = polyhedron_volume(_box_faces(b))
    inter = min(intersection_volume(a, b), va, vb)
    return float(inter / (va + vb - inter))


def sample_surface(cub: Cuboid, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform samples on the box surface, world coordinates."""
    ext = cub.extents
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]]).repeat(2)
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = cub.lo + ext * rng.uniform(size=(n, 3))
    axis = faces // 2
    u[np.arange(n), axis] = cub.d[faces]
    return cub.to_world(u)


def distance_to_surface(cub: Cuboid, X: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from points to the box surface (inside or out)."""
    u = cub.to_local(X)
    half = cub.extents / 2
    q = np.abs(u - (cub.lo + half)) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = -np.max(q, axis=1)
    return np.where(np.all(q <= 0, axis=1), inside, outside)


def chamfer(a: Cuboid, b: Cuboid, n_samples: int = 10000, seed=0) -> float:
    """Symmetric mean surface-to-surface distance.

    Both boxes are sampled with generators built from the same seed, which
    makes the value exactly symmetric in its arguments.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2**63))
    pa = sample_surface(a, n_samples, np.random.default_rng(seed))
    pb = sample_surface(b, n_samples, np.random.default_rng(seed))
    da = float(np.mean(distance_to_surface(b, pa)))
    db = float(np.mean(distance_to_surface(a, pb)))
    return 0.5 * (da + db)


def rotation_error(a: Cuboid, b: Cuboid) -> float:
    """Smallest rotation angle (degrees) between the boxes over the 24 axis relabellings."""
    Ra = a.R if isinstance(a, Cuboid) else np.asarray(a)
    Rb = b.R if isinstance(b, Cuboid) else np.asarray(b)
    rel = Rb @ Ra.T
    traces = np.einsum("sij,ji->s", _SYMMETRIES, rel)
    return float(np.degrees(rotation_angle(_SYMMETRIES[np.argmax(traces)] @ rel)))


def auc_recall(errors, threshold: float) -> float:
    """Area under the recall-vs-threshold curve on ``[0, threshold]``, in percent."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise MetricsError("auc_recall needs at least one error")
    if threshold <= 0:
        raise MetricsError("threshold must be positive")
    return float(100.0 * np.mean(np.clip(threshold - errors, 0.0, None)) / threshold)


def render_layout(cub: Cuboid, cam: Camera):
    """Per-pixel z-depth and outward world normal; NaN where no face is hit."""
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    points, faces, _, valid = raycast_many(cub, cam.center[None], cam.pixel_rays(pix))
    depth = (points @ cam.R.T + cam.t)[:, 2]
    depth = np.where(valid, depth, np.nan)
    face_normals = np.array([cub.face_normal(f) for f in range(6)])
    normals = face_normals[faces]
    normals[~valid] = np.nan
    return depth.reshape(cam.height, cam.width), normals.reshape(cam.height, cam.width, 3)


def depth_normal_metrics(pred: Cuboid, gt: Cuboid, cams) -> tuple[float, float]:
    """Depth RMSE (m) and percentage of pixels with normal error below 10 degrees.

    Pixels missing in either render are ignored; both numbers are averaged
    over views that have at least one valid pixel.
    """
    if not cams:
        raise MetricsError("need at least one camera")
    rmses, agrees = [], []
    for cam in cams:
        dp, npred = render_layout(pred, cam)
        dg, ngt = render_layout(gt, cam)
        ok = np.isfinite(dp) & np.isfinite(dg)
        if not ok.any():
            continue
        rmses.append(float(np.sqrt(np.mean((dp[ok] - dg[ok]) ** 2))))
        cosang = np.clip(np.sum(npred[ok] * ngt[ok], axis=1), -1.0, 1.0)
        agrees.append(float(100.0 * np.mean(np.degrees(np.arccos(cosang)) < NORMAL_THRESHOLD_DEG)))
    if not rmses:
        raise MetricsError("no pixel is valid in both renders")
    return float(np.mean(rmses)), float(np.mean(agrees))


@dataclass
class MetricsReport:
    iou: float
    chamfer: float
    rotation_error: float
    auc_at: dict = field(default_factory=dict)
    depth_rmse: float | None = None
    normal_agree: float | None = None
    success: bool | None = None

    def to_json(self) -> dict:
        out = {
            "iou": self.iou,
            "chamfer_m": self.chamfer,
            "rot_deg": self.rotation_error,
            "auc": {f"{k:g}": v for k, v in self.auc_at.items()},
            "depth_rmse_m": self.depth_rmse,
            "normal_pct": self.normal_agree,
        }
        if self.success is not None:
            out["success"] = self.success
        return out


def evaluate_layout(pred: Cuboid, gt: Cuboid, cams=(), chamfer_seed: int = 0) -> MetricsReport:
    rot = rotation_error(pred, gt)
    report = MetricsReport(
        iou=iou3d(pred, gt),
        chamfer=chamfer(pred, gt, seed=chamfer_seed),
        rotation_error=rot,
        auc_at={t: auc_recall([rot], t) for t in AUC_THRESHOLDS},
    )
    if cams:
        report.depth_rmse, report.normal_agree = depth_normal_metrics(pred, gt, cams)
    return report
