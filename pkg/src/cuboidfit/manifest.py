"""Scene manifest: a JSON file listing posed frames, with images, grids and lines in sidecar files.

Layout of the JSON document::

    {
      "version": 1,
      "frames": [
        {
          "camera": {"rotation_wxyz": [w, x, y, z], "translation": [tx, ty, tz],
                     "fx": ..., "fy": ..., "cx": ..., "cy": ..., "width": W, "height": H},
          "image": "frame_000.png",                      # optional
          "levels": [{"features": "a.dgrd", "feat_conf": "b.dgrd",
                      "edge": "c.dgrd", "edge_conf": "d.dgrd"}, ...],   # optional, 3 entries
          "lines": "frame_000_lines.json"                # optional, [[x1, y1, x2, y2], ...]
        }
      ],
      "gt_cuboid": {"rotation_wxyz": [...], "offsets": [x_lo, x_hi, y_lo, y_hi, z_lo, z_hi]},
      "gt_correspondences": "correspondences.json",      # [{"image", "pixel", "point"}, ...]
      "gt_rooms": [cuboid, ...]                           # optional, multi-room streams
    }

Relative paths resolve against the manifest's directory. A frame needs an
image or a complete pyramid; when both are present the pyramid wins.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .densemaps import (DenseGrid, GridFormatError, LevelMaps, Pyramid, load_grid, photometric_pyramid,
                        save_grid)
from .geometry import Camera, Cuboid, GeometryError
from .scene import Correspondence, Frame, Scene

MANIFEST_VERSION = 1
LEVEL_FIELDS = ("features", "feat_conf", "edge", "edge_conf")
QUAT_TOL = 1e-6


class ManifestError(ValueError):
    """Bad manifest or sidecar. The message names the file, the frame (if any) and the field."""

    def __init__(self, path, message: str, frame: int | None = None, field: str | None = None):
        self.path = str(path)
        self.frame = frame
        self.field = field
        parts = [self.path]
        if frame is not None:
            parts.append(f"frame {frame}")
        if field is not None:
            parts.append(field)
        super().__init__(": ".join(parts + [message]))


@dataclass
class Manifest:
    path: Path
    scene: Scene
    gt_cuboid: Cuboid | None = None
    gt_rooms: list = field(default_factory=list)


# ---------------------------------------------------------------- conversions


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def matrix_to_quaternion(R) -> list:
    x, y, z, w = Rotation.from_matrix(np.asarray(R)).as_quat()
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return [float(v) for v in q]


def camera_to_json(cam: Camera) -> dict:
    return {
        "rotation_wxyz": matrix_to_quaternion(cam.R),
        "translation": [float(v) for v in cam.t],
        "fx": float(cam.fx), "fy": float(cam.fy), "cx": float(cam.cx), "cy": float(cam.cy),
        "width": int(cam.width), "height": int(cam.height),
    }


def cuboid_to_json(cub: Cuboid) -> dict:
    return {"rotation_wxyz": matrix_to_quaternion(cub.R), "offsets": [float(v) for v in cub.d]}


# ---------------------------------------------------------------- field readers


class _Reader:
    """Field access that turns every problem into a ManifestError with context."""

    def __init__(self, path, frame: int | None = None, prefix: str = ""):
        self.path = path
        self.frame = frame
        self.prefix = prefix

    def fail(self, name: str, message: str):
        raise ManifestError(self.path, message, self.frame, self.prefix + name)

    def child(self, name: str) -> _Reader:
        return _Reader(self.path, self.frame, self.prefix + name + ".")

    def obj(self, doc, name: str) -> dict:
        v = doc.get(name) if isinstance(doc, dict) else None
        if not isinstance(v, dict):
            self.fail(name, "expected an object")
        return v

    def number(self, doc: dict, name: str) -> float:
        if name not in doc:
            self.fail(name, "missing")
        v = doc[name]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            self.fail(name, "expected a finite number")
        return float(v)

    def integer(self, doc: dict, name: str, minimum: int = 1) -> int:
        if name not in doc:
            self.fail(name, "missing")
        v = doc[name]
        if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
            self.fail(name, f"expected an integer >= {minimum}")
        return v

    def vector(self, doc: dict, name: str, n: int) -> np.ndarray:
        if name not in doc:
            self.fail(name, "missing")
        v = doc[name]
        if (not isinstance(v, list) or len(v) != n
                or not all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in v)):
            self.fail(name, f"expected {n} numbers")
        arr = np.array(v, dtype=float)
        if not np.all(np.isfinite(arr)):
            self.fail(name, "entries must be finite")
        return arr

    def quaternion(self, doc: dict, name: str) -> np.ndarray:
        q = self.vector(doc, name, 4)
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > QUAT_TOL:
            self.fail(name, f"quaternion norm {norm:.9g} is not 1 within {QUAT_TOL:g}")
        return quaternion_to_matrix(q / norm)

    def path_field(self, doc: dict, name: str, base: Path) -> Path:
        v = doc.get(name)
        if not isinstance(v, str) or not v:
            self.fail(name, "expected a file path")
        p = (base / v).resolve()
        if not p.is_file():
            self.fail(name, f"file not found: {p}")
        return p


def parse_cuboid(doc, reader: _Reader) -> Cuboid:
    if not isinstance(doc, dict):
        reader.fail("", "expected an object")
    R = reader.quaternion(doc, "rotation_wxyz")
    d = reader.vector(doc, "offsets", 6)
    try:
        return Cuboid(R, d)
    except (GeometryError, ValueError) as exc:
        reader.fail("offsets", str(exc))


def parse_camera(doc: dict, reader: _Reader) -> Camera:
    R = reader.quaternion(doc, "rotation_wxyz")
    t = reader.vector(doc, "translation", 3)
    vals = {k: reader.number(doc, k) for k in ("fx", "fy", "cx", "cy")}
    for k in ("fx", "fy"):
        if vals[k] <= 0:
            reader.fail(k, "focal length must be positive")
    w = reader.integer(doc, "width")
    h = reader.integer(doc, "height")
    try:
        return Camera(R, t, vals["fx"], vals["fy"], vals["cx"], vals["cy"], w, h)
    except ValueError as exc:
        reader.fail("", str(exc))


# ---------------------------------------------------------------- sidecars


def load_image(path: Path) -> DenseGrid:
    """8- or 16-bit PNG/PPM as float channels in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(im.convert("L" if im.mode == "L" else "RGB"), dtype=np.float64) / 255.0
    return DenseGrid(arr.astype(np.float32))


def save_image(grid: DenseGrid, path) -> None:
    data = np.clip(np.rint(np.asarray(grid.data, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    if data.shape[2] == 1:
        Image.fromarray(data[:, :, 0], mode="L").save(path, optimize=False)
    else:
        Image.fromarray(data[:, :, :3], mode="RGB").save(path, optimize=False)


def load_lines(path: Path, reader: _Reader) -> np.ndarray:
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        reader.fail("lines", f"cannot read line file: {exc}")
    if not isinstance(doc, list):
        reader.fail("lines", "expected a list of [x1, y1, x2, y2]")
    for k, seg in enumerate(doc):
        if (not isinstance(seg, list) or len(seg) != 4
                or not all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in seg)):
            reader.fail(f"lines[{k}]", "expected [x1, y1, x2, y2]")
    arr = np.array(doc, dtype=float).reshape(-1, 4)
    if not np.all(np.isfinite(arr)):
        reader.fail("lines", "entries must be finite")
    return arr


def _pyramid_loader(frame_doc: dict, reader: _Reader, base: Path, cam: Camera, cache: dict):
    if "levels" in frame_doc:
        levels = frame_doc["levels"]
        if not isinstance(levels, list) or len(levels) != 3:
            reader.fail("levels", "expected three level entries, coarse to fine")
        paths = []
        for k, lv in enumerate(levels):
            sub = reader.child(f"levels[{k}]")
            if not isinstance(lv, dict):
                sub.fail("", "expected an object")
            paths.append(tuple(sub.path_field(lv, name, base) for name in LEVEL_FIELDS))
        key = ("levels", tuple(paths))

        def load():
            if key not in cache:
                out = []
                for k, group in enumerate(paths):
                    grids = {}
                    for name, p in zip(LEVEL_FIELDS, group):
                        try:
                            grids[name] = load_grid(p)
                        except GridFormatError as exc:
                            reader.fail(f"levels[{k}].{name}", str(exc))
                    try:
                        out.append(LevelMaps(scale=grids["features"].width / cam.width, **grids))
                    except ValueError as exc:
                        reader.fail(f"levels[{k}]", str(exc))
                try:
                    cache[key] = Pyramid(tuple(out))
                except ValueError as exc:
                    reader.fail("levels", str(exc))
            return cache[key]

        return load
    if "image" in frame_doc:
        p = reader.path_field(frame_doc, "image", base)
        key = ("image", p)

        def load():
            if key not in cache:
                try:
                    img = load_image(p)
                except (OSError, ValueError) as exc:
                    reader.fail("image", f"cannot decode image: {exc}")
                if (img.width, img.height) != (cam.width, cam.height):
                    reader.fail("image", f"image is {img.width}x{img.height}, camera is {cam.width}x{cam.height}")
                cache[key] = photometric_pyramid(img)
            return cache[key]

        return load
    reader.fail("image", "frame has neither an image nor a pyramid")


def load_correspondences(path: Path, manifest_path, n_frames: int) -> list:
    reader = _Reader(manifest_path, None, "gt_correspondences")
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        reader.fail("", f"cannot read {path}: {exc}")
    if not isinstance(doc, list):
        reader.fail("", "expected a list")
    out = []
    for k, item in enumerate(doc):
        sub = _Reader(manifest_path, None, f"gt_correspondences[{k}].")
        if not isinstance(item, dict):
            sub.fail("", "expected an object")
        img = sub.integer(item, "image", minimum=0)
        if img >= n_frames:
            sub.fail("image", f"index {img} out of range for {n_frames} frames")
        out.append(Correspondence(img, sub.vector(item, "pixel", 2), sub.vector(item, "point", 3)))
    return out


# ---------------------------------------------------------------- top level


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ManifestError(path, f"cannot read: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(path, f"invalid JSON: {exc}") from None
    top = _Reader(path)
    if not isinstance(doc, dict):
        top.fail("", "expected a JSON object")
    version = doc.get("version")
    if version != MANIFEST_VERSION:
        top.fail("version", f"unsupported version {version!r}")
    frames_doc = doc.get("frames")
    if not isinstance(frames_doc, list):
        top.fail("frames", "expected a list")
    base = path.parent.resolve()
    cache = {}
    frames = []
    for i, fd in enumerate(frames_doc):
        reader = _Reader(path, i)
        if not isinstance(fd, dict):
            reader.fail("", "expected an object")
        cam = parse_camera(reader.obj(fd, "camera"), reader.child("camera"))
        loader = _pyramid_loader(fd, reader, base, cam, cache)
        lines = None
        if "lines" in fd:
            lp = reader.path_field(fd, "lines", base)
            key = ("lines", lp)
            if key not in cache:
                cache[key] = load_lines(lp, reader)
            lines = cache[key]
        frames.append(Frame(cam, loader, lines))
    gt = parse_cuboid(doc["gt_cuboid"], top.child("gt_cuboid")) if doc.get("gt_cuboid") is not None else None
    rooms = []
    if doc.get("gt_rooms") is not None:
        if not isinstance(doc["gt_rooms"], list):
            top.fail("gt_rooms", "expected a list")
        rooms = [parse_cuboid(r, top.child(f"gt_rooms[{k}]")) for k, r in enumerate(doc["gt_rooms"])]
    corr = []
    if doc.get("gt_correspondences") is not None:
        cp = top.path_field(doc, "gt_correspondences", base)
        corr = load_correspondences(cp, path, len(frames))
    return Manifest(path, Scene(frames, corr, gt), gt, rooms)


def load_cuboid_json(path) -> Cuboid:
    """A cuboid file: either a bare cuboid object or any document with top-level rotation/offsets."""
    path = Path(path)
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ManifestError(path, f"cannot read: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(path, f"invalid JSON: {exc}") from None
    return parse_cuboid(doc, _Reader(path))


def dump_json(doc, path=None) -> str:
    """Stable serialization: sorted keys, fixed indentation, trailing newline."""
    text = json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


# ---------------------------------------------------------------- writers


def _write_frame(out: Path, stem: str, cam: Camera, image: DenseGrid, pyramid: Pyramid | None, lines) -> dict:
    entry = {"camera": camera_to_json(cam), "image": f"{stem}.png"}
    save_image(image, out / f"{stem}.png")
    if pyramid is not None:
        levels = []
        for k, lv in enumerate(pyramid.levels):
            names = {}
            for name in LEVEL_FIELDS:
                fname = f"{stem}_L{k}_{name}.dgrd"
                save_grid(getattr(lv, name), out / fname)
                names[name] = fname
            levels.append(names)
        entry["levels"] = levels
    if lines is not None:
        dump_json([[float(v) for v in seg] for seg in np.asarray(lines).reshape(-1, 4)], out / f"{stem}_lines.json")
        entry["lines"] = f"{stem}_lines.json"
    return entry


def export_room(room, out_dir, edges: bool = True, lines: bool = True) -> Path:
    """Write a synthetic room as manifest.json plus PNG, DGRD and line sidecars."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, cam in enumerate(room.cameras):
        frames.append(_write_frame(out, f"frame_{i:03d}", cam, room.images[i], room.pyramid(i, edges),
                                   room.gt_lines[i] if lines else None))
    corr = [{"image": int(c.image), "pixel": [float(v) for v in c.pixel], "point": [float(v) for v in c.point]}
            for c in room.gt_correspondences]
    dump_json(corr, out / "correspondences.json")
    doc = {
        "version": MANIFEST_VERSION,
        "frames": frames,
        "gt_cuboid": cuboid_to_json(room.gt_cuboid),
        "gt_correspondences": "correspondences.json",
    }
    path = out / "manifest.json"
    dump_json(doc, path)
    return path


def export_stream(stream, out_dir, edges: bool = True, lines: bool = True) -> Path:
    """Write a multi-room stream. Repeated poses share one set of sidecar files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    frames = []
    for k, sf in enumerate(stream.frames):
        key = id(sf.camera)
        if key not in written:
            image = stream.image(k)
            frame = stream.frame(k, edges, lines, image=image)
            written[key] = _write_frame(out, f"view_{len(written):03d}", sf.camera, image,
                                        frame.pyramid, frame.lines)
        frames.append(written[key])
    doc = {
        "version": MANIFEST_VERSION,
        "frames": frames,
        "gt_rooms": [cuboid_to_json(c) for c in stream.rooms],
    }
    path = out / "manifest.json"
    dump_json(doc, path)
    return path
