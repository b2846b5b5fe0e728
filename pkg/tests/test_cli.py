import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from cuboidfit.cli import EXIT_INPUT, EXIT_OK, main
from cuboidfit.geometry import Cuboid
from cuboidfit.manifest import cuboid_to_json, dump_json, load_manifest

FAST = ["--iters", "3", "--points", "96"]
SYNTH = ["--width", "48", "--height", "36", "--cameras", "3"]


def _tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def room_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("room")
    assert main(["synth", "--seed", "3", "--out", str(out), *SYNTH]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def plain_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("plain")
    assert main(["synth", "--seed", "4", "--out", str(out), "--no-lines", "--no-edges", *SYNTH]) == EXIT_OK
    return out


def test_synth_is_deterministic(tmp_path, room_dir):
    again = tmp_path / "again"
    assert main(["synth", "--seed", "3", "--out", str(again), *SYNTH]) == EXIT_OK
    assert _tree_hash(again) == _tree_hash(room_dir)
    other = tmp_path / "other"
    assert main(["synth", "--seed", "5", "--out", str(other), *SYNTH]) == EXIT_OK
    assert _tree_hash(other) != _tree_hash(room_dir)


def test_synth_manifest_contents(room_dir, plain_dir):
    m = load_manifest(room_dir / "manifest.json")
    assert len(m.scene.frames) == 3 and m.gt_cuboid is not None and m.scene.gt_correspondences
    assert m.scene.has_lines and m.scene.frames[0].pyramid[2].has_edges
    p = load_manifest(plain_dir / "manifest.json")
    assert not p.scene.has_lines and not p.scene.frames[0].pyramid[2].has_edges


def test_synth_two_rooms(tmp_path):
    out = tmp_path / "two"
    assert main(["synth", "--seed", "1", "--out", str(out), "--rooms", "2", "--subsample", "3", *SYNTH]) == EXIT_OK
    m = load_manifest(out / "manifest.json")
    assert len(m.gt_rooms) == 2 and m.gt_cuboid is None
    assert len(m.scene.frames) == 2 * 3 * 3
    assert len(list(out.glob("view_*.png"))) == 6


def _fit(manifest, out, *extra):
    code = main(["fit", str(manifest), "--out", str(out), *FAST, *extra])
    return code, json.loads(out.read_text()) if out.exists() else None


def test_fit_output_and_determinism(tmp_path, room_dir):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    code, doc = _fit(room_dir / "manifest.json", a, "--seed", "7", "--deterministic")
    assert code == EXIT_OK
    assert set(doc) == {"rotation_wxyz", "offsets", "initial", "scales", "costs", "iterations", "no_progress",
                        "warp_error_px", "success"}
    assert list(doc["scales"]) == ["coarse", "fine", "medium"]  # sorted keys
    assert all(len(c) == 4 for c in doc["costs"].values())
    assert isinstance(doc["warp_error_px"], float) and isinstance(doc["success"], bool)
    assert _fit(room_dir / "manifest.json", b, "--seed", "7", "--deterministic")[0] == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_fit_coarse_only_and_provided_init(tmp_path, room_dir):
    m = room_dir / "manifest.json"
    _, doc = _fit(m, tmp_path / "c.json", "--scales", "coarse")
    assert list(doc["scales"]) == ["coarse"]
    gt = tmp_path / "gt.json"
    dump_json(cuboid_to_json(load_manifest(m).gt_cuboid), gt)
    code, doc = _fit(m, tmp_path / "p.json", "--init", "provided", "--init-cuboid", str(gt), "--vp-refine", "0")
    assert code == EXIT_OK
    assert doc["initial"] == json.loads(gt.read_text())
    assert doc["warp_error_px"] < 3.0 and doc["success"]


def test_beta_zero_matches_default_without_lines(tmp_path, plain_dir):
    m = plain_dir / "manifest.json"
    _fit(m, tmp_path / "d.json", "--deterministic")
    _fit(m, tmp_path / "z.json", "--deterministic", "--beta", "0")
    assert (tmp_path / "d.json").read_bytes() == (tmp_path / "z.json").read_bytes()


def _cuboid_file(path, lo, hi):
    d = np.stack([np.asarray(lo, float), np.asarray(hi, float)], axis=1).ravel()
    dump_json(cuboid_to_json(Cuboid(np.eye(3), d)), path)
    return path


def test_eval_golden_keys_and_identity(tmp_path, room_dir):
    m = room_dir / "manifest.json"
    gt = tmp_path / "gt.json"
    dump_json(cuboid_to_json(load_manifest(m).gt_cuboid), gt)
    out = tmp_path / "report.json"
    assert main(["eval", str(gt), "--manifest", str(m), "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert sorted(report) == ["auc", "chamfer_m", "depth_rmse_m", "iou", "normal_pct", "rot_deg", "success"]
    assert sorted(report["auc"]) == ["1", "20"]
    assert report["iou"] == pytest.approx(1.0, abs=1e-12)
    assert report["chamfer_m"] < 1e-9 and report["rot_deg"] < 1e-6
    assert report["depth_rmse_m"] < 1e-9 and report["normal_pct"] == 100.0 and report["success"] is True


def test_eval_offset_cubes(tmp_path, capsys):
    a = _cuboid_file(tmp_path / "a.json", [0, 0, 0], [1, 1, 1])
    b = _cuboid_file(tmp_path / "b.json", [0.5, 0, 0], [1.5, 1, 1])
    assert main(["eval", str(a), "--gt", str(b)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["iou"] == pytest.approx(1 / 3, abs=1e-9)
    assert "success" not in report and report["depth_rmse_m"] is None


def _mutated(room_dir, tmp_path, mutate):
    doc = json.loads((room_dir / "manifest.json").read_text())
    mutate(doc)
    # Keep sidecar paths valid by pointing them back at the original directory.
    for fd in doc.get("frames", []) if isinstance(doc.get("frames"), list) else []:
        if isinstance(fd, dict):
            for key in ("image", "lines"):
                if isinstance(fd.get(key), str) and not fd[key].startswith("/"):
                    fd[key] = str(room_dir / fd[key])
            for lv in fd.get("levels", []) or []:
                if isinstance(lv, dict):
                    for k, v in lv.items():
                        if isinstance(v, str) and not v.startswith("/"):
                            lv[k] = str(room_dir / v)
    if isinstance(doc.get("gt_correspondences"), str):
        doc["gt_correspondences"] = str(room_dir / doc["gt_correspondences"])
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    return path


def _set(path, value):
    def mutate(doc):
        node = doc
        for key in path[:-1]:
            node = node[key]
        if value is KeyError:
            del node[path[-1]]
        else:
            node[path[-1]] = value
    return mutate


@pytest.mark.parametrize(
    "mutate, frame, field",
    [
        (_set(["frames", 1, "camera", "rotation_wxyz"], [1.0, 0.1, 0.0, 0.0]), 1, "camera.rotation_wxyz"),
        (_set(["frames", 2, "camera", "fx"], KeyError), 2, "camera.fx"),
        (_set(["frames", 0, "camera", "fx"], -3.0), 0, "camera.fx"),
        (_set(["frames", 0, "camera", "width"], 0), 0, "camera.width"),
        (_set(["frames", 1, "camera", "translation"], [0.0, "a", 1.0]), 1, "camera.translation"),
        (_set(["frames", 2, "lines"], "/nonexistent/lines.json"), 2, "lines"),
        (_set(["frames", 1, "levels"], [{}]), 1, "levels"),
        (_set(["frames", 0, "camera"], KeyError), 0, "camera"),
    ],
)
def test_malformed_manifest_names_file_frame_and_field(tmp_path, room_dir, capsys, mutate, frame, field):
    bad = _mutated(room_dir, tmp_path, mutate)
    assert main(["fit", str(bad), *FAST]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert str(bad) in err and f"frame {frame}" in err and field in err


@pytest.mark.parametrize(
    "mutate, field",
    [
        (_set(["version"], 2), "version"),
        (_set(["frames"], {}), "frames"),
        (_set(["gt_cuboid", "offsets"], [1, 0, 0, 1, 0, 1]), "gt_cuboid.offsets"),
        (_set(["gt_correspondences"], "/nonexistent/corr.json"), "gt_correspondences"),
    ],
)
def test_malformed_top_level_fields(tmp_path, room_dir, capsys, mutate, field):
    bad = _mutated(room_dir, tmp_path, mutate)
    assert main(["fit", str(bad), *FAST]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert str(bad) in err and field in err


def test_corrupt_grid_is_reported_with_frame(tmp_path, room_dir, capsys):
    broken = tmp_path / "broken.dgrd"
    broken.write_bytes((room_dir / "frame_001_L0_features.dgrd").read_bytes()[:-3])
    bad = _mutated(room_dir, tmp_path, _set(["frames", 1, "levels", 0, "features"], str(broken)))
    assert main(["fit", str(bad), *FAST]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert str(bad) in err and "frame 1" in err and "levels[0].features" in err


def test_invalid_json_and_missing_file(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["fit", str(bad)]) == EXIT_INPUT
    assert main(["fit", str(tmp_path / "missing.json")]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert "invalid JSON" in err and "missing.json" in err


def test_usage_errors_exit_one(tmp_path, room_dir, capsys):
    assert main(["fit"]) == EXIT_INPUT
    assert main(["fit", str(room_dir / "manifest.json"), "--bogus"]) == EXIT_INPUT
    assert main(["fit", str(room_dir / "manifest.json"), "--init", "provided"]) == EXIT_INPUT
    assert main(["synth", "--out", str(tmp_path / "x"), "--rooms", "3"]) == EXIT_INPUT
    assert main(["fit", str(room_dir / "manifest.json"), "--points", "0"]) == EXIT_INPUT
    assert main(["eval", str(tmp_path / "nothing.json")]) == EXIT_INPUT
    capsys.readouterr()


def test_multiroom_command(tmp_path, room_dir):
    out, obj = tmp_path / "layout.json", tmp_path / "layout.obj"
    args = ["multiroom", str(room_dir / "manifest.json"), "--subsample", "1", "--frames-per-room", "3",
            "--out", str(out), "--obj", str(obj), "--deterministic", *FAST]
    assert main(args) == EXIT_OK
    layout = json.loads(out.read_text())
    assert len(layout["rooms"]) == 1 and layout["rooms"][0]["frames"] == [0, 1, 2]
    assert obj.read_text().count("\nl ") == 12
    first = out.read_bytes()
    assert main(args) == EXIT_OK
    assert out.read_bytes() == first


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "cuboidfit.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "fit" in res.stdout and "multiroom" in res.stdout
