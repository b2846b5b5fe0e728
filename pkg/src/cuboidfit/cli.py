"""Command-line entry point: ``cuboidfit fit|eval|synth|multiroom``.

Exit codes: 0 on success, 1 on bad input (the message names file, frame and
field), 2 when the solver could not make progress.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from .costs import CostConfig
from .densemaps import GridFormatError
from .manifest import (ManifestError, cuboid_to_json, dump_json, export_room, export_stream, load_cuboid_json,
                       load_manifest)
from .metrics import MetricsError, evaluate_layout
from .multiroom import MultiRoomConfig, multiroom_run
from .pipeline import fit_scene
from .solver import SUCCESS_THRESHOLD_PX, LMConfig, SolverError, warp_error
from .synthscene import PlacementError, generate_room, generate_two_room_stream

logger = logging.getLogger("cuboidfit")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NO_PROGRESS = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which would read as "no progress".
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    d = CostConfig()
    p.add_argument("--alpha", type=float, default=d.alpha, help="edge term weight")
    p.add_argument("--beta", type=float, default=d.beta, help="vanishing-point term weight (0 without lines)")
    p.add_argument("--tau", type=float, default=d.tau, help="vanishing-point distance cap")
    p.add_argument("--points", type=int, default=d.points_per_image, help="sampled points per image")
    p.add_argument("--gamma", type=float, default=d.gamma, help="confidence exponent for point sampling")
    p.add_argument("--iters", type=int, default=None, help="LM iterations per scale (cap in converge mode)")
    p.add_argument("--mode", choices=("fixed", "converge"), default="fixed")
    p.add_argument("--vp-refine", type=int, default=5, metavar="N", help="VP-only iterations before fitting")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    p.add_argument("--out", type=Path, default=None, help="write JSON here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cuboidfit", description="Fit cuboid room layouts to posed images.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log the cost trajectory to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit = sub.add_parser("fit", help="fit one cuboid to a manifest")
    fit.add_argument("manifest", type=Path)
    _add_solver_flags(fit)
    fit.add_argument("--init", choices=("auto", "random", "provided"), default="auto")
    fit.add_argument("--init-cuboid", type=Path, default=None, help="starting cuboid JSON for --init provided")
    fit.add_argument("--scales", choices=("all", "coarse"), default="all")

    ev = sub.add_parser("eval", help="compare a predicted cuboid with ground truth")
    ev.add_argument("pred", type=Path)
    ev.add_argument("--gt", type=Path, default=None, help="GT cuboid JSON (default: the manifest's)")
    ev.add_argument("--manifest", type=Path, default=None, help="cameras for depth/normal metrics")
    ev.add_argument("--seed", type=int, default=0, help="Chamfer sampling seed")
    ev.add_argument("--deterministic", action="store_true")
    ev.add_argument("--out", type=Path, default=None)

    syn = sub.add_parser("synth", help="write a synthetic room as a manifest directory")
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--out", type=Path, required=True, help="output directory")
    syn.add_argument("--rooms", type=int, choices=(1, 2), default=1)
    syn.add_argument("--cameras", type=int, default=5, help="cameras per room")
    syn.add_argument("--width", type=int, default=160)
    syn.add_argument("--height", type=int, default=120)
    syn.add_argument("--fov", type=float, default=90.0, help="horizontal field of view in degrees")
    syn.add_argument("--subsample", type=int, default=60, help="stream repeat factor for --rooms 2")
    syn.add_argument("--no-edges", action="store_true", help="omit GT edge maps")
    syn.add_argument("--no-lines", action="store_true", help="omit line segments")
    syn.add_argument("--deterministic", action="store_true")

    mr = sub.add_parser("multiroom", help="sequential multi-room layout over an ordered stream")
    mr.add_argument("manifest", type=Path)
    _add_solver_flags(mr)
    d = MultiRoomConfig()
    mr.add_argument("--subsample", type=int, default=d.subsample_factor)
    mr.add_argument("--frames-per-room", type=int, default=d.frames_per_room)
    mr.add_argument("--overlap", type=float, default=d.overlap_iou_max, help="maximum IoU with accepted rooms")
    mr.add_argument("--no-share-orientation", action="store_true")
    mr.add_argument("--no-share-floor-ceiling", action="store_true")
    mr.add_argument("--no-share-walls", action="store_true")
    mr.add_argument("--obj", type=Path, default=None, help="also write an OBJ wireframe")
    return parser


def _configs(args) -> tuple[CostConfig, LMConfig]:
    cost = CostConfig(alpha=args.alpha, beta=args.beta, tau=args.tau, points_per_image=args.points,
                      gamma=args.gamma)
    lm = LMConfig.converge() if args.mode == "converge" else LMConfig()
    if args.iters is not None:
        lm = LMConfig(mode=args.mode, iters=args.iters)
    return cost, lm


def _emit(doc, out: Path | None) -> None:
    text = dump_json(doc)
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def cmd_fit(args) -> int:
    m = load_manifest(args.manifest)
    cost, lm = _configs(args)
    provided = None
    if args.init == "provided":
        if args.init_cuboid is None:
            raise UsageError("--init provided needs --init-cuboid")
        provided = load_cuboid_json(args.init_cuboid)
    rng = np.random.default_rng(args.seed)
    levels = (0,) if args.scales == "coarse" else (0, 1, 2)
    res = fit_scene(m.scene, cost, lm, rng, args.init, args.vp_refine, provided, levels)
    fit = res.fit
    for name, costs in fit.costs.items():
        logger.info("%s: cost %s", name, " -> ".join(f"{c:.6g}" for c in costs))
    final = fit.final
    werr = None
    if m.scene.gt_correspondences:
        try:
            werr = warp_error(final, m.scene.cameras, m.scene.gt_correspondences)
        except SolverError as exc:
            logger.warning("warp error unavailable: %s", exc)
    success = not fit.no_progress and (werr is None or werr < SUCCESS_THRESHOLD_PX)
    doc = {
        **cuboid_to_json(final),
        "initial": cuboid_to_json(res.initial),
        "scales": {name: cuboid_to_json(c) for name, c in fit.cuboids.items()},
        "costs": {name: [float(c) for c in cs] for name, cs in fit.costs.items()},
        "iterations": dict(fit.iterations),
        "no_progress": fit.no_progress,
        "warp_error_px": werr,
        "success": success,
    }
    _emit(doc, args.out)
    return EXIT_NO_PROGRESS if fit.no_progress else EXIT_OK


def cmd_eval(args) -> int:
    pred = load_cuboid_json(args.pred)
    m = load_manifest(args.manifest) if args.manifest is not None else None
    if args.gt is not None:
        gt = load_cuboid_json(args.gt)
    elif m is not None and m.gt_cuboid is not None:
        gt = m.gt_cuboid
    else:
        raise UsageError("no ground truth: pass --gt or a manifest with gt_cuboid")
    cams = m.scene.cameras if m is not None else []
    report = evaluate_layout(pred, gt, cams, chamfer_seed=args.seed)
    if m is not None and m.scene.gt_correspondences:
        try:
            report.success = warp_error(pred, cams, m.scene.gt_correspondences) < SUCCESS_THRESHOLD_PX
        except SolverError:
            report.success = False
    _emit(report.to_json(), args.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    size = (args.width, args.height)
    edges, lines = not args.no_edges, not args.no_lines
    if args.rooms == 1:
        room = generate_room(args.seed, n_cameras=args.cameras, image_size=size, fov_deg=args.fov)
        path = export_room(room, args.out, edges, lines)
    else:
        stream = generate_two_room_stream(args.seed, frames_per_room=(args.cameras, args.cameras),
                                          subsample_factor=args.subsample, image_size=size, fov_deg=args.fov)
        path = export_stream(stream, args.out, edges, lines)
    logger.info("wrote %s", path)
    return EXIT_OK


def cmd_multiroom(args) -> int:
    m = load_manifest(args.manifest)
    cost, lm = _configs(args)
    config = MultiRoomConfig(
        subsample_factor=args.subsample, frames_per_room=args.frames_per_room, overlap_iou_max=args.overlap,
        share_orientation=not args.no_share_orientation,
        share_floor_ceiling=not (args.no_share_floor_ceiling or args.no_share_orientation),
        share_walls=not args.no_share_walls,
    )
    layout = multiroom_run(m.scene.frames, config, cost, lm, np.random.default_rng(args.seed), args.vp_refine)
    _emit(layout.to_json(), args.out)
    if args.obj is not None:
        args.obj.write_text(layout.to_obj())
    return EXIT_NO_PROGRESS if layout.no_progress else EXIT_OK


COMMANDS = {"fit": cmd_fit, "eval": cmd_eval, "synth": cmd_synth, "multiroom": cmd_multiroom}


def _thread_limit(deterministic: bool):
    if not deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit(args.deterministic):
            return COMMANDS[args.command](args)
    except (ManifestError, GridFormatError, UsageError, MetricsError, PlacementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: invalid parameter: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
