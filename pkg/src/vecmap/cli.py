"""Command-line surface.

Subcommands: ``eval`` (Chamfer AP report), ``match`` (assignment/loss debug),
``stream`` (temporal replay over BEV grids and a pose log), ``split``
(geographic train/val split generation), ``render`` (SVG of one frame), and
``api`` (single-shot JSON requests on stdin, the machine interface used by the
language bindings).

Exit codes: 0 success, 2 input alignment error, 3 parse error, 4 infeasible
request. Set VECMAP_LOG to control log verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("vecmap")

EXIT_OK = 0
EXIT_ALIGNMENT = 2
EXIT_PARSE = 3
EXIT_INFEASIBLE = 4


def _parse_thresholds(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def nan_to_null(value):
    """Strict-JSON sanitizer: NaN becomes null (classes absent from the data)."""
    if isinstance(value, dict):
        return {k: nan_to_null(v) for k, v in value.items()}
    if isinstance(value, list):
        return [nan_to_null(v) for v in value]
    if isinstance(value, float) and value != value:
        return None
    return value


def _eval_config(args, gt_maps):
    from .metrics import THRESHOLD_PRESETS, EvalConfig
    from .map_model import range_preset

    if args.range is not None:
        r = range_preset(args.range)
    else:
        r = gt_maps[0].range if gt_maps else range_preset(50)
    if args.thresholds is not None:
        thresholds = _parse_thresholds(args.thresholds)
    else:
        thresholds = THRESHOLD_PRESETS.get(r.x_half)
        if thresholds is None:
            raise ValueError(
                f"no threshold preset for x_half={r.x_half}; pass --thresholds")
    return EvalConfig(range=r, thresholds=thresholds, sample_spacing=args.spacing)


def _clip_maps(maps, r):
    from dataclasses import replace
    return [replace(m, range=r).clipped() for m in maps]


def cmd_eval(args) -> int:
    from .map_model import read_vmap
    from .metrics import evaluate

    pred_maps = read_vmap(args.pred)
    gt_maps = read_vmap(args.gt)
    cfg = _eval_config(args, gt_maps)
    pred_maps = _clip_maps(pred_maps, cfg.range)
    gt_maps = _clip_maps(gt_maps, cfg.range)
    report = evaluate(pred_maps, gt_maps, cfg, jobs=args.jobs)
    table = report.format_table()
    print(f"range: {cfg.range.x_half:g} x {cfg.range.y_half:g} m, "
          f"thresholds: {list(cfg.thresholds)}, spacing: {cfg.sample_spacing:g} m")
    print(table)
    if args.out:
        payload = nan_to_null(report.to_dict())
        Path(args.out).write_text(json.dumps(payload, indent=2, allow_nan=False) + "\n",
                                  encoding="utf-8")
        log.info("wrote report to %s", args.out)
    if args.table:
        Path(args.table).write_text(table + "\n", encoding="utf-8")
    return EXIT_OK


def _instance_logits(inst, eps: float = 1e-4) -> np.ndarray:
    """Per-class logits from a file instance: own class at logit(confidence),
    every other class at logit(eps)."""
    from .attention import inverse_sigmoid
    from .map_model import CLASS_NAMES

    logits = np.full(len(CLASS_NAMES), float(inverse_sigmoid(eps)))
    logits[inst.class_index] = float(inverse_sigmoid(inst.confidence))
    return logits


def cmd_match(args) -> int:
    from .map_model import normalize, read_vmap, resample_polyline
    from .matching import CostWeights, hungarian, match_cost_matrix, training_loss
    from .metrics import FrameAlignmentError

    pred_maps = {m.frame_id: m for m in read_vmap(args.pred)}
    gt_maps = read_vmap(args.gt)
    missing = [m.frame_id for m in gt_maps if m.frame_id not in pred_maps]
    if missing:
        raise FrameAlignmentError(f"frames missing from predictions: {', '.join(missing)}")

    w = CostWeights(lambda1=args.lambda1, lambda2=args.lambda2, lambda3=args.lambda3)
    print(f"weights: lambda1={w.lambda1:g} lambda2={w.lambda2:g} lambda3={w.lambda3:g} "
          f"alpha={w.focal_alpha:g} gamma={w.focal_gamma:g} beta={w.smooth_l1_beta:g} "
          f"n_p={args.np}")
    dump = {"weights": w.__dict__, "n_p": args.np, "frames": []}
    for gt_map in gt_maps:
        pred_map = pred_maps[gt_map.frame_id]
        r = gt_map.range

        def prep(inst):
            return normalize(resample_polyline(inst.polyline, args.np), r)

        preds = [(_instance_logits(inst), prep(inst)) for inst in pred_map.instances]
        from dataclasses import replace
        gts = [replace(inst, polyline=prep(inst)) for inst in gt_map.instances]
        costs = match_cost_matrix(preds, gts, w)
        assignment = hungarian(costs)
        loss = training_loss(preds, gts, assignment, w)
        frame = {
            "frame_id": gt_map.frame_id,
            "pairs": [list(p) for p in assignment.pairs],
            "unmatched_preds": list(assignment.unmatched_preds),
            "loss": loss.to_dict(),
        }
        if args.debug:
            frame["cost_matrix"] = costs.tolist()
        dump["frames"].append(frame)
        print(f"frame {gt_map.frame_id}: pairs={frame['pairs']} "
              f"unmatched={frame['unmatched_preds']} total={loss.total:.6f} "
              f"(line={loss.line:.6f} focal={loss.focal:.6f} trans={loss.trans:.6f})")
        if args.debug:
            print("cost matrix:")
            for row in costs:
                print("  " + " ".join(f"{v:10.4f}" for v in row))
    if args.out:
        Path(args.out).write_text(json.dumps(dump, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def _load_stream_weights(args, cfg, c_bev):
    from . import attention, streaming
    from .weights import load_tensors

    if args.weights:
        tensors = load_tensors(args.weights)
        decoder = attention.decoder_from_tensors(tensors)
        gru = streaming.gru_from_tensors(tensors)
        tmlp = streaming.tmlp_from_tensors(tensors)
    else:
        decoder = attention.random_decoder_weights(cfg, c_bev, args.seed)
        gru = streaming.random_gru_weights(c_bev, args.seed + 1)
        tmlp = streaming.random_transform_mlp(cfg.d, args.seed + 2)
    return decoder, gru, tmlp


def cmd_stream(args) -> int:
    from .attention import AttentionConfig
    from .map_model import LocalMap, write_vmap
    from .metrics import FrameAlignmentError
    from .streaming import StreamParams, memory_stats, read_bev, read_poses, step

    poses = read_poses(args.poses)
    if not poses:
        raise FrameAlignmentError(f"{args.poses}: no pose records")
    bev_dir = Path(args.bev_dir)
    grids = {}
    missing = []
    for rec in poses:
        path = bev_dir / f"{rec.frame_id}.bev.bin"
        if path.exists():
            grids[rec.frame_id] = read_bev(path)
        else:
            missing.append(rec.frame_id)
    if missing:
        raise FrameAlignmentError(f"BEV grids missing for frames: {', '.join(missing)}")

    cfg = AttentionConfig(n_q=args.nq, n_p=args.np, n_off=args.noff,
                          d=args.d, layers=args.layers)
    first = grids[poses[0].frame_id]
    decoder, gru, tmlp = _load_stream_weights(args, cfg, first.shape[2])
    params = StreamParams(decoder=decoder, tmlp=tmlp, gru=gru, cfg=cfg, k=args.k)
    print(f"seed: {args.seed if not args.weights else 'n/a (weights file)'}")

    memory = None
    out_maps = []
    mem_lines = []
    for i, rec in enumerate(poses):
        if i == 0:
            t = None
            from .map_model import RigidTransform
            t = RigidTransform.identity()
        else:
            t = poses[i].pose.inverse() @ poses[i - 1].pose
        result = step(memory, grids[rec.frame_id], t, params)
        memory = result.memory
        instances = [inst for inst in result.instances if inst.confidence >= args.min_score]
        out_maps.append(LocalMap(rec.frame_id, rec.timestamp, rec.pose,
                                 tuple(instances), grids[rec.frame_id].range))
        stats = memory_stats(memory)
        line = (f"frame {rec.frame_id}: memory = {stats['bev_grids']} BevGrid"
                f"{tuple(stats['bev_shape'])} + {stats['n_queries']} QueryStates"
                f"(dim {stats['query_dim']}), {stats['floats']} floats")
        mem_lines.append(line)
        print(line)
    write_vmap(args.out, out_maps)
    if args.memory_log:
        Path(args.memory_log).write_text("\n".join(mem_lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_split(args) -> int:
    from .geosplit import coverage, propose_split, read_manifest, write_pgm

    trajs = read_manifest(args.manifest)
    balance_keys = tuple(k for k in (args.balance_keys or "").split(",") if k)
    result = propose_split(trajs, args.n_train, args.n_val, radius=args.radius,
                           resolution=args.resolution, balance_keys=balance_keys,
                           seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"seed": args.seed, **result.to_dict()}
    (out_dir / "split.json").write_text(json.dumps(payload, indent=2) + "\n",
                                        encoding="utf-8")
    print(f"seed: {args.seed}")
    print(f"train: {len(result.train)} scenes, val: {len(result.val)} scenes")
    print(f"areas km^2: train={result.report['train_km2']:.6f} "
          f"val={result.report['val_km2']:.6f} overlap={result.report['overlap_km2']:.6f} "
          f"ratio={result.report['overlap_ratio']:.4f}")

    by_id = {t.scene_id: t for t in trajs}
    train_cov = coverage([by_id[s] for s in result.train], args.radius, args.resolution)
    val_cov = coverage([by_id[s] for s in result.val], args.radius, args.resolution)
    for city in sorted(set(train_cov) | set(val_cov)):
        full = coverage(trajs, args.radius, args.resolution)[city]
        img = np.zeros(full.occupancy.shape, dtype=np.uint8)
        for cov, value in ((train_cov.get(city), 120), (val_cov.get(city), 200)):
            if cov is None:
                continue
            from .geosplit import _cell_offset
            ix, iy = _cell_offset(full, cov)
            h, w = cov.occupancy.shape
            window = img[iy:iy + h, ix:ix + w]
            window[cov.occupancy & (window > 0)] = 255  # both sides: overlap
            window[cov.occupancy & (window == 0)] = value
        write_pgm(out_dir / f"coverage_{city}.pgm", img)
    return EXIT_OK


def cmd_render(args) -> int:
    from .map_model import read_vmap
    from .metrics import FrameAlignmentError
    from .render import render_svg

    maps = {m.frame_id: m for m in read_vmap(args.vmap)}
    if args.frame not in maps:
        raise FrameAlignmentError(
            f"frame {args.frame!r} not in {args.vmap} (has: {', '.join(sorted(maps))})")
    svg = render_svg(maps[args.frame], scale=args.scale)
    Path(args.out).write_text(svg, encoding="utf-8")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_api(args) -> int:
    """One JSON request on stdin, one JSON response on stdout."""
    from .map_model import Polyline, range_preset, read_vmap
    from .matching import hungarian, line_cost
    from .metrics import EvalConfig, THRESHOLD_PRESETS, evaluate

    request = json.load(sys.stdin)
    if args.op == "line-cost":
        pred = Polyline(np.asarray(request["pred"], dtype=np.float64), request["kind"])
        gt = Polyline(np.asarray(request["gt"], dtype=np.float64), request["kind"])
        cost, perm = line_cost(pred, gt)
        response = {"cost": cost, "permutation": [int(i) for i in perm]}
    elif args.op == "hungarian":
        costs = np.asarray(request["costs"], dtype=np.float64)
        a = hungarian(costs)
        total = float(sum(costs[i, j] for i, j in a.pairs))
        response = {"pairs": [list(p) for p in a.pairs],
                    "unmatched_preds": list(a.unmatched_preds),
                    "total_cost": total}
    elif args.op == "evaluate":
        r = range_preset(request.get("range", 50))
        thresholds = tuple(request.get("thresholds") or THRESHOLD_PRESETS[r.x_half])
        cfg = EvalConfig(range=r, thresholds=thresholds,
                         sample_spacing=float(request.get("spacing", 0.1)))
        pred_maps = _clip_maps(read_vmap(request["pred_path"]), r)
        gt_maps = _clip_maps(read_vmap(request["gt_path"]), r)
        response = nan_to_null(evaluate(pred_maps, gt_maps, cfg).to_dict())
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(f"unknown api op {args.op}")
    json.dump(response, sys.stdout, allow_nan=False)
    sys.stdout.write("\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vecmap",
                                     description="Vectorized HD-map toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="Chamfer AP evaluation of predictions against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--range", type=float, choices=(30, 50), default=None)
    p.add_argument("--thresholds", default=None, help="comma-separated meters")
    p.add_argument("--spacing", type=float, default=0.1)
    p.add_argument("--jobs", type=int, default=os.cpu_count())
    p.add_argument("--out", default=None, help="JSON report path")
    p.add_argument("--table", default=None, help="text table path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("match", help="dump cost matrices, assignments, and losses per frame")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--lambda1", type=float, default=50.0)
    p.add_argument("--lambda2", type=float, default=5.0)
    p.add_argument("--lambda3", type=float, default=5.0)
    p.add_argument("--np", type=int, default=20, help="points per polyline")
    p.add_argument("--debug", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("stream", help="replay streaming fusion over BEV grids and poses")
    p.add_argument("--bev-dir", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", default=None, help="weight manifest path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nq", type=int, default=100)
    p.add_argument("--np", type=int, default=20)
    p.add_argument("--noff", type=int, default=1)
    p.add_argument("--k", type=int, default=33)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--min-score", type=float, default=0.0)
    p.add_argument("--memory-log", default=None)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("split", help="generate a geographic train/val split")
    p.add_argument("manifest")
    p.add_argument("--n-train", type=int, required=True)
    p.add_argument("--n-val", type=int, required=True)
    p.add_argument("--radius", type=float, default=30.0)
    p.add_argument("--resolution", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--balance-keys", default=None, help="comma-separated attribute names")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("render", help="render one frame to SVG")
    p.add_argument("vmap")
    p.add_argument("--frame", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float, default=8.0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("api", help="single-shot JSON interface (stdin -> stdout)")
    p.add_argument("op", choices=("line-cost", "hungarian", "evaluate"))
    p.set_defaults(func=cmd_api)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("VECMAP_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    from .geosplit import InfeasibleSplitError
    from .map_model import VmapParseError
    from .metrics import FrameAlignmentError

    try:
        return args.func(args)
    except FrameAlignmentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALIGNMENT
    except VmapParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except InfeasibleSplitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
