"""Command-line entry points: calibrate one pair, evaluate a dataset, serve HTTP.

Exit codes: 0 success, 1 usage error (bad arguments or unreadable inputs),
2 runtime failure (calibration failed, dataset layout broken, service down).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .dataio import (
    DataIoError,
    LayoutError,
    generate_synthetic,
    load_dataset,
    random_scene_spec,
    read_pcd,
    save_dataset,
)
from .geometry import GeometryError, Intrinsics, RigidTransform, rotation_error, translation_error
from .masks import FileMaskProvider, ProviderUnavailable, RemoteMaskProvider, SyntheticMaskProvider
from .pipeline import CalibrationFailed, PipelineConfig, calibrate

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser():
    p = _Parser(prog="maskcalib", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="calibrate one cloud/image pair")
    c.add_argument("--cloud", required=True, help="PCD file (x y z intensity)")
    c.add_argument("--image", required=True, help="RGB image file")
    c.add_argument("--intrinsics", required=True, help="3x3 row-major camera matrix")
    c.add_argument("--provider", choices=("synthetic", "file", "remote"), default="synthetic")
    c.add_argument("--iterations", type=int, default=1)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--truth", help="4x4 row-major ground-truth extrinsics for metrics")
    c.add_argument("--out", help="write the calibration document (JSON) here")
    c.add_argument("--remote-url", help="segmentation service base URL (provider=remote)")
    c.add_argument("--lip-masks", help="mask document for the projected image (provider=file)")
    c.add_argument("--rgb-masks", help="mask document for the RGB image (provider=file)")

    e = sub.add_parser("evaluate", help="run over a dataset with ground truth")
    e.add_argument("--root", required=True, help="dataset root directory")
    e.add_argument("--provider", choices=("synthetic", "remote"), default="synthetic")
    e.add_argument("--iterations", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="write the machine-readable report (JSON) here")
    e.add_argument("--remote-url")

    s = sub.add_parser("serve", help="run the calibration HTTP service")
    s.add_argument("--port", type=int, default=8234)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--ui-dir", help="static frontend directory to serve at /")

    g = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=5)
    g.add_argument("--objects", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-rot-deg", type=float, default=10.0)
    g.add_argument("--max-trans", type=float, default=0.5)
    return p


def _make_provider(args):
    if args.provider == "synthetic":
        return SyntheticMaskProvider()
    if args.provider == "file":
        if not args.lip_masks or not args.rgb_masks:
            raise _UsageError("provider=file needs --lip-masks and --rgb-masks")
        return FileMaskProvider({"LIP": args.lip_masks, "RGB": args.rgb_masks})
    if not args.remote_url:
        raise _UsageError("provider=remote needs --remote-url")
    return RemoteMaskProvider(args.remote_url)


def _load_inputs(args):
    from PIL import Image

    for path in (args.cloud, args.image, args.intrinsics):
        if not Path(path).exists():
            raise _UsageError(f"no such file: {path}")
    cloud = read_pcd(args.cloud)
    image = np.asarray(Image.open(args.image).convert("RGB"))
    K = np.loadtxt(args.intrinsics).reshape(3, 3)
    intr = Intrinsics.from_matrix(K, image.shape[1], image.shape[0])
    truth = None
    if args.truth:
        if not Path(args.truth).exists():
            raise _UsageError(f"no such file: {args.truth}")
        truth = RigidTransform.from_matrix(np.loadtxt(args.truth).reshape(4, 4), "lidar", "camera")
    return cloud, image, intr, truth


def cmd_calibrate(args):
    cloud, image, intr, truth = _load_inputs(args)
    provider = _make_provider(args)
    result = calibrate(
        cloud, image, intr, provider, PipelineConfig(max_iters=args.iterations, seed=args.seed)
    )
    print(result.to_text())
    if truth is not None:
        e_r = math.degrees(rotation_error(result.final_pose, truth))
        e_t = translation_error(result.final_pose, truth)
        print(f"e_r: {e_r:.4f} deg")
        print(f"e_t: {e_t:.4f} m")
    if args.out:
        Path(args.out).write_text(result.to_json(indent=2))
    return 0


def cmd_evaluate(args):
    provider = (
        SyntheticMaskProvider()
        if args.provider == "synthetic"
        else RemoteMaskProvider(args.remote_url or "")
    )
    loaded = load_dataset(args.root)
    rows = []
    failures = []
    for pair in loaded.pairs:
        if pair.truth_extrinsics is None:
            failures.append({"scene_id": pair.scene_id, "error": "no ground truth"})
            continue
        try:
            result = calibrate(
                pair.cloud,
                pair.image,
                pair.intrinsics,
                provider,
                PipelineConfig(max_iters=args.iterations, seed=args.seed),
            )
        except (CalibrationFailed, ProviderUnavailable) as exc:
            failures.append({"scene_id": pair.scene_id, "error": f"{type(exc).__name__}: {exc}"})
            continue
        rows.append(
            {
                "scene_id": pair.scene_id,
                "subset": pair.subset,
                "e_r_deg": math.degrees(rotation_error(result.final_pose, pair.truth_extrinsics)),
                "e_t_m": translation_error(result.final_pose, pair.truth_extrinsics),
                "epsilon_px": result.per_iteration[-1].epsilon,
                "iterations": result.iterations_run,
            }
        )
    if not rows:
        print("no scene produced a result", file=sys.stderr)
        return RUNTIME_ERROR

    subsets = sorted({r["subset"] for r in rows})
    aggregates = {}
    for name, group in [(s, [r for r in rows if r["subset"] == s]) for s in subsets] + [("All", rows)]:
        er = [r["e_r_deg"] for r in group]
        et = [r["e_t_m"] for r in group]
        aggregates[name] = {
            "n": len(group),
            "e_r_deg": {"mean": float(np.mean(er)), "max": float(np.max(er)), "min": float(np.min(er))},
            "e_t_m": {"mean": float(np.mean(et)), "max": float(np.max(et)), "min": float(np.min(et))},
        }

    header = f"{'subset':24s} {'n':>3s}  {'e_r mean':>9s} {'max':>9s} {'min':>9s}   {'e_t mean':>9s} {'max':>9s} {'min':>9s}"
    print(header)
    print("-" * len(header))
    for name in subsets + ["All"]:
        a = aggregates[name]
        print(
            f"{name:24s} {a['n']:3d}  "
            f"{a['e_r_deg']['mean']:9.4f} {a['e_r_deg']['max']:9.4f} {a['e_r_deg']['min']:9.4f}   "
            f"{a['e_t_m']['mean']:9.4f} {a['e_t_m']['max']:9.4f} {a['e_t_m']['min']:9.4f}"
        )
    for f in failures:
        print(f"failed: {f['scene_id']}: {f['error']}", file=sys.stderr)
    for scene_id, reason in loaded.skipped:
        print(f"skipped: {scene_id}: {reason}", file=sys.stderr)

    if args.out:
        report = {"scenes": rows, "aggregates": aggregates, "failures": failures,
                  "skipped": [{"scene_id": s, "reason": r} for s, r in loaded.skipped]}
        Path(args.out).write_text(json.dumps(report, indent=2))
    return 0


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    app = create_app(ui_dir=args.ui_dir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def cmd_synth(args):
    pairs = []
    for i in range(args.scenes):
        spec = random_scene_spec(
            args.seed + i,
            n_objects=args.objects,
            max_rot_deg=args.max_rot_deg,
            max_trans=args.max_trans,
        )
        pair, _, _ = generate_synthetic(spec, seed=args.seed + 1000 + i, scene_id=f"scene{i:03d}")
        pairs.append(pair)
    save_dataset(pairs, args.out)
    print(f"wrote {len(pairs)} scenes to {args.out}")
    return 0


_COMMANDS = {
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "serve": cmd_serve,
    "synth": cmd_synth,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (GeometryError, DataIoError, LayoutError) as exc:
        if isinstance(exc, LayoutError):
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
            return RUNTIME_ERROR
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (CalibrationFailed, ProviderUnavailable) as exc:
        cause = getattr(exc, "cause", None)
        name = type(cause).__name__ if cause is not None else type(exc).__name__
        print(f"error: {name}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
