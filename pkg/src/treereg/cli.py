"""Command-line interface.

Subcommands mirror the pipeline stages so each can run standalone on the
JSON/XYZ artifacts of the previous one: simulate, project, coarse, fine,
register, evaluate, pipeline. Angles are degrees on the command line and
radians internally; all file units are meters.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .coarse import CoarseParams, coarse_register
from .errors import TreeRegError
from .evaluation import BranchPairSpec, evaluate, format_error_table
from .fine import SliceParams, fine_register
from .geometry import apply_transform, compose
from .io import (
    load_cloud,
    load_transform,
    save_cloud_xyz,
    save_transform,
    write_dataset,
)
from .pipeline import (
    PipelineConfig,
    configure_logging,
    default_fine_heights,
    run_pipeline,
)
from .projection import (
    ScannerSpec,
    generate_image_sequence,
    project,
    sequence_pgm_name,
    write_pgm,
)
from .simulator import TreeParams, generate_tree, make_dataset


def _add_scanner_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--phi-deg", type=float, default=0.06,
                   help="horizontal angular step width (degrees)")
    p.add_argument("--vartheta-deg", type=float, default=0.06,
                   help="vertical angular step width (degrees)")


def _spec(args) -> ScannerSpec:
    return ScannerSpec.from_degrees(args.phi_deg, args.vartheta_deg)


def _cmd_simulate(args) -> int:
    tree = generate_tree(TreeParams(n_branches=args.branches), seed=args.seed)
    dataset = make_dataset(
        tree,
        n_stations=args.stations,
        radius_m=args.radius,
        spec=_spec(args),
        noise_sigma=args.noise,
        seed=args.seed,
    )
    write_dataset(dataset, args.out)
    print(f"wrote {len(dataset.scans)} scans to {args.out}")
    return 0


def _cmd_project(args) -> int:
    cloud = load_cloud(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    label = Path(args.input).stem
    if args.sequence:
        seq = generate_image_sequence(
            cloud, _spec(args), math.radians(args.theta_deg), args.scans
        )
        for img in seq.entries:
            write_pgm(img, out / sequence_pgm_name(label, img.source_rotation))
        print(f"wrote {len(seq)} images to {out}")
    else:
        img = project(cloud, _spec(args))
        path = out / f"{label}.pgm"
        write_pgm(img, path)
        print(f"wrote {path} ({img.width}x{img.height})")
    return 0


def _cmd_coarse(args) -> int:
    target = load_cloud(args.target)
    reference = load_cloud(args.reference)
    params = CoarseParams(
        theta=math.radians(args.theta_deg),
        n_scans=args.scans,
        pair_count=args.pair_count,
        top_k=args.top_k,
        verification_enabled=not args.no_verification,
    )
    result = coarse_register(target, reference, _spec(args), params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_transform(out / "coarse_transform.json", result.transform)
    (out / "coarse_result.json").write_text(result.to_json() + "\n")
    if args.apply:
        save_cloud_xyz(out / "target_coarse.xyz", apply_transform(target, result.transform))
    print(f"coarse rms residual {result.rms_residual:.4f} m "
          f"({len(result.tie_points)} tie points)")
    return 0


def _cmd_fine(args) -> int:
    target = load_cloud(args.target)
    reference = load_cloud(args.reference)
    if args.transform:
        target = apply_transform(target, load_transform(args.transform))
    heights = None
    if args.layers != 3:
        fractions = tuple(np.linspace(0.15, 0.75, args.layers))
        heights = default_fine_heights(reference, fractions)
    params = SliceParams(
        heights=heights,
        thickness=args.thickness,
        offset_weight=args.offset_weight,
        rounds=args.rounds,
    )
    result = fine_register(target, reference, _spec(args), params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_transform(out / "fine_transform.json", result.transform,
                   frame="coarse→reference")
    (out / "fine_result.json").write_text(result.to_json() + "\n")
    print(f"fine rms residual {result.rms_residual:.4f} m "
          f"({len(result.tie_points)} tie points, {result.rounds_used} rounds)")
    return 0


def _cmd_register(args) -> int:
    target = load_cloud(args.target)
    reference = load_cloud(args.reference)
    spec = _spec(args)
    coarse = coarse_register(
        target,
        reference,
        spec,
        CoarseParams(theta=math.radians(args.theta_deg), n_scans=args.scans),
    )
    coarse_cloud = apply_transform(target, coarse.transform)
    fine = fine_register(
        coarse_cloud,
        reference,
        spec,
        SliceParams(heights=default_fine_heights(reference)),
    )
    combined = compose(fine.transform, coarse.transform)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_transform(out / "coarse_transform.json", coarse.transform)
    save_transform(out / "fine_transform.json", fine.transform, frame="coarse→reference")
    save_transform(out / "combined_transform.json", combined)
    if args.apply:
        save_cloud_xyz(out / "target_registered.xyz",
                       apply_transform(target, combined))
    print(f"coarse rms {coarse.rms_residual:.4f} m, fine rms {fine.rms_residual:.4f} m")
    return 0


def _cmd_evaluate(args) -> int:
    cloud_a = load_cloud(args.cloud_a)
    cloud_b = load_cloud(args.cloud_b)
    if args.transform:
        cloud_b = apply_transform(cloud_b, load_transform(args.transform))
    raw = json.loads(Path(args.branches).read_text())
    pairs = [BranchPairSpec.from_json_dict(d) for d in raw]
    report = evaluate(pairs, cloud_a, cloud_b)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "error_report.json").write_text(report.to_json() + "\n")
    (out / "error_table.txt").write_text(
        format_error_table([("evaluated", args.pair_label, report.mean)])
    )
    print(f"mean registration error {report.mean:.4f} m over "
          f"{len(report.distances)} distances ({len(report.failed)} branches failed)")
    return 0


def _cmd_pipeline(args) -> int:
    config = PipelineConfig(
        output_dir=Path(args.out),
        scan_paths=tuple(Path(p) for p in args.scans_paths or ()),
        dataset_dir=Path(args.dataset) if args.dataset else None,
        simulate=args.simulate,
        seed=args.seed,
        n_stations=args.stations,
        station_radius=args.radius,
        noise_sigma=args.noise,
        phi_deg=args.phi_deg,
        vartheta_deg=args.vartheta_deg,
        theta_deg=args.theta_deg,
        verification_enabled=not args.no_verification,
        fine_thickness=args.thickness,
        fine_rounds=args.rounds,
        run_icp=not args.no_icp,
        branch_pairs_path=Path(args.branches) if args.branches else None,
        debug_images=args.debug_images,
    )
    manifest = run_pipeline(config)
    for entry in manifest.pairs:
        status = entry["status"]
        errors = entry.get("errors", {})
        err_str = ", ".join(f"{k} {v:.3f} m" for k, v in errors.items())
        print(f"pair {entry['pair']}: {status}" + (f" ({err_str})" if err_str else ""))
    print(f"manifest: {Path(args.out) / 'run_manifest.json'}")
    return 0 if manifest.succeeded else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treereg",
        description="Marker-free coarse-to-fine registration of multi-station "
        "single-tree laser scans.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic multi-station dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stations", type=int, default=3)
    p.add_argument("--radius", type=float, default=15.0, help="station circle radius (m)")
    p.add_argument("--noise", type=float, default=0.005, help="range noise sigma (m)")
    p.add_argument("--branches", type=int, default=10)
    _add_scanner_args(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("project", help="write spherical-projection debug images")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sequence", action="store_true", help="write the rotated sequence")
    p.add_argument("--theta-deg", type=float, default=10.0)
    p.add_argument("--scans", type=int, default=3, help="scan count n in 720/(n*theta)")
    _add_scanner_args(p)
    p.set_defaults(func=_cmd_project)

    p = sub.add_parser("coarse", help="coarse-register target to reference")
    p.add_argument("--target", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--theta-deg", type=float, default=10.0)
    p.add_argument("--scans", type=int, default=3)
    p.add_argument("--pair-count", type=int, default=3)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--no-verification", action="store_true")
    p.add_argument("--apply", action="store_true", help="also write the transformed cloud")
    _add_scanner_args(p)
    p.set_defaults(func=_cmd_coarse)

    p = sub.add_parser("fine", help="fine-register a coarse-aligned target")
    p.add_argument("--target", required=True, help="coarse-aligned target cloud")
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--transform", help="coarse transform JSON to apply to target first")
    p.add_argument("--thickness", type=float, default=0.10)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--offset-weight", type=float, default=1.0)
    p.add_argument("--rounds", type=int, default=1)
    _add_scanner_args(p)
    p.set_defaults(func=_cmd_fine)

    p = sub.add_parser("register", help="coarse + fine in one step")
    p.add_argument("--target", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--theta-deg", type=float, default=10.0)
    p.add_argument("--scans", type=int, default=3)
    p.add_argument("--apply", action="store_true")
    _add_scanner_args(p)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("evaluate", help="branch-center registration error")
    p.add_argument("--cloud-a", required=True, help="reference-frame cloud")
    p.add_argument("--cloud-b", required=True, help="registered target cloud")
    p.add_argument("--branches", required=True, help="branch-pair spec JSON")
    p.add_argument("--transform", help="transform JSON applied to cloud-b first")
    p.add_argument("--pair-label", default="b-a")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("pipeline", help="simulate/load, register all pairs, evaluate")
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--simulate", action="store_true")
    src.add_argument("--dataset", help="dataset directory from 'simulate'")
    src.add_argument("--scans-paths", nargs="+", help="scan files, reference first")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stations", type=int, default=3)
    p.add_argument("--radius", type=float, default=15.0)
    p.add_argument("--noise", type=float, default=0.005)
    p.add_argument("--theta-deg", type=float, default=10.0)
    p.add_argument("--thickness", type=float, default=0.10)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--no-verification", action="store_true")
    p.add_argument("--no-icp", action="store_true")
    p.add_argument("--branches", help="branch-pair spec JSON for evaluation")
    p.add_argument("--debug-images", action="store_true")
    _add_scanner_args(p)
    p.set_defaults(func=_cmd_pipeline)
    return parser


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TreeRegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
