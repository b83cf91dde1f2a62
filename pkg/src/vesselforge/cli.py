"""Command-line surface: phantoms, CSA maps, cascade runs, and reports.

Every subcommand is deterministic given its inputs and flags, never mutates
an input file, and drops a run manifest (tool version, flag snapshot, sha256
of every input and output, per-stage timings) beside its outputs: <out>.run.json
for file outputs, <dir>/run.json for directory outputs.

Exit codes: 0 success, 1 usage error, 2 data or protocol error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shlex
import sys
import time
from pathlib import Path

from . import __version__
from .agreement import agreement_to_csv, agreement_to_json, consistency_report
from .cascade import (
    BackendError,
    CascadeConfig,
    builtin_backend,
    load_config,
    process_backend,
    run_cascade,
)
from .geometry import classify_csa, stratified_volume
from .metrics import (
    SsimParams,
    segmentation_report,
    segmentation_to_csv,
    segmentation_to_json,
    similarity_report,
    similarity_to_csv,
    similarity_to_json,
)
from .phantom import PhantomSpec, generate_cohort, write_cohort_manifest
from .psp import ProtocolError
from .volume import VvolError, read_vvol, subtract, write_vvol

LABEL_REGIONS = {1: "Artery", 2: "Vein"}


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(dest: Path, command: str, config: dict, inputs, outputs, timings_s: dict):
    doc = {
        "tool": "vesselforge",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": {str(p): sha256_of(p) for p in inputs},
        "outputs": {str(p): sha256_of(p) for p in outputs},
        "timings_s": {k: round(v, 6) for k, v in timings_s.items()},
    }
    with open(dest, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def parse_triple(text: str, cast):
    parts = text.split(",")
    if len(parts) == 1:
        return (cast(parts[0]),) * 3
    if len(parts) != 3:
        raise ValueError(f"expected one value or three comma-separated values, got {text!r}")
    return tuple(cast(p) for p in parts)


def make_backend(spec: str, vessels, to_close: list):
    if spec == "identity":
        return builtin_backend("identity")
    if spec == "analytic":
        return builtin_backend("analytic", mask=vessels)
    if spec.startswith("cmd:"):
        backend = process_backend(shlex.split(spec[4:]))
        to_close.append(backend)
        return backend
    raise ValueError(f"backend must be identity, analytic, or cmd:\"...\", got {spec!r}")


# --- subcommands -------------------------------------------------------------

def cmd_phantom(args) -> int:
    t0 = time.monotonic()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = PhantomSpec(
        dims=parse_triple(args.dims, int),
        spacing_mm=parse_triple(args.spacing, float),
        noise_sigma_hu=args.noise,
        seed=args.seed,
    )
    cases = generate_cohort(spec, args.cases, seed_stride=1)
    entries, outputs = [], []
    for k, case in enumerate(cases):
        cid = f"case_{k:03d}"
        paths = {
            "ncct": out_dir / f"{cid}_ncct.vvol",
            "ctpa": out_dir / f"{cid}_ctpa.vvol",
            "vessel_mask": out_dir / f"{cid}_mask.vvol",
        }
        write_vvol(case.ncct, paths["ncct"])
        write_vvol(case.ctpa, paths["ctpa"])
        write_vvol(case.vessel_mask, paths["vessel_mask"])
        outputs.extend(paths.values())
        entries.append({"id": cid, **{k2: str(v) for k2, v in paths.items()}})
    manifest = out_dir / "manifest.json"
    write_cohort_manifest(manifest, entries)
    outputs.append(manifest)
    write_run_manifest(
        out_dir / "run.json", "phantom",
        {"seed": args.seed, "cases": args.cases, "dims": args.dims,
         "spacing": args.spacing, "noise": args.noise},
        [], outputs, {"total": time.monotonic() - t0},
    )
    print(f"wrote {args.cases} case(s) to {out_dir}")
    return 0


def cmd_csa_map(args) -> int:
    t0 = time.monotonic()
    mask = read_vvol(args.mask)
    csa = classify_csa(mask, args.label)
    write_vvol(csa, args.out)
    write_run_manifest(
        Path(str(args.out) + ".run.json"), "csa-map",
        {"mask": args.mask, "label": args.label},
        [args.mask], [args.out], {"total": time.monotonic() - t0},
    )
    return 0


def cmd_synthesize(args) -> int:
    t0 = time.monotonic()
    ncct = read_vvol(args.ncct)
    vessels = read_vvol(args.vessels)
    cfg = load_config(args.config) if args.config else CascadeConfig()
    to_close: list = []
    try:
        backend1 = make_backend(args.g1, vessels, to_close)
        backend2 = make_backend(args.g2, vessels, to_close)
        t1 = time.monotonic()
        out = run_cascade(ncct, vessels, backend1, backend2, cfg)
        t2 = time.monotonic()
    finally:
        for b in to_close:
            b.close()
    write_vvol(out, args.out)
    write_run_manifest(
        Path(str(args.out) + ".run.json"), "synthesize",
        {"ncct": args.ncct, "vessels": args.vessels, "g1": args.g1, "g2": args.g2,
         "config": args.config},
        [p for p in (args.ncct, args.vessels, args.config) if p],
        [args.out],
        {"setup": t1 - t0, "cascade": t2 - t1, "total": time.monotonic() - t0},
    )
    return 0


def cmd_subtract(args) -> int:
    t0 = time.monotonic()
    a = read_vvol(args.a)
    b = read_vvol(args.b)
    write_vvol(subtract(a, b), args.out)
    write_run_manifest(
        Path(str(args.out) + ".run.json"), "subtract",
        {"a": args.a, "b": args.b}, [args.a, args.b], [args.out],
        {"total": time.monotonic() - t0},
    )
    return 0


def cmd_eval(args) -> int:
    t0 = time.monotonic()
    pred = read_vvol(args.pred)
    ref = read_vvol(args.ref)
    artery = read_vvol(args.artery)
    vein = read_vvol(args.vein)
    params = SsimParams(dynamic_range=args.psnr_max, window_edge=args.ssim_window)
    records = similarity_report(pred, ref, artery, vein, params=params, max_value=args.psnr_max)
    out = Path(args.out)
    out.write_text(similarity_to_json(records), encoding="utf-8")
    csv_path = out.with_suffix(".csv")
    csv_path.write_text(similarity_to_csv(records), encoding="utf-8")
    write_run_manifest(
        Path(str(out) + ".run.json"), "eval",
        {"pred": args.pred, "ref": args.ref, "artery": args.artery, "vein": args.vein,
         "psnr_max": args.psnr_max, "ssim_window": args.ssim_window},
        [args.pred, args.ref, args.artery, args.vein], [out, csv_path],
        {"total": time.monotonic() - t0},
    )
    return 0


def cmd_seg_eval(args) -> int:
    t0 = time.monotonic()
    pred = read_vvol(args.pred)
    gt = read_vvol(args.gt)
    if args.label is None:
        labels = (("Artery", 1), ("Vein", 2))
    else:
        labels = ((LABEL_REGIONS.get(args.label, f"label-{args.label}"), args.label),)
    records = segmentation_report(pred, gt, labels=labels)
    out = Path(args.out)
    out.write_text(segmentation_to_json(records), encoding="utf-8")
    csv_path = out.with_suffix(".csv")
    csv_path.write_text(segmentation_to_csv(records), encoding="utf-8")
    write_run_manifest(
        Path(str(out) + ".run.json"), "seg-eval",
        {"pred": args.pred, "gt": args.gt, "label": args.label},
        [args.pred, args.gt], [out, csv_path], {"total": time.monotonic() - t0},
    )
    return 0


def cmd_quantify(args) -> int:
    t0 = time.monotonic()
    with open(args.manifest, encoding="utf-8") as f:
        doc = json.load(f)
    cases = doc["cases"]
    if len(cases) < 2:
        raise ValueError(f"quantify needs >= 2 cases, got {len(cases)}")
    base = Path(args.manifest).resolve().parent
    ids, per_method = [], {"ncct_mask": [], "dcctpa_mask": [], "ctpa_mask": []}
    inputs = [args.manifest]
    for case in cases:
        ids.append(case["id"])
        for key in per_method:
            path = Path(case[key])
            if not path.is_absolute():
                path = base / path
            mask = read_vvol(path)
            inputs.append(path)
            csa = classify_csa(mask)
            per_method[key].append(stratified_volume(mask, csa))
    report = consistency_report(
        ids, per_method["ncct_mask"], per_method["dcctpa_mask"], per_method["ctpa_mask"]
    )
    out = Path(args.out)
    out.write_text(agreement_to_json(report), encoding="utf-8")
    csv_path = out.with_suffix(".csv")
    csv_path.write_text(agreement_to_csv(report), encoding="utf-8")
    write_run_manifest(
        Path(str(out) + ".run.json"), "quantify",
        {"manifest": args.manifest}, inputs, [out, csv_path],
        {"total": time.monotonic() - t0},
    )
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vesselforge",
        description="Vessel-aware two-stage contrast synthesis on volumetric phantoms",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("phantom", help="generate a paired phantom cohort")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=1)
    p.add_argument("--dims", default="64", help="voxels per axis, one value or x,y,z")
    p.add_argument("--spacing", default="0.5", help="mm per voxel, one value or x,y,z")
    p.add_argument("--noise", type=float, default=0.0, help="additive gaussian sigma in HU")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("csa-map", help="caliber-stratify a vessel mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--label", type=int, default=None, help="foreground label (default: any nonzero)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_csa_map)

    p = sub.add_parser("synthesize", help="run the two-stage cascade")
    p.add_argument("--ncct", required=True)
    p.add_argument("--vessels", required=True, help="vessel mask VVOL")
    p.add_argument("--g1", default="identity", help='identity | analytic | cmd:"..."')
    p.add_argument("--g2", default="identity", help='identity | analytic | cmd:"..."')
    p.add_argument("--config", default=None, help="JSON cascade config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("subtract", help="elementwise difference of two volumes")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_subtract)

    p = sub.add_parser("eval", help="similarity report (MAE/PSNR/SSIM) per region")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--artery", required=True, help="mask VVOL; label 1 selects the artery region")
    p.add_argument("--vein", required=True, help="mask VVOL; label 2 selects the vein region")
    p.add_argument("--psnr-max", type=float, default=4095.0,
                   help="MAX in the PSNR ratio; also the SSIM dynamic range")
    p.add_argument("--ssim-window", type=int, default=7, help="odd cubic window edge")
    p.add_argument("--out", required=True, help="JSON report path; CSV written alongside")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("seg-eval", help="Dice and centerline metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--label", type=int, default=None,
                   help="single label to score (default: artery, vein and average)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_seg_eval)

    p = sub.add_parser("quantify", help="stratified vessel-volume agreement (ICC)")
    p.add_argument("--manifest", required=True,
                   help='JSON {"cases":[{"id","ncct_mask","dcctpa_mask","ctpa_mask"}]}')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantify)

    return parser


def run_cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return args.func(args)
    except (VvolError, ProtocolError, BackendError, ValueError, KeyError,
            OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
