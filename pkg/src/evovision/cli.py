"""Command line interface.

Subcommands: evolve, train, render, psf, metrics, fit-scaling.
Exit codes: 0 success, 2 config error, 3 runtime failure.
Environment overrides: EVOVISION_OUT (output root), EVOVISION_JOBS (pool width).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .experiment import (ENV_JOBS, ENV_OUT, ConfigError, ExperimentConfig,
                         bundled_config_names, load_config, make_run_dir, run_evolve,
                         run_sweep, run_train, write_csv, write_manifest)
from .genotype import genome_from_text, genome_to_text
from .imgio import ensure_dir, read_pfm, write_pfm, write_pgm
from .metrics import (PSNR_CAP_DB, cpd, image_quality, mtf, psnr, scaling_reports, ssim)
from .optics import DEFAULT_OPTICS, PsfKernel, psf_for_genome
from .policy import parameter_count
from .world import SPEC_BUILDERS, World, pinhole_image, render_eye


def _out_root(args) -> str:
    return args.out or os.environ.get(ENV_OUT, "runs")


def _jobs(args) -> int:
    if args.jobs is not None:
        return args.jobs
    return int(os.environ.get(ENV_JOBS, "1"))


def _load_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg = replace(cfg, jobs=_jobs(args))
    return cfg


def cmd_evolve(args) -> int:
    cfg = _load_config(args)
    run_dir = make_run_dir(_out_root(args), cfg.name)
    write_manifest(run_dir, cfg)
    records = run_evolve(cfg, run_dir, resume_path=args.resume)
    print(f"wrote {len(records)} generation records to {run_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run_dir = make_run_dir(_out_root(args), cfg.name)
    write_manifest(run_dir, cfg)
    summary = run_train(cfg, run_dir)
    print(json.dumps(summary, sort_keys=True))
    print(f"outputs in {run_dir}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    run_dir = make_run_dir(_out_root(args), cfg.name)
    write_manifest(run_dir, cfg)
    rows = run_sweep(cfg, run_dir)
    print(f"wrote {len(rows)} sweep rows to {run_dir}")
    return 0


def _read_genome(path: str):
    return genome_from_text(Path(path).read_text())


def cmd_psf(args) -> int:
    genome = _read_genome(args.genome)
    if not genome.optical.enabled:
        raise ConfigError("genome has optics disabled; no PSF to compute")
    out = ensure_dir(args.out)
    kernel = psf_for_genome(genome, DEFAULT_OPTICS)
    names = ("r", "g", "b")
    for ch, name in enumerate(names):
        write_pfm(out / f"psf_{name}.pfm", kernel.channels[ch])
        write_pgm(out / f"psf_{name}.pgm", kernel.channels[ch] / kernel.channels[ch].max())
    sidecar = {
        "genome": genome_to_text(genome),
        "wavelengths_nm": list(kernel.wavelengths_nm),
        "pixel_pitch_mm": kernel.pixel_pitch_mm,
        "geometry": {
            "sensor_size_mm": DEFAULT_OPTICS.sensor_size_mm,
            "sensor_distance_mm": DEFAULT_OPTICS.sensor_distance_mm,
            "scene_distance_mm": DEFAULT_OPTICS.scene_distance_mm,
            "height_scale_um": DEFAULT_OPTICS.height_scale_um,
        },
    }
    (out / "psf.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    print(f"wrote PSF kernels to {out}")
    return 0


def cmd_render(args) -> int:
    genome = _read_genome(args.genome)
    if args.task not in SPEC_BUILDERS:
        raise ConfigError(f"unknown task {args.task!r}")
    spec = SPEC_BUILDERS[args.task]()
    out = ensure_dir(args.out)
    world = World(spec, genome, seed=args.seed or 0)
    world.reset()
    if args.pose:
        x, y, heading = (float(v) for v in args.pose.split(","))
        world.engine.pos[0] = (x, y)
        world.engine.heading[0] = math.radians(heading)
    for e in range(genome.morphological.num_eyes):
        scene = render_eye(world, e, padded=True)
        write_pfm(out / f"eye{e}_scene.pfm", scene.values.astype(np.float32))
        write_pgm(out / f"eye{e}_scene.pgm", scene.values)
        sensor = pinhole_image(world, e)
        write_pgm(out / f"eye{e}_pinhole.pgm", sensor.values)
    print(f"wrote {genome.morphological.num_eyes} eye renders to {out}")
    return 0


def cmd_metrics(args) -> int:
    rows = []
    if args.genome:
        genome = _read_genome(args.genome)
        row = {"source": args.genome, "cpd": cpd(genome),
               "params": parameter_count(genome)}
        if genome.optical.enabled:
            kernel = psf_for_genome(genome, DEFAULT_OPTICS)
            row["image_quality"] = image_quality(kernel, genome.optical.aperture_fraction)
        rows.append(row)
    if args.psf:
        channels = np.stack([read_pfm(p).astype(float) for p in args.psf])
        channels /= channels.sum(axis=(1, 2), keepdims=True)
        kernel = PsfKernel(channels=channels,
                           wavelengths_nm=DEFAULT_OPTICS.wavelengths_nm[:len(args.psf)],
                           pixel_pitch_mm=args.psf_pitch_mm)
        curve = mtf(kernel)
        out = ensure_dir(args.out or ".")
        mtf_rows = [{"frequency_cyc_mm": f,
                     **{f"contrast_{i}": c for i, c in enumerate(col)}}
                    for f, col in zip(curve.frequencies, curve.contrast.T)]
        write_csv(out / "mtf.csv", mtf_rows)
        rows.append({"source": ";".join(args.psf),
                     "image_quality": image_quality(kernel, args.aperture)})
    if args.image and args.reference:
        image = read_pfm(args.image).astype(float)
        reference = read_pfm(args.reference).astype(float)
        p = psnr(image, reference)
        rows.append({"source": args.image,
                     "psnr_db": PSNR_CAP_DB if math.isinf(p) else p,
                     "ssim": ssim(image, reference)})
    if not rows:
        raise ConfigError("nothing to do: pass --genome, --psf, or --image/--reference")
    out = ensure_dir(args.out or ".")
    write_csv(out / "metrics.csv", rows)
    print(json.dumps(rows, sort_keys=True))
    return 0


def cmd_fit_scaling(args) -> int:
    rows = []
    text = Path(args.csv).read_text().strip().splitlines()
    if not text:
        raise ConfigError(f"{args.csv}: empty sweep CSV")
    header = [h.strip() for h in text[0].split(",")]
    required = {"task", "cpd", "N", "error"}
    if not required.issubset(header):
        raise ConfigError(f"{args.csv}:1: need columns {sorted(required)}, got {header}")
    idx = {k: header.index(k) for k in required}
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            rows.append((parts[idx["task"]].strip(), float(parts[idx["cpd"]]),
                         float(parts[idx["N"]]), float(parts[idx["error"]])))
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"{args.csv}:{lineno}: {exc}") from exc
    reports = scaling_reports(rows, ceiling_epsilon=args.ceiling_epsilon)
    out_rows = [{
        "task": r.task, "cpd": r.cpd_level,
        "coefficient": r.fit.coefficient, "exponent": r.fit.exponent,
        "residual": r.fit.residual, "samples": r.fit.samples,
        "ceiling": r.ceiling, "tail_improvement": r.tail_improvement,
    } for r in reports]
    if args.out:
        out = ensure_dir(args.out)
        write_csv(out / "scaling_fits.csv", out_rows)
    for row in out_rows:
        flag = " [ceiling]" if row["ceiling"] else ""
        print(f"{row['task']} cpd={row['cpd']:g}: "
              f"L = {row['coefficient']:.3e} * N^{row['exponent']:.3f}"
              f" (residual {row['residual']:.2e}){flag}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evovision",
        description="Co-evolution of eye optics, morphology and learned behavior.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_args(p):
        p.add_argument("--config", required=True,
                       help=f"config path or bundled name ({', '.join(bundled_config_names())})")
        p.add_argument("--out", help="output root (default: runs/, or $EVOVISION_OUT)")
        p.add_argument("--jobs", type=int, help="parallel evaluation width")
        p.add_argument("--seed", type=int, help="override the config master seed")

    p = sub.add_parser("evolve", help="run the evolution loop")
    add_run_args(p)
    p.add_argument("--resume", help="generations.jsonl of an interrupted run")
    p.set_defaults(fn=cmd_evolve)

    p = sub.add_parser("train", help="train a single agent from the config template")
    add_run_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="acuity x capacity scaling sweep")
    add_run_args(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("psf", help="emit PSF kernels for a genome")
    p.add_argument("--genome", required=True, help="genome text file")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_psf)

    p = sub.add_parser("render", help="dump per-eye images for a genome and pose")
    p.add_argument("--genome", required=True)
    p.add_argument("--task", default="detection")
    p.add_argument("--pose", help="x,y,heading_deg (default: spawn pose)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("metrics", help="compute metrics for genomes, PSFs, or images")
    p.add_argument("--genome")
    p.add_argument("--psf", nargs="*", help="per-channel PSF PFM files")
    p.add_argument("--psf-pitch-mm", type=float, default=DEFAULT_OPTICS.sensor_size_mm / 15)
    p.add_argument("--aperture", type=float, default=1.0)
    p.add_argument("--image", help="PFM image to compare against --reference")
    p.add_argument("--reference", help="pinhole reference PFM")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("fit-scaling", help="fit power laws to a sweep CSV")
    p.add_argument("--csv", required=True, help="columns: task,cpd,N,error")
    p.add_argument("--ceiling-epsilon", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_fit_scaling)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
