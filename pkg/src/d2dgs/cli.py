"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .config import PipelineConfig
from .data import write_fmap, write_image
from .meshing import MeshingConfig, TriangleMesh
from .metrics import evaluate_sequence
from .pipeline import mesh_times, run_training
from .render import render_view
from .synthetic import KINDS, generate_synthetic
from .training import TrainingError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parse_param(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        parsed = [float(v) for v in value.split(",")]
        parsed = parsed[0] if len(parsed) == 1 else tuple(parsed)
        if isinstance(parsed, float) and parsed.is_integer() and "." not in value:
            parsed = int(parsed)
    except ValueError:
        parsed = value
    return key, parsed


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="d2dgs", description="Dynamic 2D Gaussian surfels: fit, render, mesh, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init-config", help="write a config with every default filled in")
    s.add_argument("out")

    s = sub.add_parser("train", help="fit a scene; writes checkpoints and loss_log.csv")
    s.add_argument("config")
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--output")

    s = sub.add_parser("render", help="render one view of a checkpoint at time t")
    s.add_argument("checkpoint")
    s.add_argument("--t", type=float, required=True)
    s.add_argument("--view", type=int, default=0)
    s.add_argument("--depth", action="store_true", help="also write median and expected depth (.fmap)")
    s.add_argument("--normal", action="store_true", help="also write the normal map (.fmap and .png)")
    s.add_argument("--alpha", action="store_true", help="also write the alpha map (.fmap and .png)")
    s.add_argument("--out", default=".")

    s = sub.add_parser("mesh", help="extract meshes by masked-depth TSDF fusion")
    s.add_argument("checkpoint")
    s.add_argument("--t", type=float, default=0.0)
    s.add_argument("--all-times", action="store_true", help="one mesh per training timestamp")
    s.add_argument("--no-filter", action="store_true", help="fuse unmasked depth (ablation)")
    s.add_argument("--resolution", type=int)
    s.add_argument("--out", default=".")

    s = sub.add_parser("eval", help="CD/EMD report for mesh_*.obj sequences")
    s.add_argument("pred_dir")
    s.add_argument("gt_dir")
    s.add_argument("--samples", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="CSV path (default: <pred_dir>/report.csv)")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("kind", choices=KINDS)
    s.add_argument("out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--param", action="append", type=_parse_param, default=[], metavar="KEY=VALUE")
    return p


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #


def _cmd_init_config(args) -> int:
    PipelineConfig().save(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = PipelineConfig.load(args.config)
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    if args.seed is not None:
        cfg.seed = cfg.train.seed = cfg.scene.seed = args.seed
    if args.output is not None:
        cfg.output = args.output
    every = max(cfg.train.iterations // 20, 1)

    def progress(row):
        if row["iteration"] % every == 0 or row["iteration"] == cfg.train.iterations:
            print(f"iter {row['iteration']:6d}  total {row['total']:.5f}  l1 {row['l1']:.5f}  "
                  f"surfels {row['num_surfels']}", flush=True)

    _, path = run_training(cfg, progress)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_render(args) -> int:
    if not 0.0 <= args.t <= 1.0:
        raise ValueError("timestamp out of range")
    ckpt = load_checkpoint(args.checkpoint)
    if not 0 <= args.view < len(ckpt.cameras):
        raise ValueError(f"view {args.view} out of range (checkpoint has {len(ckpt.cameras)} cameras)")
    cam = ckpt.cameras[args.view].with_time(args.t)
    with torch.no_grad():
        r = render_view(ckpt.scene.at_time(args.t), cam, ckpt.background, records=False).numpy()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"view{args.view:03d}_t{args.t:.4f}"
    write_image(out / f"{stem}_rgb.png", r["rgb"])
    written = [f"{stem}_rgb.png"]
    if args.depth:
        write_fmap(out / f"{stem}_depth.fmap", r["depth_median"])
        write_fmap(out / f"{stem}_depth_expected.fmap", r["depth_expected"])
        written += [f"{stem}_depth.fmap", f"{stem}_depth_expected.fmap"]
    if args.normal:
        write_fmap(out / f"{stem}_normal.fmap", r["normal"])
        write_image(out / f"{stem}_normal.png", 0.5 * (r["normal"] + 1.0) * (r["alpha"][..., None] > 0.5))
        written += [f"{stem}_normal.fmap", f"{stem}_normal.png"]
    if args.alpha:
        write_fmap(out / f"{stem}_alpha.fmap", r["alpha"])
        write_image(out / f"{stem}_alpha.png", np.repeat(r["alpha"][..., None], 3, -1))
        written += [f"{stem}_alpha.fmap", f"{stem}_alpha.png"]
    print("wrote " + ", ".join(str(out / w) for w in written))
    return EXIT_OK


def _cmd_mesh(args) -> int:
    if not args.all_times and not 0.0 <= args.t <= 1.0:
        raise ValueError("timestamp out of range")
    ckpt = load_checkpoint(args.checkpoint)
    mcfg = MeshingConfig(**ckpt.config.get("meshing", {})) if ckpt.config.get("meshing") else MeshingConfig()
    mcfg.filter = not args.no_filter
    if args.resolution:
        mcfg.resolution = args.resolution
    if args.all_times:
        times = sorted({round(c.time, 9) for c in ckpt.cameras})
    else:
        times = [args.t]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meshes = mesh_times(ckpt, times, mcfg)
    for i, (t, m) in enumerate(zip(times, meshes)):
        m.write_obj(out / f"mesh_{i:05d}.obj")
        m.write_ply(out / f"mesh_{i:05d}.ply")
        print(f"mesh_{i:05d}  t={t:.4f}  vertices {len(m.vertices)}  faces {len(m.faces)}  "
              f"components {m.num_components()}  boundary edges {len(m.boundary_edges())}  "
              f"holes {m.hole_count()}")
    (out / "times.txt").write_text("".join(f"{t:.9g}\n" for t in times))
    return EXIT_OK


def _read_sequence(directory: Path) -> tuple[list[TriangleMesh], list[float] | None]:
    files = sorted(directory.glob("mesh_*.obj"))
    if not files:
        raise FileNotFoundError(f"no mesh_*.obj files in {directory}")
    times_file = directory / "times.txt"
    times = [float(x) for x in times_file.read_text().split()] if times_file.is_file() else None
    return [TriangleMesh.read_obj(f) for f in files], times


def _cmd_eval(args) -> int:
    pred, times = _read_sequence(Path(args.pred_dir))
    gt, gt_times = _read_sequence(Path(args.gt_dir))
    if len(gt) == 1 and gt_times is None:
        gt = gt * len(pred)      # static ground truth
    elif times is not None and gt_times is not None:
        # pair each predicted timestamp with the ground-truth mesh at the same time
        picked = []
        for t in times:
            j = int(np.argmin(np.abs(np.asarray(gt_times) - t)))
            if abs(gt_times[j] - t) > 1e-6:
                raise ValueError(f"no ground-truth mesh at t={t:g}")
            picked.append(gt[j])
        gt = picked
    report = evaluate_sequence(pred, gt, times or gt_times, samples=args.samples, seed=args.seed)
    out = Path(args.out) if args.out else Path(args.pred_dir) / "report.csv"
    report.write_csv(out)
    print(report.table())
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    res = generate_synthetic(args.kind, args.out, dict(args.param), seed=args.seed)
    print(f"wrote {args.kind} dataset to {res.root} ({len(res.train)} training views)")
    return EXIT_OK


COMMANDS = {"init-config": _cmd_init_config, "train": _cmd_train, "render": _cmd_render,
            "mesh": _cmd_mesh, "eval": _cmd_eval, "synth": _cmd_synth}


def cli_main(argv=None) -> int:
    threads = os.environ.get("D2DGS_THREADS")
    if threads:
        torch.set_num_threads(max(int(threads), 1))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:          # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, TrainingError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
