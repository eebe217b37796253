"""Command-line entry point: ``densepoints <command> ...``.

Exit codes: 0 success, 2 parse errors (bad flags or input files),
3 contract violations, 4 I/O failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

from . import io
from ._validation import ContractViolation, MeshIndexError, ParseError
from .fit import FitConfig, fit_shape
from .mesh import densify, load_obj
from .metrics import shape_error
from .pseudo_render import SplatConfig, pseudo_render_view
from .render_oracle import render_dataset

log = logging.getLogger("densepoints")

GEN_DATA_VIEWS = 100
METRIC_SCALE = 100.0

EXIT_PARSE = 2
EXIT_CONTRACT = 3
EXIT_IO = 4

# flag name -> FitConfig field
FIT_FLAGS = {
    "n_views": ("--n-views", int),
    "novel_views": ("--novel-views", int),
    "lam": ("--lam", float),
    "upsample": ("--upsample", int),
    "size": ("--size", int),
    "lr_stage1": ("--lr1", float),
    "lr_stage2": ("--lr2", float),
    "stage1_iters": ("--stage1-iters", int),
    "stage2_iters": ("--stage2-iters", int),
    "cube_distance": ("--cube-distance", float),
    "extent": ("--extent", float),
    "mask_threshold": ("--mask-threshold", float),
    "beta": ("--beta", float),
    "eps": ("--eps", float),
    "densify": ("--densify", int),
    "pregen": ("--pregen", int),
}


def read_config_file(path):
    """``key=value`` lines; ``#`` starts a comment.  Keys are FitConfig fields."""
    known = {f.name: f.type for f in fields(FitConfig)}
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected key=value", line=lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ParseError(f"unknown config key {key!r}", line=lineno)
            cast = int if known[key] in (int, "int") else float
            try:
                out[key] = cast(value)
            except ValueError:
                raise ParseError(f"bad value for {key}: {value!r}", line=lineno) from None
    return out


def resolve_fit_config(args):
    """Built-in defaults < config file < explicit flags."""
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for name in FIT_FLAGS:
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            values[name] = flag_value
    if args.seed is not None:
        values["seed"] = args.seed
    values["workers"] = args.workers
    return FitConfig(**values)


def _add_fit_flags(p, names=None):
    for name, (flag, typ) in FIT_FLAGS.items():
        if names is None or name in names:
            p.add_argument(flag, dest=name, type=typ, default=None)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--config", type=Path, default=None)
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="densepoints", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="render ground-truth depth/mask pairs")
    p.add_argument("mesh", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--views", type=int, default=GEN_DATA_VIEWS)
    _add_fit_flags(p, {"size", "extent", "cube_distance"})

    p = sub.add_parser("pseudo-render", parents=[common], help="pseudo-render a point cloud")
    p.add_argument("cloud", type=Path)
    p.add_argument("pose", type=Path)
    p.add_argument("--out", type=str, default="")
    _add_fit_flags(p, {"size", "extent", "upsample", "beta"})

    p = sub.add_parser("fit", parents=[common], help="two-stage fit of view maps to a mesh")
    p.add_argument("mesh", type=Path)
    p.add_argument("out", type=Path)
    _add_fit_flags(p)

    p = sub.add_parser("eval", parents=[common], help="bidirectional shape error")
    p.add_argument("pred", type=Path)
    p.add_argument("mesh", type=Path)
    _add_fit_flags(p, {"densify"})
    p.add_argument("--exact-scan", action="store_true")
    p.add_argument("--csv", type=Path, default=None)

    p = sub.add_parser("view-config", parents=[common], help="print the effective configuration")
    _add_fit_flags(p)
    return parser


def _load_mesh(path):
    with open(path) as fh:
        return load_obj(fh)


def _write_kv(lines, path=None, quiet=False):
    text = "".join(f"{k}={v}\n" for k, v in lines)
    if path is not None:
        Path(path).write_text(text)
    if not quiet:
        sys.stdout.write(text)


def cmd_gen_data(args):
    cfg = resolve_fit_config(args)
    mesh = _load_mesh(args.mesh)
    if args.views <= 0:
        raise ContractViolation("--views must be positive")
    args.out.mkdir(parents=True, exist_ok=True)
    k = cfg.intrinsics()
    data = render_dataset(mesh, k, args.views, cfg.seed, cfg.size, cfg.size, cfg.camera_distance)
    width = max(4, len(str(args.views - 1)))
    manifest = [f"seed={cfg.seed}", f"views={args.views}", f"size={cfg.size}",
                f"extent={cfg.extent!r}", f"distance={cfg.camera_distance!r}"]

    def write(i):
        T, depth, mask = data[i]
        tag = f"{i:0{width}d}"
        io.write_pose(args.out / f"pose_{tag}.txt", T)
        io.write_pfm(args.out / f"depth_{tag}.pfm", depth)
        io.write_pgm(args.out / f"mask_{tag}.pgm", mask)
        return f"pose_{tag}.txt depth_{tag}.pfm mask_{tag}.pgm"

    with ThreadPoolExecutor(max(1, args.workers)) as pool:
        manifest += list(pool.map(write, range(args.views)))
    (args.out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    log.info("wrote %d views to %s", args.views, args.out)
    return 0


def cmd_pseudo_render(args):
    cfg = resolve_fit_config(args)
    cloud = io.read_ply(args.cloud)
    pose = io.read_pose(args.pose)
    k = cfg.intrinsics()
    splat_cfg = SplatConfig(cfg.size, cfg.size, cfg.upsample, beta=cfg.beta)
    depth, mask, winners, _ = pseudo_render_view(cloud, k, pose, splat_cfg)
    prefix = args.out
    if prefix and (prefix.endswith("/") or Path(prefix).is_dir()):
        Path(prefix).mkdir(parents=True, exist_ok=True)
        prefix = str(Path(prefix)) + "/"
    io.write_pfm(f"{prefix}depth.pfm", depth)
    io.write_pgm(f"{prefix}mask.pgm", mask)
    stats = [("points", len(cloud)), ("upsample", cfg.upsample)] + list(winners.stats.as_dict().items())
    _write_kv(stats, f"{prefix}stats.txt", quiet=args.quiet)
    return 0


def fit_report_lines(cfg, report, stage1_err, final_err, n_points):
    lines = [(f.name, getattr(cfg, f.name)) for f in fields(cfg)]
    lines.append(("stages", "stage1+stage2" if cfg.stage2_iters else "stage1-only"))
    lines.append(("points", n_points))
    if stage1_err is not None:
        lines.append(("stage1_pred_to_gt_x100", f"{stage1_err.pred_to_gt * METRIC_SCALE:.6f}"))
        lines.append(("stage1_gt_to_pred_x100", f"{stage1_err.gt_to_pred * METRIC_SCALE:.6f}"))
    if final_err is not None:
        lines.append(("pred_to_gt_x100", f"{final_err.pred_to_gt * METRIC_SCALE:.6f}"))
        lines.append(("gt_to_pred_x100", f"{final_err.gt_to_pred * METRIC_SCALE:.6f}"))
    for key, value in report.counters.items():
        lines.append((f"splat_{key}", value))
    return lines


def cmd_fit(args):
    cfg = resolve_fit_config(args)
    mesh = _load_mesh(args.mesh)
    args.out.mkdir(parents=True, exist_ok=True)
    log.info("fitting: %d stage-1 + %d stage-2 iterations", cfg.stage1_iters, cfg.stage2_iters)
    cloud, report = fit_shape(mesh, cfg)
    io.write_ply(args.out / "cloud.ply", cloud)
    io.save_checkpoint(args.out / "checkpoint.pfck", report.maps, report.adam,
                       cfg.stage1_iters + cfg.stage2_iters)
    io.write_loss_csv(args.out / "stage1_losses.csv", report.stage1.losses)
    io.write_loss_csv(args.out / "losses.csv", report.losses)
    lines = fit_report_lines(cfg, report, report.stage1_error, report.shape_error, len(cloud))
    _write_kv(lines, args.out / "report.txt", quiet=args.quiet)
    return 0


def cmd_eval(args):
    cfg = resolve_fit_config(args)
    pred = io.read_ply(args.pred)
    if len(pred) == 0:
        raise ContractViolation("prediction cloud is empty")
    mesh = _load_mesh(args.mesh)
    count, seed = cfg.densify, cfg.seed
    gt = densify(mesh, count, seed)
    err = shape_error(pred, gt, exact_scan=args.exact_scan, workers=args.workers)
    scaled = err.scaled(METRIC_SCALE)
    _write_kv([("pred_to_gt", f"{scaled.pred_to_gt:.3f}"), ("gt_to_pred", f"{scaled.gt_to_pred:.3f}")],
              quiet=args.quiet)
    if args.csv is not None:
        new = not args.csv.exists()
        with open(args.csv, "a") as fh:
            if new:
                fh.write("pred,mesh,densify,seed,pred_to_gt_x100,gt_to_pred_x100\n")
            fh.write(f"{args.pred},{args.mesh},{count},{seed},{scaled.pred_to_gt!r},{scaled.gt_to_pred!r}\n")
    return 0


def cmd_view_config(args):
    cfg = resolve_fit_config(args)
    lines = list(asdict(cfg).items()) + [("gen_data_views", GEN_DATA_VIEWS)]
    _write_kv(lines, quiet=False)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pseudo-render": cmd_pseudo_render,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "view-config": cmd_view_config,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_PARSE
    try:
        return COMMANDS[args.command](args)
    except (ParseError, MeshIndexError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
