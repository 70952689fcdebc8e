"""
EAFormer command line
主入口：fields / verify / train / eval / render 子命令

Run with ``python -m eaformer.main <command> ...``. Exit codes: 0 success,
1 check or runtime failure, 2 usage error.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from eaformer.config import RunConfig, build_run_config, load_run_config, settings
from eaformer.exceptions import EAFError
from eaformer.models import FieldConfig, parse_scale
from eaformer.services.field_service import compute_field
from eaformer.services.oracle_service import oracle_service
from eaformer.services.rig_service import rig_service
from eaformer.services.synth_service import CLASS_ORDER, synth_service
from eaformer.services.train_service import train_service
from eaformer.utils.geometry import BevGrid, CameraView, feature_size_for
from eaformer.utils.netpbm import write_pgm, write_ppm

logger = logging.getLogger("eaformer")

EXIT_OK = 0
EXIT_FAILURE = 1


# === argument types ===
def _grid(value: str) -> BevGrid:
    try:
        return BevGrid.parse(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _scale(value: str) -> float:
    try:
        s = parse_scale(value)
    except (ValueError, ZeroDivisionError) as e:
        raise argparse.ArgumentTypeError(f"bad scale {value!r}") from e
    if not 0 < s <= 1:
        raise argparse.ArgumentTypeError(f"scale must be in (0, 1], got {value}")
    return s


def _positive_float(value: str) -> float:
    try:
        v = float(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not a number: {value!r}") from e
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return v


def _non_negative_int(value: str) -> int:
    try:
        v = int(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not an integer: {value!r}") from e
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return v


def _cell(value: str) -> Tuple[int, int]:
    parts = value.split(",")
    try:
        i, j = (int(p) for p in parts)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"query must be I,J, got {value!r}") from e
    return i, j


# === commands ===
def cmd_fields(args: argparse.Namespace) -> int:
    """One PGM heatmap per camera for a single BEV query."""
    grid: BevGrid = args.grid
    i, j = args.query
    if not (0 <= i < grid.cells_x and 0 <= j < grid.cells_y):
        args.parser.error(f"query {i},{j} is outside the {grid.cells_x}x{grid.cells_y} grid")
    views = rig_service.load(args.rig)
    cfg = FieldConfig(lam=args.lam)
    q = grid.query_index((i, j))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    lines = ["# file\tview_id\tview\tquery_i\tquery_j\tq"]
    visible = 0
    for view in views:
        field = compute_field(grid, view, feature_size_for(view, args.scale), cfg)
        visible += int(field.query_visibility[q])
        name = f"field_{view.label}_q{i}_{j}.pgm"
        write_pgm(out / name, field.heatmap(q))
        lines.append(f"{name}\t{view.view_id}\t{view.label}\t{i}\t{j}\t{q}")
        print(f"📦 {name}  (feature {field.feature_size[0]}x{field.feature_size[1]}, "
              f"W>0.5: {field.wide_count(q)} px)")
    (out / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if visible == 0:
        print(f"⚠️ query {i},{j} is not visible in any camera; heatmaps are all black")
    print(f"✅ wrote {len(views)} heatmaps to {out}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    """Brute-force epipolar oracle over random cells."""
    views = rig_service.load(args.rig)
    print(f"🔍 verifying {len(views)} camera(s) on grid {args.grid.spec}, {args.samples} cells, seed {args.seed}")
    report = oracle_service.verify(views, args.grid, args.samples, args.seed)
    for c in report.checks:
        mark = "✅" if c.ok else "❌"
        print(f"   {mark} {c.name:<9} max error {c.max_error:.3e} (tol {c.tolerance:g}, {c.evaluated} evaluated)")
    failure = report.first_failure
    if failure is not None:
        name, (cell, view, err) = failure
        print(f"❌ {name} check failed: cell {cell[0]},{cell[1]} view {view} error {err:.3e}")
        return EXIT_FAILURE
    print("✅ all checks within tolerance")
    return EXIT_OK


def _rig_views(cfg: RunConfig) -> List[CameraView]:
    return rig_service.load(cfg.rig or None, (cfg.image_width, cfg.image_height))


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    views = _rig_views(cfg)
    out = cfg.resolved_output_dir()
    print(f"🚀 training {cfg.steps} steps, grid {cfg.grid}, {len(views)} cameras, seed {cfg.seed}")
    if cfg.uniform_weights:
        print("   ablation: uniform weights (W ≡ 1)")
    result = train_service.train_toy(cfg, views, quiet=args.quiet)
    if result.field_sparsity is not None:
        print(f"   field sparsity (W <= 0.5): {result.field_sparsity:.4f}")
    metrics_path = train_service.write_metrics(out / "metrics.csv", result.metrics)
    ckpt_path = train_service.save_model(out / "model.ckpt", result.model)
    final = result.final_eval
    print(f"📦 {metrics_path}")
    print(f"📦 {ckpt_path}")
    print(f"✅ final iou_vehicle {final.iou_vehicle:.4f}  iou_drivable {final.iou_drivable:.4f}"
          + (f"  lambda {result.model.lam:.4f}" if result.model.log_lambda is not None else ""))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    model = train_service.load_model(args.checkpoint, expected=cfg.model_cfg())
    views = _rig_views(cfg)
    if args.perturb_rig:
        p = rig_service.parse_perturbation(args.perturb_rig)
        views = rig_service.perturb(views, **p)
        print(f"🔧 rig perturbation applied: yaw={p['yaw']:g}° tx={p['tx']:g} ty={p['ty']:g} tz={p['tz']:g} m; "
              "fields recomputed")
    bank = train_service.field_bank_for(model.cfg, views)
    samples = train_service.load_samples(train_service.eval_seeds(cfg), model.cfg.grid, views, cfg)
    result = train_service.evaluate(model, bank, samples, cfg.band_edges)
    print(f"🔍 evaluated {len(samples)} scene(s)")
    print(f"   iou_vehicle  {result.iou_vehicle:.10g}")
    print(f"   iou_drivable {result.iou_drivable:.10g}")
    for (lo, hi), v in zip(zip(result.band_edges[:-1], result.band_edges[1:]), result.banded_vehicle):
        print(f"   vehicle {lo:g}-{hi:g} m: {v:.4f}")
    print("✅ done")
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    """Scene JSON, one PPM per camera and the ground-truth masks."""
    cfg = load_run_config(args.config) if args.config else build_run_config({})
    grid = args.grid or BevGrid.parse(cfg.grid)
    views = rig_service.load(args.rig) if args.rig else _rig_views(cfg)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    scene = synth_service.generate(seed, grid, cfg.scene_params(), rig_ref=str(args.rig or cfg.rig or "toy"))
    paths = [synth_service.write_scene(out / f"scene_{seed}.json", scene)]
    for view, image in zip(views, synth_service.render_views(scene, views, cfg.render_params())):
        paths.append(write_ppm(out / f"scene_{seed}_{view.label}.ppm", image))
    masks = synth_service.ground_truth(scene, grid)
    for k, c in enumerate(CLASS_ORDER):
        paths.append(write_pgm(out / f"scene_{seed}_gt_{c.value}.pgm", masks[k].astype(np.uint8) * 255))
    for p in paths:
        print(f"📦 {p}")
    print(f"✅ scene {seed}: {len(scene.boxes)} box(es)")
    return EXIT_OK


# === parser ===
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eaformer", description=f"{settings.PROJECT_NAME}: Epipolar Attention Fields")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL, help="logging level (default from LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fields", help="export Epipolar Attention Field heatmaps for one query")
    p.add_argument("--rig", help="rig JSON (default: built-in toy rig)")
    p.add_argument("--grid", type=_grid, default=BevGrid.parse("16x16@0.5"), help="WxH@CELL")
    p.add_argument("--scale", type=_scale, default=1.0, help="feature down-scale, e.g. 1/4")
    p.add_argument("--lambda", dest="lam", type=_positive_float, default=1.0, help="distance strength")
    p.add_argument("--query", type=_cell, required=True, help="BEV cell I,J")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_fields, parser=p)

    p = sub.add_parser("verify", help="run the epipolar geometry oracle")
    p.add_argument("--rig", help="rig JSON (default: built-in toy rig)")
    p.add_argument("--grid", type=_grid, default=BevGrid.parse("16x16@0.5"), help="WxH@CELL")
    p.add_argument("--samples", type=_non_negative_int, default=100, help="random cells to check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_verify, parser=p)

    p = sub.add_parser("train", help="train the toy model")
    p.add_argument("--config", required=True, help="run config (key=value)")
    p.add_argument("--quiet", action="store_true", help="no progress bar")
    p.set_defaults(handler=cmd_train, parser=p)

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally on a perturbed rig")
    p.add_argument("--config", required=True, help="run config (key=value)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--perturb-rig", help="e.g. yaw=10,tx=0.2,ty=0,tz=0")
    p.set_defaults(handler=cmd_eval, parser=p)

    p = sub.add_parser("render", help="export a synthetic scene")
    p.add_argument("--config", help="run config (scene / render parameters)")
    p.add_argument("--rig", help="rig JSON (overrides the config)")
    p.add_argument("--grid", type=_grid, help="WxH@CELL (overrides the config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_render, parser=p)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=str(args.log_level).upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except (EAFError, OSError) as e:
        print(f"❌ {type(e).__name__}: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
