"""
消融实验脚本
运行方式：python -m eaformer.scripts.run_ablation --config fixtures/configs/toy.env --seeds 5

Experiments:
  efficacy   EAF model vs the W≡1 baseline on held-out scenes, per seed
  transfer   both models evaluated on a perturbed rig (fields recomputed)
  lambda     fixed λ sweep plus a learnable-λ run
  components positional-encoding arms (baseline / + EAF / - pos. encoding)
"""
import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

# 添加项目根目录到 Python 路径
project_root = Path(__file__).resolve().parent.parent.parent
sys.path.insert(0, str(project_root))

import pandas as pd

from eaformer.config import RunConfig, build_run_config, load_run_config, settings
from eaformer.exceptions import EAFError
from eaformer.services.rig_service import rig_service
from eaformer.services.train_service import train_service
from eaformer.utils.geometry import CameraView

logger = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.25, 1.0, 4.0)
DEFAULT_PERTURBATION = "yaw=10,tx=0.3,ty=0.2"
MAJORITY = 4


@dataclass
class SeedOutcome:
    seed: int
    eaf: float
    baseline: float

    @property
    def eaf_wins(self) -> bool:
        return self.eaf >= self.baseline


def _views(cfg: RunConfig) -> List[CameraView]:
    return rig_service.load(cfg.rig or None, (cfg.image_width, cfg.image_height))


def _with(cfg: RunConfig, **update) -> RunConfig:
    return build_run_config({**cfg.model_dump(by_alias=True), **update})


def _held_out_iou(cfg: RunConfig, views: Sequence[CameraView], eval_views: Optional[Sequence[CameraView]] = None,
                  quiet: bool = True) -> Dict[str, float]:
    """Train on ``views``, evaluate on held-out scenes seen through ``eval_views``."""
    result = train_service.train_toy(cfg, views, quiet=quiet)
    if eval_views is None:
        final = result.final_eval
    else:
        model = result.model
        bank = train_service.field_bank_for(model.cfg, eval_views)
        samples = train_service.load_samples(train_service.eval_seeds(cfg), model.cfg.grid, eval_views, cfg)
        final = train_service.evaluate(model, bank, samples, cfg.band_edges)
    out = {"iou_vehicle": final.iou_vehicle, "iou_drivable": final.iou_drivable}
    if result.field_sparsity is not None:
        out["sparsity"] = result.field_sparsity
    if result.model.log_lambda is not None:
        out["lambda"] = result.model.lam
    return out


# === experiments ===
def efficacy(base: RunConfig, seeds: Sequence[int]) -> List[SeedOutcome]:
    """Held-out vehicle IoU of the EAF model and the W≡1 baseline at equal budget."""
    views = _views(base)
    outcomes = []
    for seed in seeds:
        eaf = _held_out_iou(_with(base, seed=seed, uniform_weights=False), views)
        uniform = _held_out_iou(_with(base, seed=seed, uniform_weights=True), views)
        outcomes.append(SeedOutcome(seed, eaf["iou_vehicle"], uniform["iou_vehicle"]))
        logger.info("efficacy seed %d: eaf %.4f uniform %.4f", seed, outcomes[-1].eaf, outcomes[-1].baseline)
    return outcomes


def rig_transfer(base: RunConfig, seeds: Sequence[int], perturbation: str = DEFAULT_PERTURBATION) -> List[SeedOutcome]:
    """Train on the nominal rig, evaluate both arms on the perturbed rig."""
    views = _views(base)
    perturbed = rig_service.perturb(views, **rig_service.parse_perturbation(perturbation))
    outcomes = []
    for seed in seeds:
        eaf = _held_out_iou(_with(base, seed=seed, uniform_weights=False), views, perturbed)
        uniform = _held_out_iou(_with(base, seed=seed, uniform_weights=True), views, perturbed)
        outcomes.append(SeedOutcome(seed, eaf["iou_vehicle"], uniform["iou_vehicle"]))
    return outcomes


def lambda_sweep(base: RunConfig, lambdas: Sequence[float] = DEFAULT_LAMBDAS) -> pd.DataFrame:
    """Fixed-λ runs plus one learnable-λ run starting from λ=1."""
    views = _views(base)
    rows = []
    for lam in lambdas:
        r = _held_out_iou(_with(base, **{"lambda": lam, "lambda_learnable": False}), views)
        rows.append({"run": f"lambda={lam:g}", **r})
    r = _held_out_iou(_with(base, **{"lambda": 1.0, "lambda_learnable": True}), views)
    rows.append({"run": "learnable", **r})
    return pd.DataFrame(rows)


def components(base: RunConfig) -> pd.DataFrame:
    """Baseline (W≡1 + pos. encoding), + EAF weighting, - pos. encoding."""
    views = _views(base)
    arms = [
        ("baseline", {"uniform_weights": True, "positional_encoding": True}),
        ("+ eaf weighting", {"uniform_weights": False, "positional_encoding": True}),
        ("- pos. encoding", {"uniform_weights": False, "positional_encoding": False}),
    ]
    return pd.DataFrame([{"arm": name, **_held_out_iou(_with(base, **update), views)} for name, update in arms])


# === 输出 ===
def _print_outcomes(title: str, outcomes: Sequence[SeedOutcome]) -> bool:
    print("=" * 60)
    print(title)
    print("=" * 60)
    table = pd.DataFrame([{"seed": o.seed, "eaf": o.eaf, "uniform": o.baseline, "eaf_wins": o.eaf_wins}
                          for o in outcomes])
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    wins = sum(o.eaf_wins for o in outcomes)
    need = min(MAJORITY, len(outcomes))
    ok = wins >= need
    print(f"{'✅' if ok else '⚠️'} EAF >= W≡1 for {wins}/{len(outcomes)} seeds (need {need})")
    print()
    return ok


def _print_table(title: str, frame: pd.DataFrame) -> None:
    print("=" * 60)
    print(title)
    print("=" * 60)
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print()


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="EAFormer ablation experiments")
    parser.add_argument("--config", help="base run config (default: built-in defaults)")
    parser.add_argument("--seeds", type=int, default=5, help="number of pinned seeds")
    parser.add_argument("--steps", type=int, help="override the training steps")
    parser.add_argument("--perturb-rig", default=DEFAULT_PERTURBATION)
    parser.add_argument("--experiments", default="efficacy,transfer,lambda",
                        help="comma list of efficacy, transfer, lambda, components")
    args = parser.parse_args(argv)
    logging.basicConfig(level=settings.LOG_LEVEL.upper())

    try:
        base = load_run_config(args.config) if args.config else build_run_config({})
        if args.steps:
            base = _with(base, steps=args.steps)
        seeds = [base.seed + k for k in range(args.seeds)]
        wanted = [e.strip() for e in args.experiments.split(",") if e.strip()]
        print(f"🚀 {settings.PROJECT_NAME} ablations: {', '.join(wanted)}; seeds {seeds}, {base.steps} steps\n")

        ok = True
        if "efficacy" in wanted:
            ok &= _print_outcomes("1️⃣ Mechanism efficacy (held-out vehicle IoU)", efficacy(base, seeds))
        if "transfer" in wanted:
            ok &= _print_outcomes(f"2️⃣ Rig transfer ({args.perturb_rig})",
                                  rig_transfer(base, seeds, args.perturb_rig))
        if "lambda" in wanted:
            _print_table("3️⃣ Distance strength λ", lambda_sweep(base))
        if "components" in wanted:
            _print_table("4️⃣ Component ablation", components(base))
    except EAFError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return 1
    print("🎉 done" if ok else "⚠️ done, seed-majority criterion not met")
    return 0


if __name__ == "__main__":
    sys.exit(main())
