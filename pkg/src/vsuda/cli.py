"""Command-line entry point: `vsuda <group> <command> ...`.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import yaml

from .config import ConfigError, PipelineConfig, apply_overrides, desk_config_path, dump_config, load_config
from .data import DataError, load_dataset
from .phantom import PhantomError
from .segmentation import ArchitectureError, SegCheckpoint, describe_unet
from .self_training import EnsembleSpec, predict_dataset
from .utils import TrainingDivergence, seed_everything

log = logging.getLogger("vsuda")

OUTPUT_ROOT_ENV = "VSUDA_OUTPUT_ROOT"
EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4


# ------------------------------------------------------------------- helpers


def _parse_value(text: str):
    # YAML 1.1 reads "1e30" as a string, so try plain numbers first
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return yaml.safe_load(text)


def _load_cfg(args) -> PipelineConfig:
    path = getattr(args, "config", None)
    cfg = load_config(path) if path else load_config(desk_config_path()) if getattr(args, "desk", False) else PipelineConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = _parse_value(v)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return apply_overrides(cfg, overrides) if overrides else cfg


def _out_dir(args, cfg: PipelineConfig, default_name: str) -> Path:
    root = Path(cfg.output_root or os.environ.get(OUTPUT_ROOT_ENV) or "runs")
    if args.out is None:
        return root / f"{default_name}-seed{cfg.seed}"
    out = Path(args.out)
    return out if out.is_absolute() or not os.environ.get(OUTPUT_ROOT_ENV) else Path(os.environ[OUTPUT_ROOT_ENV]) / out


def _begin(args, cfg: PipelineConfig, out: Path) -> Path:
    from .pipeline import prepare_run_dir, save_effective_config

    run = prepare_run_dir(out, args.force)
    save_effective_config(run, cfg)
    seed_everything(cfg.seed, cfg.reproducible)
    return run


def _finish(run: Path, stage: str, cfg: PipelineConfig, **extra) -> None:
    from .pipeline import write_manifest

    write_manifest(run, stage, cfg, extra or None)
    print(f"wrote {run}")


def _checkpoints(paths: List[str]) -> List[Path]:
    out: List[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            found = sorted(p.rglob("checkpoint.pt"))
            if not found:
                raise DataError(f"no checkpoint.pt under {p}")
            out += found
        elif p.is_file():
            out.append(p)
        else:
            raise DataError(f"no such checkpoint: {p}")
    return out


# ------------------------------------------------------------------ commands


def cmd_phantom_generate(args) -> int:
    from .pipeline import stage_phantom

    cfg = _load_cfg(args)
    run = _begin(args, cfg, _out_dir(args, cfg, "phantom"))
    ds_a, ds_b, hidden = stage_phantom(cfg, run)
    sec = cfg.phantom
    print(f"domainA: {len(ds_a)} annotated cases  domainB: {len(ds_b)} unannotated cases  hidden: {len(hidden)} label maps")
    print(f"grid {'x'.join(map(str, sec.spec.grid))} spacing {sec.spec.spacing} mm  seed {cfg.seed}")
    _finish(run, "phantom", cfg)
    return 0


def cmd_convert_train(args) -> int:
    from .pipeline import stage_convert_train

    cfg = _load_cfg(args)
    ds_a, ds_b = load_dataset(args.domain_a), load_dataset(args.domain_b)
    run = _begin(args, cfg, _out_dir(args, cfg, "conversion"))
    ck = stage_convert_train(cfg, ds_a, ds_b, run)
    last = ck.history.epochs[-1]
    print(f"trained {ck.epoch} epochs; final total loss {last['total']:.4f}")
    _finish(run, "convert_train", cfg)
    return 0


def cmd_convert_apply(args) -> int:
    from .conversion import ConversionCheckpoint
    from .pipeline import stage_convert_apply

    cfg = _load_cfg(args)
    ds_a = load_dataset(args.data)
    ck = ConversionCheckpoint.load(args.checkpoint)
    run = _begin(args, cfg, _out_dir(args, cfg, "synthetic"))
    synth = stage_convert_apply(ck, ds_a, run, cfg.data.gan_range)
    print(f"converted {len(synth)} cases -> {run / 'manifest.json'}")
    _finish(run, "convert_apply", cfg)
    return 0


def _dim(s: str) -> int:
    s = s.lower().rstrip("d")
    if s not in ("2", "3"):
        raise argparse.ArgumentTypeError("dim must be 2d or 3d")
    return int(s)


def cmd_seg_train(args) -> int:
    from .pipeline import stage_seg_train_folds

    cfg = _load_cfg(args)
    net_cfg = cfg.segmentation.net_3d if args.dim == 3 else cfg.segmentation.net_2d
    if args.dry_run:
        print(describe_unet(net_cfg))
        tcfg = cfg.segmentation.train_3d if args.dim == 3 else cfg.segmentation.train_2d
        print(f"  training: {tcfg.epochs} epochs x {tcfg.iterations_per_epoch} iterations, SGD lr {tcfg.lr}, batch {tcfg.batch_size}")
        return 0
    if not args.data:
        raise ConfigError("seg train needs --data (or --dry-run)")
    ds = load_dataset(args.data)
    k = args.k or cfg.segmentation.stage2_k
    base = _out_dir(args, cfg, "segmentation")
    scores = []
    for f in args.fold if args.fold is not None else range(k):
        run = _begin(args, cfg, base / "folds" / f"{args.dim}d" / f"fold_{f}")
        # the fold trainer writes straight into run
        sc = stage_seg_train_folds(cfg, ds, args.dim, run.parent, k, folds=[f])
        scores += sc
        _finish(run, "seg_train", cfg, fold=f, dim=args.dim, score=sc[0].score)
    for s in scores:
        print(f"{s.dim}D fold {s.fold}: best mean foreground validation Dice {s.score:.4f}")
    return 0


def _models(args):
    if getattr(args, "ensemble", None):
        return EnsembleSpec.load(args.ensemble).checkpoint_paths()
    if not args.checkpoint:
        raise ConfigError("give --checkpoint (one or more) or --ensemble")
    return _checkpoints(args.checkpoint)


def cmd_seg_infer(args) -> int:
    cfg = _load_cfg(args)
    models = _models(args)
    ds = load_dataset(args.data)
    run = _begin(args, cfg, _out_dir(args, cfg, "predictions"))
    pred = predict_dataset(models, ds, run, f"{ds.name}_predictions", save_probs=not args.no_probs)
    print(f"predicted {len(pred)} cases with {len(models)} model(s)")
    _finish(run, "seg_infer", cfg, models=[str(m) for m in models])
    return 0


def cmd_selftrain_run(args) -> int:
    from .pipeline import stage_self_train

    cfg = _load_cfg(args)
    stage2 = [SegCheckpoint.load(p) for p in _checkpoints(args.stage2)]
    synth, real = load_dataset(args.synthetic), load_dataset(args.real)
    run = _begin(args, cfg, _out_dir(args, cfg, "selftrain"))
    spec = stage_self_train(cfg, stage2, synth, real, run, args.jobs)
    for m in spec.members:
        print(f"ensemble member: {m.dim}D fold {m.fold} (val Dice {m.score:.4f})")
    # fold bookkeeping from the stage manifest is kept; artifacts are re-hashed to include the effective config
    import json

    stage_doc = json.loads((run / "run_manifest.json").read_text())
    keep = {k: v for k, v in stage_doc.items() if k not in ("artifacts", "stage", "seed", "config_hash")}
    _finish(run, "self_training", cfg, **keep)
    return 0


def cmd_ensemble_predict(args) -> int:
    args.checkpoint = None
    args.no_probs = False
    return cmd_seg_infer(args)


def cmd_eval_report(args) -> int:
    from .pipeline import comparison_table, plot_case_dice, stage_eval

    cfg = _load_cfg(args)
    truth = load_dataset(args.truth)
    preds = [load_dataset(p) for p in args.pred]
    names = args.name or [f"pred{i}" for i in range(len(preds))]
    if len(names) != len(preds):
        raise ConfigError("--name must be given once per --pred")
    run = _begin(args, cfg, _out_dir(args, cfg, "report"))
    reports = {}
    for n, p in zip(names, preds):
        rep = stage_eval(p, truth, run, n, f"{n} vs {truth.name}")
        reports[n] = rep
        print(rep.to_text(f"{n} vs {truth.name}"))
    if len(reports) == 2:
        a, b = list(reports.values())
        (run / "comparison.csv").write_text(comparison_table(a, b))
        print((run / "comparison.csv").read_text())
    plot_case_dice(reports, run / "case_dice_vs.png", 1)
    _finish(run, "eval_report", cfg)
    return 0


def cmd_quickstart(args) -> int:
    from .pipeline import quickstart

    if not args.config:
        args.desk = True
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg, "quickstart")
    res = quickstart(cfg, out, force=args.force, ablation=not args.no_ablation, jobs=args.jobs)
    print((res.run_dir / "reports" / "comparison.csv").read_text())
    if res.probe_augmented is not None:
        print(f"probe VS Dice on conversions: segmenter-augmented {res.probe_augmented:.4f}, plain {res.probe_plain:.4f}")
    print(f"quickstart finished in {res.seconds / 60:.1f} min -> {res.run_dir}")
    return 0


def cmd_config_dump(args) -> int:
    print(dump_config(_load_cfg(args)), end="")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vsuda", description="Unpaired ceT1 -> hrT2 VS/cochlea segmentation pipeline")
    p.add_argument("--log-level", default="INFO")
    groups = p.add_subparsers(dest="group", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="YAML config file (defaults: built-in full-scale settings)")
        sp.add_argument("--desk", action="store_true", help="start from the shipped CPU-scale config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. conversion.train.epochs=3")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", help=f"output directory (relative paths resolve under ${OUTPUT_ROOT_ENV} when set)")
            sp.add_argument("--force", action="store_true", help="replace a completed run directory")

    g = groups.add_parser("phantom", help="synthetic two-contrast cohorts").add_subparsers(dest="cmd", required=True)
    sp = g.add_parser("generate", help="write annotated A, unannotated B and hidden B truth")
    common(sp)
    sp.set_defaults(func=cmd_phantom_generate)

    g = groups.add_parser("convert", help="stage 1: ceT1 -> hrT2 conversion").add_subparsers(dest="cmd", required=True)
    sp = g.add_parser("train", help="train the segmenter-augmented CycleGAN")
    common(sp)
    sp.add_argument("--domain-a", required=True, help="annotated ceT1 manifest")
    sp.add_argument("--domain-b", required=True, help="unannotated hrT2 manifest")
    sp.set_defaults(func=cmd_convert_train)
    sp = g.add_parser("apply", help="convert every A case to synthetic hrT2")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="annotated ceT1 manifest")
    sp.set_defaults(func=cmd_convert_apply)

    g = groups.add_parser("seg", help="stage 2: U-Net training and inference").add_subparsers(dest="cmd", required=True)
    sp = g.add_parser("train", help="cross-validated U-Net training")
    common(sp)
    sp.add_argument("--data", help="labelled manifest")
    sp.add_argument("--dim", type=_dim, default=3, help="2d or 3d")
    sp.add_argument("--fold", type=int, action="append", help="fold(s) to train; default all")
    sp.add_argument("--k", type=int, help="number of folds (default segmentation.stage2_k)")
    sp.add_argument("--dry-run", action="store_true", help="print the resolved architecture and exit")
    sp.set_defaults(func=cmd_seg_train)
    sp = g.add_parser("infer", help="soft predictions and label maps")
    common(sp)
    sp.add_argument("--checkpoint", nargs="+", help="checkpoint files or directories holding them")
    sp.add_argument("--ensemble", help="ensemble spec.json")
    sp.add_argument("--data", required=True)
    sp.add_argument("--no-probs", action="store_true", help="skip writing probability maps")
    sp.set_defaults(func=cmd_seg_infer)

    g = groups.add_parser("selftrain", help="stages 3-4: pseudo-labels and combined training").add_subparsers(dest="cmd", required=True)
    sp = g.add_parser("run", help="pseudo-label, combine, retrain 2D+3D folds, build the ensemble")
    common(sp)
    sp.add_argument("--stage2", nargs="+", required=True, help="stage-2 3D checkpoints or directories")
    sp.add_argument("--synthetic", required=True, help="synthetic hrT2 manifest with true labels")
    sp.add_argument("--real", required=True, help="unannotated real hrT2 manifest")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_selftrain_run)

    g = groups.add_parser("ensemble", help="multi-model prediction").add_subparsers(dest="cmd", required=True)
    sp = g.add_parser("predict", help="ensemble prediction from a spec.json")
    common(sp)
    sp.add_argument("--ensemble", required=True)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_ensemble_predict)

    g = groups.add_parser("eval", help="Dice / ASSD reports").add_subparsers(dest="cmd", required=True)
    sp = g.add_parser("report", help="Dice/ASSD tables; two --pred give a comparison")
    common(sp)
    sp.add_argument("--pred", action="append", required=True, help="prediction manifest (repeatable)")
    sp.add_argument("--name", action="append", help="label for each --pred")
    sp.add_argument("--truth", required=True, help="manifest with true labels")
    sp.set_defaults(func=cmd_eval_report)

    sp = groups.add_parser("quickstart", help="all four stages on a fresh phantom cohort")
    common(sp)
    sp.add_argument("--no-ablation", action="store_true", help="skip the w_seg=0 conversion ablation and probe")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_quickstart)

    g = groups.add_parser("config", help="configuration utilities").add_subparsers(dest="cmd", required=True)
    sp = g.add_parser("dump", help="print the effective configuration")
    common(sp, out=False)
    sp.set_defaults(func=cmd_config_dump)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    from .pipeline import RunDirError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ArchitectureError, PhantomError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, RunDirError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
