"""Stage orchestration shared by the CLI and the quickstart.

Every stage writes into its own directory, serializes the effective config
next to its outputs, and finishes by writing run_manifest.json listing each
artifact by relative path and sha256. A directory that already holds a
run_manifest.json is complete and is never written to again unless the
caller passes force=True.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import PipelineConfig, config_to_dict, dump_config
from .conversion import ConversionCheckpoint, LossWeights, convert_volume, train_conversion
from .data import CaseManifest, Dataset, Domain, LabelKind, load_dataset, minmax_normalize, save_dataset, save_volume
from .metrics import MetricsReport, evaluate_dataset
from .phantom import generate_dataset, generate_probe_set
from .segmentation import SegCheckpoint, train_segmentation
from .self_training import (
    EnsembleSpec,
    SelfTrainingConfig,
    config_hash,
    make_folds,
    predict_dataset,
    run_self_training,
    train_folds,
)
from .utils import relpath, seed_everything, sha256_file

log = logging.getLogger(__name__)

MANIFEST = "run_manifest.json"


class RunDirError(RuntimeError):
    """Refusal to touch a completed run directory."""


# ------------------------------------------------------------ run directories


def prepare_run_dir(path: str | Path, force: bool = False) -> Path:
    """Create `path`, refusing to reuse a completed run unless force=True.

    With force, only directories we recognise as runs (they hold a
    run_manifest.json) or empty ones are cleared.
    """
    path = Path(path)
    if path.exists():
        done = (path / MANIFEST).exists()
        if done and not force:
            raise RunDirError(f"{path} is a completed run; use a new output directory or --force")
        if force and done:
            shutil.rmtree(path)
        elif any(path.iterdir()) and not done:
            if not force:
                raise RunDirError(f"{path} exists and is not empty; use a new output directory or --force")
            raise RunDirError(f"{path} is not a run directory; refusing to clear it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(run: Path, stage: str, cfg: PipelineConfig, extra: Optional[Dict] = None) -> Dict:
    """Checksum every file under `run` (except the manifest) into run_manifest.json."""
    files = sorted(p for p in run.rglob("*") if p.is_file() and p != run / MANIFEST)
    manifest = {
        "stage": stage,
        "seed": cfg.seed,
        "config_hash": config_hash(config_to_dict(cfg)),
        "artifacts": {relpath(p, run): sha256_file(p) for p in files},
    }
    manifest.update(extra or {})
    (run / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def save_effective_config(run: Path, cfg: PipelineConfig) -> None:
    (run / "effective_config.yaml").write_text(dump_config(cfg))


# ---------------------------------------------------------------------- plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_conversion_losses(history, path: Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    keys = [k for k in history.epochs[0] if k not in ("epoch", "lr")] if history.epochs else []
    for k in keys:
        ax.plot([e["epoch"] for e in history.epochs], [e[k] for e in history.epochs], label=k)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("symlog", linthresh=1e-2)
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_case_dice(reports: Dict[str, MetricsReport], path: Path, class_id: int = 1) -> None:
    plt = _pyplot()
    names = list(reports)
    cases = sorted({r.case_id for rep in reports.values() for r in rep.rows})
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(max(5, 0.6 * len(cases) + 2), 4))
    for i, n in enumerate(names):
        vals = {r.case_id: r.dice for r in reports[n].rows if r.class_id == class_id}
        ax.bar(np.arange(len(cases)) + i * width, [vals.get(c, np.nan) for c in cases], width, label=n)
    ax.set_xticks(np.arange(len(cases)) + 0.4 - width / 2)
    ax.set_xticklabels(cases, rotation=60, fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel(f"Dice (class {class_id})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# --------------------------------------------------------------------- stages


def stage_phantom(cfg: PipelineConfig, out: Path):
    out = Path(out)
    sec = cfg.phantom
    ds_a, ds_b, hidden = generate_dataset(sec.spec, sec.n_annotated_a, sec.n_unannotated_b, out, cfg.seed)
    return ds_a, ds_b, hidden


def stage_convert_train(cfg: PipelineConfig, ds_a: Dataset, ds_b: Dataset, out: Path, weights: Optional[LossWeights] = None) -> ConversionCheckpoint:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = cfg.conversion.train
    if weights is not None:
        train_cfg = replace(train_cfg, weights=weights)
    ckpt = train_conversion(ds_a, ds_b, train_cfg, cfg.seed, cfg.conversion.generator, cfg.conversion.discriminator)
    ckpt.save(out / "checkpoint.pt")
    (out / "loss_history.csv").write_text(ckpt.history.to_csv())
    (out / "loss_steps.csv").write_text(_steps_csv(ckpt.history.steps))
    plot_conversion_losses(ckpt.history, out / "loss_curves.png")
    return ckpt


def _steps_csv(steps: List[Dict]) -> str:
    # terms that are gated off on a step are left empty rather than shifting columns
    keys = ["epoch", "step"] + sorted({k for s in steps for k in s} - {"epoch", "step"})
    buf = io.StringIO()
    w = csv.DictWriter(buf, keys, lineterminator="\n")
    w.writeheader()
    for s in steps:
        w.writerow({k: v if k in ("epoch", "step") else repr(float(v)) for k, v in s.items()})
    return buf.getvalue()


def stage_convert_apply(ckpt: ConversionCheckpoint, ds_a: Dataset, out: Path, gan_range=(-1.0, 1.0)) -> Dataset:
    """A->B conversion of every case; labels are copied byte for byte."""
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    cases = []
    for case in ds_a:
        if case.label_kind is not LabelKind.TRUE:
            raise ValueError(f"case {case.case_id!r}: conversion input must carry true labels")
        vol = minmax_normalize(case.load_volume(), *gan_range)
        synth = convert_volume(ckpt, vol, "A->B")
        vp = out / "images" / f"{case.case_id}.nii.gz"
        lp = out / "labels" / Path(case.label_path).name
        save_volume(synth, vp)
        shutil.copyfile(case.label_path, lp)
        cases.append(CaseManifest(case.case_id, Domain.HRT2_SYNTH, vp, lp, LabelKind.TRUE))
    ds = Dataset("synthetic_hrT2", tuple(cases))
    save_dataset(ds, out / "manifest.json")
    return ds


def stage_seg_train_folds(cfg: PipelineConfig, dataset: Dataset, dim: int, out: Path, k: int, folds: Optional[Sequence[int]] = None, jobs: int = 1):
    """Cross-validated training of one dimensionality into out/fold_i/."""
    seg = cfg.segmentation
    net_cfg, train_cfg = (seg.net_3d, seg.train_3d) if dim == 3 else (seg.net_2d, seg.train_2d)
    assignment = make_folds(dataset, k, _fold_seed(cfg))
    (Path(out)).mkdir(parents=True, exist_ok=True)
    if folds is None:
        return train_folds(dataset, train_cfg, net_cfg, assignment, out, cfg.seed, jobs)
    from .self_training import FoldScore, _train_one_fold

    scores = []
    for f in folds:
        if not 0 <= f < k:
            raise ValueError(f"fold {f} out of range for k={k}")
        _, score, path = _train_one_fold((dataset, train_cfg, net_cfg, f, cfg.seed + f, assignment, Path(out) / f"fold_{f}"))
        scores.append(FoldScore(dim, f, score, str(path)))
    return scores


def _fold_seed(cfg: PipelineConfig) -> int:
    return cfg.seed + cfg.self_training.seed


def _self_training_cfg(cfg: PipelineConfig) -> SelfTrainingConfig:
    return replace(cfg.self_training, seed=_fold_seed(cfg))


def stage_self_train(cfg: PipelineConfig, stage2_models, synth: Dataset, real: Dataset, out: Path, jobs: int = 1) -> EnsembleSpec:
    seg = cfg.segmentation
    return run_self_training(
        stage2_models, synth, real, seg.train_2d, seg.net_2d, seg.train_3d, seg.net_3d, out, _self_training_cfg(cfg), jobs
    )


def stage_eval(pred: Dataset, truth: Dataset, out: Path, stem: str, title: str) -> MetricsReport:
    rep = evaluate_dataset(pred, truth)
    rep.write(out, stem, title)
    return rep


# ---------------------------------------------------------------------- probe


def train_probe(cfg: PipelineConfig, out: Path) -> SegCheckpoint:
    """A segmenter trained on labelled target-domain phantoms, then frozen.

    It scores conversions: if a converted volume keeps the lesion where its
    carried-over label says it is, with target-domain appearance, the probe
    finds it.
    """
    out = Path(out)
    ds = generate_probe_set(cfg.phantom.spec, cfg.phantom.n_probe, out / "cohort", cfg.seed)
    ck = train_segmentation(ds, cfg.probe.train, cfg.probe.net, None, cfg.seed, allow_holdout=True)
    ck.save(out / "probe.pt")
    (out / "history.csv").write_text(ck.history.to_csv())
    return ck


def probe_dice(probe: SegCheckpoint, synth: Dataset, out: Path, name: str) -> MetricsReport:
    pred = predict_dataset([probe], synth, Path(out) / name, name)
    rep = evaluate_dataset(pred, synth)
    rep.write(out, f"probe_{name}", f"probe segmenter on {name} conversions")
    return rep


# ----------------------------------------------------------------- quickstart


@dataclass
class QuickstartResult:
    run_dir: Path
    stage2: MetricsReport
    final: MetricsReport
    probe_augmented: Optional[float] = None
    probe_plain: Optional[float] = None
    seconds: float = 0.0


def comparison_table(stage2: MetricsReport, final: MetricsReport) -> str:
    lines = ["model,class,dice_mean,dice_std,assd_mean,assd_std,n"]
    for name, rep in (("stage2_synthetic_only", stage2), ("self_trained_ensemble", final)):
        for c, a in rep.aggregates.items():
            lines.append(f"{name},{c},{a.dice_mean:.4f},{a.dice_std:.4f},{a.assd_mean:.4f},{a.assd_std:.4f},{a.n}")
    for c in final.aggregates:
        d = final.aggregates[c].dice_mean - stage2.aggregates[c].dice_mean
        lines.append(f"delta_dice,{c},{d:+.4f},,,,")
    return "\n".join(lines) + "\n"


def quickstart(cfg: PipelineConfig, run_dir: str | Path, force: bool = False, ablation: bool = True, jobs: int = 1) -> QuickstartResult:
    """Phantoms -> conversion -> stage-2 folds -> self-training -> comparison report."""
    t0 = time.time()
    run = prepare_run_dir(run_dir, force)
    save_effective_config(run, cfg)
    seed_everything(cfg.seed, cfg.reproducible)
    k = cfg.segmentation.stage2_k

    log.info("[1/4] phantoms")
    ds_a, ds_b, hidden = stage_phantom(cfg, run / "phantom")

    log.info("[1/4] conversion (segmenter-augmented)")
    ckpt = stage_convert_train(cfg, ds_a, ds_b, run / "conversion")
    synth = stage_convert_apply(ckpt, ds_a, run / "synthetic", cfg.data.gan_range)

    log.info("[2/4] segmentation on synthetic volumes, %d folds", k)
    scores = stage_seg_train_folds(cfg, synth, 3, run / "stage2" / "folds" / "3d", k, jobs=jobs)
    stage2_models = [SegCheckpoint.load(s.path) for s in scores]
    stage2_pred = predict_dataset(stage2_models, ds_b, run / "stage2" / "predictions", "stage2")

    log.info("[3/4 + 4/4] pseudo-labels and combined training")
    spec = stage_self_train(cfg, stage2_models, synth, ds_b, run / "selftrain", jobs)
    final_pred = predict_dataset(spec.checkpoint_paths(), ds_b, run / "final" / "predictions", "final")

    reports = run / "reports"
    rep2 = stage_eval(stage2_pred, hidden, reports, "stage2", "stage 2: synthetic-only 3D ensemble on domain B")
    repf = stage_eval(final_pred, hidden, reports, "final", "stage 4: self-trained 2D+3D ensemble on domain B")
    (reports / "comparison.csv").write_text(comparison_table(rep2, repf))
    plot_case_dice({"stage2": rep2, "self-trained": repf}, reports / "case_dice_vs.png", 1)
    plot_case_dice({"stage2": rep2, "self-trained": repf}, reports / "case_dice_cochlea.png", 2)

    result = QuickstartResult(run, rep2, repf)
    if ablation:
        log.info("conversion ablation without the segmentation term, scored by a frozen probe")
        plain = stage_convert_train(cfg, ds_a, ds_b, run / "ablation" / "conversion", replace(cfg.conversion.train.weights, w_seg=0.0))
        synth_plain = stage_convert_apply(plain, ds_a, run / "ablation" / "synthetic", cfg.data.gan_range)
        probe = train_probe(cfg, run / "probe")
        aug = probe_dice(probe, synth, reports, "augmented")
        pl = probe_dice(probe, synth_plain, reports, "plain")
        result.probe_augmented = aug.aggregates[1].dice_mean
        result.probe_plain = pl.aggregates[1].dice_mean
        (reports / "shape_preservation.csv").write_text(
            "conversion,probe_vs_dice_mean,probe_vs_dice_std\n"
            f"segmenter_augmented,{aug.aggregates[1].dice_mean:.4f},{aug.aggregates[1].dice_std:.4f}\n"
            f"plain,{pl.aggregates[1].dice_mean:.4f},{pl.aggregates[1].dice_std:.4f}\n"
        )

    result.seconds = time.time() - t0
    summary = {
        "stage2_vs_dice": rep2.aggregates[1].dice_mean,
        "final_vs_dice": repf.aggregates[1].dice_mean,
        "stage2_cochlea_dice": rep2.aggregates[2].dice_mean,
        "final_cochlea_dice": repf.aggregates[2].dice_mean,
        "probe_augmented_vs_dice": result.probe_augmented,
        "probe_plain_vs_dice": result.probe_plain,
    }
    (reports / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(run, "quickstart", cfg, {"summary": summary, "ensemble_members": [relpath(p, run) for p in spec.checkpoint_paths()]})
    return result
