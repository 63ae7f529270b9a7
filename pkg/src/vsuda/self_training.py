"""Pseudo-labelling, combined-data folds, fold selection and ensembling."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import (
    CaseManifest,
    Dataset,
    DataError,
    LabelKind,
    LabelMap,
    Volume,
    save_dataset,
    save_labelmap,
)
from .segmentation import (
    SegCheckpoint,
    SegTrainConfig,
    SoftPrediction,
    UNetConfig,
    sliding_window_infer,
    train_segmentation,
)
from .utils import relpath, sha256_file

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    folds: Dict[str, int]
    seed: int = 0
    order: Tuple[str, ...] = ()

    def split(self, fold: int) -> Tuple[List[str], List[str]]:
        """(train ids, validation ids) in dataset order."""
        if not 0 <= fold < self.k:
            raise ValueError(f"fold {fold} outside [0, {self.k})")
        ids = self.order or tuple(self.folds)
        val = [c for c in ids if self.folds[c] == fold]
        train = [c for c in ids if self.folds[c] != fold]
        return train, val

    def sizes(self) -> List[int]:
        return [sum(1 for f in self.folds.values() if f == i) for i in range(self.k)]


def make_folds(dataset: Dataset, k: int = 5, seed: int = 0) -> FoldAssignment:
    """Shuffled balanced partition: the i-th shuffled case goes to fold i mod k."""
    n = len(dataset)
    if k < 1 or k > n:
        raise ValueError(f"cannot make {k} folds from {n} cases")
    perm = np.random.default_rng(seed).permutation(n)
    ids = dataset.case_ids
    folds = {ids[j]: int(pos % k) for pos, j in enumerate(perm)}
    return FoldAssignment(k, folds, seed, tuple(ids))


def combine_datasets(synth_with_true: Dataset, real_with_pseudo: Dataset, name: str = "combined") -> Dataset:
    for c in list(synth_with_true) + list(real_with_pseudo):
        if not c.labeled:
            raise DataError(f"case {c.case_id!r} has no labels; combined training needs true or pseudo labels")
        if c.holdout:
            raise DataError(f"case {c.case_id!r} is an evaluation hold-out")
    return Dataset(name, tuple(synth_with_true.cases) + tuple(real_with_pseudo.cases))


# ------------------------------------------------------------------ ensembles


@dataclass(frozen=True)
class EnsembleMember:
    path: str
    dim: int
    fold: Optional[int] = None
    score: float = float("nan")


@dataclass
class EnsembleSpec:
    members: List[EnsembleMember]
    selection: Dict[str, object] = field(default_factory=dict)
    root: Optional[Path] = None  # member paths are relative to this

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")

    def checkpoint_paths(self) -> List[Path]:
        base = Path(self.root) if self.root is not None else Path(".")
        return [base / m.path for m in self.members]

    def save(self, path: str | Path) -> None:
        doc = {"members": [asdict(m) for m in self.members], "selection": self.selection}
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EnsembleSpec":
        doc = json.loads(Path(path).read_text())
        return cls([EnsembleMember(**m) for m in doc["members"]], doc.get("selection", {}), Path(path).parent)


@dataclass(frozen=True)
class FoldScore:
    dim: int
    fold: int
    score: float
    path: str = ""


def select_folds(scores: Sequence[FoldScore], n_2d: int = 2, n_3d: int = 3, root: Optional[Path] = None) -> EnsembleSpec:
    """Top-n folds per dimensionality by validation score; ties go to the lower fold."""
    members = []
    for dim, n in ((2, n_2d), (3, n_3d)):
        pool = [s for s in scores if s.dim == dim]
        if n > len(pool):
            raise ValueError(f"need {n} {dim}D folds, only {len(pool)} available")
        # NaN (never validated) ranks below every real score
        ranked = sorted(pool, key=lambda s: (-s.score if s.score == s.score else np.inf, s.fold))
        members += [EnsembleMember(s.path, dim, s.fold, s.score) for s in ranked[:n]]
    return EnsembleSpec(members, {"rule": "top-n mean foreground validation Dice", "n_2d": n_2d, "n_3d": n_3d}, root)


def _as_checkpoints(models) -> List[SegCheckpoint]:
    if isinstance(models, SegCheckpoint):
        return [models]
    if isinstance(models, EnsembleSpec):
        return [SegCheckpoint.load(p) for p in models.checkpoint_paths()]
    return [m if isinstance(m, SegCheckpoint) else SegCheckpoint.load(m) for m in models]


def average_predictions(preds: Sequence[SoftPrediction]) -> SoftPrediction:
    if not preds:
        raise ValueError("nothing to average")
    # sorting across members first makes the float sum independent of member order
    stacked = np.sort(np.stack([np.asarray(p.probs, dtype=np.float64) for p in preds]), axis=0)
    probs = stacked.sum(axis=0) / len(preds)
    return SoftPrediction(probs.astype(np.float32), preds[0].case_id, {"members": str(len(preds))})


def ensemble_predict(models, volume: Volume) -> Tuple[SoftPrediction, LabelMap]:
    """Uniform mean of member softmax maps, then argmax (ties -> lower class)."""
    ckpts = _as_checkpoints(models)
    preds = []
    for ck in ckpts:
        try:
            preds.append(sliding_window_infer(ck, volume))
        except Exception as exc:
            raise RuntimeError(f"ensemble member {ck.model_id or ck.fold} failed on {volume.case_id!r}: {exc}") from exc
    soft = average_predictions(preds)
    return soft, LabelMap(soft.argmax(), volume.spacing, volume.affine, volume.case_id)


def predict_dataset(models, dataset: Dataset, out_dir: str | Path, name: str = "predictions", save_probs: bool = False) -> Dataset:
    """Argmax predictions for every case, written as NIfTI plus a manifest."""
    out = Path(out_dir)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    ckpts = _as_checkpoints(models)
    cases = []
    for case in dataset:
        try:
            soft, lab = ensemble_predict(ckpts, case.load_volume())
        except Exception as exc:
            raise RuntimeError(f"inference failed on case {case.case_id!r}: {exc}") from exc
        lp = out / "labels" / f"{case.case_id}.nii.gz"
        save_labelmap(lab, lp)
        if save_probs:
            (out / "probs").mkdir(exist_ok=True)
            np.savez_compressed(out / "probs" / f"{case.case_id}.npz", probs=soft.probs)
        cases.append(CaseManifest(case.case_id, case.domain, case.volume_path, lp, LabelKind.PSEUDO, case.fold))
    ds = Dataset(name, tuple(cases))
    save_dataset(ds, out / "manifest.json")
    return ds


def infer_pseudo_labels(models, real_dataset: Dataset, out_dir: str | Path) -> Dataset:
    """Ensemble predictions on unlabeled target cases, kept unfiltered as pseudo-labels."""
    for c in real_dataset:
        if c.labeled:
            raise DataError(f"case {c.case_id!r} already has labels; pseudo-labelling expects unlabeled cases")
    return predict_dataset(models, real_dataset, out_dir, name=f"{real_dataset.name}_pseudo")


# ------------------------------------------------------------- orchestration


@dataclass
class SelfTrainingConfig:
    k: int = 5
    n_2d: int = 2
    n_3d: int = 3
    seed: int = 0


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def train_folds(
    dataset: Dataset,
    train_cfg: SegTrainConfig,
    net_cfg: UNetConfig,
    folds: FoldAssignment,
    out_root: str | Path,
    seed: int = 0,
    jobs: int = 1,
) -> List[FoldScore]:
    """Train every fold of one dimensionality; checkpoints go to out_root/fold_i/."""
    out_root = Path(out_root)
    args = [(dataset, train_cfg, net_cfg, f, seed + f, folds, out_root / f"fold_{f}") for f in range(folds.k)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        import multiprocessing as mp

        with ProcessPoolExecutor(jobs, mp_context=mp.get_context("spawn")) as ex:
            results = list(ex.map(_train_one_fold, args))
    else:
        results = [_train_one_fold(a) for a in args]
    return [FoldScore(net_cfg.dim, f, score, str(path)) for f, score, path in results]


def _train_one_fold(args):
    dataset, train_cfg, net_cfg, fold, seed, folds, out = args
    out.mkdir(parents=True, exist_ok=True)
    ck = train_segmentation(dataset, train_cfg, net_cfg, fold, seed, folds)
    ck.save(out / "checkpoint.pt")
    (out / "history.csv").write_text(ck.history.to_csv())
    _, score = ck.history.best()
    return fold, float(score), out / "checkpoint.pt"


def run_self_training(
    stage2_models,
    synth_dataset: Dataset,
    real_dataset: Dataset,
    train_cfg_2d: SegTrainConfig,
    net_cfg_2d: UNetConfig,
    train_cfg_3d: SegTrainConfig,
    net_cfg_3d: UNetConfig,
    run_dir: str | Path,
    st_cfg: Optional[SelfTrainingConfig] = None,
    jobs: int = 1,
) -> EnsembleSpec:
    """One round: pseudo-label, combine, cross-validate 2D and 3D, select, ensemble."""
    st_cfg = st_cfg or SelfTrainingConfig()
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    try:
        pseudo = infer_pseudo_labels(stage2_models, real_dataset, run / "pseudo_labels")
    except Exception as exc:
        raise RuntimeError(f"self-training / pseudo-labelling: {exc}") from exc
    combined = combine_datasets(synth_dataset, pseudo)
    save_dataset(combined, run / "combined_manifest.json")
    folds = make_folds(combined, st_cfg.k, st_cfg.seed)
    (run / "folds.json").write_text(json.dumps({"k": folds.k, "seed": folds.seed, "folds": folds.folds}, indent=2) + "\n")

    scores: List[FoldScore] = []
    for dim, tcfg, ncfg in ((2, train_cfg_2d, net_cfg_2d), (3, train_cfg_3d, net_cfg_3d)):
        try:
            scores += train_folds(combined, tcfg, ncfg, folds, run / "folds" / f"{dim}d", st_cfg.seed, jobs)
        except Exception as exc:
            raise RuntimeError(f"self-training / {dim}D fold training: {exc}") from exc
    rel_scores = [FoldScore(s.dim, s.fold, s.score, relpath(s.path, run / "ensemble")) for s in scores]
    (run / "ensemble").mkdir(exist_ok=True)
    spec = select_folds(rel_scores, st_cfg.n_2d, st_cfg.n_3d, root=run / "ensemble")
    spec.save(run / "ensemble" / "spec.json")

    artifacts = sorted(p for p in run.rglob("*") if p.is_file() and p.name != "run_manifest.json")
    manifest = {
        "stage": "self_training",
        "seed": st_cfg.seed,
        "config_hash": config_hash({
            "self_training": asdict(st_cfg),
            "train_2d": asdict(train_cfg_2d), "net_2d": asdict(net_cfg_2d),
            "train_3d": asdict(train_cfg_3d), "net_3d": asdict(net_cfg_3d),
        }),
        "fold_checkpoints": {
            "2d": [relpath(s.path, run) for s in scores if s.dim == 2],
            "3d": [relpath(s.path, run) for s in scores if s.dim == 3],
        },
        "fold_scores": [asdict(s) | {"path": relpath(s.path, run)} for s in scores],
        "ensemble_spec": "ensemble/spec.json",
        "ensemble_members": [relpath(p, run) for p in spec.checkpoint_paths()],
        "artifacts": {relpath(p, run): sha256_file(p) for p in artifacts},
    }
    (run / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return spec
