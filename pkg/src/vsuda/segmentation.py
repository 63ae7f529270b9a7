"""Patch-based 2D / 3D U-Nets with deep supervision, training and sliding-window inference."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import losses
from .data import (
    FOREGROUND_CLASSES,
    N_CLASSES,
    Dataset,
    LabelMap,
    Volume,
    check_aligned,
    extract_patch,
    minmax_normalize,
    resample,
)
from .metrics import dice_score
from .utils import TrainingDivergence, seed_everything

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_STRIDES_3D = ((1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2), (1, 2, 2), (1, 2, 2))
DEFAULT_STRIDES_2D = ((2, 2),) * 6


class ArchitectureError(ValueError):
    pass


@dataclass
class UNetConfig:
    """Configured U-Net. dim=3 uses (z, y, x) patches, dim=2 uses (y, x)."""

    dim: int = 3
    patch_size: Tuple[int, ...] = (40, 256, 192)
    strides: Tuple[Tuple[int, ...], ...] = DEFAULT_STRIDES_3D
    base_channels: int = 32
    max_channels: int = 320
    n_classes: int = N_CLASSES
    negative_slope: float = 0.01
    deep_supervision: bool = True
    ds_heads: int = 3
    convs_per_block: int = 2

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.strides = tuple(tuple(int(s) for s in st) for st in self.strides)
        if self.dim not in (2, 3):
            raise ArchitectureError(f"dim must be 2 or 3, got {self.dim}")
        if len(self.patch_size) != self.dim:
            raise ArchitectureError(f"patch_size {self.patch_size} does not have {self.dim} axes")
        for lvl, st in enumerate(self.strides, start=1):
            if len(st) != self.dim or min(st) < 1:
                raise ArchitectureError(f"stride at level {lvl} must be {self.dim} positive ints, got {st}")
        if not self.strides:
            raise ArchitectureError("need at least one downsampling")
        if self.base_channels < 1 or self.ds_heads < 1:
            raise ArchitectureError("base_channels and ds_heads must be >= 1")
        self.feature_sizes()

    @property
    def n_downsamplings(self) -> int:
        return len(self.strides)

    def channels(self) -> List[int]:
        return [min(self.base_channels * 2**k, self.max_channels) for k in range(self.n_downsamplings + 1)]

    def feature_sizes(self) -> List[Tuple[int, ...]]:
        """Encoder feature-map sizes per level; raises if a stride does not divide."""
        sizes = [tuple(self.patch_size)]
        axes = "zyx"[-self.dim :]
        for lvl, st in enumerate(self.strides, start=1):
            cur = sizes[-1]
            nxt = []
            for a, (n, s) in enumerate(zip(cur, st)):
                if n % s:
                    raise ArchitectureError(
                        f"stride {s} at level {lvl} does not divide size {n} on axis {axes[a]}"
                    )
                nxt.append(n // s)
            sizes.append(tuple(nxt))
        return sizes

    @property
    def patch3d(self) -> Tuple[int, int, int]:
        return self.patch_size if self.dim == 3 else (1,) + self.patch_size  # type: ignore[return-value]


def unet_3d_default() -> UNetConfig:
    return UNetConfig()


def unet_2d_default() -> UNetConfig:
    return UNetConfig(dim=2, patch_size=(256, 192), strides=DEFAULT_STRIDES_2D)


def describe_unet(cfg: UNetConfig) -> str:
    lines = [f"{cfg.dim}D U-Net, patch {'x'.join(map(str, cfg.patch_size))}, {cfg.n_downsamplings} downsamplings"]
    for lvl, (size, ch) in enumerate(zip(cfg.feature_sizes(), cfg.channels())):
        stride = "-" if lvl == 0 else "x".join(map(str, cfg.strides[lvl - 1]))
        tag = "  (bottleneck)" if lvl == cfg.n_downsamplings else ""
        lines.append(f"  level {lvl}: stride {stride:<7} features {'x'.join(map(str, size)):<12} channels {ch}{tag}")
    n_heads = min(cfg.ds_heads, cfg.n_downsamplings) if cfg.deep_supervision else 1
    w = losses.deep_supervision_weights(n_heads, cfg.ds_heads)
    lines.append(f"  deep supervision heads: {n_heads}, weights " + ", ".join(f"{x:.4f}" for x in w))
    return "\n".join(lines)


# ------------------------------------------------------------------- network


def _ops(dim: int):
    if dim == 3:
        return nn.Conv3d, nn.ConvTranspose3d, nn.InstanceNorm3d
    return nn.Conv2d, nn.ConvTranspose2d, nn.InstanceNorm2d


class ConvBlock(nn.Sequential):
    def __init__(self, dim, cin, cout, stride, n_convs, slope):
        conv, _, norm = _ops(dim)
        layers = []
        for i in range(n_convs):
            layers += [
                conv(cin if i == 0 else cout, cout, 3, stride=stride if i == 0 else 1, padding=1),
                norm(cout, affine=True, eps=1e-5),
                nn.LeakyReLU(slope),
            ]
        super().__init__(*layers)


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        conv, tconv, _ = _ops(cfg.dim)
        ch = cfg.channels()
        self.encoder = nn.ModuleList()
        cin = 1
        for lvl, c in enumerate(ch):
            stride = 1 if lvl == 0 else cfg.strides[lvl - 1]
            self.encoder.append(ConvBlock(cfg.dim, cin, c, stride, cfg.convs_per_block, cfg.negative_slope))
            cin = c
        self.ups = nn.ModuleList()
        self.decoder = nn.ModuleList()
        self.heads = nn.ModuleList()
        for lvl in range(cfg.n_downsamplings, 0, -1):
            st = cfg.strides[lvl - 1]
            self.ups.append(tconv(ch[lvl], ch[lvl - 1], st, stride=st))
            self.decoder.append(ConvBlock(cfg.dim, 2 * ch[lvl - 1], ch[lvl - 1], 1, cfg.convs_per_block, cfg.negative_slope))
            self.heads.append(conv(ch[lvl - 1], cfg.n_classes, 1))
        n_heads = min(cfg.ds_heads, cfg.n_downsamplings) if cfg.deep_supervision else 1
        self.n_heads = max(n_heads, 1)

    def forward(self, x):
        """Logits at full resolution; in training mode with deep supervision a
        list of logits, highest resolution first."""
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
        x = skips.pop()
        outs = []
        for up, block, head in zip(self.ups, self.decoder, self.heads):
            x = block(torch.cat([up(x), skips.pop()], dim=1))
            outs.append(head(x))
        if self.training and self.cfg.deep_supervision:
            return outs[::-1][: self.n_heads]
        return outs[-1]


def build_unet(cfg: UNetConfig) -> UNet:
    cfg.feature_sizes()
    return UNet(cfg)


# ------------------------------------------------------------------- configs


@dataclass
class SegTrainConfig:
    epochs: int = 200
    lr: float = 0.01
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 3e-5
    poly_exponent: float = 0.9
    batch_size: int = 2
    iterations_per_epoch: int = 250
    oversample_foreground: float = 0.33
    grad_clip: float = 12.0
    val_every: int = 1
    normalization: Tuple[float, float] = (0.0, 1.0)
    target_spacing: Optional[Tuple[float, float, float]] = None
    # framework-default intensity augmentation and mirroring of training patches
    augment: bool = True

    def __post_init__(self):
        self.normalization = tuple(self.normalization)
        if self.target_spacing is not None:
            self.target_spacing = tuple(float(s) for s in self.target_spacing)
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1 or self.iterations_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, iterations_per_epoch and batch_size must be >= 1")
        if not 0 <= self.oversample_foreground <= 1:
            raise ValueError("oversample_foreground must lie in [0, 1]")


def poly_lr(epoch: int, epochs: int, lr0: float, exponent: float = 0.9) -> float:
    return lr0 * (1 - epoch / epochs) ** exponent


# ---------------------------------------------------------------- data side


@dataclass
class TrainCase:
    case_id: str
    image: np.ndarray
    labels: np.ndarray
    fg_index: np.ndarray  # flat indices of foreground voxels


def preprocess(volume: Volume, cfg: SegTrainConfig) -> Volume:
    if cfg.target_spacing is not None:
        volume = resample(volume, cfg.target_spacing)
    return minmax_normalize(volume, *cfg.normalization)


def load_training_cases(dataset: Dataset, cfg: SegTrainConfig, allow_holdout: bool = False) -> List[TrainCase]:
    from .data import resample_labels

    out = []
    for case in dataset:
        if not case.labeled:
            raise ValueError(f"case {case.case_id!r} is unlabeled; training needs true or pseudo labels")
        if case.holdout and not allow_holdout:
            raise ValueError(f"case {case.case_id!r} is an evaluation hold-out and cannot be trained on")
        vol, lab = case.load_volume(), case.load_labels()
        check_aligned(vol, lab)
        vol = preprocess(vol, cfg)
        if cfg.target_spacing is not None:
            lab = resample_labels(lab, cfg.target_spacing)
        arr = np.array(lab.data)
        out.append(TrainCase(case.case_id, np.array(vol.data), arr, np.flatnonzero(arr > 0)))
    return out


def sample_training_batch(cases: Sequence[TrainCase], patch_size: Sequence[int], batch_size: int, oversample: float, rng: np.random.Generator):
    """Random patches: with probability `oversample` centred on a foreground voxel.

    patch_size is 3D; a 2D network uses (1, py, px). Returns arrays of shape
    (B, *patch_size) for images and labels, plus the chosen centres.
    """
    imgs, labs, centers = [], [], []
    for _ in range(batch_size):
        case = cases[int(rng.integers(len(cases)))]
        shape = case.image.shape
        if rng.random() < oversample and case.fg_index.size:
            flat = case.fg_index[int(rng.integers(case.fg_index.size))]
            center = np.unravel_index(flat, shape)
        else:
            center = tuple(int(rng.integers(n)) for n in shape)
        center = tuple(int(c) for c in center)
        imgs.append(extract_patch(case.image, center, patch_size))
        labs.append(extract_patch(case.labels, center, patch_size))
        centers.append(center)
    return np.stack(imgs), np.stack(labs), centers


def augment_batch(imgs: np.ndarray, labs: np.ndarray, rng: np.random.Generator, dim: int):
    """nnU-Net-style augmentation of a sampled batch, per sample.

    Gaussian noise (p 0.1), Gaussian blur (p 0.2), multiplicative brightness
    (p 0.15), contrast (p 0.15), gamma (p 0.3, inverted with p 0.1) and
    mirroring of each in-plane axis (p 0.5). Intensity ranges follow the
    framework defaults; the noise variance is relative to the patch variance
    because images here are min-max rather than z-score normalised.
    """
    from scipy import ndimage

    imgs, labs = imgs.astype(np.float32, copy=True), labs.copy()
    blur_axes = (1, 2) if dim == 2 else (0, 1, 2)
    for i in range(len(imgs)):
        x = imgs[i]
        if rng.random() < 0.1:
            x = x + rng.normal(0.0, math.sqrt(rng.uniform(0.0, 0.1)) * (float(x.std()) + 1e-8), x.shape).astype(np.float32)
        if rng.random() < 0.2:
            sigma = [rng.uniform(0.5, 1.0) if ax in blur_axes else 0.0 for ax in range(3)]
            x = ndimage.gaussian_filter(x, sigma)
        if rng.random() < 0.15:
            x = x * rng.uniform(0.75, 1.25)
        if rng.random() < 0.15:
            lo, hi, mean = x.min(), x.max(), x.mean()
            x = np.clip((x - mean) * rng.uniform(0.75, 1.25) + mean, lo, hi)
        if rng.random() < 0.3:
            invert = rng.random() < 0.1
            lo, hi = float(x.min()), float(x.max())
            span = hi - lo + 1e-7
            u = (x - lo) / span
            if invert:
                u = 1.0 - u
            u = u ** rng.uniform(0.7, 1.5)
            if invert:
                u = 1.0 - u
            x = u * span + lo
        for ax in (1, 2):
            if rng.random() < 0.5:
                x = np.flip(x, ax)
                labs[i] = np.flip(labs[i], ax)
        imgs[i] = x
    return imgs, labs


def _to_net_input(patches: np.ndarray, dim: int) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(patches, dtype=np.float32))
    if dim == 2:
        x = x[:, 0]
    return x[:, None]


def _to_net_labels(patches: np.ndarray, dim: int) -> torch.Tensor:
    y = torch.from_numpy(patches.astype(np.int64))
    return y[:, 0] if dim == 2 else y


# ------------------------------------------------------- checkpoint / history


@dataclass
class SegHistory:
    epochs: List[Dict[str, float]] = field(default_factory=list)
    validation_mode: str = "sliding_window"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_dice_vs", "val_dice_cochlea"])
        for r in self.epochs:
            w.writerow([r["epoch"], repr(r["train_loss"]), repr(r.get("val_dice_vs", float("nan"))), repr(r.get("val_dice_cochlea", float("nan")))])
        return buf.getvalue()

    def best(self) -> Tuple[int, float]:
        """(epoch, mean foreground val Dice) of the best validated epoch."""
        scored = [(r["epoch"], 0.5 * (r["val_dice_vs"] + r["val_dice_cochlea"])) for r in self.epochs if "val_dice_vs" in r]
        if not scored:
            return -1, math.nan
        best = max(scored, key=lambda t: (t[1], -t[0]))
        return best


@dataclass
class SegCheckpoint:
    net_cfg: UNetConfig
    train_cfg: SegTrainConfig
    final_state: Dict[str, torch.Tensor]
    best_state: Optional[Dict[str, torch.Tensor]] = None
    fold: Optional[int] = None
    history: SegHistory = field(default_factory=SegHistory)
    train_cases: Tuple[str, ...] = ()
    val_cases: Tuple[str, ...] = ()
    model_id: str = ""

    def model(self, which: str = "best") -> UNet:
        net = build_unet(self.net_cfg)
        state = self.best_state if which == "best" and self.best_state is not None else self.final_state
        net.load_state_dict(state)
        net.eval()
        return net

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "format_version": FORMAT_VERSION,
                "kind": "segmentation",
                "net_config": asdict(self.net_cfg),
                "train_config": asdict(self.train_cfg),
                "final_state": self.final_state,
                "best_state": self.best_state,
                "fold": self.fold,
                "history": {"epochs": self.history.epochs, "validation_mode": self.history.validation_mode},
                "train_cases": list(self.train_cases),
                "val_cases": list(self.val_cases),
                "model_id": self.model_id,
            },
            str(path),
        )

    @classmethod
    def load(cls, path: str | Path) -> "SegCheckpoint":
        blob = torch.load(str(path), map_location="cpu", weights_only=False)
        if blob.get("kind") != "segmentation" or blob.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: not a segmentation checkpoint of format {FORMAT_VERSION}")
        return cls(
            UNetConfig(**blob["net_config"]),
            SegTrainConfig(**blob["train_config"]),
            blob["final_state"],
            blob["best_state"],
            blob["fold"],
            SegHistory(**blob["history"]),
            tuple(blob["train_cases"]),
            tuple(blob["val_cases"]),
            blob.get("model_id", ""),
        )


# ------------------------------------------------------------------ training


def train_segmentation(
    dataset: Dataset,
    cfg: SegTrainConfig,
    net_cfg: UNetConfig,
    fold: Optional[int] = None,
    seed: int = 0,
    folds=None,
    k: int = 5,
    allow_holdout: bool = False,
) -> SegCheckpoint:
    """Train one fold. fold=None trains on every case without validation.

    `folds` is a FoldAssignment; when omitted it is made with make_folds(dataset, k, seed).
    allow_holdout is only for evaluation tools (the conversion probe) that
    must train on labelled target-domain phantoms.
    """
    from .self_training import make_folds

    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if fold is None:
        train_ids, val_ids = dataset.case_ids, []
    else:
        folds = folds or make_folds(dataset, k, seed)
        train_ids, val_ids = folds.split(fold)
        if not train_ids:
            raise ValueError(f"fold {fold} leaves no training cases")
    seed_everything(seed)
    rng = np.random.default_rng(seed)
    train_cases = load_training_cases(dataset.subset(train_ids), cfg, allow_holdout)
    val_cases = [dataset[c] for c in val_ids]

    net = build_unet(net_cfg)
    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum, nesterov=cfg.nesterov, weight_decay=cfg.weight_decay)
    history = SegHistory()
    best_score, best_state = -math.inf, None
    p3 = net_cfg.patch3d

    for epoch in range(cfg.epochs):
        for g in opt.param_groups:
            g["lr"] = poly_lr(epoch, cfg.epochs, cfg.lr, cfg.poly_exponent)
        net.train()
        total = 0.0
        for it in range(cfg.iterations_per_epoch):
            x, y, _ = sample_training_batch(train_cases, p3, cfg.batch_size, cfg.oversample_foreground, rng)
            if cfg.augment:
                x, y = augment_batch(x, y, rng, net_cfg.dim)
            x, y = _to_net_input(x, net_cfg.dim), _to_net_labels(y, net_cfg.dim)
            opt.zero_grad(set_to_none=True)
            loss = losses.deep_supervision_loss(net(x), y, net_cfg.ds_heads)
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"segmentation fold {fold}: non-finite loss at epoch {epoch}, iteration {it}")
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            opt.step()
            total += float(loss.detach())
        rec: Dict[str, float] = {"epoch": epoch, "train_loss": total / cfg.iterations_per_epoch}
        last = epoch == cfg.epochs - 1
        if val_cases and ((epoch + 1) % cfg.val_every == 0 or last):
            net.eval()
            dv, dc = [], []
            for case in val_cases:
                pred = predict_labels(net, net_cfg, cfg, case.load_volume())
                gt = case.load_labels()
                dv.append(dice_score(pred, gt, 1))
                dc.append(dice_score(pred, gt, 2))
            rec["val_dice_vs"] = float(np.mean(dv))
            rec["val_dice_cochlea"] = float(np.mean(dc))
            score = 0.5 * (rec["val_dice_vs"] + rec["val_dice_cochlea"])
            if score > best_score:
                best_score = score
                best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        history.epochs.append(rec)
        log.info("seg fold %s epoch %d: %s", fold, epoch, rec)

    net.eval()
    final_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    return SegCheckpoint(
        net_cfg, cfg, final_state, best_state if best_state is not None else final_state, fold, history,
        tuple(train_ids), tuple(val_ids), f"unet{net_cfg.dim}d_fold{fold if fold is not None else 'all'}",
    )


# ----------------------------------------------------------------- inference


@dataclass
class SoftPrediction:
    probs: np.ndarray  # (C, z, y, x)
    case_id: str = ""
    provenance: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float32)
        if p.ndim != 4:
            raise ValueError(f"probabilities need shape (C, z, y, x), got {p.shape}")
        self.probs = p

    def argmax(self) -> np.ndarray:
        # np.argmax takes the first maximum, i.e. ties go to the lower class id
        return np.argmax(self.probs, axis=0).astype(np.uint8)


@lru_cache(maxsize=8)
def gaussian_window(patch: Tuple[int, ...], sigma_scale: float = 1.0 / 8) -> np.ndarray:
    """Separable Gaussian importance map, peak 1, sigma = patch * sigma_scale."""
    g = np.ones(patch, dtype=np.float64)
    for ax, n in enumerate(patch):
        c = (n - 1) / 2
        s = max(n * sigma_scale, 1e-6)
        shape = [1] * len(patch)
        shape[ax] = n
        g = g * np.exp(-((np.arange(n) - c) ** 2) / (2 * s * s)).reshape(shape)
    g /= g.max()
    g[g == 0] = g[g > 0].min()
    return g


def _tile_starts(size: int, patch: int, overlap: float = 0.5) -> List[int]:
    if size <= patch:
        return [0]
    step = patch * (1 - overlap)
    n = int(math.ceil((size - patch) / step)) + 1
    return [int(round(v)) for v in np.linspace(0, size - patch, n)]


@torch.no_grad()
def sliding_window_probs(net: nn.Module, net_cfg: UNetConfig, image: np.ndarray, batch: int = 4) -> np.ndarray:
    """Gaussian-blended softmax over overlapping tiles of a normalised (z, y, x) image."""
    p3 = net_cfg.patch3d
    orig = image.shape
    pad = [(0, max(0, p - n)) for n, p in zip(orig, p3)]
    img = np.pad(image, pad) if any(b for _, b in pad) else image
    shape = img.shape
    win = gaussian_window(tuple(p3))
    acc = np.zeros((net_cfg.n_classes,) + shape, dtype=np.float64)
    norm = np.zeros(shape, dtype=np.float64)
    starts = [_tile_starts(n, p) for n, p in zip(shape, p3)]
    tiles = [(z, y, x) for z in starts[0] for y in starts[1] for x in starts[2]]
    net.eval()
    for i in range(0, len(tiles), batch):
        chunk = tiles[i : i + batch]
        xs = np.stack([img[z : z + p3[0], y : y + p3[1], x : x + p3[2]] for z, y, x in chunk])
        logits = net(_to_net_input(xs, net_cfg.dim))
        probs = torch.softmax(logits.double(), dim=1).numpy()
        if net_cfg.dim == 2:
            probs = probs[:, :, None]
        for (z, y, x), pr in zip(chunk, probs):
            sl = (slice(z, z + p3[0]), slice(y, y + p3[1]), slice(x, x + p3[2]))
            acc[(slice(None),) + sl] += pr * win
            norm[sl] += win
    out = acc / norm
    out /= out.sum(axis=0, keepdims=True)
    return out[(slice(None),) + tuple(slice(0, n) for n in orig)].astype(np.float32)


def _resample_probs(probs: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    from scipy import ndimage

    if probs.shape[1:] == tuple(shape):
        return probs
    out = np.stack([
        ndimage.zoom(p, [t / s for t, s in zip(shape, p.shape)], order=1, mode="nearest", grid_mode=True)
        for p in probs
    ])
    out = np.clip(out, 0, None)
    return out / out.sum(axis=0, keepdims=True)


def sliding_window_infer(model, volume: Volume, which: str = "best") -> SoftPrediction:
    """Whole-volume soft prediction on `volume`'s grid.

    `model` is a SegCheckpoint (preferred) or (net, net_cfg, train_cfg).
    The raw volume is preprocessed with the checkpoint's training settings.
    """
    if isinstance(model, SegCheckpoint):
        net, net_cfg, cfg = model.model(which), model.net_cfg, model.train_cfg
        prov = {"model_id": model.model_id, "fold": str(model.fold)}
    else:
        net, net_cfg, cfg = model
        prov = {}
    pre = preprocess(volume, cfg)
    probs = sliding_window_probs(net, net_cfg, np.array(pre.data))
    probs = _resample_probs(probs, volume.shape)
    return SoftPrediction(probs, volume.case_id, prov)


def predict_labels(net, net_cfg, cfg, volume: Volume) -> LabelMap:
    sp = sliding_window_infer((net, net_cfg, cfg), volume)
    return LabelMap(sp.argmax(), volume.spacing, volume.affine, volume.case_id)
