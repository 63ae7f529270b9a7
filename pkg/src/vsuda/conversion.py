"""Shape-preserving unpaired contrast conversion.

A 2D CycleGAN whose two U-Net generators each expose their encoder to a
segmentation decoder. G_ab maps domain A (ceT1) to B (hrT2), G_ba the
reverse; S_a segments from G_ab's encoder, S_b from G_ba's encoder.

Generator loss term inventory (all means, weights from LossWeights):

    adv      adv_ab, adv_ba                      x w_adv  (1)
    cyc      cyc_a, cyc_b, kcyc_a, kcyc_b        x w_cyc  (10)
    id       id_a, id_b                          x w_id   (5)
    seg      seg_a_real, seg_b_fake              x w_seg  (100)

seg_a_real is S_a on real A from the first epoch; seg_b_fake is S_b on
G_ab(real A) and only enters once epoch >= seg_start_epoch. With every term
equal to 1 the total is therefore 2 + 40 + 10 + 100 * n_seg, n_seg in {1, 2}.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses
from .data import Dataset, Volume, minmax_normalize
from .utils import TrainingDivergence, seed_everything

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
GAN_RANGE = (-1.0, 1.0)


@dataclass
class GeneratorConfig:
    levels: int = 3
    base_channels: int = 32
    in_channels: int = 1
    out_channels: int = 1
    negative_slope: float = 0.2
    # residual=True adds residual_scale * tanh(decoder) to the input instead
    # of emitting tanh(decoder); scale 0 makes the generator the identity
    residual: bool = False
    residual_scale: float = 1.0

    def __post_init__(self):
        if self.levels != 3:
            raise ValueError(f"generator levels are fixed at 3, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")


@dataclass
class DiscriminatorConfig:
    n_layers: int = 3
    base_channels: int = 64

    def __post_init__(self):
        if self.n_layers < 1 or self.base_channels < 1:
            raise ValueError("discriminator n_layers and base_channels must be >= 1")


@dataclass
class LossWeights:
    w_adv: float = 1.0
    w_cyc: float = 10.0
    w_id: float = 5.0
    w_seg: float = 100.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0, got {v}")


@dataclass
class ConversionTrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    betas: tuple = (0.5, 0.999)
    lr_decay: float = 0.95
    seg_start_epoch: int = 5
    batch_size: int = 4
    steps_per_epoch: Optional[int] = None  # None: one pass over domain-A slices
    disc_loss_scale: float = 0.5
    seg_real_a: bool = True
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.seg_start_epoch < self.epochs:
            raise ValueError(f"seg_start_epoch ({self.seg_start_epoch}) must be < epochs ({self.epochs})")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("lr must be > 0 and lr_decay in (0, 1]")


# ------------------------------------------------------------------ networks


def _conv_block(cin: int, cout: int, stride: int, slope: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(slope),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(slope),
    )


class Encoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        ch = [cfg.base_channels * 2**i for i in range(cfg.levels)]
        self.stages = nn.ModuleList()
        cin = cfg.in_channels
        for i, c in enumerate(ch):
            self.stages.append(_conv_block(cin, c, 1 if i == 0 else 2, cfg.negative_slope))
            cin = c

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig, out_channels: int):
        super().__init__()
        ch = [cfg.base_channels * 2**i for i in range(cfg.levels)]
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for i in range(cfg.levels - 1, 0, -1):
            self.ups.append(nn.ConvTranspose2d(ch[i], ch[i - 1], 2, stride=2))
            self.blocks.append(_conv_block(2 * ch[i - 1], ch[i - 1], 1, cfg.negative_slope))
        self.head = nn.Conv2d(ch[0], out_channels, 1)

    def forward(self, feats):
        x = feats[-1]
        for up, block, skip in zip(self.ups, self.blocks, reversed(feats[:-1])):
            x = block(torch.cat([up(x), skip], dim=1))
        return self.head(x)


def _pad_to_multiple(x: torch.Tensor, m: int):
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return x, (h, w)
    return F.pad(x, (0, pw, 0, ph), mode="replicate"), (h, w)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg, cfg.out_channels)
        self.multiple = 2 ** (cfg.levels - 1)

    def from_features(self, feats, x):
        y = torch.tanh(self.decoder(feats))
        if self.cfg.residual:
            return x + self.cfg.residual_scale * y
        return y

    def forward(self, x):
        xp, (h, w) = _pad_to_multiple(x, self.multiple)
        return self.from_features(self.encoder(xp), xp)[..., :h, :w]


class SegmenterHead(nn.Module):
    """3-class decoder reading a generator's encoder (shared, not copied)."""

    def __init__(self, encoder: Encoder, cfg: GeneratorConfig, n_classes: int = 3):
        super().__init__()
        self.encoder = encoder
        self.decoder = Decoder(cfg, n_classes)
        self.multiple = 2 ** (cfg.levels - 1)

    def forward(self, x):
        xp, (h, w) = _pad_to_multiple(x, self.multiple)
        return self.decoder(self.encoder(xp))[..., :h, :w]


class PatchDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig, in_channels: int = 1):
        super().__init__()
        c = cfg.base_channels
        layers = [nn.Conv2d(in_channels, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        cin = c
        for i in range(1, cfg.n_layers):
            cout = c * min(2**i, 8)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.InstanceNorm2d(cout, affine=True), nn.LeakyReLU(0.2)]
            cin = cout
        cout = c * min(2**cfg.n_layers, 8)
        layers += [nn.Conv2d(cin, cout, 4, stride=1, padding=1), nn.InstanceNorm2d(cout, affine=True), nn.LeakyReLU(0.2)]
        layers.append(nn.Conv2d(cout, 1, 4, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def patchgan_output_size(n: int, n_layers: int = 3) -> int:
    """Score-grid side length for an n-pixel input side."""
    for _ in range(n_layers):
        n = (n + 2 - 4) // 2 + 1
    for _ in range(2):
        n = (n + 2 - 4) // 1 + 1
    return n


class ConversionModel(nn.Module):
    def __init__(self, gcfg: GeneratorConfig, dcfg: DiscriminatorConfig):
        super().__init__()
        self.gcfg, self.dcfg = gcfg, dcfg
        self.G_ab = Generator(gcfg)
        self.G_ba = Generator(gcfg)
        self.D_a = PatchDiscriminator(dcfg)
        self.D_b = PatchDiscriminator(dcfg)
        self.S_a = SegmenterHead(self.G_ab.encoder, gcfg)
        self.S_b = SegmenterHead(self.G_ba.encoder, gcfg)

    def generator_parameters(self) -> List[nn.Parameter]:
        params, seen = [], set()
        for m in (self.G_ab, self.G_ba, self.S_a, self.S_b):
            for p in m.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
        return params

    def discriminator_parameters(self) -> List[nn.Parameter]:
        return list(self.D_a.parameters()) + list(self.D_b.parameters())


def build_conversion_model(gcfg: Optional[GeneratorConfig] = None, dcfg: Optional[DiscriminatorConfig] = None) -> ConversionModel:
    return ConversionModel(gcfg or GeneratorConfig(), dcfg or DiscriminatorConfig())


# --------------------------------------------------------------- step losses


GROUPS = {
    "adv": ("adv_ab", "adv_ba"),
    "cyc": ("cyc_a", "cyc_b", "kcyc_a", "kcyc_b"),
    "id": ("id_a", "id_b"),
    "seg": ("seg_a_real", "seg_b_fake"),
}
TERM_GROUP = {t: g for g, ts in GROUPS.items() for t in ts}


def compose_generator_loss(terms: Dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the present generator terms (absent terms contribute nothing).

    Accumulated in float64 so the logged total matches the logged terms exactly.
    """
    w = {"adv": weights.w_adv, "cyc": weights.w_cyc, "id": weights.w_id, "seg": weights.w_seg}
    total = None
    for name, value in terms.items():
        part = w[TERM_GROUP[name]] * value.double()
        total = part if total is None else total + part
    if total is None:
        raise ValueError("no generator loss terms")
    return total


def set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def generator_step_loss(model: ConversionModel, batch: Dict[str, torch.Tensor], epoch: int, cfg: ConversionTrainConfig):
    """Composite generator/segmenter loss for one batch.

    batch holds real_a (B,1,H,W), labels_a (B,H,W) and real_b (B,1,H,W).
    Returns (total, terms, fakes) where fakes are detached for the
    discriminator update.
    """
    if batch.get("labels_a") is None:
        raise ValueError("generator step needs labels for real_a")
    real_a, labels_a, real_b = batch["real_a"], batch["labels_a"], batch["real_b"]
    w = cfg.weights
    terms: Dict[str, torch.Tensor] = {}

    feats_a = model.G_ab.encoder(real_a)
    fake_b = model.G_ab.from_features(feats_a, real_a)
    feats_fb = model.G_ba.encoder(fake_b)
    rec_a = model.G_ba.from_features(feats_fb, fake_b)

    fake_a = model.G_ba(real_b)
    rec_b = model.G_ab(fake_a)

    if w.w_adv > 0:
        terms["adv_ab"] = losses.adversarial_loss(model.D_b(fake_b), True)
        terms["adv_ba"] = losses.adversarial_loss(model.D_a(fake_a), True)
    if w.w_cyc > 0:
        terms["cyc_a"] = losses.cycle_loss(real_a, rec_a)
        terms["cyc_b"] = losses.cycle_loss(real_b, rec_b)
        terms["kcyc_a"] = losses.kspace_cycle_loss(real_a, rec_a)
        terms["kcyc_b"] = losses.kspace_cycle_loss(real_b, rec_b)
    if w.w_id > 0:
        terms["id_a"] = losses.identity_loss(real_a, model.G_ba(real_a))
        terms["id_b"] = losses.identity_loss(real_b, model.G_ab(real_b))
    if w.w_seg > 0:
        if cfg.seg_real_a:
            terms["seg_a_real"] = losses.dice_ce_loss(model.S_a.decoder(feats_a), labels_a)
        if epoch >= cfg.seg_start_epoch:
            terms["seg_b_fake"] = losses.dice_ce_loss(model.S_b.decoder(feats_fb), labels_a)

    total = compose_generator_loss(terms, w)
    return total, terms, {"fake_a": fake_a.detach(), "fake_b": fake_b.detach()}


def discriminator_loss(d: nn.Module, real: torch.Tensor, fake: torch.Tensor, scale: float = 0.5) -> torch.Tensor:
    return scale * (losses.adversarial_loss(d(real), True) + losses.adversarial_loss(d(fake), False))


# ------------------------------------------------------------------ training


class SliceBank:
    """All axial slices of a dataset, normalised to the GAN intensity range."""

    def __init__(self, dataset: Dataset, with_labels: bool):
        if len(dataset) == 0:
            raise ValueError(f"dataset {dataset.name!r} is empty")
        self.images, self.labels = [], []
        for case in dataset:
            if with_labels and not case.labeled:
                raise ValueError(f"case {case.case_id!r} in {dataset.name!r} has no labels")
            vol = minmax_normalize(case.load_volume(), *GAN_RANGE)
            # pad in-plane to a multiple of 4 so the 3-level U-Nets need no cropping
            h, w = vol.shape[1:]
            pad = ((0, 0), (0, (-h) % 4), (0, (-w) % 4))
            self.images.append(np.pad(np.array(vol.data), pad, mode="edge"))
            if with_labels:
                self.labels.append(np.pad(np.array(case.load_labels().data), pad))
        self.with_labels = with_labels

    @property
    def n_slices(self) -> int:
        return sum(im.shape[0] for im in self.images)

    def sample(self, rng: np.random.Generator, n: int):
        imgs, labs = [], []
        for _ in range(n):
            c = int(rng.integers(len(self.images)))
            z = int(rng.integers(self.images[c].shape[0]))
            imgs.append(self.images[c][z])
            if self.with_labels:
                labs.append(self.labels[c][z])
        x = torch.from_numpy(np.stack(imgs)[:, None].astype(np.float32))
        y = torch.from_numpy(np.stack(labs).astype(np.int64)) if self.with_labels else None
        return x, y


@dataclass
class ConversionHistory:
    epochs: List[Dict[str, float]] = field(default_factory=list)
    steps: List[Dict[str, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "term", "value"])
        for rec in self.epochs:
            for k, v in rec.items():
                if k != "epoch":
                    w.writerow([rec["epoch"], k, repr(float(v))])
        return buf.getvalue()

    def term(self, name: str) -> List[float]:
        return [rec[name] for rec in self.epochs if name in rec]


@dataclass
class ConversionCheckpoint:
    model: ConversionModel
    train_cfg: ConversionTrainConfig
    epoch: int = 0
    history: ConversionHistory = field(default_factory=ConversionHistory)

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "format_version": FORMAT_VERSION,
                "kind": "conversion",
                "generator_config": asdict(self.model.gcfg),
                "discriminator_config": asdict(self.model.dcfg),
                "train_config": asdict(self.train_cfg),
                "epoch": self.epoch,
                "state_dict": self.model.state_dict(),
                "history": {"epochs": self.history.epochs, "steps": self.history.steps},
            },
            str(path),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ConversionCheckpoint":
        blob = torch.load(str(path), map_location="cpu", weights_only=False)
        if blob.get("kind") != "conversion" or blob.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: not a conversion checkpoint of format {FORMAT_VERSION}")
        model = build_conversion_model(GeneratorConfig(**blob["generator_config"]), DiscriminatorConfig(**blob["discriminator_config"]))
        model.load_state_dict(blob["state_dict"])
        model.eval()
        hist = ConversionHistory(**blob["history"])
        return cls(model, ConversionTrainConfig(**blob["train_config"]), blob["epoch"], hist)


def train_conversion(
    dataset_a: Dataset,
    dataset_b: Dataset,
    cfg: Optional[ConversionTrainConfig] = None,
    seed: int = 0,
    gcfg: Optional[GeneratorConfig] = None,
    dcfg: Optional[DiscriminatorConfig] = None,
) -> ConversionCheckpoint:
    """Alternating generator / discriminator training on random axial slices."""
    cfg = cfg or ConversionTrainConfig()
    seed_everything(seed)
    bank_a = SliceBank(dataset_a, with_labels=True)
    bank_b = SliceBank(dataset_b, with_labels=False)
    rng = np.random.default_rng(seed)

    model = build_conversion_model(gcfg, dcfg)
    model.train()
    opt_g = torch.optim.Adam(model.generator_parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=cfg.lr, betas=cfg.betas)
    sched = [torch.optim.lr_scheduler.ExponentialLR(o, cfg.lr_decay) for o in (opt_g, opt_d)]
    steps = cfg.steps_per_epoch or max(1, math.ceil(bank_a.n_slices / cfg.batch_size))
    history = ConversionHistory()

    for epoch in range(cfg.epochs):
        sums: Dict[str, float] = {}
        for step in range(steps):
            real_a, labels_a = bank_a.sample(rng, cfg.batch_size)
            real_b, _ = bank_b.sample(rng, cfg.batch_size)
            batch = {"real_a": real_a, "labels_a": labels_a, "real_b": real_b}

            set_requires_grad(model.D_a, False)
            set_requires_grad(model.D_b, False)
            opt_g.zero_grad(set_to_none=True)
            total, terms, fakes = generator_step_loss(model, batch, epoch, cfg)
            if not torch.isfinite(total):
                raise TrainingDivergence(f"conversion: non-finite generator loss at epoch {epoch}, step {step}")
            total.backward()
            opt_g.step()

            set_requires_grad(model.D_a, True)
            set_requires_grad(model.D_b, True)
            opt_d.zero_grad(set_to_none=True)
            d_a = discriminator_loss(model.D_a, real_a, fakes["fake_a"], cfg.disc_loss_scale)
            d_b = discriminator_loss(model.D_b, real_b, fakes["fake_b"], cfg.disc_loss_scale)
            d_total = d_a + d_b
            if not torch.isfinite(d_total):
                raise TrainingDivergence(f"conversion: non-finite discriminator loss at epoch {epoch}, step {step}")
            d_total.backward()
            opt_d.step()

            rec = {k: float(v.detach()) for k, v in terms.items()}
            rec.update(total=float(total.detach()), d_a=float(d_a.detach()), d_b=float(d_b.detach()))
            history.steps.append({"epoch": epoch, "step": step, **rec})
            for k, v in rec.items():
                sums[k] = sums.get(k, 0.0) + v
        history.epochs.append({"epoch": epoch, **{k: v / steps for k, v in sums.items()}, "lr": opt_g.param_groups[0]["lr"]})
        log.info("conversion epoch %d: total %.4f cyc_a %.4f", epoch, history.epochs[-1]["total"], history.epochs[-1].get("cyc_a", float("nan")))
        for s in sched:
            s.step()

    model.eval()
    return ConversionCheckpoint(model, cfg, cfg.epochs, history)


@torch.no_grad()
def convert_volume(ckpt, volume: Volume, direction: str = "A->B", chunk: int = 16, normalize: bool = False) -> Volume:
    """Slice-wise conversion along z; spacing and affine are copied over.

    Input is expected in the [-1, 1] training range unless normalize=True.
    """
    model = ckpt.model if isinstance(ckpt, ConversionCheckpoint) else ckpt
    if direction in ("A->B", "AB", "a2b"):
        gen = model.G_ab
    elif direction in ("B->A", "BA", "b2a"):
        gen = model.G_ba
    else:
        raise ValueError(f"direction must be 'A->B' or 'B->A', got {direction!r}")
    if normalize:
        volume = minmax_normalize(volume, *GAN_RANGE)
    was_training = gen.training
    gen.eval()
    x = torch.from_numpy(np.array(volume.data)[:, None])
    out = torch.cat([gen(x[i : i + chunk]) for i in range(0, x.shape[0], chunk)])
    gen.train(was_training)
    return volume.with_data(out[:, 0].numpy())
