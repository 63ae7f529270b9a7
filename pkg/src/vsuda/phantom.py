"""Procedural two-contrast head phantoms with known VS / cochlea masks.

Each case is one anatomy (head ellipsoid, a rotated VS ellipsoid at the
internal auditory canal on one side, two cochlea spheres) rendered under two
intensity tables. Domain A plays the contrast-enhanced T1 role (VS bright,
cochlea dark); domain B plays high-resolution T2 (cochlea fluid bright, VS
intermediate). The canal itself is an optional tissue: tables that omit it
render it as head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .data import (
    CaseManifest,
    Dataset,
    Domain,
    LabelKind,
    LabelMap,
    Volume,
    save_dataset,
    save_labelmap,
    save_volume,
)

TISSUES = ("background", "head", "canal", "VS", "cochlea")
REQUIRED_TISSUES = ("background", "head", "VS", "cochlea")


class PhantomError(Exception):
    pass


def _default_table_a() -> Dict[str, Tuple[float, float]]:
    return {
        "background": (0.0, 0.0),
        "head": (0.45, 0.04),
        "VS": (0.95, 0.05),
        "cochlea": (0.25, 0.03),
    }


def _default_table_b() -> Dict[str, Tuple[float, float]]:
    return {
        "background": (0.0, 0.0),
        "head": (0.35, 0.04),
        "VS": (0.55, 0.06),
        "cochlea": (0.95, 0.04),
    }


@dataclass
class PhantomSpec:
    """Geometry, contrast tables and noise for the phantom generator.

    Intensity tables map tissue name to (mean, std); the std is a smooth
    per-tissue texture, the per-domain `noise_*` is white Gaussian noise.
    """

    grid: Tuple[int, int, int] = (32, 96, 96)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    vs_radius_mm: Tuple[float, float] = (4.0, 9.0)
    cochlea_radius_mm: Tuple[float, float] = (1.8, 2.8)
    table_a: Dict[str, Tuple[float, float]] = field(default_factory=_default_table_a)
    table_b: Dict[str, Tuple[float, float]] = field(default_factory=_default_table_b)
    noise_a: float = 0.03
    noise_b: float = 0.05
    texture_sigma_mm: float = 2.0
    min_vs_gap: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)  # type: ignore[assignment]
        self.spacing = tuple(float(s) for s in self.spacing)  # type: ignore[assignment]
        self.vs_radius_mm = tuple(float(r) for r in self.vs_radius_mm)  # type: ignore[assignment]
        self.cochlea_radius_mm = tuple(float(r) for r in self.cochlea_radius_mm)  # type: ignore[assignment]
        self.table_a = {k: tuple(map(float, v)) for k, v in self.table_a.items()}  # type: ignore[misc]
        self.table_b = {k: tuple(map(float, v)) for k, v in self.table_b.items()}  # type: ignore[misc]
        self.validate()

    def validate(self) -> None:
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise PhantomError(f"grid must be three positive sizes, got {self.grid}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise PhantomError(f"spacing must be positive, got {self.spacing}")
        for name, (lo, hi) in (("vs_radius_mm", self.vs_radius_mm), ("cochlea_radius_mm", self.cochlea_radius_mm)):
            if not 0 < lo <= hi:
                raise PhantomError(f"{name} must satisfy 0 < min <= max, got {(lo, hi)}")
        if self.noise_a < 0 or self.noise_b < 0:
            raise PhantomError("noise levels must be >= 0")
        # biggest lesion diameter plus a 2-voxel margin must fit every axis
        for axis, (n, s) in enumerate(zip(self.grid, self.spacing)):
            need = 2 * self.vs_radius_mm[1] / s + 4
            if need > n:
                raise PhantomError(
                    f"VS radius {self.vs_radius_mm[1]} mm does not fit axis {axis} "
                    f"({n} voxels of {s} mm) with a 2-voxel margin"
                )
        for dom, table in (("A", self.table_a), ("B", self.table_b)):
            missing = [t for t in REQUIRED_TISSUES if t not in table]
            if missing:
                raise PhantomError(f"table_{dom.lower()} missing tissues {missing}")
            unknown = [t for t in table if t not in TISSUES]
            if unknown:
                raise PhantomError(f"table_{dom.lower()} has unknown tissues {unknown}")
            means = [table[t][0] for t in REQUIRED_TISSUES]
            if len(set(means)) != len(means):
                raise PhantomError(f"table_{dom.lower()} must give distinct means to {REQUIRED_TISSUES}")
            if any(sd < 0 for _, sd in table.values()):
                raise PhantomError(f"table_{dom.lower()} has a negative std")
        if abs(self.table_a["VS"][0] - self.table_b["VS"][0]) < self.min_vs_gap:
            raise PhantomError(
                f"VS means differ by less than min_vs_gap={self.min_vs_gap} between domains"
            )


def _physical_grid(spec: PhantomSpec):
    nz, ny, nx = spec.grid
    sz, sy, sx = spec.spacing
    z = (np.arange(nz) - (nz - 1) / 2) * sz
    y = (np.arange(ny) - (ny - 1) / 2) * sy
    x = (np.arange(nx) - (nx - 1) / 2) * sx
    return np.meshgrid(z, y, x, indexing="ij")


def _rotation(rng: np.random.Generator, max_angle: float = math.pi / 4) -> np.ndarray:
    a, b, c = rng.uniform(-max_angle, max_angle, size=3)
    rz = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
    ry = np.array([[math.cos(b), 0, math.sin(b)], [0, 1, 0], [-math.sin(b), 0, math.cos(b)]])
    rx = np.array([[math.cos(c), -math.sin(c), 0], [math.sin(c), math.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _anatomy(spec: PhantomSpec, rng: np.random.Generator, max_tries: int = 50):
    """Tissue index map (into TISSUES) plus the class label map."""
    Z, Y, X = _physical_grid(spec)
    nz, ny, nx = spec.grid
    sz, sy, sx = spec.spacing
    half = np.array([(nz - 1) * sz, (ny - 1) * sy, (nx - 1) * sx]) / 2
    pos = np.stack([Z, Y, X], axis=-1)

    tissue = np.zeros(spec.grid, dtype=np.int8)
    head_r = half * np.array([1.3, 0.9, 0.9]) * rng.uniform(0.93, 1.0, size=3)
    head = (Z / head_r[0]) ** 2 + (Y / head_r[1]) ** 2 + (X / head_r[2]) ** 2 <= 1.0
    tissue[head] = TISSUES.index("head")

    side = 1.0 if rng.random() < 0.5 else -1.0
    cochlea_x = 0.55 * half[2]
    cochlea_y = 0.15 * half[1]
    margin = 2 * np.array(spec.spacing)
    lo_r, hi_r = spec.vs_radius_mm

    for _ in range(max_tries):
        radii = rng.uniform(lo_r, hi_r, size=3)
        radii[0] = min(radii[0], half[0] - margin[0])
        rot = _rotation(rng)
        # canal locus: medial to the cochlea on the lesion side
        center = np.array([
            rng.uniform(-0.15, 0.15) * half[0],
            cochlea_y + rng.uniform(-0.1, 0.1) * half[1],
            side * (cochlea_x - radii.max() - spec.cochlea_radius_mm[1] - rng.uniform(1.0, 3.0)),
        ])
        extent = np.abs(rot) @ radii
        if np.any(np.abs(center) + extent > half - margin):
            continue
        local = (pos - center) @ rot
        vs = np.sum((local / radii) ** 2, axis=-1) <= 1.0
        if not vs.any():
            continue
        coch_r = rng.uniform(*spec.cochlea_radius_mm, size=2)
        cochleae = []
        for s, r in zip((1.0, -1.0), coch_r):
            c = np.array([rng.uniform(-0.1, 0.1) * half[0], cochlea_y, s * cochlea_x])
            cochleae.append(np.sum(((pos - c) / r) ** 2, axis=-1) <= 1.0)
        coch = cochleae[0] | cochleae[1]
        # keep at least one background-labelled voxel between VS and cochlea
        if (ndimage.binary_dilation(vs, iterations=2) & coch).any():
            continue
        if not all(c.any() for c in cochleae):
            continue
        break
    else:
        raise PhantomError(
            f"could not place VS and cochlea without overlap after {max_tries} tries; "
            "grid too small for vs_radius_mm / cochlea_radius_mm"
        )

    # internal auditory canal: a tube from the VS centre laterally to the cochlea
    canal_r = max(0.5 * radii.min(), 1.5)
    t = np.clip((X - center[2]) / (side * cochlea_x - center[2]), 0.0, 1.0)
    axis_pt = center[None, None, None, :] + t[..., None] * (np.array([0.0, cochlea_y, side * cochlea_x]) - center)
    canal = np.sum((pos - axis_pt) ** 2, axis=-1) <= canal_r**2
    canal &= head

    tissue[canal] = TISSUES.index("canal")
    tissue[vs] = TISSUES.index("VS")
    tissue[coch] = TISSUES.index("cochlea")
    labels = np.zeros(spec.grid, dtype=np.uint8)
    labels[vs] = 1
    labels[coch] = 2
    return tissue, labels


def _render(spec: PhantomSpec, tissue: np.ndarray, table, noise: float, rng: np.random.Generator) -> np.ndarray:
    sigma = [spec.texture_sigma_mm / s for s in spec.spacing]
    out = np.zeros(spec.grid, dtype=np.float64)
    for idx, name in enumerate(TISSUES):
        mask = tissue == idx
        if not mask.any():
            continue
        mean, sd = table.get(name, table["head"])
        if sd > 0:
            tex = ndimage.gaussian_filter(rng.standard_normal(spec.grid), sigma)
            tex /= tex.std() + 1e-12
            out[mask] = mean + sd * tex[mask]
        else:
            out[mask] = mean
    # soften tissue boundaries slightly, like a finite point-spread function
    out = ndimage.gaussian_filter(out, [0.5 / s * min(spec.spacing) for s in spec.spacing])
    if noise > 0:
        out += noise * rng.standard_normal(spec.grid)
    return out.astype(np.float32)


def generate_case(spec: PhantomSpec, case_seed: int, case_id: Optional[str] = None):
    """Render one anatomy in both contrasts.

    Returns (volume_a, volume_b, labels); deterministic in (spec, case_seed).
    """
    if case_seed < 0:
        raise ValueError("case_seed must be >= 0")
    ss = np.random.SeedSequence([int(spec.seed), int(case_seed)])
    geo_rng, a_rng, b_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    tissue, labels = _anatomy(spec, geo_rng)
    cid = case_id or f"case_{case_seed:04d}"
    va = Volume(_render(spec, tissue, spec.table_a, spec.noise_a, a_rng), spec.spacing, None, cid)
    vb = Volume(_render(spec, tissue, spec.table_b, spec.noise_b, b_rng), spec.spacing, None, cid)
    return va, vb, LabelMap(labels, spec.spacing, None, cid)


def generate_dataset(
    spec: PhantomSpec,
    n_annotated_a: int,
    n_unannotated_b: int,
    out_dir: str | Path,
    seed: int = 0,
):
    """Write an unpaired annotated-A / unannotated-B phantom cohort.

    Domain-A cases use case seeds [seed*10^6, ...) and domain-B cases start
    right after them, so no anatomy appears in both domains. B's ground truth
    goes to a separate `hidden/` manifest used only for evaluation.

    Returns (dataset_a, dataset_b, hidden_b).
    """
    if n_annotated_a < 1 or n_unannotated_b < 1:
        raise ValueError("case counts must be >= 1")
    out = Path(out_dir)
    for sub in ("domainA/images", "domainA/labels", "domainB/images", "hidden/labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    base = int(seed) * 1_000_000
    a_cases, b_cases, hidden = [], [], []
    for i in range(n_annotated_a):
        cid = f"A_{i:03d}"
        va, _, lab = generate_case(spec, base + i, cid)
        vp, lp = out / "domainA/images" / f"{cid}.nii.gz", out / "domainA/labels" / f"{cid}.nii.gz"
        save_volume(va, vp)
        save_labelmap(lab, lp)
        a_cases.append(CaseManifest(cid, Domain.CET1, vp, lp, LabelKind.TRUE))
    for i in range(n_unannotated_b):
        cid = f"B_{i:03d}"
        _, vb, lab = generate_case(spec, base + n_annotated_a + i, cid)
        vp, lp = out / "domainB/images" / f"{cid}.nii.gz", out / "hidden/labels" / f"{cid}.nii.gz"
        save_volume(vb, vp)
        save_labelmap(lab, lp)
        b_cases.append(CaseManifest(cid, Domain.HRT2_REAL, vp))
        hidden.append(CaseManifest(cid, Domain.HRT2_REAL, vp, lp, LabelKind.TRUE, holdout=True))
    ds_a = Dataset("domainA", tuple(a_cases))
    ds_b = Dataset("domainB", tuple(b_cases))
    ds_h = Dataset("hidden", tuple(hidden))
    save_dataset(ds_a, out / "domainA/manifest.json")
    save_dataset(ds_b, out / "domainB/manifest.json")
    save_dataset(ds_h, out / "hidden/manifest.json")
    return ds_a, ds_b, ds_h


PROBE_SEED_OFFSET = 900_000


def generate_probe_set(spec: PhantomSpec, n: int, out_dir: str | Path, seed: int = 0) -> Dataset:
    """Labelled domain-B cases for a probe segmenter, outside the pipeline's data.

    Case seeds start at seed*10^6 + 900000, disjoint from generate_dataset's
    A and B cases. The cases are marked hold-out: the pipeline never trains on them.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    base = int(seed) * 1_000_000 + PROBE_SEED_OFFSET
    cases = []
    for i in range(n):
        cid = f"P_{i:03d}"
        _, vb, lab = generate_case(spec, base + i, cid)
        vp, lp = out / "images" / f"{cid}.nii.gz", out / "labels" / f"{cid}.nii.gz"
        save_volume(vb, vp)
        save_labelmap(lab, lp)
        cases.append(CaseManifest(cid, Domain.HRT2_REAL, vp, lp, LabelKind.TRUE, holdout=True))
    ds = Dataset("probe", tuple(cases))
    save_dataset(ds, out / "manifest.json")
    return ds


def count_components(mask: np.ndarray) -> int:
    _, n = ndimage.label(mask)
    return int(n)


def desk_spec(seed: int = 0, **overrides) -> PhantomSpec:
    """Reduced phantom used for CPU-scale runs and the acceptance suite."""
    kw = dict(grid=(16, 64, 64), spacing=(1.5, 1.0, 1.0), vs_radius_mm=(4.0, 7.0), cochlea_radius_mm=(2.0, 3.0), seed=seed)
    kw.update(overrides)
    return PhantomSpec(**kw)
