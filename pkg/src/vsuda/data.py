"""Volume and label containers, NIfTI IO, manifests and array plumbing.

Arrays are held in (z, y, x) order. NIfTI files store (i, j, k) = (x, y, z),
so loading transposes the voxel array and reverses the header zooms; saving
does the inverse. The 4x4 affine is carried through untouched except where
resampling changes the grid.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple

import nibabel as nib
import numpy as np
from scipy import ndimage

CLASS_NAMES = {0: "background", 1: "VS", 2: "cochlea"}
FOREGROUND_CLASSES = (1, 2)
N_CLASSES = 3

Spacing = Tuple[float, float, float]


class DataError(Exception):
    """Raised for unreadable, malformed or inconsistent input data."""


def _check_spacing(spacing: Sequence[float]) -> Spacing:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise DataError(f"spacing must be three positive numbers, got {spacing!r}")
    return sp  # type: ignore[return-value]


def default_affine(spacing: Sequence[float]) -> np.ndarray:
    """Diagonal affine for (x, y, z) world axes given (z, y, x) spacing."""
    sz, sy, sx = spacing
    return np.diag([sx, sy, sz, 1.0])


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = None
    case_id: str = ""

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"volume {self.case_id!r}: expected 3 axes, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError(f"volume {self.case_id!r} contains non-finite intensities")
        data.flags.writeable = False
        spacing = _check_spacing(self.spacing)
        affine = default_affine(spacing) if self.affine is None else np.array(self.affine, dtype=np.float64)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "Volume":
        return replace(self, data=data)


@dataclass(frozen=True, eq=False)
class LabelMap:
    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = None
    case_id: str = ""

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise DataError(f"label map {self.case_id!r}: expected 3 axes, got shape {raw.shape}")
        if np.issubdtype(raw.dtype, np.floating):
            if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
                raise DataError(f"label map {self.case_id!r} has non-integer values")
        bad = ~np.isin(raw, list(CLASS_NAMES))
        if bad.any():
            raise DataError(
                f"label map {self.case_id!r} has values outside {{0,1,2}}: {np.unique(raw[bad])[:5]}"
            )
        data = raw.astype(np.uint8)
        data.flags.writeable = False
        spacing = _check_spacing(self.spacing)
        affine = default_affine(spacing) if self.affine is None else np.array(self.affine, dtype=np.float64)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "LabelMap":
        return replace(self, data=data)


def check_aligned(volume: Volume, labels: LabelMap) -> None:
    if volume.shape != labels.shape:
        raise DataError(
            f"case {volume.case_id!r}: label shape {labels.shape} != volume shape {volume.shape}"
        )


# --------------------------------------------------------------------------- IO


def _strip_ext(path: Path) -> str:
    name = path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return path.stem


def _read_nifti(path: str | os.PathLike) -> Tuple[np.ndarray, Spacing, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    try:
        img = nib.load(str(path))
        arr = np.asanyarray(img.dataobj)
        zooms = img.header.get_zooms()
    except Exception as exc:  # nibabel raises a zoo of types
        raise DataError(f"{path}: unreadable NIfTI ({exc})") from exc
    if arr.ndim != 3:
        raise DataError(f"{path}: expected 3 axes, got {arr.ndim} (shape {arr.shape})")
    spacing = tuple(float(z) for z in zooms[:3][::-1])
    return np.transpose(arr, (2, 1, 0)), spacing, np.array(img.affine, dtype=np.float64)  # type: ignore[return-value]


def _write_nifti(arr: np.ndarray, spacing: Spacing, affine: np.ndarray, path: str | os.PathLike) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise DataError(f"{path}: parent directory does not exist")
    img = nib.Nifti1Image(np.transpose(arr, (2, 1, 0)), affine)
    img.header.set_zooms(tuple(spacing[::-1]))
    # keep the xform codes stable so the file bytes are reproducible
    img.header.set_qform(affine, code=1)
    img.header.set_sform(affine, code=1)
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise DataError(f"{path}: cannot write ({exc})") from exc


def load_volume(path: str | os.PathLike, case_id: Optional[str] = None) -> Volume:
    arr, spacing, affine = _read_nifti(path)
    cid = case_id if case_id is not None else _strip_ext(Path(path))
    try:
        return Volume(arr.astype(np.float32), spacing, affine, cid)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def save_volume(volume: Volume, path: str | os.PathLike) -> None:
    _write_nifti(volume.data.astype(np.float32), volume.spacing, volume.affine, path)


def load_labelmap(path: str | os.PathLike, case_id: Optional[str] = None) -> LabelMap:
    arr, spacing, affine = _read_nifti(path)
    cid = case_id if case_id is not None else _strip_ext(Path(path))
    try:
        return LabelMap(arr, spacing, affine, cid)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def save_labelmap(labels: LabelMap, path: str | os.PathLike) -> None:
    _write_nifti(labels.data.astype(np.uint8), labels.spacing, labels.affine, path)


# ------------------------------------------------------------------- manifests


class Domain(str, Enum):
    CET1 = "ceT1"
    HRT2_REAL = "hrT2_real"
    HRT2_SYNTH = "hrT2_synth"


class LabelKind(str, Enum):
    TRUE = "true"
    PSEUDO = "pseudo"
    NONE = "none"


@dataclass(frozen=True)
class CaseManifest:
    case_id: str
    domain: Domain
    volume_path: Path
    label_path: Optional[Path] = None
    label_kind: LabelKind = LabelKind.NONE
    fold: Optional[int] = None
    # ground truth kept aside for scoring; never fed to training
    holdout: bool = False

    def __post_init__(self):
        object.__setattr__(self, "domain", Domain(self.domain))
        object.__setattr__(self, "label_kind", LabelKind(self.label_kind))
        object.__setattr__(self, "volume_path", Path(self.volume_path))
        if self.label_path is not None:
            object.__setattr__(self, "label_path", Path(self.label_path))
        if (self.label_path is None) != (self.label_kind is LabelKind.NONE):
            raise DataError(f"case {self.case_id!r}: label_path must be given iff label_kind != none")
        if self.domain is Domain.HRT2_REAL and self.label_kind is LabelKind.TRUE and not self.holdout:
            raise DataError(f"case {self.case_id!r}: real hrT2 cases cannot carry true labels")

    @property
    def labeled(self) -> bool:
        return self.label_kind is not LabelKind.NONE

    def load_volume(self) -> Volume:
        return load_volume(self.volume_path, self.case_id)

    def load_labels(self) -> LabelMap:
        if self.label_path is None:
            raise DataError(f"case {self.case_id!r} has no labels")
        return load_labelmap(self.label_path, self.case_id)


@dataclass(frozen=True)
class Dataset:
    name: str
    cases: Tuple[CaseManifest, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "cases", tuple(self.cases))
        ids = [c.case_id for c in self.cases]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise DataError(f"dataset {self.name!r}: duplicate case ids {sorted(dup)}")

    def __len__(self) -> int:
        return len(self.cases)

    def __iter__(self) -> Iterator[CaseManifest]:
        return iter(self.cases)

    def __getitem__(self, case_id: str) -> CaseManifest:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    @property
    def case_ids(self) -> list[str]:
        return [c.case_id for c in self.cases]

    def subset(self, case_ids: Sequence[str], name: Optional[str] = None) -> "Dataset":
        wanted = set(case_ids)
        return Dataset(name or self.name, tuple(c for c in self.cases if c.case_id in wanted))


MANIFEST_VERSION = 1


def save_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    """Write a JSON manifest; case paths are stored relative to the manifest."""
    path = Path(path)
    root = path.parent.resolve()

    def rel(p: Optional[Path]) -> Optional[str]:
        if p is None:
            return None
        return os.path.relpath(Path(p).resolve(), root)

    doc = {
        "format_version": MANIFEST_VERSION,
        "name": dataset.name,
        "cases": [
            {
                "case_id": c.case_id,
                "domain": c.domain.value,
                "volume_path": rel(c.volume_path),
                "label_path": rel(c.label_path),
                "label_kind": c.label_kind.value,
                "fold": c.fold,
                "holdout": c.holdout,
            }
            for c in dataset.cases
        ],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")


def load_dataset(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"{path}: no such manifest") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid manifest JSON ({exc})") from exc
    root = path.parent
    cases = []
    for i, rec in enumerate(doc.get("cases", [])):
        try:
            cases.append(
                CaseManifest(
                    case_id=rec["case_id"],
                    domain=rec["domain"],
                    volume_path=root / rec["volume_path"],
                    label_path=None if rec.get("label_path") is None else root / rec["label_path"],
                    label_kind=rec.get("label_kind", "none"),
                    fold=rec.get("fold"),
                    holdout=bool(rec.get("holdout", False)),
                )
            )
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: case #{i}: {exc}") from exc
    return Dataset(doc.get("name", path.stem), tuple(cases))


# ---------------------------------------------------------------- array ops


def minmax_normalize(volume: Volume, lo: float = 0.0, hi: float = 1.0) -> Volume:
    """Affine map of the intensity range onto [lo, hi].

    A constant volume maps to the midpoint (lo + hi) / 2.
    """
    if not lo < hi:
        raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
    x = volume.data.astype(np.float64)
    vmin, vmax = float(x.min()), float(x.max())
    if vmax == vmin:
        out = np.full(x.shape, 0.5 * (lo + hi))
    else:
        out = (x - vmin) / (vmax - vmin) * (hi - lo) + lo
    return volume.with_data(out.astype(np.float32))


def _resample_grid(shape, spacing, target_spacing):
    target = _check_spacing(target_spacing)
    out_shape = tuple(max(1, int(round(n * s / t))) for n, s, t in zip(shape, spacing, target))
    # voxel-centre alignment: output voxel i covers the same physical span
    coords = [
        (np.arange(m) + 0.5) * (t / s) - 0.5
        for m, s, t in zip(out_shape, spacing, target)
    ]
    return target, out_shape, coords


def _resampled_affine(affine, spacing, target):
    # i_in = (i_out + 0.5) * t/s - 0.5 along each array axis, written in nifti (x, y, z) order
    scale = np.array([t / s for s, t in zip(spacing, target)])[::-1]
    shift = 0.5 * scale - 0.5
    m = np.eye(4)
    m[:3, :3] = np.diag(scale)
    m[:3, 3] = shift
    return affine @ m


def resample(volume: Volume, target_spacing: Sequence[float]) -> Volume:
    """Trilinear resampling to a new voxel spacing, clamping at the edges."""
    target, out_shape, coords = _resample_grid(volume.shape, volume.spacing, target_spacing)
    if out_shape == volume.shape and np.allclose(target, volume.spacing):
        return volume
    grid = np.meshgrid(*coords, indexing="ij")
    out = ndimage.map_coordinates(volume.data.astype(np.float64), grid, order=1, mode="nearest")
    return Volume(out.astype(np.float32), target, _resampled_affine(volume.affine, volume.spacing, target), volume.case_id)


def resample_labels(labels: LabelMap, target_spacing: Sequence[float]) -> LabelMap:
    """Nearest-neighbour resampling of a label map."""
    target, out_shape, coords = _resample_grid(labels.shape, labels.spacing, target_spacing)
    if out_shape == labels.shape and np.allclose(target, labels.spacing):
        return labels
    idx = [np.clip(np.floor(c + 0.5).astype(int), 0, n - 1) for c, n in zip(coords, labels.shape)]
    out = labels.data[np.ix_(*idx)]
    return LabelMap(out, target, _resampled_affine(labels.affine, labels.spacing, target), labels.case_id)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, (Volume, LabelMap)) else np.asarray(x)


def _patch_slices(shape, center, size):
    """Source and destination slices for a patch of `size` centred at `center`."""
    src, dst = [], []
    for n, c, s in zip(shape, center, size):
        if s < 1:
            raise ValueError(f"patch size must be >= 1, got {size}")
        start = int(c) - s // 2
        lo, hi = max(start, 0), min(start + s, n)
        if hi <= lo:
            src.append(slice(0, 0))
            dst.append(slice(0, 0))
        else:
            src.append(slice(lo, hi))
            dst.append(slice(lo - start, hi - start))
    return tuple(src), tuple(dst)


def extract_patch(array, center: Sequence[int], size: Sequence[int]) -> np.ndarray:
    """Patch of exactly `size` around `center`; out-of-bounds voxels are zero.

    Accepts a Volume, LabelMap or bare array. Leading non-spatial axes are
    kept (only the trailing len(size) axes are patched).
    """
    arr = _as_array(array)
    nd = len(size)
    lead = arr.shape[: arr.ndim - nd]
    src, dst = _patch_slices(arr.shape[-nd:], center, size)
    out = np.zeros(lead + tuple(size), dtype=arr.dtype)
    out[(Ellipsis,) + dst] = arr[(Ellipsis,) + src]
    return out


def paste_patch(canvas: np.ndarray, patch: np.ndarray, center: Sequence[int]) -> np.ndarray:
    """Write the in-bounds part of `patch` into `canvas` (in place) and return it."""
    nd = len(center)
    size = patch.shape[-nd:]
    src, dst = _patch_slices(canvas.shape[-nd:], center, size)
    canvas[(Ellipsis,) + src] = patch[(Ellipsis,) + dst]
    return canvas


def axial_slices(volume) -> list[np.ndarray]:
    arr = _as_array(volume)
    return [arr[k] for k in range(arr.shape[0])]


def restack(slices: Sequence[np.ndarray], like: Optional[Volume] = None):
    arr = np.stack(list(slices), axis=0)
    if like is None:
        return arr
    return like.with_data(arr)
