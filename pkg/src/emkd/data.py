"""Synthetic CT-like slices, HU windowing, D4 augmentation, folds and on-disk layout."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from . import config, io
from .tensor import Tensor


class SpecError(ValueError):
    """Dataset spec is inconsistent or its geometry infeasible."""


@dataclass(frozen=True)
class WindowSpec:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise SpecError(f"window needs lo < hi, got ({self.lo}, {self.hi})")


LIVER_WINDOW = WindowSpec(-40.0, 160.0)
KIDNEY_WINDOW = WindowSpec(-200.0, 300.0)


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 64
    num_cases: int = 40
    slices_min: int = 4
    slices_max: int = 8
    num_classes: int = 2
    # binary mode only: which structure is labelled 1 ("tumor" or "organ")
    binary_target: str = "tumor"
    background_mean: float = -100.0
    background_std: float = 30.0
    organ_mean: float = 80.0
    organ_std: float = 20.0
    tumor_mean: float = 30.0
    tumor_std: float = 20.0
    organ_radius_min: float = 16.0
    organ_radius_max: float = 24.0
    tumor_count_min: int = 1
    tumor_count_max: int = 3
    tumor_radius_min: float = 2.5
    tumor_radius_max: float = 6.0
    noise_std: float = 10.0
    window_lo: float = -40.0
    window_hi: float = 160.0
    max_depth: int = 3
    seed: int = 0

    def __post_init__(self):
        size = self.image_size
        if size < 1 or size & (size - 1):
            raise SpecError(f"image_size must be a power of two, got {size}")
        if size % 2 ** self.max_depth:
            raise SpecError(f"image_size {size} not divisible by 2^{self.max_depth}")
        if self.num_classes not in (2, 3):
            raise SpecError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if self.binary_target not in ("tumor", "organ"):
            raise SpecError(f"binary_target must be 'tumor' or 'organ', got {self.binary_target!r}")
        if not 1 <= self.slices_min <= self.slices_max:
            raise SpecError("need 1 <= slices_min <= slices_max")
        if not 0 <= self.tumor_count_min <= self.tumor_count_max:
            raise SpecError("need 0 <= tumor_count_min <= tumor_count_max")
        if not 0 < self.tumor_radius_min <= self.tumor_radius_max:
            raise SpecError("need 0 < tumor_radius_min <= tumor_radius_max")
        if not 0 < self.organ_radius_min <= self.organ_radius_max:
            raise SpecError("need 0 < organ_radius_min <= organ_radius_max")
        if self.tumor_radius_max >= self.organ_radius_min:
            raise SpecError(f"tumor radius {self.tumor_radius_max} must stay below "
                            f"organ radius {self.organ_radius_min}")
        if 2 * self.organ_radius_max + 8 > size:
            raise SpecError(f"organ radius {self.organ_radius_max} does not fit a {size}px image")
        if self.num_cases < 1:
            raise SpecError("num_cases must be >= 1")

    @property
    def window(self) -> WindowSpec:
        return WindowSpec(self.window_lo, self.window_hi)


def hu_window(image, w: WindowSpec = LIVER_WINDOW):
    """Clamp to [lo, hi] and map affinely onto [0, 1]."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    out = (np.clip(arr, w.lo, w.hi) - w.lo) / (w.hi - w.lo)
    return Tensor(out) if isinstance(image, Tensor) else out


def _ellipse(yy, xx, cy, cx, ry, rx, theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def synth_case(spec: DatasetSpec, case_index: int) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Pseudo-HU slices and label masks of one case, a pure function of (seed, case_index)."""
    rng = np.random.default_rng([spec.seed, case_index])
    size = spec.image_size
    n_slices = int(rng.integers(spec.slices_min, spec.slices_max + 1))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    cy, cx = size / 2 + rng.uniform(-3, 3, size=2)
    ry, rx = rng.uniform(spec.organ_radius_min, spec.organ_radius_max, size=2)
    theta = rng.uniform(0, np.pi)
    mid = (n_slices - 1) / 2
    # organ cross-section shrinks towards the ends of the stack
    scales = [1.0 - 0.25 * ((k - mid) / (mid + 1)) ** 2 for k in range(n_slices)]

    tumors = []
    for _ in range(int(rng.integers(spec.tumor_count_min, spec.tumor_count_max + 1))):
        r = rng.uniform(spec.tumor_radius_min, spec.tumor_radius_max)
        zc = int(rng.integers(0, n_slices))
        reach = 0.7 * scales[zc]
        while True:
            u, v = rng.uniform(-1, 1, size=2)
            if u * u + v * v <= 1.0:
                break
        c, s = np.cos(theta), np.sin(theta)
        px, py = u * rx * reach, v * ry * reach
        tx, ty = cx + px * c - py * s, cy + px * s + py * c
        rz = r / 3.0
        tumors.append((ty, tx, r, zc, rz))

    images, masks = [], []
    for k in range(n_slices):
        organ = _ellipse(yy, xx, cy, cx, ry * scales[k], rx * scales[k], theta)
        tumor = np.zeros_like(organ)
        for ty, tx, r, zc, rz in tumors:
            dz = abs(k - zc)
            if dz > rz:
                continue
            rk = r * np.sqrt(1.0 - (dz / (rz + 1.0)) ** 2)
            tumor |= (yy - ty) ** 2 + (xx - tx) ** 2 <= rk * rk
        tumor &= organ

        img = rng.normal(spec.background_mean, spec.background_std, size=(size, size))
        img[organ] = rng.normal(spec.organ_mean, spec.organ_std, size=int(organ.sum()))
        img[tumor] = rng.normal(spec.tumor_mean, spec.tumor_std, size=int(tumor.sum()))
        img += rng.normal(0.0, spec.noise_std, size=img.shape)

        label = np.zeros((size, size), dtype=np.int64)
        if spec.num_classes == 3:
            label[organ] = 1
            label[tumor] = 2
        elif spec.binary_target == "tumor":
            label[tumor] = 1
        else:
            label[organ] = 1
        images.append(img)
        masks.append(label)
    return images, masks


# -- augmentation ------------------------------------------------------------------

D4_ORDER = 8


def apply_d4(arr: np.ndarray, element: int) -> np.ndarray:
    """Element ``e`` of the dihedral group: rotate by ``e % 4`` quarter turns, then
    transpose-flip when ``e >= 4``.  Acts on the last two axes."""
    out = np.rot90(arr, element % 4, axes=(-2, -1))
    if element >= 4:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


def augment(image, mask, rng: np.random.Generator):
    if np.shape(mask)[-1] != np.shape(mask)[-2]:
        raise ValueError("augment expects square slices")
    element = int(rng.integers(D4_ORDER))
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    out = apply_d4(img, element)
    return (Tensor(out) if isinstance(image, Tensor) else out), apply_d4(np.asarray(mask), element)


# -- folds -----------------------------------------------------------------------------


def make_folds(case_ids: Sequence, k: int, seed: int) -> List[Tuple[list, list]]:
    ids = list(case_ids)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of cases ({len(ids)})")
    order = np.random.default_rng(seed).permutation(len(ids))
    parts = np.array_split(order, k)
    folds = []
    for part in parts:
        test = set(part.tolist())
        folds.append(([ids[i] for i in order if i not in test], [ids[i] for i in part]))
    return folds


# -- on-disk dataset -------------------------------------------------------------------


@dataclass
class Case:
    case_id: str
    images: np.ndarray  # [S, H, W] pseudo-HU
    masks: np.ndarray   # [S, H, W] class ids


@dataclass
class Dataset:
    spec: DatasetSpec
    cases: List[Case]

    def case_ids(self) -> List[str]:
        return [c.case_id for c in self.cases]

    def by_id(self, ids: Sequence[str]) -> List[Case]:
        lookup = {c.case_id: c for c in self.cases}
        return [lookup[i] for i in ids]


def generate(spec: DatasetSpec) -> Dataset:
    cases = []
    for idx in range(spec.num_cases):
        images, masks = synth_case(spec, idx)
        cases.append(Case(f"{idx:03d}", np.stack(images), np.stack(masks)))
    return Dataset(spec, cases)


def write_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.dump(ds.spec, out / "dataset.cfg")
    for case in ds.cases:
        cdir = out / f"case_{case.case_id}"
        cdir.mkdir(exist_ok=True)
        for k, (img, msk) in enumerate(zip(case.images, case.masks)):
            io.write_tensor(cdir / f"slice_{k}.img", img)
            io.write_mask(cdir / f"slice_{k}.msk", msk, ds.spec.num_classes)


def read_dataset(path) -> Dataset:
    root = Path(path)
    cfg_path = root / "dataset.cfg"
    if not cfg_path.is_file():
        raise FileNotFoundError(f"no dataset.cfg in {root}")
    spec = config.load(DatasetSpec, cfg_path)
    cases = []
    for cdir in sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("case_")):
        n = len([f for f in os.listdir(cdir) if f.endswith(".img")])
        images = [io.read_tensor(cdir / f"slice_{k}.img").data for k in range(n)]
        masks = [io.read_mask(cdir / f"slice_{k}.msk")[0] for k in range(n)]
        cases.append(Case(cdir.name[len("case_"):], np.stack(images), np.stack(masks)))
    if not cases:
        raise FileNotFoundError(f"no case_* directories in {root}")
    return Dataset(spec, cases)
