"""Per-case overlap metrics and ``a +/- b`` range aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Union

import numpy as np


class MetricError(ValueError):
    """A metric is undefined for the given volumes."""


@dataclass
class CaseVolume:
    """Binary masks of one class for every slice of one case, in slice order."""

    slices: List[np.ndarray]
    case_id: str = ""

    def __post_init__(self):
        shapes = {np.shape(s) for s in self.slices}
        if len(shapes) > 1:
            raise ValueError(f"case {self.case_id!r}: slices differ in shape {sorted(shapes)}")

    def voxels(self) -> np.ndarray:
        return np.stack([np.asarray(s, dtype=bool) for s in self.slices])


VolumeLike = Union[CaseVolume, np.ndarray]


def _counts(P: VolumeLike, G: VolumeLike):
    p = P.voxels() if isinstance(P, CaseVolume) else np.asarray(P, dtype=bool)
    g = G.voxels() if isinstance(G, CaseVolume) else np.asarray(G, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"volume shapes differ: {p.shape} vs {g.shape}")
    inter = int(np.count_nonzero(p & g))
    return int(np.count_nonzero(p)), int(np.count_nonzero(g)), inter


def dice(P: VolumeLike, G: VolumeLike) -> float:
    """2|P&G| / (|P|+|G|); 1.0 when both volumes are empty."""
    np_, ng, inter = _counts(P, G)
    if np_ + ng == 0:
        return 1.0
    return 2.0 * inter / (np_ + ng)


def voe(P: VolumeLike, G: VolumeLike, variant: str = "as_printed") -> float:
    """Volume overlap error.

    ``as_printed`` is ``1 - |P&G| / (|P|+|G|)`` (0.5 at perfect overlap);
    ``union`` is the usual ``1 - |P&G| / |P or G|``.
    """
    np_, ng, inter = _counts(P, G)
    if variant == "as_printed":
        return 0.5 if np_ + ng == 0 else 1.0 - inter / (np_ + ng)
    if variant == "union":
        union = np_ + ng - inter
        return 0.0 if union == 0 else 1.0 - inter / union
    raise ValueError(f"unknown VOE variant {variant!r}")


def rvd(P: VolumeLike, G: VolumeLike) -> float:
    """Signed relative volume difference (|P| - |G|) / |G|."""
    np_, ng, _ = _counts(P, G)
    if ng == 0:
        raise MetricError("RVD is undefined for an empty reference volume")
    return (np_ - ng) / ng


@dataclass(frozen=True)
class MetricRange:
    """``center +/- half_width``; ``lower``/``upper`` keep the observed extremes."""

    center: float
    half_width: float
    lower: float
    upper: float

    def __str__(self) -> str:
        return f"{self.center:.4f}±{self.half_width:.4f}"

    def exact(self) -> str:
        """Round-trippable text form used in CSV files."""
        return f"{self.center!r}±{self.half_width!r}"

    @classmethod
    def parse(cls, text: str) -> "MetricRange":
        a, b = (float(x) for x in text.split("±"))
        return cls(a, b, a - b, a + b)


def aggregate_range(scores: Iterable[float]) -> MetricRange:
    values = [float(s) for s in scores]
    if not values:
        raise ValueError("aggregate_range needs at least one score")
    hi, lo = max(values), min(values)
    return MetricRange((hi + lo) / 2.0, (hi - lo) / 2.0, lo, hi)


CSV_HEADER = ["case_id", "class", "dice", "voe", "voe_variant", "rvd"]


@dataclass
class CaseMetrics:
    case_id: str
    cls: int
    dice: float
    voe: float
    voe_variant: str
    rvd: float  # nan when undefined


def case_metrics(pred: np.ndarray, truth: np.ndarray, case_id: str, classes: Sequence[int],
                 voe_variant: str = "as_printed") -> List[CaseMetrics]:
    """Metrics for each foreground class of one case; ``pred``/``truth`` are [S, H, W] ids."""
    rows = []
    for c in classes:
        P, G = pred == c, truth == c
        try:
            r = rvd(P, G)
        except MetricError:
            r = math.nan
        rows.append(CaseMetrics(case_id, c, dice(P, G), voe(P, G, voe_variant), voe_variant, r))
    return rows


def summary_rows(rows: Sequence[CaseMetrics]) -> List[dict]:
    """One ``ALL(a±b)`` row per class; nan RVD values are left out of the range."""
    out = []
    for c in sorted({r.cls for r in rows}):
        sel = [r for r in rows if r.cls == c]
        rv = [r.rvd for r in sel if not math.isnan(r.rvd)]
        out.append({
            "case_id": "ALL(a±b)",
            "class": c,
            "dice": aggregate_range(r.dice for r in sel).exact(),
            "voe": aggregate_range(r.voe for r in sel).exact(),
            "voe_variant": sel[0].voe_variant,
            "rvd": aggregate_range(rv).exact() if rv else "nan",
        })
    return out


def write_metrics_csv(path, rows: Sequence[CaseMetrics]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_HEADER)
        writer.writeheader()
        for r in rows:
            writer.writerow({"case_id": r.case_id, "class": r.cls, "dice": repr(r.dice),
                             "voe": repr(r.voe), "voe_variant": r.voe_variant, "rvd": repr(r.rvd)})
        for s in summary_rows(rows):
            writer.writerow(s)
