"""Prediction-map, importance-map and region-affinity distillation losses.

Teacher inputs are always detached before use, so gradients of every loss
flow into the student side only.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .nets import FeatureTaps, TapPairing
from .tensor import ShapeError, Tensor

NORM_EPS = 1e-12
DICE_EPS = 1e-6


class ConfigError(ValueError):
    """Incompatible loss configuration (e.g. non-integer rescale ratio)."""


class DataError(ValueError):
    """Label data inconsistent with the configured number of classes."""


@dataclass(frozen=True)
class DistillWeights:
    alpha: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.9

    def __post_init__(self):
        for name in ("alpha", "beta1", "beta2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


# -- prediction maps -------------------------------------------------------------


def pmd_loss(student_logits: Tensor, teacher_logits: Tensor, direction: str = "s_to_t",
             temperature: float = 1.0) -> Tensor:
    """Per-pixel KL divergence between class distributions, averaged over N*H*W.

    ``s_to_t`` evaluates KL(p_s || p_t); ``t_to_s`` evaluates KL(p_t || p_s).
    """
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}")
    if student_logits.shape[1] < 2:
        raise ShapeError("need at least 2 classes")
    teacher = teacher_logits.detach()
    if temperature != 1.0:
        student_logits = student_logits * (1.0 / temperature)
        teacher = teacher * (1.0 / temperature)
    log_s = T.log_softmax(student_logits, axis=1)
    log_t = T.log_softmax(teacher, axis=1)
    if direction == "s_to_t":
        kl = (T.exp(log_s) * (log_s - log_t)).sum(axis=1)
    elif direction == "t_to_s":
        kl = (T.exp(log_t) * (log_t - log_s)).sum(axis=1)
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    return kl.mean()


# -- importance maps ---------------------------------------------------------------


def _scale_factor(src: int, dst: int) -> Tuple[str, int]:
    if src == dst:
        return "same", 1
    if src < dst and dst % src == 0:
        return "up", dst // src
    if src > dst and src % dst == 0:
        return "down", src // dst
    raise ConfigError(f"extent {src} cannot be rescaled to {dst} by an integer factor")


def rescale_to_match(feat: Tensor, target_hw: Sequence[int]) -> Tensor:
    """Nearest-upsample when smaller, average-pool when larger, identity when equal."""
    (mode_h, kh), (mode_w, kw) = (_scale_factor(s, d) for s, d in zip(feat.shape[-2:], target_hw))
    if mode_h != mode_w or kh != kw:
        raise ConfigError(f"cannot rescale {feat.shape[-2:]} to {tuple(target_hw)} by one integer factor")
    if mode_h == "same":
        return feat
    if mode_h == "up":
        return T.upsample_nearest(feat, kh)
    return T.avg_pool2d(feat, kh)


def importance_map(feat: Tensor, exponent: float = 2.0) -> Tensor:
    """Channel sum of ``|activation| ** exponent``; [N,C,h,w] -> [N,h,w]."""
    if exponent == 2:
        powered = feat * feat
    else:
        powered = T.power(T.tabs(feat), exponent)
    return powered.sum(axis=-3)


def _normalized_maps(feat: Tensor, exponent: float) -> Tensor:
    m = importance_map(feat, exponent)
    flat = m.reshape(m.shape[0], -1)
    norm = T.sqrt((flat * flat).sum(axis=1, keepdims=True))
    return flat / (norm + NORM_EPS)


def imd_loss(pairing: TapPairing, student_taps: FeatureTaps, teacher_taps: FeatureTaps,
             exponent: float = 2.0) -> Tensor:
    total = None
    for s_name, t_name in pairing:
        e_t = teacher_taps[t_name].detach()
        e_s = rescale_to_match(student_taps[s_name], e_t.shape[-2:])
        diff = _normalized_maps(e_s, exponent) - _normalized_maps(e_t, exponent)
        term = T.tabs(diff).sum(axis=1).mean()
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


# -- region affinity ---------------------------------------------------------------


@dataclass
class ResizedOneHotMask:
    masks: np.ndarray        # [c, h, w] of {0, 1}
    pixel_counts: np.ndarray  # [c]


@dataclass
class RegionContrast:
    """Cosine similarities for every class pair ``i < j``.

    ``values[k]`` is ``None`` when pair ``k`` is absent (a region is empty).
    """

    pairs: List[Tuple[int, int]]
    values: List[Optional[Tensor]]
    present: List[bool]
    form: str = "scalar"

    @property
    def n(self) -> int:
        return sum(self.present)

    def present_values(self) -> List[Tensor]:
        return [v for v in self.values if v is not None]

    def value(self) -> Optional[Tensor]:
        """Mean over present pairs (scalar form) or the stacked per-pair vector."""
        vals = self.present_values()
        if not vals:
            return None
        if self.form == "scalar":
            return T.stack(vals).mean()
        return T.stack(vals)


def _check_mask_ids(mask: np.ndarray, num_classes: int) -> None:
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise DataError(f"mask class ids must lie in [0, {num_classes}), "
                        f"found range [{mask.min()}, {mask.max()}]")


def resize_one_hot_mask(mask, num_classes: int, target_hw: Sequence[int]) -> ResizedOneHotMask:
    """Top-left nearest-neighbour downsample, then one-hot expansion."""
    mask = np.asarray(mask)
    _check_mask_ids(mask, num_classes)
    (H, W), (h, w) = mask.shape, tuple(target_hw)
    if h > H or w > W or H % h or W % w:
        raise ConfigError(f"mask {H}x{W} cannot be resized to {h}x{w} by an integer factor")
    small = mask[::H // h, ::W // w]
    onehot = (small[None, :, :] == np.arange(num_classes)[:, None, None]).astype(np.float64)
    return ResizedOneHotMask(onehot, onehot.sum(axis=(1, 2)))


def region_vectors(feat: Tensor, onehot: ResizedOneHotMask) -> List[Tuple[int, Optional[Tensor], bool]]:
    """Masked mean feature vector per class; ``feat`` is [C, h, w]."""
    c_feat, h, w = feat.shape
    if onehot.masks.shape[1:] != (h, w):
        raise ShapeError(f"mask extents {onehot.masks.shape[1:]} differ from features {(h, w)}")
    counts = onehot.pixel_counts
    weights = onehot.masks.reshape(len(counts), -1).T / np.maximum(counts, 1.0)
    means = feat.reshape(c_feat, h * w) @ Tensor(weights)  # [C, classes]
    out = []
    for i, n_i in enumerate(counts):
        present = bool(n_i > 0)
        out.append((i, means[:, i] if present else None, present))
    return out


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    na = T.sqrt((a * a).sum())
    nb = T.sqrt((b * b).sum())
    if na.item() == 0.0 or nb.item() == 0.0:
        return Tensor(0.0)
    return (a * b).sum() / (na * nb)


def region_contrast(regions, form: str = "scalar") -> RegionContrast:
    if form not in ("scalar", "vector"):
        raise ValueError(f"unknown contrast form {form!r}")
    if len(regions) < 2:
        raise ValueError("region contrast needs at least 2 classes")
    pairs, values, present = [], [], []
    for (i, r_i, p_i), (j, r_j, p_j) in itertools.combinations(regions, 2):
        pairs.append((i, j))
        ok = p_i and p_j
        present.append(ok)
        values.append(_cosine(r_i, r_j) if ok else None)
    return RegionContrast(pairs, values, present, form)


def _norm_p(d: Tensor, p: int) -> Tensor:
    if p == 1:
        return T.tabs(d).sum()
    if p == 2:
        return T.sqrt((d * d).sum())
    raise ValueError(f"norm_p must be 1 or 2, got {p}")


def rad_loss(pairing: TapPairing, student_taps: FeatureTaps, teacher_taps: FeatureTaps,
             masks, num_classes: int, norm_p: int = 2, form: str = "scalar") -> Tensor:
    """Sum over tap pairs of ||V_s - V_t||_p, averaged over batch items.

    Student features are rescaled to the teacher tap extent so both sides
    share one resized mask; items without any present class pair add 0.
    """
    masks = np.asarray(masks)
    _check_mask_ids(masks, num_classes)
    total = None
    for s_name, t_name in pairing:
        e_t = teacher_taps[t_name].detach()
        e_s = rescale_to_match(student_taps[s_name], e_t.shape[-2:])
        n_items = e_s.shape[0]
        if masks.shape[0] != n_items:
            raise ShapeError(f"{masks.shape[0]} masks for a batch of {n_items}")
        terms = []
        for n in range(n_items):
            onehot = resize_one_hot_mask(masks[n], num_classes, e_t.shape[-2:])
            v_s = region_contrast(region_vectors(e_s[n], onehot), form).value()
            v_t = region_contrast(region_vectors(e_t[n], onehot), form).value()
            if v_s is None:
                continue
            terms.append(_norm_p(v_s - v_t, norm_p))
        term = T.stack(terms).sum() * (1.0 / n_items) if terms else Tensor(0.0)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


# -- segmentation and total ------------------------------------------------------------


def one_hot(mask, num_classes: int) -> np.ndarray:
    """[N, H, W] ids -> [N, C, H, W] float one-hot."""
    mask = np.asarray(mask)
    _check_mask_ids(mask, num_classes)
    return (mask[:, None] == np.arange(num_classes)[None, :, None, None]).astype(np.float64)


def seg_loss(logits: Tensor, mask, kind: str = "cross_entropy") -> Tensor:
    n_classes = logits.shape[1]
    g = one_hot(mask, n_classes)
    if g.shape != logits.shape:
        raise ShapeError(f"mask shape {np.shape(mask)} does not match logits {logits.shape}")
    if kind == "cross_entropy":
        return -(T.log_softmax(logits, axis=1) * Tensor(g)).sum(axis=1).mean()
    if kind == "soft_dice":
        p = T.channel_softmax(logits, axis=1)
        inter = (p * Tensor(g)).sum(axis=(0, 2, 3))[1:]
        p_sum = p.sum(axis=(0, 2, 3))[1:]
        g_sum = Tensor(g.sum(axis=(0, 2, 3))[1:])
        dice = (inter * 2.0 + DICE_EPS) / (p_sum + g_sum + DICE_EPS)
        return 1.0 - dice.mean()
    raise ValueError(f"unknown segmentation loss {kind!r}")


def total_loss(seg: Tensor, pm, im, ra, w: DistillWeights = DistillWeights()) -> Tensor:
    """seg + alpha*pm + beta1*im + beta2*ra; zero-weighted terms are skipped entirely."""
    out = seg
    for weight, term in ((w.alpha, pm), (w.beta1, im), (w.beta2, ra)):
        if weight != 0 and term is not None:
            out = out + T.as_tensor(term) * weight
    return out


@dataclass
class LossTerms:
    seg: Tensor
    pm: Optional[Tensor]
    im: Optional[Tensor]
    ra: Optional[Tensor]
    total: Tensor


def emkd_loss(student_logits: Tensor, student_taps: FeatureTaps, masks,
              teacher_logits: Optional[Tensor] = None, teacher_taps: Optional[FeatureTaps] = None,
              pairing: Optional[TapPairing] = None, weights: DistillWeights = DistillWeights(),
              seg_kind: str = "cross_entropy", direction: str = "s_to_t", norm_p: int = 2,
              form: str = "scalar", exponent: float = 2.0, temperature: float = 1.0) -> LossTerms:
    """Evaluate the full objective; terms whose weight is zero are not computed."""
    seg = seg_loss(student_logits, masks, seg_kind)
    pm = im = ra = None
    if weights.alpha:
        pm = pmd_loss(student_logits, teacher_logits, direction, temperature)
    if weights.beta1:
        im = imd_loss(pairing, student_taps, teacher_taps, exponent)
    if weights.beta2:
        ra = rad_loss(pairing, student_taps, teacher_taps, masks, student_logits.shape[1], norm_p, form)
    return LossTerms(seg, pm, im, ra, total_loss(seg, pm, im, ra, weights))
