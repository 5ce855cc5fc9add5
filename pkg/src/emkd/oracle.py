"""Slow loop-based reference implementations used to cross-check the main path.

Nothing here imports the tensor engine or the loss modules; inputs are plain
numpy arrays read element by element and arithmetic is done with ``math``.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


def ref_conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    n_, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n_, cout, ho, wo))
    for n in range(n_):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for ch in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                y = r * stride + i - padding
                                z = c * stride + j - padding
                                if 0 <= y < h and 0 <= z < w:
                                    acc += float(x[n, ch, y, z]) * float(kernel[o, ch, i, j])
                    out[n, o, r, c] = acc
    return out


def _planes(a: np.ndarray):
    lead = a.shape[:-2]
    return [idx for idx in np.ndindex(*lead)] if lead else [()]


def ref_avg_pool(a, k: int) -> np.ndarray:
    h, w = a.shape[-2:]
    out = np.zeros(a.shape[:-2] + (h // k, w // k))
    for idx in _planes(a):
        for r in range(h // k):
            for c in range(w // k):
                acc = 0.0
                for i in range(k):
                    for j in range(k):
                        acc += float(a[idx + (r * k + i, c * k + j)])
                out[idx + (r, c)] = acc / (k * k)
    return out


def ref_max_pool(a, k: int) -> np.ndarray:
    h, w = a.shape[-2:]
    out = np.zeros(a.shape[:-2] + (h // k, w // k))
    for idx in _planes(a):
        for r in range(h // k):
            for c in range(w // k):
                best = -math.inf
                for i in range(k):
                    for j in range(k):
                        best = max(best, float(a[idx + (r * k + i, c * k + j)]))
                out[idx + (r, c)] = best
    return out


def ref_upsample(a, k: int) -> np.ndarray:
    h, w = a.shape[-2:]
    out = np.zeros(a.shape[:-2] + (h * k, w * k))
    for idx in _planes(a):
        for r in range(h * k):
            for c in range(w * k):
                out[idx + (r, c)] = a[idx + (r // k, c // k)]
    return out


def ref_softmax(logits) -> np.ndarray:
    """Softmax over axis 1 of [N, C, H, W], one pixel at a time."""
    n_, c_, h, w = logits.shape
    out = np.zeros(logits.shape)
    for n in range(n_):
        for r in range(h):
            for c in range(w):
                zs = [float(logits[n, k, r, c]) for k in range(c_)]
                top = max(zs)
                es = [math.exp(z - top) for z in zs]
                total = sum(es)
                for k in range(c_):
                    out[n, k, r, c] = es[k] / total
    return out


def _rescale(feat, ht: int, wt: int) -> np.ndarray:
    hs = feat.shape[-2]
    if hs == ht:
        return np.array(feat, dtype=float)
    if hs < ht:
        return ref_upsample(feat, ht // hs)
    return ref_avg_pool(feat, hs // ht)


def ref_pmd(student_logits, teacher_logits, direction: str = "s_to_t") -> float:
    ps = ref_softmax(student_logits)
    pt = ref_softmax(teacher_logits)
    n_, c_, h, w = ps.shape
    total = 0.0
    for n in range(n_):
        for r in range(h):
            for c in range(w):
                for k in range(c_):
                    a, b = ps[n, k, r, c], pt[n, k, r, c]
                    if direction == "t_to_s":
                        a, b = b, a
                    total += a * (math.log(a) - math.log(b))
    return total / (n_ * h * w)


def ref_importance(feat, exponent: float = 2.0) -> np.ndarray:
    """[N, C, h, w] -> [N, h, w]."""
    n_, c_, h, w = feat.shape
    out = np.zeros((n_, h, w))
    for n in range(n_):
        for r in range(h):
            for c in range(w):
                out[n, r, c] = sum(abs(float(feat[n, k, r, c])) ** exponent for k in range(c_))
    return out


def ref_imd(student_feats: Sequence, teacher_feats: Sequence, exponent: float = 2.0) -> float:
    total = 0.0
    for es, et in zip(student_feats, teacher_feats):
        ms = ref_importance(_rescale(es, et.shape[2], et.shape[3]), exponent)
        mt = ref_importance(et, exponent)
        n_ = ms.shape[0]
        acc = 0.0
        for n in range(n_):
            a = [float(v) for v in ms[n].ravel()]
            b = [float(v) for v in mt[n].ravel()]
            na = math.sqrt(sum(v * v for v in a)) + 1e-12
            nb = math.sqrt(sum(v * v for v in b)) + 1e-12
            acc += sum(abs(u / na - v / nb) for u, v in zip(a, b))
        total += acc / n_
    return total


def ref_resize_mask(mask, h: int, w: int) -> np.ndarray:
    H, W = mask.shape
    out = np.zeros((h, w), dtype=int)
    for r in range(h):
        for c in range(w):
            out[r, c] = mask[r * (H // h), c * (W // w)]
    return out


def ref_region_means(feat, small_mask, num_classes: int) -> List[Optional[List[float]]]:
    """Masked mean feature vector per class for feat [C, h, w]; None when empty."""
    c_, h, w = feat.shape
    out = []
    for cls in range(num_classes):
        acc = [0.0] * c_
        count = 0
        for r in range(h):
            for c in range(w):
                if small_mask[r, c] == cls:
                    count += 1
                    for k in range(c_):
                        acc[k] += float(feat[k, r, c])
        out.append([v / count for v in acc] if count else None)
    return out


def ref_cosine(a: Sequence[float], b: Sequence[float]) -> float:
    na = math.sqrt(sum(v * v for v in a))
    nb = math.sqrt(sum(v * v for v in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(u * v for u, v in zip(a, b)) / (na * nb)


def ref_contrast(regions: List[Optional[List[float]]]) -> List[float]:
    vals = []
    for i in range(len(regions)):
        for j in range(i + 1, len(regions)):
            if regions[i] is not None and regions[j] is not None:
                vals.append(ref_cosine(regions[i], regions[j]))
    return vals


def ref_rad(student_feats: Sequence, teacher_feats: Sequence, masks, num_classes: int,
            norm_p: int = 2, form: str = "scalar") -> float:
    total = 0.0
    for es, et in zip(student_feats, teacher_feats):
        h, w = et.shape[2], et.shape[3]
        es = _rescale(es, h, w)
        n_ = es.shape[0]
        acc = 0.0
        for n in range(n_):
            small = ref_resize_mask(masks[n], h, w)
            vs = ref_contrast(ref_region_means(es[n], small, num_classes))
            vt = ref_contrast(ref_region_means(et[n], small, num_classes))
            if not vs:
                continue
            if form == "scalar":
                diffs = [sum(vs) / len(vs) - sum(vt) / len(vt)]
            else:
                diffs = [u - v for u, v in zip(vs, vt)]
            if norm_p == 1:
                acc += sum(abs(d) for d in diffs)
            else:
                acc += math.sqrt(sum(d * d for d in diffs))
        total += acc / n_
    return total


def ref_seg(logits, mask, kind: str = "cross_entropy", eps: float = 1e-6) -> float:
    p = ref_softmax(logits)
    n_, c_, h, w = p.shape
    if kind == "cross_entropy":
        total = 0.0
        for n in range(n_):
            for r in range(h):
                for c in range(w):
                    total -= math.log(p[n, int(mask[n, r, c]), r, c])
        return total / (n_ * h * w)
    scores = []
    for k in range(1, c_):
        inter = ps = gs = 0.0
        for n in range(n_):
            for r in range(h):
                for c in range(w):
                    g = 1.0 if mask[n, r, c] == k else 0.0
                    inter += p[n, k, r, c] * g
                    ps += p[n, k, r, c]
                    gs += g
        scores.append((2 * inter + eps) / (ps + gs + eps))
    return 1.0 - sum(scores) / len(scores)


def ref_losses(student_logits, teacher_logits, student_feats, teacher_feats, masks,
               weights: Tuple[float, float, float] = (0.1, 0.9, 0.9),
               options: Optional[Dict] = None) -> Tuple[float, float, float, float]:
    """Straight-line evaluation of all terms; returns (pm, im, ra, total)."""
    opts = dict(direction="s_to_t", norm_p=2, form="scalar", exponent=2.0, seg="cross_entropy")
    opts.update(options or {})
    num_classes = student_logits.shape[1]
    pm = ref_pmd(student_logits, teacher_logits, opts["direction"])
    im = ref_imd(student_feats, teacher_feats, opts["exponent"])
    ra = ref_rad(student_feats, teacher_feats, masks, num_classes, opts["norm_p"], opts["form"])
    seg = ref_seg(student_logits, masks, opts["seg"])
    alpha, beta1, beta2 = weights
    return pm, im, ra, seg + alpha * pm + beta1 * im + beta2 * ra


def ref_metrics(P, G) -> Tuple[float, float, float, Optional[float]]:
    """(dice, voe_printed, voe_union, rvd); rvd is None when |G| = 0."""
    p_count = g_count = inter = 0
    for a, b in zip(np.asarray(P).ravel(), np.asarray(G).ravel()):
        a, b = bool(a), bool(b)
        p_count += a
        g_count += b
        inter += a and b
    union = p_count + g_count - inter
    if p_count + g_count == 0:
        return 1.0, 0.5, 0.0, None
    dice = 2 * inter / (p_count + g_count)
    voe_printed = 1 - inter / (p_count + g_count)
    voe_union = 1 - inter / union
    rvd = (p_count - g_count) / g_count if g_count else None
    return dice, voe_printed, voe_union, rvd
