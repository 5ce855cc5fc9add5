"""Randomised gradient and reference-oracle checks behind ``emkd gradcheck``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import distill as K
from . import metrics as M
from . import oracle as O
from . import tensor as T
from .nets import FeatureTaps, TapPairing
from .tensor import Tensor

GRAD_TOL = 1e-4
GRAD_STEP = 1e-5
LOSS_TOL = 1e-9
METRIC_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    kind: str
    instances: int
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.kind:<6} {self.name:<22} n={self.instances:<5} "
                f"worst={self.worst:.3e} tol={self.tolerance:.0e}")


# -- random instances ------------------------------------------------------------------


def _mask_with_all_classes(rng, n: int, h: int, w: int, c: int) -> np.ndarray:
    """Random label maps in which every class keeps at least one 2x2-block top-left pixel."""
    masks = rng.integers(0, c, size=(n, h, w))
    for i in range(n):
        for cls in range(c):
            masks[i, 2 * cls % h, 0] = cls
    return masks


@dataclass
class DistillInstance:
    student_logits: np.ndarray
    teacher_logits: np.ndarray
    student_feats: List[np.ndarray]
    teacher_feats: List[np.ndarray]
    masks: np.ndarray
    num_classes: int

    def pairing(self) -> TapPairing:
        return TapPairing(tuple((f"s{i}", f"t{i}") for i in range(len(self.student_feats))))

    def student_taps(self, feats: Optional[List[Tensor]] = None) -> FeatureTaps:
        feats = feats or [Tensor(f) for f in self.student_feats]
        return FeatureTaps([(f"s{i}", f) for i, f in enumerate(feats)])

    def teacher_taps(self) -> FeatureTaps:
        return FeatureTaps([(f"t{i}", Tensor(f)) for i, f in enumerate(self.teacher_feats)])


def random_instance(rng: np.random.Generator, num_classes: Optional[int] = None) -> DistillInstance:
    """Small student/teacher pair with three tap pairs: same size, student
    smaller (upsampled) and student larger (pooled)."""
    n = int(rng.integers(1, 3))
    c = num_classes or int(rng.integers(2, 4))
    size = 8
    cs, ct = int(rng.integers(2, 4)), int(rng.integers(2, 5))
    s_feats = [rng.normal(size=(n, cs, 4, 4)), rng.normal(size=(n, cs, 2, 2)), rng.normal(size=(n, cs, 8, 8))]
    t_feats = [rng.normal(size=(n, ct, 4, 4)), rng.normal(size=(n, ct, 4, 4)), rng.normal(size=(n, ct, 4, 4))]
    return DistillInstance(rng.normal(size=(n, c, size, size)), rng.normal(size=(n, c, size, size)),
                           s_feats, t_feats, _mask_with_all_classes(rng, n, size, size, c), c)


def _weights_options(rng) -> Tuple[K.DistillWeights, dict]:
    opts = dict(direction=str(rng.choice(["s_to_t", "t_to_s"])), norm_p=int(rng.choice([1, 2])),
                form=str(rng.choice(["scalar", "vector"])), exponent=2.0,
                seg=str(rng.choice(["cross_entropy", "soft_dice"])))
    return K.DistillWeights(*rng.uniform(0.05, 1.0, size=3)), opts


def _total_from(inst: DistillInstance, logits: Tensor, s_feats: List[Tensor], w: K.DistillWeights,
                opts: dict) -> Tensor:
    return K.emkd_loss(logits, inst.student_taps(s_feats), inst.masks, Tensor(inst.teacher_logits),
                       inst.teacher_taps(), inst.pairing(), w, opts["seg"], opts["direction"],
                       opts["norm_p"], opts["form"], opts["exponent"]).total


# -- gradient checks ------------------------------------------------------------------------

GradCase = Callable[[np.random.Generator], Tuple[Callable[[Tensor], Tensor], np.ndarray]]


def _weighted_sum(out: Tensor, rng) -> Tensor:
    return (out * Tensor(rng.normal(size=out.shape))).sum()


def _g_conv_input(rng):
    k = rng.normal(size=(int(rng.integers(1, 4)), 2, 3, 3))
    b = rng.normal(size=k.shape[0])
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    r = rng.normal(size=1)
    def f(x):
        y = T.conv2d(x, k, b, stride, pad)
        return (y * Tensor(np.cos(np.arange(y.size) + r).reshape(y.shape))).sum()
    return f, rng.normal(size=(1, 2, 5, 5))


def _g_conv_kernel(rng):
    x = rng.normal(size=(2, 2, 5, 6))
    def f(k):
        y = T.conv2d(x, k, None, 1, 1)
        return (y * y).sum() * 0.1
    return f, rng.normal(size=(3, 2, 3, 3))


def _g_unary(op, shape=(1, 2, 4, 6)):
    def case(rng):
        weights = rng.normal(size=op(Tensor(np.zeros(shape))).shape)
        return (lambda x: (op(x) * Tensor(weights)).sum()), rng.normal(size=shape)
    return case


def _g_loss(which: str, opts_override: Optional[dict] = None):
    def case(rng):
        inst = random_instance(rng)
        w, opts = _weights_options(rng)
        opts.update(opts_override or {})
        if which == "pmd":
            return (lambda z: K.pmd_loss(z, Tensor(inst.teacher_logits), opts["direction"])), inst.student_logits
        if which in ("seg_ce", "seg_dice"):
            kind = "cross_entropy" if which == "seg_ce" else "soft_dice"
            return (lambda z: K.seg_loss(z, inst.masks, kind)), inst.student_logits
        # feature-side losses: check w.r.t. the first student tap
        rest = [Tensor(f) for f in inst.student_feats[1:]]
        if which == "imd":
            return (lambda e: K.imd_loss(inst.pairing(), inst.student_taps([e] + rest),
                                         inst.teacher_taps())), inst.student_feats[0]
        if which == "rad":
            return (lambda e: K.rad_loss(inst.pairing(), inst.student_taps([e] + rest), inst.teacher_taps(),
                                         inst.masks, inst.num_classes, opts["norm_p"],
                                         opts["form"])), inst.student_feats[0]
        if which == "total":
            # logits are produced from the checked feature so both paths carry gradient
            head = rng.normal(size=(inst.num_classes, inst.student_feats[0].shape[1], 1, 1))
            def f(e):
                logits = T.conv2d(T.upsample_nearest(e, 2), head)
                return _total_from(inst, logits, [e] + rest, w, opts)
            return f, inst.student_feats[0]
        raise KeyError(which)
    return case


GRAD_CASES: Dict[str, GradCase] = {
    "conv2d_input": _g_conv_input,
    "conv2d_kernel": _g_conv_kernel,
    "avg_pool2d": _g_unary(lambda x: T.avg_pool2d(x, 2)),
    "max_pool2d": _g_unary(lambda x: T.max_pool2d(x, 2)),
    "upsample_nearest": _g_unary(lambda x: T.upsample_nearest(x, 2)),
    "channel_softmax": _g_unary(T.channel_softmax),
    "log_softmax": _g_unary(T.log_softmax),
    "relu": _g_unary(T.relu),
    "pmd_loss": _g_loss("pmd"),
    "imd_loss": _g_loss("imd"),
    "rad_loss": _g_loss("rad"),
    "rad_loss_vector_p1": _g_loss("rad", dict(form="vector", norm_p=1)),
    "seg_cross_entropy": _g_loss("seg_ce"),
    "seg_soft_dice": _g_loss("seg_dice"),
    "total_loss": _g_loss("total"),
}


def grad_suite(names: Optional[Iterable[str]] = None, instances: int = 20, seed: int = 0,
               step: float = GRAD_STEP) -> List[CheckResult]:
    results = []
    for name in names or GRAD_CASES:
        case = GRAD_CASES[name]
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        worst = 0.0
        for _ in range(instances):
            f, x = case(rng)
            worst = max(worst, T.grad_check(f, x, step))
        results.append(CheckResult(name, "grad", instances, worst, GRAD_TOL))
    return results


# -- oracle checks ---------------------------------------------------------------------------

OracleCase = Callable[[np.random.Generator], float]


def _o_conv(rng) -> float:
    n, cin, cout = (int(v) for v in rng.integers(1, 4, size=3))
    h, w = (int(v) for v in rng.integers(3, 8, size=2))
    kh, kw = (int(v) for v in rng.integers(1, 4, size=2))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x, k, b = rng.normal(size=(n, cin, h, w)), rng.normal(size=(cout, cin, kh, kw)), rng.normal(size=cout)
    got = T.conv2d(x, k, b, stride, pad).data
    return float(np.max(np.abs(got - O.ref_conv2d(x, k, b, stride, pad))))


def _o_pool(kind):
    def case(rng) -> float:
        k = int(rng.integers(1, 4))
        x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 3)), k * int(rng.integers(1, 4)),
                             k * int(rng.integers(1, 4))))
        if kind == "avg":
            got, ref = T.avg_pool2d(x, k).data, O.ref_avg_pool(x, k)
        elif kind == "max":
            got, ref = T.max_pool2d(x, k).data, O.ref_max_pool(x, k)
        else:
            got, ref = T.upsample_nearest(x, k).data, O.ref_upsample(x, k)
        return float(np.max(np.abs(got - ref)))
    return case


def _o_softmax(rng) -> float:
    x = rng.normal(scale=3.0, size=(int(rng.integers(1, 3)), int(rng.integers(2, 5)), 3, 4))
    return float(np.max(np.abs(T.channel_softmax(x).data - O.ref_softmax(x))))


def _o_loss(which: str):
    def case(rng) -> float:
        inst = random_instance(rng)
        w, opts = _weights_options(rng)
        pairing, s_taps, t_taps = inst.pairing(), inst.student_taps(), inst.teacher_taps()
        if which == "pmd":
            got = K.pmd_loss(Tensor(inst.student_logits), Tensor(inst.teacher_logits), opts["direction"]).item()
            ref = O.ref_pmd(inst.student_logits, inst.teacher_logits, opts["direction"])
        elif which == "imd":
            got = K.imd_loss(pairing, s_taps, t_taps).item()
            ref = O.ref_imd(inst.student_feats, inst.teacher_feats)
        elif which == "rad":
            got = K.rad_loss(pairing, s_taps, t_taps, inst.masks, inst.num_classes,
                             opts["norm_p"], opts["form"]).item()
            ref = O.ref_rad(inst.student_feats, inst.teacher_feats, inst.masks, inst.num_classes,
                            opts["norm_p"], opts["form"])
        elif which == "seg":
            got = K.seg_loss(Tensor(inst.student_logits), inst.masks, opts["seg"]).item()
            ref = O.ref_seg(inst.student_logits, inst.masks, opts["seg"])
        else:
            got = _total_from(inst, Tensor(inst.student_logits), [Tensor(f) for f in inst.student_feats],
                              w, opts).item()
            ref = O.ref_losses(inst.student_logits, inst.teacher_logits, inst.student_feats,
                               inst.teacher_feats, inst.masks, (w.alpha, w.beta1, w.beta2), opts)[3]
        return abs(got - ref)
    return case


def _o_metrics(rng) -> float:
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 6)))
    P = rng.random(shape) < rng.random()
    G = rng.random(shape) < rng.random()
    d, vp, vu, r = O.ref_metrics(P, G)
    errs = [abs(M.dice(P, G) - d), abs(M.voe(P, G, "as_printed") - vp), abs(M.voe(P, G, "union") - vu)]
    if r is None:
        try:
            M.rvd(P, G)
            errs.append(np.inf)
        except M.MetricError:
            pass
    else:
        errs.append(abs(M.rvd(P, G) - r))
    return float(max(errs))


ORACLE_CASES: Dict[str, Tuple[OracleCase, float, int]] = {
    "conv2d": (_o_conv, LOSS_TOL, 100),
    "avg_pool2d": (_o_pool("avg"), LOSS_TOL, 100),
    "max_pool2d": (_o_pool("max"), LOSS_TOL, 100),
    "upsample_nearest": (_o_pool("up"), LOSS_TOL, 100),
    "channel_softmax": (_o_softmax, LOSS_TOL, 100),
    "pmd_loss": (_o_loss("pmd"), LOSS_TOL, 100),
    "imd_loss": (_o_loss("imd"), LOSS_TOL, 100),
    "rad_loss": (_o_loss("rad"), LOSS_TOL, 100),
    "seg_loss": (_o_loss("seg"), LOSS_TOL, 100),
    "total_loss": (_o_loss("total"), LOSS_TOL, 100),
    "metrics": (_o_metrics, METRIC_TOL, 1000),
}


def oracle_suite(names: Optional[Iterable[str]] = None, seed: int = 0,
                 instances: Optional[int] = None) -> List[CheckResult]:
    results = []
    for name in names or ORACLE_CASES:
        case, tol, default_n = ORACLE_CASES[name]
        n = instances or default_n
        rng = np.random.default_rng([seed, 7, sum(map(ord, name))])
        worst = max(case(rng) for _ in range(n))
        results.append(CheckResult(name, "oracle", n, worst, tol))
    return results
