"""Teacher pretraining, student distillation, evaluation and run reports."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import config as cfgfile
from . import data as D
from . import distill as K
from . import io
from . import metrics as M
from . import nets as N
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    data: str = ""
    network: str = "teacher"      # preset trained by `emkd train`
    teacher: str = "teacher"
    student: str = "student"
    epochs: int = 20
    batch_size: int = 4
    lr_max: float = 0.001
    lr_min: float = 0.000001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.9
    seg_loss: str = "cross_entropy"
    pmd_direction: str = "s_to_t"
    temperature: float = 1.0
    importance_exponent: float = 2.0
    rad_norm_p: int = 2
    rad_form: str = "scalar"
    tap_policy: str = "first_and_last"
    voe_variant: str = "as_printed"
    augment: bool = True
    seed: int = 0
    fold: int = 0
    folds: int = 5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_min > self.lr_max:
            raise ValueError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        if not 0 <= self.fold < self.folds:
            raise ValueError(f"fold {self.fold} outside [0, {self.folds})")
        K.DistillWeights(self.alpha, self.beta1, self.beta2)

    @property
    def weights(self) -> K.DistillWeights:
        return K.DistillWeights(self.alpha, self.beta1, self.beta2)


def load_config(path) -> TrainConfig:
    return cfgfile.load(TrainConfig, path)


# -- optimisation ------------------------------------------------------------------


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> Tuple[List[np.ndarray], AdamState]:
    """One bias-corrected Adam update; a ``None`` gradient counts as zero."""
    if not len(params) == len(grads) == len(state.m):
        raise ValueError("params, grads and state differ in length")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.zeros_like(p) if g is None else g
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


def cosine_lr(epoch: int, total_epochs: int, lr_max: float = 0.001, lr_min: float = 0.000001) -> float:
    """Cosine annealing from lr_max at epoch 0 to lr_min at the last epoch."""
    if total_epochs < 2:
        return lr_max
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1)))


# -- reports -------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    seg: float
    pm: float
    im: float
    ra: float
    total: float
    val_dice: Dict[str, float]
    val_voe: Dict[str, float]
    val_rvd: Dict[str, float]


@dataclass
class RunReport:
    role: str
    config: Dict[str, object]
    param_count: int
    epochs: List[EpochRecord] = field(default_factory=list)
    final_metrics: List[Dict[str, object]] = field(default_factory=list)
    pairing: List[List[str]] = field(default_factory=list)
    teacher_checksum_before: str = ""
    teacher_checksum_after: str = ""
    wall_clock: float = 0.0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        raw = json.loads(text)
        raw["epochs"] = [EpochRecord(**e) for e in raw["epochs"]]
        return cls(**raw)

    def metric_values(self) -> dict:
        """Everything except wall-clock time, for determinism comparisons."""
        d = dataclasses.asdict(self)
        d.pop("wall_clock")
        return d

    def metric_digest(self) -> str:
        """sha256 of :meth:`metric_values` as canonical JSON (NaN-safe equality)."""
        text = json.dumps(self.metric_values(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()

    def final_dice(self, cls: int = 1) -> float:
        return self.epochs[-1].val_dice[str(cls)]


def params_checksum(net: N.Network) -> str:
    h = hashlib.sha256()
    for name, p in net.params.items():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def config_fingerprint(cfg: Dict[str, object]) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:10]


# -- batches and evaluation --------------------------------------------------------------


def _slices(cases: Sequence[D.Case]) -> List[Tuple[int, int]]:
    return [(ci, k) for ci, case in enumerate(cases) for k in range(len(case.images))]


def _split(ds: D.Dataset, cfg: TrainConfig) -> Tuple[List[D.Case], List[D.Case]]:
    train_ids, test_ids = D.make_folds(ds.case_ids(), cfg.folds, cfg.seed)[cfg.fold]
    return ds.by_id(train_ids), ds.by_id(test_ids)


def predict(net: N.Network, images: np.ndarray, window: D.WindowSpec, batch: int = 16) -> np.ndarray:
    """Argmax class ids for a stack of pseudo-HU slices [S, H, W]."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch):
            x = D.hu_window(images[start:start + batch], window)[:, None]
            out.append(net(x).data.argmax(axis=1))
    return np.concatenate(out)


def evaluate(net: N.Network, cases: Sequence[D.Case], window: D.WindowSpec,
             voe_variant: str = "as_printed") -> List[M.CaseMetrics]:
    """Per-case, per-foreground-class metrics of the model's argmax predictions."""
    if not cases:
        raise ValueError("cannot evaluate an empty split")
    classes = range(1, net.cfg.num_classes)
    rows = []
    for case in cases:
        pred = predict(net, case.images, window)
        rows.extend(M.case_metrics(pred, case.masks, case.case_id, classes, voe_variant))
    return rows


def _epoch_summary(rows: Sequence[M.CaseMetrics]):
    dice_, voe_, rvd_ = {}, {}, {}
    for c in sorted({r.cls for r in rows}):
        sel = [r for r in rows if r.cls == c]
        dice_[str(c)] = float(np.mean([r.dice for r in sel]))
        voe_[str(c)] = float(np.mean([r.voe for r in sel]))
        finite = [r.rvd for r in sel if not math.isnan(r.rvd)]
        rvd_[str(c)] = float(np.mean(finite)) if finite else math.nan
    return dice_, voe_, rvd_


# -- training ---------------------------------------------------------------------------------


def _probe_pairing(student: N.Network, teacher: N.Network, size: int, policy: str) -> N.TapPairing:
    x = np.zeros((1, 1, size, size))
    with no_grad():
        _, s_taps = student.forward_with_taps(x)
        _, t_taps = teacher.forward_with_taps(x)
    try:
        return N.match_taps(s_taps, t_taps, policy)
    except N.PairingError as exc:
        raise K.ConfigError(str(exc)) from None


class TeacherTargets:
    """Teacher logits and tapped features per training slice, memoised by
    ``(case_id, slice, d4_element)``.

    Targets are always computed one slice at a time so the numbers do not
    depend on batch composition; a cache shared between runs therefore
    reproduces an uncached run bit for bit.
    """

    def __init__(self, teacher: N.Network):
        self.teacher = teacher
        self._store: Dict[tuple, Tuple[np.ndarray, Dict[str, np.ndarray]]] = {}

    def __len__(self) -> int:
        return len(self._store)

    def get(self, key: tuple, image: np.ndarray, tap_names: Sequence[str]):
        hit = self._store.get(key)
        if hit is None or any(n not in hit[1] for n in tap_names):
            with no_grad():
                logits, taps = self.teacher.forward_with_taps(image[None, None])
            feats = dict(hit[1]) if hit is not None else {}
            feats.update((n, taps[n].data[0].copy()) for n in tap_names)
            hit = (logits.data[0].copy(), feats)
            self._store[key] = hit
        return hit[0], {n: hit[1][n] for n in tap_names}


def _fit(net: N.Network, ds: D.Dataset, cfg: TrainConfig, role: str,
         teacher: Optional[N.Network] = None, targets: Optional[TeacherTargets] = None
         ) -> Tuple[RunReport, Dict[str, Tensor]]:
    started = time.perf_counter()
    train_cases, test_cases = _split(ds, cfg)
    window = ds.spec.window
    weights = cfg.weights if teacher is not None else K.DistillWeights(0.0, 0.0, 0.0)
    snapshot = dataclasses.asdict(cfg)
    snapshot.update(alpha=weights.alpha, beta1=weights.beta1, beta2=weights.beta2)
    report = RunReport(role, snapshot, N.count_params(net))
    pairing = None
    tap_names: List[str] = []
    if teacher is not None and (weights.beta1 or weights.beta2):
        pairing = _probe_pairing(net, teacher, ds.spec.image_size, cfg.tap_policy)
        report.pairing = [list(p) for p in pairing]
        tap_names = sorted({t for _, t in pairing})
    use_teacher = teacher is not None and (weights.alpha or weights.beta1 or weights.beta2)
    if teacher is not None:
        report.teacher_checksum_before = params_checksum(teacher)
        if targets is None:
            targets = TeacherTargets(teacher)
        elif targets.teacher is not teacher:
            raise ValueError("teacher target cache belongs to a different teacher")

    names = list(net.params)
    state = AdamState.zeros_like([net.params[n].data for n in names])
    slices = _slices(train_cases)
    best = (-1.0, None)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)
        order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(len(slices))
        aug_rng = np.random.default_rng([cfg.seed, epoch, 1])
        sums = dict(seg=0.0, pm=0.0, im=0.0, ra=0.0, total=0.0)
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            images, masks, t_logits, t_feats = [], [], [], []
            for idx in order[start:start + cfg.batch_size]:
                ci, k = slices[idx]
                case = train_cases[ci]
                element = int(aug_rng.integers(D.D4_ORDER)) if cfg.augment else 0
                img = D.apply_d4(D.hu_window(case.images[k], window), element)
                images.append(img)
                masks.append(D.apply_d4(case.masks[k], element))
                if use_teacher:
                    tl, tf = targets.get((case.case_id, k, element), img, tap_names)
                    t_logits.append(tl)
                    t_feats.append(tf)
            x = np.stack(images)[:, None]
            y = np.stack(masks)
            tl_batch = tt_batch = None
            if use_teacher:
                tl_batch = Tensor(np.stack(t_logits))
                tt_batch = N.FeatureTaps([(n, Tensor(np.stack([f[n] for f in t_feats])))
                                          for n in tap_names])
            logits, taps = net.forward_with_taps(x)
            terms = K.emkd_loss(logits, taps, y, tl_batch, tt_batch, pairing, weights,
                                cfg.seg_loss, cfg.pmd_direction, cfg.rad_norm_p, cfg.rad_form,
                                cfg.importance_exponent, cfg.temperature)
            net.zero_grad()
            backward(terms.total)
            params, state = adam_step([net.params[n].data for n in names],
                                      [net.params[n].grad for n in names], state, lr,
                                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            for n, p in zip(names, params):
                net.params[n] = Tensor(p, requires_grad=True)
            for key in sums:
                term = getattr(terms, key)
                sums[key] += term.item() if term is not None else 0.0
            n_batches += 1

        rows = evaluate(net, test_cases, window, cfg.voe_variant)
        vd, vv, vr = _epoch_summary(rows)
        means = {k: v / n_batches for k, v in sums.items()}
        report.epochs.append(EpochRecord(epoch, lr, val_dice=vd, val_voe=vv, val_rvd=vr, **means))
        score = float(np.mean(list(vd.values())))
        if score > best[0]:
            best = (score, {n: p for n, p in net.params.items()})
        log.info("%s epoch %d/%d lr=%.2e total=%.4f val_dice=%s", role, epoch + 1, cfg.epochs,
                 lr, means["total"], {k: round(v, 4) for k, v in vd.items()})

    report.final_metrics = [dataclasses.asdict(r) for r in evaluate(net, test_cases, window, cfg.voe_variant)]
    if teacher is not None:
        report.teacher_checksum_after = params_checksum(teacher)
        if report.teacher_checksum_after != report.teacher_checksum_before:
            raise RuntimeError("teacher parameters changed during distillation")
    report.wall_clock = time.perf_counter() - started
    return report, best[1]


def _save_run(out_dir, net: N.Network, best: Dict[str, Tensor], report: RunReport,
              cfg: TrainConfig) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net.save(out / "model.emkm")
    io.write_model(out / "best.emkm", best)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    cfgfile.dump(cfg, out / "config.cfg")
    M.write_metrics_csv(out / "metrics.csv", [M.CaseMetrics(**r) for r in report.final_metrics])
    return out


def train_teacher(cfg: TrainConfig, out_dir=None, dataset: Optional[D.Dataset] = None
                  ) -> Tuple[N.Network, RunReport]:
    """Train ``cfg.network`` with the segmentation loss only."""
    ds = dataset if dataset is not None else D.read_dataset(cfg.data)
    net = N.build_network(N.preset(cfg.network, ds.spec.num_classes, cfg.seed))
    report, best = _fit(net, ds, cfg, role=cfg.network)
    if out_dir is not None:
        _save_run(out_dir, net, best, report, replace(cfg, alpha=0.0, beta1=0.0, beta2=0.0))
    return net, report


def distill_student(cfg: TrainConfig, teacher: Union[N.Network, str, Path], out_dir=None,
                    dataset: Optional[D.Dataset] = None, targets: Optional[TeacherTargets] = None
                    ) -> Tuple[N.Network, RunReport]:
    """Train ``cfg.student`` against the full objective with a frozen teacher.

    ``targets`` may be shared between runs that use the same teacher and dataset.
    """
    ds = dataset if dataset is not None else D.read_dataset(cfg.data)
    if not isinstance(teacher, N.Network):
        teacher = N.load_network(teacher)
    if teacher.cfg.num_classes != ds.spec.num_classes:
        raise K.ConfigError(f"teacher has {teacher.cfg.num_classes} classes, "
                            f"dataset has {ds.spec.num_classes}")
    net = N.build_network(N.preset(cfg.student, ds.spec.num_classes, cfg.seed))
    report, best = _fit(net, ds, cfg, role="student", teacher=teacher, targets=targets)
    if out_dir is not None:
        _save_run(out_dir, net, best, report, cfg)
    return net, report


# -- comparison reports ------------------------------------------------------------------------


MODULE_FLAGS = (("PMD", "alpha"), ("IMD", "beta1"), ("RAD", "beta2"))


def run_label(report: RunReport) -> str:
    if report.role != "student":
        return report.role
    parts = [name for name, key in MODULE_FLAGS if report.config.get(key)]
    return "student" + "".join(f"+{p}" for p in parts)


def ablation_grid(weights: K.DistillWeights = K.DistillWeights()) -> List[Tuple[str, K.DistillWeights]]:
    """All 8 on/off subsets of the three distillation terms."""
    grid = []
    for flags in itertools.product((False, True), repeat=3):
        w = K.DistillWeights(weights.alpha if flags[0] else 0.0,
                             weights.beta1 if flags[1] else 0.0,
                             weights.beta2 if flags[2] else 0.0)
        label = "student" + "".join(f"+{n}" for (n, _), on in zip(MODULE_FLAGS, flags) if on)
        grid.append((label, w))
    return grid


REPORT_HEADER = ["run", "label", "fingerprint", "dice", "voe", "rvd", "epochs"]


def report(run_dirs: Sequence, tail: int = 1, cls: int = 1) -> List[Dict[str, str]]:
    """One row per run: ``a±b`` over the last ``tail`` epochs, sorted by Dice center."""
    rows = []
    for d in run_dirs:
        path = Path(d) / "report.json"
        if not path.is_file():
            log.warning("skipping %s: no report.json", d)
            continue
        rep = RunReport.from_json(path.read_text(encoding="utf-8"))
        last = rep.epochs[-tail:]
        key = str(cls)
        dice_r = M.aggregate_range(e.val_dice[key] for e in last)
        voe_r = M.aggregate_range(e.val_voe[key] for e in last)
        rv = [e.val_rvd[key] for e in last if not math.isnan(e.val_rvd[key])]
        rows.append({
            "run": str(d),
            "label": run_label(rep),
            "fingerprint": config_fingerprint(rep.config),
            "dice": dice_r,
            "voe": voe_r,
            "rvd": M.aggregate_range(rv) if rv else None,
            "epochs": str(len(rep.epochs)),
        })
    rows.sort(key=lambda r: -r["dice"].center)
    return rows


def format_report(rows: Sequence[Dict]) -> str:
    header = f"{'label':<24} {'dice':>16} {'voe':>16} {'rvd':>17}  {'fingerprint':<10}  run"
    lines = [header, "-" * len(header)]
    for r in rows:
        rvd_text = str(r["rvd"]) if r["rvd"] is not None else "nan"
        lines.append(f"{r['label']:<24} {str(r['dice']):>16} {str(r['voe']):>16} {rvd_text:>17}  "
                     f"{r['fingerprint']:<10}  {r['run']}")
    return "\n".join(lines)


def write_report_csv(path, rows: Sequence[Dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "dice": r["dice"].exact(), "voe": r["voe"].exact(),
                        "rvd": r["rvd"].exact() if r["rvd"] is not None else "nan"})
