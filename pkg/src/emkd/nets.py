"""Small encoder-decoder segmentation networks that expose per-stage feature taps."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import io
from . import tensor as T
from .tensor import ShapeError, Tensor


class PairingError(ValueError):
    """No spatially compatible (student, teacher) tap pair exists."""


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 2
    base_channels: int = 4
    channel_growth: int = 2
    num_classes: int = 2
    use_skips: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.channel_growth < 1:
            raise ValueError(f"channel_growth must be >= 1, got {self.channel_growth}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    def enc_channels(self, stage: int) -> int:
        return self.base_channels * self.channel_growth ** (stage - 1)

    def dec_channels(self, stage: int) -> int:
        mirror = self.depth - stage
        return self.enc_channels(mirror) if mirror >= 1 else self.base_channels


PRESETS: Dict[str, NetworkConfig] = {
    "teacher": NetworkConfig(depth=3, base_channels=16, use_skips=True),
    "student": NetworkConfig(depth=2, base_channels=4, use_skips=False),
}


def preset(name: str, num_classes: int = 2, seed: int = 0) -> NetworkConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown network preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, num_classes=num_classes, seed=seed)


@dataclass
class FeatureTaps:
    """Named stage outputs recorded during one forward pass, in stage order."""

    items: List[Tuple[str, Tensor]] = field(default_factory=list)

    def add(self, name: str, feature: Tensor) -> None:
        if name in self.names():
            raise ValueError(f"duplicate tap name {name!r}")
        self.items.append((name, feature))

    def names(self) -> List[str]:
        return [n for n, _ in self.items]

    def __getitem__(self, name: str) -> Tensor:
        for n, f in self.items:
            if n == name:
                return f
        raise KeyError(name)

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def spatial(self) -> List[Tuple[str, Tuple[int, int]]]:
        return [(n, f.shape[-2:]) for n, f in self.items]


@dataclass(frozen=True)
class TapPairing:
    pairs: Tuple[Tuple[str, str], ...]

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)


def _conv_params(rng: np.random.Generator, cin: int, cout: int, k: int) -> Tuple[Tensor, Tensor]:
    # He-normal: keeps activation scale roughly constant through ReLU stacks
    w = rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k))
    return Tensor(w, requires_grad=True), Tensor(np.zeros(cout), requires_grad=True)


class Network:
    """Encoder stages conv-relu-conv-relu-avgpool, decoder stages
    upsample-(skip concat)-conv-relu, and a 1x1 classification head."""

    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        self.params: Dict[str, Tensor] = {}
        rng = np.random.default_rng(cfg.seed)
        cin = 1
        for s in range(1, cfg.depth + 1):
            c = cfg.enc_channels(s)
            self._add(f"enc{s}.conv1", *_conv_params(rng, cin, c, 3))
            self._add(f"enc{s}.conv2", *_conv_params(rng, c, c, 3))
            cin = c
        for s in range(1, cfg.depth + 1):
            mirror = cfg.depth - s
            skip = cfg.enc_channels(mirror) if cfg.use_skips and mirror >= 1 else 0
            c = cfg.dec_channels(s)
            self._add(f"dec{s}.conv", *_conv_params(rng, cin + skip, c, 3))
            cin = c
        self._add("head", *_conv_params(rng, cin, cfg.num_classes, 1))

    def _add(self, name: str, w: Tensor, b: Tensor) -> None:
        self.params[f"{name}.weight"] = w
        self.params[f"{name}.bias"] = b

    def _conv(self, x: Tensor, name: str, padding: int = 1) -> Tensor:
        return T.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"],
                        stride=1, padding=padding)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        T.zero_grads(self.params.values())

    def forward_with_taps(self, x) -> Tuple[Tensor, FeatureTaps]:
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected input N x 1 x H x W, got {x.shape}")
        scale = 2 ** self.cfg.depth
        if x.shape[2] % scale or x.shape[3] % scale:
            raise ShapeError(f"input extents {x.shape[2:]} not divisible by 2^depth = {scale}")
        taps = FeatureTaps()
        enc_out = []
        h = x
        for s in range(1, self.cfg.depth + 1):
            h = T.relu(self._conv(h, f"enc{s}.conv1"))
            h = T.relu(self._conv(h, f"enc{s}.conv2"))
            h = T.avg_pool2d(h, 2)
            enc_out.append(h)
            taps.add(f"enc{s}", h)
        for s in range(1, self.cfg.depth + 1):
            h = T.upsample_nearest(h, 2)
            mirror = self.cfg.depth - s
            if self.cfg.use_skips and mirror >= 1:
                h = T.concat([h, enc_out[mirror - 1]], axis=1)
            h = T.relu(self._conv(h, f"dec{s}.conv"))
            taps.add(f"dec{s}", h)
        logits = self._conv(h, "head", padding=0)
        return logits, taps

    def __call__(self, x) -> Tensor:
        return self.forward_with_taps(x)[0]

    def state_dict(self) -> Dict[str, Tensor]:
        return dict(self.params)

    def load_state_dict(self, params: Dict[str, Tensor]) -> None:
        if set(params) != set(self.params):
            raise ValueError(f"parameter names differ: {sorted(set(params) ^ set(self.params))}")
        for name, t in params.items():
            if t.shape != self.params[name].shape:
                raise ShapeError(f"{name}: shape {t.shape}, expected {self.params[name].shape}")
            self.params[name] = Tensor(t.data, requires_grad=True)

    def save(self, path) -> None:
        io.write_model(path, self.params)


def build_network(cfg: NetworkConfig) -> Network:
    return Network(cfg)


def forward_with_taps(net: Network, x) -> Tuple[Tensor, FeatureTaps]:
    return net.forward_with_taps(x)


def count_params(net: Network) -> int:
    return sum(p.size for p in net.params.values())


def config_from_params(params: Dict[str, Tensor]) -> NetworkConfig:
    """Recover the architecture from parameter names and shapes."""
    depth = len({n.split(".")[0] for n in params if n.startswith("enc")})
    base = params["enc1.conv1.weight"].shape[0]
    growth = params["enc2.conv1.weight"].shape[0] // base
    num_classes = params["head.weight"].shape[0]
    deepest = params[f"enc{depth}.conv2.weight"].shape[0]
    use_skips = params["dec1.conv.weight"].shape[1] > deepest
    return NetworkConfig(depth=depth, base_channels=base, channel_growth=growth,
                         num_classes=num_classes, use_skips=use_skips)


def load_network(path) -> Network:
    params = io.read_model(path)
    net = Network(config_from_params(params))
    net.load_state_dict(params)
    return net


def match_taps(student: FeatureTaps, teacher: FeatureTaps, policy: str = "first_and_last") -> TapPairing:
    """Pair student and teacher taps with equal spatial extents.

    ``first_and_last`` keeps the earliest and the latest compatible pair
    (in student-then-teacher stage order); ``all_same_size`` keeps them all.
    """
    if not len(student) or not len(teacher):
        raise PairingError("tap lists must be non-empty")
    pairs = [(sn, tn) for sn, ss in student.spatial() for tn, ts in teacher.spatial() if ss == ts]
    if not pairs:
        raise PairingError(
            f"no spatially compatible tap pair: student {student.spatial()}, teacher {teacher.spatial()}")
    if policy == "all_same_size":
        return TapPairing(tuple(pairs))
    if policy != "first_and_last":
        raise ValueError(f"unknown tap policy {policy!r}")
    chosen = [pairs[0]] if len(pairs) == 1 else [pairs[0], pairs[-1]]
    return TapPairing(tuple(chosen))
