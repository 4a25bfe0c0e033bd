"""Layers and the four-part network: feature extractor f, classifier h,
projector p and predictor q.

Everything here is functional: a forward pass is a pure function of the
input batch and a :class:`ParameterSet`, so the same code evaluates meta
parameters, adapted parameters and EMA targets alike.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GROUPS = ("f", "h", "p", "q")
ADAPTABLE = ("f", "p", "q")


class ParameterSet(Mapping[str, Tensor]):
    """Ordered name -> tensor map where every entry carries a group tag."""

    def __init__(self, tensors: Mapping[str, Tensor], groups: Mapping[str, str]):
        if set(tensors) != set(groups):
            raise ValueError("every parameter needs exactly one group tag")
        bad = {n: g for n, g in groups.items() if g not in GROUPS}
        if bad:
            raise ValueError(f"unknown group tags: {bad}")
        self._tensors = dict(tensors)
        self._groups = {n: groups[n] for n in self._tensors}

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    @property
    def groups(self) -> dict[str, str]:
        return dict(self._groups)

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def names(self, groups: Iterable[str] = GROUPS) -> list[str]:
        groups = set(groups)
        return [n for n in self._tensors if self._groups[n] in groups]

    def present_groups(self) -> set[str]:
        return set(self._groups.values())

    def adaptable(self) -> list[str]:
        return self.names(ADAPTABLE)

    def replace(self, updates: Mapping[str, Tensor]) -> "ParameterSet":
        unknown = set(updates) - set(self._tensors)
        if unknown:
            raise KeyError(f"not in parameter set: {sorted(unknown)}")
        merged = dict(self._tensors)
        merged.update(updates)
        return ParameterSet(merged, self._groups)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._tensors.items()}

    def leaves(self, requires_grad: bool = True) -> "ParameterSet":
        """Fresh graph leaves holding the same values."""
        return ParameterSet(
            {n: Tensor(t.data, requires_grad=requires_grad, name=n) for n, t in self._tensors.items()},
            self._groups)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], groups: Mapping[str, str],
                    requires_grad: bool = False) -> "ParameterSet":
        return cls({n: Tensor(a, requires_grad=requires_grad, name=n) for n, a in arrays.items()},
                   groups)

    def num_values(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 32
    widths: tuple[int, ...] = (32, 64, 128)
    blocks_per_stage: int = 4
    gn_groups: int = 16
    hidden_dim: int = 256
    proj_dim: int = 128
    num_classes: int = 10
    ssl_heads: bool = True
    preset: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) <= 0:
            raise ValueError("widths must be positive")
        if self.blocks_per_stage < 1 or self.hidden_dim <= 0 or self.proj_dim <= 0:
            raise ValueError("layer sizes must be positive")
        for w in self.widths:
            if w % self.gn_groups:
                raise ValueError(f"gn_groups={self.gn_groups} does not divide width {w}")
        if self.resolution % (2 ** (len(self.widths) - 1)):
            raise ValueError("resolution must be divisible by the total stride")

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        return cls(**{**dict(preset="full"), **overrides})

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(widths=(8, 16), blocks_per_stage=2, gn_groups=4, hidden_dim=32,
                    proj_dim=16, num_classes=10, preset="toy")
        return cls(**{**base, **overrides})

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# layers


def group_norm(x, groups: int, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize NCHW activations per sample over channel groups."""
    x = ad.as_tensor(x)
    if eps <= 0:
        raise ValueError("eps must be positive")
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = ad.reshape(x, (n, groups, (c // groups) * h * w))
    centered = xg - ad.reduce_mean(xg, axis=2, keepdims=True)
    var = ad.reduce_mean(centered * centered, axis=2, keepdims=True)
    xhat = ad.reshape(centered / ad.sqrt(ad.affine(var, 1.0, eps)), (n, c, h, w))
    return xhat * ad.reshape(gain, (1, c, 1, 1)) + ad.reshape(bias, (1, c, 1, 1))


def linear(x, weight, bias) -> Tensor:
    return ad.matmul(x, weight) + bias


def _downsample_shortcut(x: Tensor, out_ch: int) -> Tensor:
    """Parameter-free shortcut: stride-2 subsampling plus zero channels."""
    sub = x[:, :, ::2, ::2]
    pad = out_ch - sub.shape[1]
    if pad <= 0:
        return sub
    zeros = ad.Tensor(np.zeros((sub.shape[0], pad) + sub.shape[2:], dtype=sub.dtype))
    return ad.concat([sub, zeros], axis=1)


def _block(params, prefix: str, x: Tensor, cfg: ModelConfig, downsample: bool, out_ch: int):
    g = cfg.gn_groups
    pre = ad.relu(group_norm(x, g, params[prefix + "gn1.gain"], params[prefix + "gn1.bias"]))
    stride = 2 if downsample else 1
    shortcut = _downsample_shortcut(x, out_ch) if downsample else x
    h = ad.conv2d(pre, params[prefix + "conv1"], stride=stride, padding=1)
    h = ad.relu(group_norm(h, g, params[prefix + "gn2.gain"], params[prefix + "gn2.bias"]))
    h = ad.conv2d(h, params[prefix + "conv2"], stride=1, padding=1)
    return h + shortcut


def feature_extractor(params: Mapping[str, Tensor], x, cfg: ModelConfig) -> Tensor:
    """Pre-activation ResNet trunk: NCHW images -> (N, feature_dim) representation."""
    x = ad.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.resolution, cfg.resolution):
        raise ValueError(f"expected (N, 3, {cfg.resolution}, {cfg.resolution}) input, "
                         f"got {x.shape}")
    h = ad.conv2d(x, params["stem.conv"], stride=1, padding=1)
    for s, width in enumerate(cfg.widths):
        for b in range(cfg.blocks_per_stage):
            h = _block(params, f"s{s}.b{b}.", h, cfg, downsample=(s > 0 and b == 0), out_ch=width)
    h = ad.relu(group_norm(h, cfg.gn_groups, params["final.gn.gain"], params["final.gn.bias"]))
    return ad.global_avg_pool(h)


class Heads(NamedTuple):
    logits: Tensor
    z: Tensor | None
    r: Tensor | None


def heads(params: Mapping[str, Tensor], g, cfg: ModelConfig) -> Heads:
    """Classifier, projection and prediction from a representation batch.

    The classifier reads the projector's first hidden layer, so that layer is
    shared between the supervised and self-supervised paths.
    """
    g = ad.as_tensor(g)
    if g.ndim != 2 or g.shape[1] != cfg.feature_dim:
        raise ValueError(f"expected (N, {cfg.feature_dim}) representation, got {g.shape}")
    if not cfg.ssl_heads:
        return Heads(linear(g, params["cls.w"], params["cls.b"]), None, None)
    hidden = ad.relu(linear(g, params["proj.fc1.w"], params["proj.fc1.b"]))
    logits = linear(hidden, params["cls.w"], params["cls.b"])
    z = linear(hidden, params["proj.fc2.w"], params["proj.fc2.b"])
    r = ad.relu(linear(z, params["pred.fc1.w"], params["pred.fc1.b"]))
    r = linear(r, params["pred.fc2.w"], params["pred.fc2.b"])
    return Heads(logits, z, r)


def forward(params: Mapping[str, Tensor], x, cfg: ModelConfig) -> Heads:
    return heads(params, feature_extractor(params, x, cfg), cfg)


def classify(params: Mapping[str, Tensor], x, cfg: ModelConfig) -> Tensor:
    return forward(params, x, cfg).logits


def to_nchw(images: np.ndarray) -> np.ndarray:
    """(N, H, W, 3) images -> contiguous (N, 3, H, W) in the current dtype."""
    return np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2),
                                dtype=ad.get_default_dtype())


# ---------------------------------------------------------------------------
# construction


@dataclass
class _Spec:
    shape: tuple[int, ...]
    group: str
    init: str
    fan_in: int = 1


def parameter_specs(cfg: ModelConfig) -> dict[str, _Spec]:
    specs: dict[str, _Spec] = {}

    def conv(name, cin, cout, k=3):
        specs[name] = _Spec((cout, cin, k, k), "f", "he_uniform", cin * k * k)

    def gn(prefix, ch, group="f"):
        specs[prefix + ".gain"] = _Spec((ch,), group, "ones")
        specs[prefix + ".bias"] = _Spec((ch,), group, "zeros")

    def lin(prefix, d_in, d_out, group):
        specs[prefix + ".w"] = _Spec((d_in, d_out), group, "fan_in_uniform", d_in)
        specs[prefix + ".b"] = _Spec((d_out,), group, "fan_in_uniform", d_in)

    conv("stem.conv", 3, cfg.widths[0])
    cin = cfg.widths[0]
    for s, width in enumerate(cfg.widths):
        for b in range(cfg.blocks_per_stage):
            p = f"s{s}.b{b}"
            gn(p + ".gn1", cin)
            conv(p + ".conv1", cin, width)
            gn(p + ".gn2", width)
            conv(p + ".conv2", width, width)
            cin = width
    gn("final.gn", cfg.feature_dim)
    if cfg.ssl_heads:
        lin("proj.fc1", cfg.feature_dim, cfg.hidden_dim, "p")
        lin("cls", cfg.hidden_dim, cfg.num_classes, "h")
        lin("proj.fc2", cfg.hidden_dim, cfg.proj_dim, "p")
        lin("pred.fc1", cfg.proj_dim, cfg.hidden_dim, "q")
        lin("pred.fc2", cfg.hidden_dim, cfg.proj_dim, "q")
    else:
        lin("cls", cfg.feature_dim, cfg.num_classes, "h")
    return specs


INIT_SCHEME = "conv: U(+-sqrt(6/fan_in)); linear: U(+-1/sqrt(fan_in)); GN gain 1, bias 0"


def init_params(cfg: ModelConfig, rng: np.random.Generator | int = 0) -> ParameterSet:
    rng = np.random.default_rng(rng)
    dtype = ad.get_default_dtype()
    tensors, groups = {}, {}
    for name, spec in parameter_specs(cfg).items():
        if spec.init == "ones":
            arr = np.ones(spec.shape)
        elif spec.init == "zeros":
            arr = np.zeros(spec.shape)
        else:
            bound = np.sqrt(6.0 / spec.fan_in) if spec.init == "he_uniform" else 1 / np.sqrt(spec.fan_in)
            arr = rng.uniform(-bound, bound, size=spec.shape)
        tensors[name] = Tensor(arr.astype(dtype), name=name)
        groups[name] = spec.group
    return ParameterSet(tensors, groups)


def layer_count(cfg: ModelConfig) -> dict[str, int]:
    """Weight layers on the classification path of the trunk.

    Counts the trunk convolutions plus the classifier output layer; the
    projector/predictor MLP layers are reported separately.
    """
    specs = parameter_specs(cfg)
    convs = sum(1 for s in specs.values() if len(s.shape) == 4)
    ssl = sum(1 for n in specs if n.endswith(".w") and specs[n].group in ("p", "q"))
    return {"conv": convs, "classifier": 1, "total": convs + 1, "ssl_head_layers": ssl}
