"""Backbone presets, the EfficientSign assembly and the two baseline CNNs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .attention import SEBlock, SpatialAttentionBlock
from .errors import ConfigurationError
from .nn import BatchNorm2d, Conv2d, ConvBNAct, Linear, Module
from .tensor import Tensor, no_grad

MODEL_KINDS = ("efficientsign", "resnet18", "mobilenetv2")


@dataclass(frozen=True)
class MBConvStage:
    expansion: int
    out_channels: int
    repeats: int
    stride: int
    kernel: int
    internal_se_ratio: float = 0.25

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigurationError(f"stage stride must be 1 or 2, got {self.stride}")
        if self.kernel not in (3, 5):
            raise ConfigurationError(f"stage kernel must be 3 or 5, got {self.kernel}")
        if self.expansion < 1 or self.out_channels < 1 or self.repeats < 1:
            raise ConfigurationError(f"invalid stage {self}")
        if not 0 <= self.internal_se_ratio <= 1:
            raise ConfigurationError(f"internal SE ratio must be in [0, 1], got {self.internal_se_ratio}")


@dataclass(frozen=True)
class BackboneConfig:
    preset: str
    stem_channels: int
    stages: tuple
    head_channels: int
    input_size: int

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stages"] = tuple(MBConvStage(**s) for s in d["stages"])
        return cls(**d)


PRESETS = {
    "b0": BackboneConfig(
        preset="b0",
        stem_channels=32,
        stages=(
            MBConvStage(1, 16, 1, 1, 3),
            MBConvStage(6, 24, 2, 2, 3),
            MBConvStage(6, 40, 2, 2, 5),
            MBConvStage(6, 80, 3, 2, 3),
            MBConvStage(6, 112, 3, 1, 5),
            MBConvStage(6, 192, 4, 2, 5),
            MBConvStage(6, 320, 1, 1, 3),
        ),
        head_channels=1280,
        input_size=224,
    ),
    # desk-scale preset for tests and quick CV runs
    "tiny": BackboneConfig(
        preset="tiny",
        stem_channels=8,
        stages=(MBConvStage(1, 8, 1, 1, 3), MBConvStage(6, 16, 1, 2, 3)),
        head_channels=64,
        input_size=32,
    ),
}


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; known presets: {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "efficientsign"
    backbone: BackboneConfig | None = field(default_factory=lambda: PRESETS["b0"])
    se_reduction: int = 16
    spatial_kernel: int = 7
    attention: bool = True
    dropout_p: float = 0.3
    num_classes: int = 26
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}; known kinds: {list(MODEL_KINDS)}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigurationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.kind == "efficientsign" and self.backbone is None:
            raise ConfigurationError("efficientsign needs a backbone config")

    @classmethod
    def efficientsign(cls, preset="b0", **kw):
        return cls(kind="efficientsign", backbone=get_preset(preset), **kw)

    @classmethod
    def baseline(cls, kind, **kw):
        return cls(kind=kind, backbone=None, **kw)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["backbone"] = self.backbone.to_dict() if self.backbone else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("backbone") is not None:
            d["backbone"] = BackboneConfig.from_dict(d["backbone"])
        return cls(**d)


class MBConv(Module):
    """Inverted residual: expand 1x1 -> depthwise kxk -> SE -> project 1x1."""

    def __init__(self, in_ch, out_ch, expansion, kernel, stride, se_ratio, rng, dtype, bn):
        super().__init__()
        mid = in_ch * expansion
        self.expand = ConvBNAct(in_ch, mid, 1, act="silu", rng=rng, dtype=dtype, **bn) if expansion != 1 else None
        self.depthwise = ConvBNAct(mid, mid, kernel, stride, groups=mid, act="silu", rng=rng, dtype=dtype, **bn)
        if se_ratio > 0:
            self.se = SEBlock(mid, hidden=max(1, int(in_ch * se_ratio)), act="silu", rng=rng, dtype=dtype)
        else:
            self.se = None
        self.project = ConvBNAct(mid, out_ch, 1, act=None, rng=rng, dtype=dtype, **bn)
        self.residual = stride == 1 and in_ch == out_ch

    def forward(self, x):
        h = self.expand(x) if self.expand is not None else x
        h = self.depthwise(h)
        if self.se is not None:
            h = self.se(h)
        h = self.project(h)
        return F.add(h, x) if self.residual else h


class Sequential(Module):
    def __init__(self, *mods):
        super().__init__()
        for i, m in enumerate(mods):
            setattr(self, str(i), m)
        self._order = [str(i) for i in range(len(mods))]

    def __iter__(self):
        return (getattr(self, k) for k in self._order)

    def __len__(self):
        return len(self._order)

    def forward(self, x):
        for m in self:
            x = m(x)
        return x


class MBConvBackbone(Module):
    def __init__(self, cfg: BackboneConfig, rng, dtype, bn):
        super().__init__()
        self.cfg = cfg
        self.stem = ConvBNAct(3, cfg.stem_channels, 3, 2, act="silu", rng=rng, dtype=dtype, **bn)
        stages = []
        in_ch = cfg.stem_channels
        for st in cfg.stages:
            blocks = []
            for r in range(st.repeats):
                blocks.append(MBConv(in_ch, st.out_channels, st.expansion, st.kernel,
                                     st.stride if r == 0 else 1, st.internal_se_ratio, rng, dtype, bn))
                in_ch = st.out_channels
            stages.append(Sequential(*blocks))
        self.stages = Sequential(*stages)
        self.head = ConvBNAct(in_ch, cfg.head_channels, 1, act="silu", rng=rng, dtype=dtype, **bn)

    def spatial_plan(self, size):
        """Spatial size after the stem and each stage, or an error naming the first empty stage."""
        sizes = []
        s = (size + 2 - 3) // 2 + 1
        if size < 1 or s < 1:
            raise ConfigurationError(f"input size {size} too small for the stem")
        sizes.append(("stem", s))
        for i, st in enumerate(self.cfg.stages):
            pad = (st.kernel - 1) // 2
            s = (s + 2 * pad - st.kernel) // st.stride + 1
            if s < 1:
                raise ConfigurationError(f"input size {size} collapses to zero at stage {i}")
            sizes.append((f"stage{i}", s))
        return sizes

    def forward(self, x):
        return self.head(self.stages(self.stem(x)))


class BasicBlock(Module):
    def __init__(self, in_ch, out_ch, stride, rng, dtype, bn):
        super().__init__()
        self.conv1 = ConvBNAct(in_ch, out_ch, 3, stride, act="relu", rng=rng, dtype=dtype, **bn)
        self.conv2 = ConvBNAct(out_ch, out_ch, 3, 1, act=None, rng=rng, dtype=dtype, **bn)
        if stride != 1 or in_ch != out_ch:
            self.downsample = ConvBNAct(in_ch, out_ch, 1, stride, act=None, rng=rng, dtype=dtype, **bn)
        else:
            self.downsample = None

    def forward(self, x):
        skip = self.downsample(x) if self.downsample is not None else x
        return F.activation(F.add(self.conv2(self.conv1(x)), skip), "relu")


class ResNet18Backbone(Module):
    def __init__(self, rng, dtype, bn):
        super().__init__()
        self.stem = ConvBNAct(3, 64, 7, 2, act="relu", rng=rng, dtype=dtype, **bn)
        layers = []
        in_ch = 64
        for i, ch in enumerate((64, 128, 256, 512)):
            stride = 1 if i == 0 else 2
            layers.append(Sequential(BasicBlock(in_ch, ch, stride, rng, dtype, bn),
                                     BasicBlock(ch, ch, 1, rng, dtype, bn)))
            in_ch = ch
        self.layers = Sequential(*layers)
        self.out_channels = 512

    def forward(self, x):
        x = F.max_pool2d(self.stem(x), 3, 2, 1)
        return self.layers(x)


class InvertedResidual(Module):
    def __init__(self, in_ch, out_ch, stride, expansion, rng, dtype, bn):
        super().__init__()
        mid = in_ch * expansion
        self.expand = ConvBNAct(in_ch, mid, 1, act="relu6", rng=rng, dtype=dtype, **bn) if expansion != 1 else None
        self.depthwise = ConvBNAct(mid, mid, 3, stride, groups=mid, act="relu6", rng=rng, dtype=dtype, **bn)
        self.project = ConvBNAct(mid, out_ch, 1, act=None, rng=rng, dtype=dtype, **bn)
        self.residual = stride == 1 and in_ch == out_ch

    def forward(self, x):
        h = self.expand(x) if self.expand is not None else x
        h = self.project(self.depthwise(h))
        return F.add(h, x) if self.residual else h


MOBILENETV2_PLAN = ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                    (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1))


class MobileNetV2Backbone(Module):
    def __init__(self, rng, dtype, bn):
        super().__init__()
        self.stem = ConvBNAct(3, 32, 3, 2, act="relu6", rng=rng, dtype=dtype, **bn)
        blocks = []
        in_ch = 32
        for t, c, n, s in MOBILENETV2_PLAN:
            for i in range(n):
                blocks.append(InvertedResidual(in_ch, c, s if i == 0 else 1, t, rng, dtype, bn))
                in_ch = c
        self.blocks = Sequential(*blocks)
        self.head = ConvBNAct(in_ch, 1280, 1, act="relu6", rng=rng, dtype=dtype, **bn)
        self.out_channels = 1280

    def forward(self, x):
        return self.head(self.blocks(self.stem(x)))


class ModelState(Module):
    """A built network: backbone, optional attention pair, dropout and FC head.

    Top-level submodules are ``backbone``, ``se``, ``spatial`` and ``head``;
    parameter names are dotted paths from here.
    """

    def __init__(self, spec: ModelSpec, seed=0, dtype=np.float32):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(seed)
        bn = {"bn_momentum": spec.bn_momentum, "bn_eps": spec.bn_eps}
        if spec.kind == "efficientsign":
            self.backbone = MBConvBackbone(spec.backbone, rng, dtype, bn)
            feat = spec.backbone.head_channels
            if spec.attention:
                self.se = SEBlock(feat, spec.se_reduction, rng=rng, dtype=dtype)
                self.spatial = SpatialAttentionBlock(spec.spatial_kernel, rng=rng, dtype=dtype)
            else:
                self.se = self.spatial = None
            dropout_p = spec.dropout_p
        elif spec.kind == "resnet18":
            self.backbone = ResNet18Backbone(rng, dtype, bn)
            feat = self.backbone.out_channels
            self.se = self.spatial = None
            dropout_p = 0.0
        else:
            self.backbone = MobileNetV2Backbone(rng, dtype, bn)
            feat = self.backbone.out_channels
            self.se = self.spatial = None
            # MobileNetV2's own classifier dropout
            dropout_p = 0.2
        self.feature_dim = feat
        self.dropout_p = dropout_p
        self.head = Linear(feat, spec.num_classes, rng=rng, dtype=dtype)
        for name, p in self.named_parameters():
            p.name = name
        self.eval()

    @property
    def dtype(self):
        return self.head.weight.dtype

    def check_input(self, images):
        if images.ndim != 4 or images.shape[1] != 3:
            raise ConfigurationError(f"expected N x 3 x S x S images, got {images.shape}")
        if isinstance(self.backbone, MBConvBackbone):
            self.backbone.spatial_plan(min(images.shape[2:]))

    def feature_map(self, images):
        """Backbone output after the attention blocks, before pooling."""
        images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        self.check_input(images)
        x = self.backbone(images)
        if self.se is not None:
            x = self.se(x)
        if self.spatial is not None:
            x = self.spatial(x)
        return x

    def forward(self, images, rng=None):
        z = F.global_avg_pool(self.feature_map(images))
        z = F.dropout(z, self.dropout_p, self.training, rng)
        return self.head(z)

    def astype(self, dtype):
        """Copy of this model with every parameter and buffer cast to ``dtype``."""
        clone = ModelState(self.spec, 0, dtype)
        load_arrays(clone, {k: v.astype(dtype) for k, v in state_arrays(self).items()})
        clone.train(self.training)
        return clone


def build_model(spec: ModelSpec, seed=0, dtype=np.float32) -> ModelState:
    """Build and deterministically initialize a model from its spec."""
    return ModelState(spec, seed, dtype)


def forward(model: ModelState, images, mode="eval", rng=None):
    model.train(mode == "train")
    if mode == "train":
        return model(images, rng)
    with no_grad():
        return model(images)


def extract_features(model: ModelState, images, batch_size=64):
    """Post-attention GAP vectors (N x feature_dim) computed in eval mode."""
    was_training = model.training
    model.eval()
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=model.dtype)
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(F.global_avg_pool(model.feature_map(images[i:i + batch_size])).data)
    model.train(was_training)
    if not out:
        return np.zeros((0, model.feature_dim), dtype=model.dtype)
    return np.concatenate(out, axis=0)


def parameter_manifest(model):
    return [(name, tuple(p.shape)) for name, p in model.named_parameters()]


def count_params(model):
    """Total trainable parameter count plus a per-component breakdown."""
    breakdown = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        breakdown[top] = breakdown.get(top, 0) + int(np.prod(p.shape))
    return sum(breakdown.values()), breakdown


def state_arrays(model):
    """All parameters and buffers as name -> ndarray, parameters first."""
    arrays = {name: p.data for name, p in model.named_parameters()}
    arrays.update({name: np.asarray(b) for name, b in model.named_buffers()})
    return arrays


def load_arrays(model, arrays):
    params = dict(model.named_parameters())
    mods = dict(model.named_modules())
    for name, value in arrays.items():
        if name in params:
            p = params[name]
            if p.shape != value.shape:
                raise ConfigurationError(f"array {name} has shape {value.shape}, model expects {p.shape}")
            p.data = np.array(value, dtype=p.dtype)
        else:
            mod_name, _, buf = name.rpartition(".")
            mod = mods.get(mod_name)
            if mod is None or buf not in mod._buffers:
                raise ConfigurationError(f"model has no array named {name}")
            mod.set_buffer(buf, np.array(value, dtype=mod._buffers[buf].dtype))
