"""Dual-input encoder-decoder for binary tool segmentation.

The real-image branch is a ResNet50-style bottleneck encoder. The
simulation-mask branch mirrors its stem and then, at each of four blocks,
concatenates its running features with the matching residual-stage output
before three conv+BN+ReLU layers (1x1 doubling channels, 3x3, strided 3x3).
The decoder starts from both deepest feature maps and climbs back up with
channel-attention fusion blocks fed by skip features from both branches.

Resolution schedule for an ``H x W`` input (``H, W`` divisible by 32)::

    real stem      7x7/2 conv, 3x3/2 maxpool          -> H/4
    real stage 1-4 bottlenecks (first of 2-4 strided)  -> H/4, H/8, H/16, H/32
    sim stem       7x7/2 conv, 3x3/2 maxpool          -> H/4
    sim block 1-4  last conv strided except block 4    -> H/8, H/16, H/32, H/32
    decoder        up2 + fuse x3, fuse at H/4, head, bilinear x4 -> H
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Tuple

import numpy as np

from .autodiff import (
    BatchNormState,
    ShapeError,
    Tensor,
    batchnorm2d,
    clip,
    concat_channels,
    conv2d,
    default_dtype,
    global_avg_pool,
    maxpool2d,
    relu,
    sigmoid,
    upsample_bilinear,
    upsample_nearest2x,
)
from .autodiff.functional import BN_EPS, BN_MOMENTUM

OUTPUT_EPS = 1e-7
BOTTLENECK_EXPANSION = 4


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters that fully determine the network graph.

    Channel counts are given at full scale and multiplied by
    ``width_factor`` (rounded, at least 1).
    """

    width_factor: float = 1.0
    stem_channels: int = 64
    stage_channels: Tuple[int, int, int, int] = (256, 512, 1024, 2048)
    subblocks_per_stage: Tuple[int, int, int, int] = (3, 4, 6, 3)
    input_hw: Tuple[int, int] = (256, 320)
    dual_input: bool = True
    binarize_threshold: float = 0.3
    bn_momentum: float = BN_MOMENTUM
    bn_eps: float = BN_EPS

    def __post_init__(self):
        for name in ("stage_channels", "subblocks_per_stage", "input_hw"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.width_factor <= 0:
            raise ValueError(f"width_factor must be positive, got {self.width_factor}")
        if len(self.stage_channels) != 4 or len(self.subblocks_per_stage) != 4:
            raise ValueError("stage_channels and subblocks_per_stage need exactly 4 entries")
        if min(self.subblocks_per_stage) < 1:
            raise ValueError(f"every stage needs at least one sub-block, got {self.subblocks_per_stage}")
        if min(self.stage_channels) < 1 or self.stem_channels < 1:
            raise ValueError("channel counts must be positive")
        h, w = self.input_hw
        if h % 32 or w % 32:
            raise ValueError(f"input_hw must be divisible by 32, got {self.input_hw}")
        if not 0.0 <= self.binarize_threshold <= 1.0:
            raise ValueError(f"binarize_threshold must lie in [0, 1], got {self.binarize_threshold}")

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.width_factor)))

    @property
    def stem_width(self) -> int:
        return self.scaled(self.stem_channels)

    @property
    def stage_widths(self) -> List[int]:
        return [self.scaled(c) for c in self.stage_channels]

    @property
    def sim_widths(self) -> List[int]:
        """Output channels of the sim stem and its four fusion blocks."""
        widths = [self.stem_width]
        for _ in range(4):
            widths.append(2 * widths[-1])
        return widths

    @property
    def decoder_widths(self) -> List[int]:
        """Input width of the decoder followed by the output of each fusion stage."""
        c = self.stage_widths[3] + (self.sim_widths[4] if self.dual_input else 0)
        widths = [c]
        for _ in range(4):
            widths.append(max(1, widths[-1] // 2))
        return widths

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("stage_channels", "subblocks_per_stage", "input_hw"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# Layout: the ordered list of layers implied by a config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    path: str
    cin: int
    cout: int
    k: int
    stride: int = 1
    bias: bool = False

    @property
    def padding(self) -> int:
        return self.k // 2


@dataclass(frozen=True)
class BNSpec:
    path: str
    channels: int


def _skip_channels(cfg: ModelConfig) -> List[int]:
    real = [cfg.stem_width] + cfg.stage_widths
    sim = cfg.sim_widths
    # decoder stage s (1..4) consumes real [stage3, stage2, stage1, stem] and sim [block2, block1, stem, stem]
    real_skips = [real[3], real[2], real[1], real[0]]
    sim_skips = [sim[2], sim[1], sim[0], sim[0]]
    if not cfg.dual_input:
        return real_skips
    return [r + s for r, s in zip(real_skips, sim_skips)]


def layout(cfg: ModelConfig) -> List[object]:
    """Every conv and batch-norm layer of the network, in initialization order."""
    specs: List[object] = []

    def conv_bn(path, cin, cout, k, stride=1):
        specs.append(ConvSpec(f"{path}.conv", cin, cout, k, stride))
        specs.append(BNSpec(f"{path}.bn", cout))

    conv_bn("real_encoder.stem", 3, cfg.stem_width, 7, 2)
    cin = cfg.stem_width
    for s, (cout, n) in enumerate(zip(cfg.stage_widths, cfg.subblocks_per_stage), start=1):
        mid = max(1, cout // BOTTLENECK_EXPANSION)
        for j in range(1, n + 1):
            p = f"real_encoder.stage{s}.sub{j}"
            stride = 2 if (j == 1 and s > 1) else 1
            specs += [ConvSpec(f"{p}.conv1", cin, mid, 1), BNSpec(f"{p}.bn1", mid),
                      ConvSpec(f"{p}.conv2", mid, mid, 3, stride), BNSpec(f"{p}.bn2", mid),
                      ConvSpec(f"{p}.conv3", mid, cout, 1), BNSpec(f"{p}.bn3", cout)]
            if j == 1:
                specs += [ConvSpec(f"{p}.proj", cin, cout, 1, stride), BNSpec(f"{p}.proj_bn", cout)]
            cin = cout

    if cfg.dual_input:
        sim = cfg.sim_widths
        conv_bn("sim_encoder.stem", 1, sim[0], 7, 2)
        for b in range(1, 5):
            p = f"sim_encoder.block{b}"
            cat = sim[b - 1] + cfg.stage_widths[b - 1]
            specs += [ConvSpec(f"{p}.conv1", cat, sim[b], 1), BNSpec(f"{p}.bn1", sim[b]),
                      ConvSpec(f"{p}.conv2", sim[b], sim[b], 3), BNSpec(f"{p}.bn2", sim[b]),
                      ConvSpec(f"{p}.conv3", sim[b], sim[b], 3, 2 if b < 4 else 1), BNSpec(f"{p}.bn3", sim[b])]

    dec = cfg.decoder_widths
    for s, cs in enumerate(_skip_channels(cfg), start=1):
        p = f"decoder.stage{s}"
        specs += [ConvSpec(f"{p}.attention", dec[s - 1], cs, 1, bias=True),
                  ConvSpec(f"{p}.conv", dec[s - 1] + cs, dec[s], 3), BNSpec(f"{p}.bn", dec[s])]
    specs.append(ConvSpec("head.conv", dec[4], 1, 1, bias=True))
    return specs


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Trainable parameter paths and shapes."""
    shapes: "OrderedDict[str, tuple]" = OrderedDict()
    for spec in layout(cfg):
        if isinstance(spec, ConvSpec):
            shapes[f"{spec.path}.weight"] = (spec.cout, spec.cin, spec.k, spec.k)
            if spec.bias:
                shapes[f"{spec.path}.bias"] = (spec.cout,)
        else:
            shapes[f"{spec.path}.gamma"] = (spec.channels,)
            shapes[f"{spec.path}.beta"] = (spec.channels,)
    return shapes


def buffer_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Batch-norm running statistics paths and shapes."""
    shapes: "OrderedDict[str, tuple]" = OrderedDict()
    for spec in layout(cfg):
        if isinstance(spec, BNSpec):
            shapes[f"{spec.path}.running_mean"] = (spec.channels,)
            shapes[f"{spec.path}.running_var"] = (spec.channels,)
    return shapes


# ---------------------------------------------------------------------------
# The network
# ---------------------------------------------------------------------------

class DualSegNet:
    """Parameters, batch-norm state and forward pass of one network.

    Use :func:`build` to create a seeded instance.
    """

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Tensor]",
                 bn_state: Dict[str, BatchNormState]):
        self.config = config
        self.params = params
        self.bn_state = bn_state
        self._convs = {s.path: s for s in layout(config) if isinstance(s, ConvSpec)}

    # -- state access -------------------------------------------------------

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for path, st in self.bn_state.items():
            out[f"{path}.running_mean"] = st.running_mean
            out[f"{path}.running_var"] = st.running_var
        return out

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, t.data) for k, t in self.params.items())
        out.update(self.buffers())
        return out

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def residual_subblocks(self) -> List[str]:
        return sorted({p.rsplit(".", 2)[0] for p in self.params if ".sub" in p and p.startswith("real_encoder")})

    # -- layers ---------------------------------------------------------------

    def _conv(self, x: Tensor, path: str) -> Tensor:
        spec = self._convs[path]
        bias = self.params.get(f"{path}.bias")
        return conv2d(x, self.params[f"{path}.weight"], bias, stride=spec.stride, padding=spec.padding)

    def _bn(self, x: Tensor, path: str, training: bool) -> Tensor:
        return batchnorm2d(x, self.params[f"{path}.gamma"], self.params[f"{path}.beta"],
                           self.bn_state[path], training=training)

    def _conv_bn_relu(self, x, conv_path, bn_path, training, act=True):
        y = self._bn(self._conv(x, conv_path), bn_path, training)
        return relu(y) if act else y

    def _bottleneck(self, x: Tensor, p: str, training: bool) -> Tensor:
        y = self._conv_bn_relu(x, f"{p}.conv1", f"{p}.bn1", training)
        y = self._conv_bn_relu(y, f"{p}.conv2", f"{p}.bn2", training)
        y = self._conv_bn_relu(y, f"{p}.conv3", f"{p}.bn3", training, act=False)
        if f"{p}.proj.weight" in self.params:
            x = self._conv_bn_relu(x, f"{p}.proj", f"{p}.proj_bn", training, act=False)
        return relu(y + x)

    def attention_fusion(self, decoder_feat: Tensor, skip_feat: Tensor, stage: int, training: bool = False) -> Tensor:
        """Gate ``skip_feat`` per channel from pooled decoder context, then merge.

        ``a = sigmoid(conv1x1(global_avg_pool(decoder_feat)))`` scales the skip
        channels; the result is conv3x3+BN+ReLU over
        ``concat(decoder_feat, a * skip_feat)``.
        """
        if decoder_feat.shape[2:] != skip_feat.shape[2:] or decoder_feat.shape[0] != skip_feat.shape[0]:
            raise ShapeError(f"attention_fusion spatial mismatch: {decoder_feat.shape} vs {skip_feat.shape}")
        p = f"decoder.stage{stage}"
        gate = sigmoid(self._conv(global_avg_pool(decoder_feat), f"{p}.attention"))
        fused = concat_channels(decoder_feat, gate * skip_feat)
        return self._conv_bn_relu(fused, f"{p}.conv", f"{p}.bn", training)

    # -- forward --------------------------------------------------------------

    def forward(self, real, sim=None, training: bool = False, return_features: bool = False):
        """Probability map for a batch of frames.

        Args:
            real: ``[B, 3, H, W]`` image batch scaled to ``[0, 1]``.
            sim: ``[B, 1, H, W]`` simulation mask in ``[0, 1]``; ignored by a
                single-input network.
            training: Use batch statistics (and update running ones) in BN.
            return_features: Also return a dict of intermediate feature maps.

        Returns:
            ``[B, 1, H, W]`` probabilities strictly inside ``(0, 1)``, or the
            pair ``(probabilities, features)``.
        """
        cfg = self.config
        real = real if isinstance(real, Tensor) else Tensor(real)
        if real.ndim != 4 or real.shape[1] != 3:
            raise ShapeError(f"real input must be [B,3,H,W], got {real.shape}")
        B, _, H, W = real.shape
        if H % 32 or W % 32:
            raise ShapeError(f"input height and width must be divisible by 32, got {H}x{W}")
        if cfg.dual_input:
            if sim is None:
                raise ShapeError("dual-input network needs a sim mask")
            sim = sim if isinstance(sim, Tensor) else Tensor(sim)
            if sim.ndim != 4 or sim.shape != (B, 1, H, W):
                raise ShapeError(f"sim input must be [B,1,H,W] matching real {real.shape}, got {sim.shape}")
            if sim.size and (sim.data.min() < 0 or sim.data.max() > 1):
                raise ValueError("sim mask values must lie in [0, 1]")

        feats: Dict[str, Tensor] = {}
        x = self._conv_bn_relu(real, "real_encoder.stem.conv", "real_encoder.stem.bn", training)
        x = maxpool2d(x, 3, 2, 1)
        feats["real.stem"] = x
        for s, n in enumerate(cfg.subblocks_per_stage, start=1):
            for j in range(1, n + 1):
                x = self._bottleneck(x, f"real_encoder.stage{s}.sub{j}", training)
            feats[f"real.stage{s}"] = x

        if cfg.dual_input:
            y = self._conv_bn_relu(sim, "sim_encoder.stem.conv", "sim_encoder.stem.bn", training)
            y = maxpool2d(y, 3, 2, 1)
            feats["sim.stem"] = y
            for b in range(1, 5):
                p = f"sim_encoder.block{b}"
                y = concat_channels(y, feats[f"real.stage{b}"])
                y = self._conv_bn_relu(y, f"{p}.conv1", f"{p}.bn1", training)
                y = self._conv_bn_relu(y, f"{p}.conv2", f"{p}.bn2", training)
                y = self._conv_bn_relu(y, f"{p}.conv3", f"{p}.bn3", training)
                feats[f"sim.block{b}"] = y
            d = concat_channels(feats["sim.block4"], feats["real.stage4"])
        else:
            d = feats["real.stage4"]

        real_skips = ["real.stage3", "real.stage2", "real.stage1", "real.stem"]
        sim_skips = ["sim.block2", "sim.block1", "sim.stem", "sim.stem"]
        for s in range(1, 5):
            if s < 4:
                d = upsample_nearest2x(d)
            skip = feats[real_skips[s - 1]]
            if cfg.dual_input:
                skip = concat_channels(skip, feats[sim_skips[s - 1]])
            d = self.attention_fusion(d, skip, s, training)
            feats[f"decoder.stage{s}"] = d

        logits = upsample_bilinear(self._conv(d, "head.conv"), 4)
        prob = clip(sigmoid(logits), OUTPUT_EPS, 1.0 - OUTPUT_EPS)
        if return_features:
            return prob, feats
        return prob

    __call__ = forward


def build(config: ModelConfig, seed: int = 0, dtype=None) -> DualSegNet:
    """Create a network with deterministic He fan-in initialization.

    Conv weights are drawn from ``N(0, 2 / fan_in)`` in layout order from a
    generator seeded with ``seed``; BN gammas start at 1, betas and biases at 0.
    """
    dtype = dtype or default_dtype()
    rng = np.random.default_rng(seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    bn_state: Dict[str, BatchNormState] = {}
    for spec in layout(config):
        if isinstance(spec, ConvSpec):
            fan_in = spec.cin * spec.k * spec.k
            w = rng.standard_normal((spec.cout, spec.cin, spec.k, spec.k)) * np.sqrt(2.0 / fan_in)
            params[f"{spec.path}.weight"] = Tensor(w, requires_grad=True, dtype=dtype)
            if spec.bias:
                params[f"{spec.path}.bias"] = Tensor(np.zeros(spec.cout), requires_grad=True, dtype=dtype)
        else:
            params[f"{spec.path}.gamma"] = Tensor(np.ones(spec.channels), requires_grad=True, dtype=dtype)
            params[f"{spec.path}.beta"] = Tensor(np.zeros(spec.channels), requires_grad=True, dtype=dtype)
            bn_state[spec.path] = BatchNormState.create(spec.channels, dtype, config.bn_momentum, config.bn_eps)
    return DualSegNet(config, params, bn_state)


def forward(net: DualSegNet, real, sim=None, training: bool = False) -> Tensor:
    return net.forward(real, sim, training=training)


def binarize(prob, threshold: float = 0.3) -> np.ndarray:
    """Foreground wherever ``prob >= threshold``."""
    if isinstance(prob, Tensor):
        prob = prob.data
    return np.asarray(prob) >= threshold


def expected_stage_shapes(config: ModelConfig, batch: int, h: int, w: int) -> Dict[str, tuple]:
    """Feature-map shapes implied by the resolution schedule."""
    out = {"real.stem": (batch, config.stem_width, h // 4, w // 4)}
    for s, c in enumerate(config.stage_widths, start=1):
        f = 4 * 2 ** (s - 1)
        out[f"real.stage{s}"] = (batch, c, h // f, w // f)
    if config.dual_input:
        sim = config.sim_widths
        out["sim.stem"] = (batch, sim[0], h // 4, w // 4)
        for b, f in zip(range(1, 5), (8, 16, 32, 32)):
            out[f"sim.block{b}"] = (batch, sim[b], h // f, w // f)
    dec = config.decoder_widths
    for s, f in zip(range(1, 5), (16, 8, 4, 4)):
        out[f"decoder.stage{s}"] = (batch, dec[s], h // f, w // f)
    return out
