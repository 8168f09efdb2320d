"""SPEEDNet assembly, ablation variants and parameter accounting."""
from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from speednet import ops
from speednet.layers import ConvBlock, Conv2d, DipcBlock, Module, ModuleList

VARIANTS = ("full", "no-involution", "dilated-bottleneck")


class ConfigError(ValueError):
    pass


@dataclass
class SpeedNetConfig:
    img_size: int = 224
    encoder_channels: tuple[int, ...] = (32, 32, 64, 128)
    bottleneck_channels: int = 128
    decoder_channels: tuple[int, ...] = (64, 64, 32, 32, 32)
    involution_k: int = 7
    involution_r: int = 4
    involution_groups: int | None = None  # None: max(1, C // 16)
    dilations: tuple[int, ...] = (1, 2, 4)
    variant: str = "full"
    bottleneck_dilation: int = 2
    dipc_residual: bool = True
    out_classes: int = 1
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.dilations = tuple(int(d) for d in self.dilations)
        self.variant = self.variant.lower().replace("_", "-")

    def validate(self) -> None:
        cs = self.encoder_channels
        if len(cs) != 4:
            raise ConfigError(f"encoder_channels needs 4 entries, got {len(cs)}")
        if len(self.decoder_channels) != 5:
            raise ConfigError(f"decoder_channels needs 5 entries, got {len(self.decoder_channels)}")
        if self.img_size % 16:
            raise ConfigError(f"img_size {self.img_size} must be divisible by 16")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.out_classes != 1:
            raise ConfigError("only single-channel (binary) heads are supported")
        if self.involution_k % 2 != 1:
            raise ConfigError(f"involution_k must be odd, got {self.involution_k}")
        for level, c in enumerate(cs, start=1):
            groups = self.groups_for(c)
            if c % groups or c % self.involution_r:
                raise ConfigError(
                    f"level {level}: {c} channels not divisible by groups {groups} "
                    f"and reduction {self.involution_r}")

    def groups_for(self, channels: int) -> int:
        if self.involution_groups is not None:
            return self.involution_groups
        return max(1, channels // 16)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("encoder_channels", "decoder_channels", "dilations"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SpeedNetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def toy_config(img_size: int = 32, **overrides) -> SpeedNetConfig:
    """Narrow configuration for tests, gradient checks and desk-scale runs."""
    base = dict(img_size=img_size, encoder_channels=(4, 4, 8, 8), bottleneck_channels=8,
                decoder_channels=(8, 8, 4, 4, 4), involution_k=3, involution_r=2,
                involution_groups=1)
    base.update(overrides)
    return SpeedNetConfig(**base)


class SpeedNet(Module):
    """Encoder of four DIPC levels, bottleneck, five-stage decoder, sigmoid head.

    Encoder level ``n`` runs a DIPC block (``c_n -> 2 c_n``, spatial halved)
    followed by two conv blocks mapping ``2 c_n -> c_{n+1}``; the features
    entering each DIPC block are kept as skip connections. Decoder stages 1-4
    upsample, concatenate the matching skip and apply a conv-block pair;
    stage 5 refines at full resolution.
    """

    def __init__(self, config: SpeedNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        cs = config.encoder_channels
        nxt = list(cs[1:]) + [config.bottleneck_channels]
        self.stem = ModuleList([ConvBlock(3, cs[0], rng=rng), ConvBlock(cs[0], cs[0], rng=rng)])
        self.dipc = ModuleList()
        self.pairs = ModuleList()
        for level, (c, cn) in enumerate(zip(cs, nxt), start=1):
            self.dipc.append(DipcBlock(
                level, c, config.involution_k, config.dilations, config.involution_r,
                config.groups_for(c), residual=config.dipc_residual,
                use_involution=config.variant != "no-involution", rng=rng))
            self.pairs.append(ModuleList([ConvBlock(2 * c, cn, rng=rng), ConvBlock(cn, cn, rng=rng)]))
        bd = config.bottleneck_dilation if config.variant == "dilated-bottleneck" else 1
        b = config.bottleneck_channels
        self.bottleneck = ModuleList([ConvBlock(b, b, dilation=bd, rng=rng),
                                      ConvBlock(b, b, dilation=bd, rng=rng)])
        self.decoder = ModuleList()
        prev = b
        skips = list(reversed(cs))
        for stage, width in enumerate(config.decoder_channels):
            cin = prev + skips[stage] if stage < 4 else prev
            self.decoder.append(ModuleList([ConvBlock(cin, width, rng=rng),
                                            ConvBlock(width, width, rng=rng)]))
            prev = width
        self.head = Conv2d(prev, config.out_classes, 1, rng=rng)
        self._cache = None
        self.encoder_shapes: list[tuple[int, ...]] = []

    @staticmethod
    def _seq(blocks, x):
        for blk in blocks:
            x = blk(x)
        return x

    @staticmethod
    def _seq_back(blocks, g):
        for blk in reversed(list(blocks)):
            g = blk.backward(g)
        return g

    def forward(self, image):
        n, c, h, w = ops.check4(image, "speednet")
        size = self.config.img_size
        if (c, h, w) != (3, size, size):
            raise ops.ShapeError("speednet", "input shape", (n, 3, size, size), image.shape)
        x = self._seq(self.stem, image)
        skips = []
        self.encoder_shapes = []
        for dipc, pair in zip(self.dipc, self.pairs):
            skips.append(x)
            x = self._seq(pair, dipc(x, image))
            self.encoder_shapes.append(x.shape)
        x = self._seq(self.bottleneck, x)
        widths = []
        for stage, blocks in enumerate(self.decoder):
            if stage < 4:
                x = ops.upsample2x(x)
                skip = skips[-1 - stage]
                widths.append((x.shape[1], skip.shape[1]))
                x = ops.concat_channels([x, skip])
            x = self._seq(blocks, x)
        y = ops.sigmoid(self.head(x))
        self._cache = (widths, y) if self.training else None
        return y

    def backward(self, grad_out):
        """Backpropagate into every parameter.

        The returned input gradient covers the stem path only; the salient
        maps are treated as constants of the image.
        """
        widths, y = self._need_cache(self._cache)
        g = self.head.backward(ops.sigmoid_backward(y, grad_out))
        skip_grads = [None] * 4
        for stage in reversed(range(len(self.decoder))):
            g = self._seq_back(self.decoder[stage], g)
            if stage < 4:
                g, gs = ops.concat_channels_backward(g, widths[stage])
                skip_grads[3 - stage] = gs
                g = ops.upsample2x_backward(g)
        g = self._seq_back(self.bottleneck, g)
        for level in reversed(range(4)):
            g = self.dipc[level].backward(self._seq_back(self.pairs[level], g))
            g = g + skip_grads[level]
        return self._seq_back(self.stem, g)


def build(config: SpeedNetConfig) -> SpeedNet:
    return SpeedNet(config)


@dataclass
class ParamReport:
    trainable: int
    total_with_stats: int
    bytes32: int
    per_module: dict[str, int] = field(default_factory=dict)


def count_parameters(model: SpeedNet) -> ParamReport:
    """Trainable count, count including BN running stats, and checkpoint bytes."""
    from speednet.checkpoint import dump_checkpoint

    trainable = model.param_count()
    stats = sum(b.size for _, b in model.named_buffers())
    per_module = {}
    for name, child in model._children.items():
        per_module[name] = child.param_count()
    buf = io.BytesIO()
    dump_checkpoint(buf, model, dtype=np.float32)
    return ParamReport(trainable, trainable + stats, buf.tell(), per_module)
