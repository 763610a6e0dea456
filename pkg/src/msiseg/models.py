"""Segmentation architectures: residual encoder, SharpMask and RefineNet heads, conv autoencoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import tensor as T
from .engine.layers import BatchNorm, Conv2d, Dense, Module, PreActConv
from .engine.tensor import Tensor
from .errors import ArgumentError, ShapeError


# -- specs -------------------------------------------------------------------

@dataclass
class EncoderSpec:
    macro_layers: int = 5
    channels: tuple = (16, 32, 64, 128, 256)
    blocks: tuple = (1, 1, 1, 1, 1)
    in_bands: int = 6
    stem_channels: int = 16

    def validate(self) -> "EncoderSpec":
        if self.macro_layers < 1:
            raise ArgumentError("encoder needs >= 1 macro-layer")
        if len(self.channels) < self.macro_layers or len(self.blocks) < self.macro_layers:
            raise ArgumentError(f"channels/blocks must list >= {self.macro_layers} entries")
        if min(self.channels[:self.macro_layers]) < 1 or min(self.blocks[:self.macro_layers]) < 1:
            raise ArgumentError("channels and blocks must be >= 1")
        if self.in_bands < 1 or self.stem_channels < 1:
            raise ArgumentError("in_bands and stem_channels must be >= 1")
        return self

    def truncated(self, macro_layers: int) -> "EncoderSpec":
        """Same encoder cut after ``macro_layers`` (shares parameter names)."""
        return EncoderSpec(macro_layers, tuple(self.channels[:macro_layers]), tuple(self.blocks[:macro_layers]),
                           self.in_bands, self.stem_channels)


@dataclass
class SharpMaskHeadSpec:
    bridge_width: int = 64
    base: int = 128


@dataclass
class RefineNetHeadSpec:
    width: int = 32
    rcu_blocks: int = 2
    mrf_scales: int = 2
    crp_windows: tuple = (2, 4, 8, 16)
    output_rcu: int = 1
    # init gain on convs closing a residual sum (RCU, MRF, CRP); keeps the
    # coarse-to-fine cascade from inflating activations
    branch_gain: float = 0.25

    def validate(self) -> "RefineNetHeadSpec":
        if self.mrf_scales != 2:
            raise ArgumentError("MRF fuses exactly two resolutions")
        if len(self.crp_windows) != 4 or min(self.crp_windows) < 1:
            raise ArgumentError("CRP chains exactly four pooling windows >= 1")
        if self.width < 1 or self.rcu_blocks < 0 or self.output_rcu < 0 or self.branch_gain < 0:
            raise ArgumentError("invalid RefineNet head widths/counts")
        return self


@dataclass
class CaeSpec:
    in_bands: int = 6
    conv_widths: tuple = (32, 64, 128)
    bottleneck: int = 256
    hidden: int = 32

    def validate(self) -> "CaeSpec":
        if not self.conv_widths or min(self.conv_widths) < 1 or self.bottleneck < 1 or self.in_bands < 1:
            raise ArgumentError("invalid CAE widths")
        if self.conv_widths[0] != self.hidden:
            raise ArgumentError("the last hidden map pairs with the first conv block; widths must match")
        return self


def refinement_widths(base: int, modules: int = 4) -> list[int]:
    """k_s^i = k_m^i = base / 2^(i-1) for refinement module i = 1..modules."""
    out = []
    for i in range(1, modules + 1):
        w, rem = divmod(base, 2 ** (i - 1))
        if rem or w < 1:
            raise ArgumentError(f"base {base} not divisible by 2^{i - 1}")
        out.append(w)
    return out


def _check_classes(classes):
    if classes < 2:
        raise ArgumentError(f"need >= 2 classes, got {classes}")


# -- encoder -----------------------------------------------------------------

class PreActBlock(Module):
    """Pre-activation residual block; a stride-2 block carries a 1x1 projection shortcut."""

    def __init__(self, cin, cout, stride=1, rng=None, zero_init_residual=False):
        self.bn1 = BatchNorm(cin)
        self.conv1 = Conv2d(cin, cout, 3, stride, rng=rng)
        self.bn2 = BatchNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, 1, rng=rng, zero_init=zero_init_residual)
        self.shortcut = Conv2d(cin, cout, 1, stride, rng=rng) if (stride != 1 or cin != cout) else None

    def forward(self, x):
        a = T.relu(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(a)
        h = self.conv2(T.relu(self.bn2(self.conv1(a))))
        return T.add(h, skip)


class MacroLayer(Module):
    def __init__(self, cin, cout, blocks, rng, zero_init_residual=False):
        self.blocks = [PreActBlock(cin if b == 0 else cout, cout, 2 if b == 0 else 1, rng, zero_init_residual)
                       for b in range(blocks)]

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class Encoder(Module):
    """Stem conv at full resolution, then macro-layers that each halve H and W once.

    ``forward`` returns the feature maps after every macro-layer, F^1..F^L.
    """

    def __init__(self, spec: EncoderSpec, rng=None, zero_init_residual=False):
        self.spec = spec.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stem = Conv2d(spec.in_bands, spec.stem_channels, 3, rng=rng)
        cin = spec.stem_channels
        self.macro = []
        for i in range(spec.macro_layers):
            self.macro.append(MacroLayer(cin, spec.channels[i], spec.blocks[i], rng, zero_init_residual))
            cin = spec.channels[i]

    @property
    def channels(self):
        return list(self.spec.channels[:self.spec.macro_layers])

    def check_input(self, x: Tensor):
        if x.values.ndim != 4 or x.shape[1] != self.spec.in_bands:
            raise ShapeError(f"expected N x {self.spec.in_bands} x H x W input, got {x.shape}")
        f = 2 ** self.spec.macro_layers
        if x.shape[2] % f or x.shape[3] % f:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} not divisible by {f}")

    def forward(self, x: Tensor) -> list[Tensor]:
        self.check_input(x)
        h = self.stem(x)
        feats = []
        for m in self.macro:
            h = m(h)
            feats.append(h)
        return feats


def build_encoder(spec: EncoderSpec, seed=0, zero_init_residual=False) -> Encoder:
    return Encoder(spec, np.random.default_rng(seed), zero_init_residual)


class PatchClassifier(Module):
    """Encoder + BN/ReLU + global mean pool + dense: the patch-classification pretraining net."""

    def __init__(self, spec: EncoderSpec, classes: int, rng=None):
        _check_classes(classes)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.encoder = Encoder(spec, rng)
        self.bn = BatchNorm(spec.channels[spec.macro_layers - 1])
        self.fc = Dense(spec.channels[spec.macro_layers - 1], classes, rng)
        self.classes = classes

    def forward(self, x):
        f = self.encoder(x)[-1]
        return self.fc(T.global_meanpool(T.relu(self.bn(f))))


# -- SharpMask ---------------------------------------------------------------

class RefinementModule(Module):
    """BN->ReLU->3x3 conv on F^i and on M^i, sum, nearest 2x upsample."""

    def __init__(self, f_channels, m_channels, width, rng):
        self.f_branch = PreActConv(f_channels, width, 3, rng=rng)
        self.m_branch = PreActConv(m_channels, width, 3, rng=rng)

    def forward(self, f, m, zero_skip=False):
        if zero_skip:
            f = T.scale(f, 0.0)
        return T.upsample(T.add(self.f_branch(f), self.m_branch(m)), 2)


class SharpMask(Module):
    def __init__(self, encoder: Encoder, head: SharpMaskHeadSpec, classes: int, rng=None):
        _check_classes(classes)
        levels = encoder.spec.macro_layers
        if levels < 2:
            raise ArgumentError("SharpMask needs an encoder with >= 2 macro-layers")
        rng = rng if rng is not None else np.random.default_rng(1)
        self.encoder = encoder
        self.head = head
        self.widths = refinement_widths(head.base, levels)
        ch = encoder.channels
        self.bridge = PreActConv(ch[-1], head.bridge_width, 1, rng=rng)
        # refine[i] is refinement module i+1; module L (deepest) runs first
        self.refine = []
        for i in range(levels):
            m_in = head.bridge_width if i == levels - 1 else self.widths[i + 1]
            self.refine.append(RefinementModule(ch[i], m_in, self.widths[i], rng))
        self.classifier = PreActConv(self.widths[0], classes, 1, rng=rng)
        self.classes = classes

    def forward_head(self, feats: list[Tensor], zero_skips=False) -> Tensor:
        m = self.bridge(feats[-1])
        for i in reversed(range(len(self.refine))):
            m = self.refine[i](feats[i], m, zero_skip=zero_skips)
        return self.classifier(m)

    def forward(self, x, zero_skips=False):
        return self.forward_head(self.encoder(x), zero_skips)


def build_sharpmask(encoder: Encoder, head: SharpMaskHeadSpec, classes: int, seed=1) -> SharpMask:
    return SharpMask(encoder, head, classes, np.random.default_rng(seed))


# -- RefineNet ---------------------------------------------------------------

class RCU(Module):
    """Residual conv unit: x + conv(relu(bn(conv(relu(bn(x))))))."""

    def __init__(self, width, rng, zero_init=False, gain=1.0):
        self.a = PreActConv(width, width, 3, rng=rng, zero_init=zero_init)
        self.b = PreActConv(width, width, 3, rng=rng, zero_init=zero_init, gain=gain)

    def forward(self, x):
        return T.add(x, self.b(self.a(x)))


class MRF(Module):
    """Fuse a fine path with a 2x coarser one: conv(fine) + up(conv(coarse))."""

    def __init__(self, width, rng, zero_init=False, gain=1.0):
        self.fine = Conv2d(width, width, 3, rng=rng, zero_init=zero_init, gain=gain)
        self.coarse = Conv2d(width, width, 3, rng=rng, zero_init=zero_init, gain=gain)

    def forward(self, fine, coarse):
        return T.add(self.fine(fine), T.upsample(self.coarse(coarse), 2))


class CRP(Module):
    """ReLU, then a chain of stride-1 same-padded max pools each followed by a conv, all summed.

    A window of at least ``2*max(H, W) - 1`` already reaches the whole map from
    every position, so larger windows are clamped to that (identical output).
    """

    def __init__(self, width, windows, rng, zero_init=False, gain=1.0):
        self.windows = tuple(windows)
        self.convs = [Conv2d(width, width, 3, rng=rng, zero_init=zero_init, gain=gain) for _ in windows]

    def forward(self, x):
        x = T.relu(x)
        out, path = x, x
        cap = 2 * max(x.shape[2], x.shape[3]) - 1
        for w, conv in zip(self.windows, self.convs):
            k = min(w, cap)
            path = conv(T.maxpool(path, k, 1, ((k - 1) // 2, k - 1 - (k - 1) // 2)))
            out = T.add(out, path)
        return out


class RefineNetBlock(Module):
    def __init__(self, f_channels, width, spec: RefineNetHeadSpec, rng, has_coarse: bool):
        self.adapt = PreActConv(f_channels, width, 3, rng=rng)
        g = spec.branch_gain
        self.rcu_f = [RCU(width, rng, gain=g) for _ in range(spec.rcu_blocks)]
        self.has_coarse = has_coarse
        if has_coarse:
            self.rcu_c = [RCU(width, rng, gain=g) for _ in range(spec.rcu_blocks)]
            self.mrf = MRF(width, rng, gain=g)
        self.crp = CRP(width, spec.crp_windows, rng, gain=g)
        self.out_rcu = [RCU(width, rng, gain=g) for _ in range(spec.output_rcu)]

    def forward(self, f, coarse=None):
        h = self.adapt(f)
        for r in self.rcu_f:
            h = r(h)
        if self.has_coarse:
            for r in self.rcu_c:
                coarse = r(coarse)
            h = self.mrf(h, coarse)
        h = self.crp(h)
        for r in self.out_rcu:
            h = r(h)
        return h


class RefineNet(Module):
    """Cascaded RefineNet blocks, deepest first; block i fuses F^i with block i+1's output."""

    def __init__(self, encoder: Encoder, head: RefineNetHeadSpec, classes: int, rng=None):
        _check_classes(classes)
        head.validate()
        levels = encoder.spec.macro_layers
        if levels < 2:
            raise ArgumentError("RefineNet needs an encoder with >= 2 macro-layers")
        rng = rng if rng is not None else np.random.default_rng(2)
        self.encoder = encoder
        self.head = head
        ch = encoder.channels
        self.blocks = [RefineNetBlock(ch[i], head.width, head, rng, has_coarse=i < levels - 1)
                       for i in range(levels)]
        self.classifier = PreActConv(head.width, classes, 1, rng=rng)
        self.classes = classes

    def forward_head(self, feats):
        h = None
        for i in reversed(range(len(self.blocks))):
            h = self.blocks[i](feats[i], h)
        return self.classifier(T.upsample(h, 2))

    def forward(self, x):
        return self.forward_head(self.encoder(x))


def build_refinenet(encoder: Encoder, head: RefineNetHeadSpec, classes: int, seed=2) -> RefineNet:
    return RefineNet(encoder, head, classes, np.random.default_rng(seed))


# -- convolutional autoencoder -----------------------------------------------

class ConvBlock(Module):
    def __init__(self, cin, cout, kernel, rng):
        self.conv = Conv2d(cin, cout, kernel, rng=rng)
        self.bn = BatchNorm(cout)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class CAE(Module):
    """Conv blocks with 2x max pooling, a 1x1 bottleneck, and refinement blocks
    (upsample, conv, sum with the same-resolution conv block) back to full size.

    The last refinement output is the hidden feature map; a 1x1 conv reconstructs the bands.
    """

    def __init__(self, spec: CaeSpec, rng=None):
        self.spec = spec.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        w = spec.conv_widths
        self.down = [ConvBlock(spec.in_bands if i == 0 else w[i - 1], w[i], 3, rng) for i in range(len(w))]
        self.bottleneck = ConvBlock(w[-1], spec.bottleneck, 1, rng)
        ups = [spec.bottleneck] + list(w[::-1])
        self.up = [ConvBlock(ups[j], ups[j + 1], 3, rng) for j in range(len(w))]
        self.recon = Conv2d(w[0], spec.in_bands, 1, rng=rng)

    @property
    def depth(self):
        return len(self.spec.conv_widths)

    def hidden(self, x: Tensor) -> Tensor:
        if x.values.ndim != 4 or x.shape[1] != self.spec.in_bands:
            raise ShapeError(f"expected N x {self.spec.in_bands} x H x W, got {x.shape}")
        f = 2 ** self.depth
        if x.shape[2] % f or x.shape[3] % f:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} not divisible by {f}")
        skips = []
        h = x
        for blk in self.down:
            h = blk(h)
            skips.append(h)
            h = T.maxpool(h, 2)
        h = self.bottleneck(h)
        for blk, skip in zip(self.up, reversed(skips)):
            h = T.add(blk(T.upsample(h, 2)), skip)
        return h

    def forward(self, x):
        return self.recon(self.hidden(x))


def build_cae(spec: CaeSpec, seed=0) -> CAE:
    return CAE(spec, np.random.default_rng(seed))


# -- desk-scale graphs for gradient checking ---------------------------------

MINI_ENCODER = EncoderSpec(5, (4, 4, 4, 8, 8), (1, 1, 1, 1, 1), 6, 4)


def mini_sharpmask(classes=3, seed=0) -> SharpMask:
    return build_sharpmask(build_encoder(MINI_ENCODER.truncated(4), seed), SharpMaskHeadSpec(8, 8), classes, seed)


def mini_refinenet(classes=3, seed=0) -> RefineNet:
    return build_refinenet(build_encoder(MINI_ENCODER, seed), RefineNetHeadSpec(3, 1, output_rcu=1), classes, seed)
