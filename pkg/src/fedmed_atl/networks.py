"""U-Net translator and the shared-encoder multi-head critic."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAK = 0.2
FEATURE_DIM = 512
HEAD_HIDDEN = 128
N_ROT, N_TRANS, N_SCALE = 4, 4, 3
REALNESS_EPS = 1e-7


@dataclass(frozen=True)
class NetConfig:
    gen_depth: int = 3
    gen_base: int = 16
    disc_base: int = 16
    disc_layers: int = 3
    image_size: int = 64

    @classmethod
    def paper_scale(cls) -> NetConfig:
        return cls(gen_depth=4, gen_base=32, disc_base=64, disc_layers=3, image_size=256)


def _init_(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in scaled normal weights (He gain for the leaky ReLU), zero biases."""
    gain = math.sqrt(2.0 / (1.0 + LEAK ** 2))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * (gain / math.sqrt(fan_in)))
                m.bias.zero_()


def _conv3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1)


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(_conv3(cin, cout), nn.LeakyReLU(LEAK), _conv3(cout, cout), nn.LeakyReLU(LEAK))


class UNetGenerator(nn.Module):
    """Single-channel U-Net with ``depth`` pooling stages and ``base`` channels.

    Level ``i`` works with ``base * 2**i`` channels. Encoder stages are two
    3x3 convolutions followed by 2x2 average pooling; decoder stages upsample
    by nearest neighbour, apply a 3x3 convolution, concatenate the skip
    connection and apply two more 3x3 convolutions. A 1x1 convolution and a
    tanh produce the output in [-1, 1].
    """

    def __init__(self, depth: int = 3, base: int = 16):
        super().__init__()
        if depth < 1 or base < 1:
            raise ValueError(f"depth and base must be >= 1, got depth={depth}, base={base}")
        self.depth, self.base = depth, base
        ch = [base * 2 ** i for i in range(depth + 1)]
        self.down = nn.ModuleList(DoubleConv(1 if i == 0 else ch[i - 1], ch[i]) for i in range(depth))
        self.bottleneck = DoubleConv(ch[depth - 1], ch[depth])
        self.up = nn.ModuleList(_conv3(ch[i + 1], ch[i]) for i in range(depth))
        self.merge = nn.ModuleList(DoubleConv(2 * ch[i], ch[i]) for i in range(depth))
        self.out = nn.Conv2d(ch[0], 1, 1)
        self.act = nn.LeakyReLU(LEAK)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(1)
        h, w = x.shape[-2:]
        m = 2 ** self.depth
        if h % m or w % m:
            raise ValueError(f"generator of depth {self.depth} needs sides divisible by {m}, got {h}x{w}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.avg_pool2d(x, 2)
        x = self.bottleneck(x)
        for i in reversed(range(self.depth)):
            x = self.act(self.up[i](F.interpolate(x, scale_factor=2, mode="nearest")))
            x = self.merge[i](torch.cat([skips[i], x], dim=1))
        y = torch.tanh(self.out(x))
        return y.squeeze(1) if squeeze else y


def generator_param_count(depth: int, base: int) -> int:
    def conv(k, cin, cout):
        return k * k * cin * cout + cout

    ch = [base * 2 ** i for i in range(depth + 1)]
    n = 0
    for i in range(depth):
        cin = 1 if i == 0 else ch[i - 1]
        n += conv(3, cin, ch[i]) + conv(3, ch[i], ch[i])
        n += conv(3, ch[i + 1], ch[i]) + conv(3, 2 * ch[i], ch[i]) + conv(3, ch[i], ch[i])
    n += conv(3, ch[depth - 1], ch[depth]) + conv(3, ch[depth], ch[depth])
    return n + conv(1, ch[0], 1)


@dataclass
class HeadOutputs:
    realness: torch.Tensor     # (N,) in (0, 1)
    rot_logits: torch.Tensor   # (N, 4)
    trans_logits: torch.Tensor # (N, 4)
    scale_logits: torch.Tensor # (N, 3)


def _head(n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(FEATURE_DIM, HEAD_HIDDEN), nn.LeakyReLU(LEAK), nn.Linear(HEAD_HIDDEN, n_out))


class Discriminator(nn.Module):
    """Convolutional encoder to a 512-d feature plus four two-layer heads.

    The encoder stacks ``layers`` stride-2 4x4 convolutions with
    ``base * 2**i`` channels, a 3x3 convolution to 512 channels, and global
    average pooling, so the feature size does not depend on the input size.
    ``head_d`` scores realness; ``head_r``, ``head_t`` and ``head_s`` classify
    the rotation, translation and scale applied by the augmentation module.
    """

    def __init__(self, base: int = 16, layers: int = 3):
        super().__init__()
        if base < 1 or layers < 1:
            raise ValueError(f"base and layers must be >= 1, got base={base}, layers={layers}")
        mods, cin = [], 1
        for i in range(layers):
            cout = base * 2 ** i
            mods += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(LEAK)]
            cin = cout
        mods += [_conv3(cin, FEATURE_DIM), nn.LeakyReLU(LEAK)]
        self.encoder = nn.Sequential(*mods)
        self.layers = layers
        self.head_d = _head(1)
        self.head_r = _head(N_ROT)
        self.head_t = _head(N_TRANS)
        self.head_s = _head(N_SCALE)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if min(x.shape[-2:]) < 2 ** self.layers:
            raise ValueError(f"encoder with {self.layers} stride-2 layers needs sides >= {2 ** self.layers}")
        return self.encoder(x).mean(dim=(2, 3))

    def heads(self, features: torch.Tensor) -> HeadOutputs:
        if features.shape[-1] != FEATURE_DIM:
            raise ValueError(f"heads expect {FEATURE_DIM}-d features, got {features.shape[-1]}")
        return HeadOutputs(
            realness=self.realness_from_features(features),
            rot_logits=self.head_r(features),
            trans_logits=self.head_t(features),
            scale_logits=self.head_s(features),
        )

    def realness_from_features(self, features: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.head_d(features).squeeze(-1)).clamp(REALNESS_EPS, 1 - REALNESS_EPS)

    def realness(self, x: torch.Tensor) -> torch.Tensor:
        return self.realness_from_features(self.encode(x))

    def forward(self, x: torch.Tensor) -> HeadOutputs:
        return self.heads(self.encode(x))


def discriminator_param_count(base: int, layers: int) -> int:
    n, cin = 0, 1
    for i in range(layers):
        cout = base * 2 ** i
        n += 16 * cin * cout + cout
        cin = cout
    n += 9 * cin * FEATURE_DIM + FEATURE_DIM
    for n_out in (1, N_ROT, N_TRANS, N_SCALE):
        n += FEATURE_DIM * HEAD_HIDDEN + HEAD_HIDDEN + HEAD_HIDDEN * n_out + n_out
    return n


def init_generator(depth: int = 3, base: int = 16, seed: int = 0) -> UNetGenerator:
    g = UNetGenerator(depth, base)
    _init_(g, torch.Generator().manual_seed(seed))
    return g


def init_discriminator(base: int = 16, layers: int = 3, seed: int = 0) -> Discriminator:
    d = Discriminator(base, layers)
    _init_(d, torch.Generator().manual_seed(seed))
    return d


def parameters_as_vector(model: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def vector_to_parameters(vec: torch.Tensor, template: nn.Module) -> nn.Module:
    """A copy of ``template`` carrying the values in ``vec``."""
    total = sum(p.numel() for p in template.parameters())
    vec = torch.as_tensor(vec)
    if vec.dim() != 1 or vec.numel() != total:
        raise ValueError(f"parameter vector has {vec.numel()} entries, model needs {total}")
    model = copy.deepcopy(template)
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(vec[offset:offset + p.numel()].view_as(p))
            offset += p.numel()
    return model
