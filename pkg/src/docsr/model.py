"""Detail-preserving 2x generator network.

A single network magnifies an image by exactly 2x: a wide-kernel feature
head, a trunk of residual blocks with a long skip connection, one sub-pixel
upsample block, and a sigmoid output head. Larger magnifications are built
by chaining several of these nets (see :mod:`docsr.cascade`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F
from torch import Tensor, nn

# Images are plain tensors: (C, H, W) or batched (B, C, H, W), values in [0, 1].
ImageTensor = Tensor


def validate_image(img: Tensor, name: str = "image") -> None:
    """Check the ImageTensor contract: 3D/4D, finite, values in [0, 1]."""
    if img.dim() not in (3, 4):
        raise ValueError(f"{name} must be (C,H,W) or (B,C,H,W), got shape {tuple(img.shape)}")
    if not torch.isfinite(img).all():
        raise ValueError(f"{name} contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1], got range "
                         f"[{float(img.min()):.4g}, {float(img.max()):.4g}]")


@dataclass(frozen=True)
class DPNetConfig:
    """Architectural hyperparameters of one 2x generator.

    The upsample factor is fixed at 2; depth is controlled by
    ``residual_blocks`` and width by ``feature_channels``.
    """

    residual_blocks: int = 5
    feature_channels: int = 64
    head_kernel: int = 9
    trunk_kernel: int = 3
    tail_kernel: int = 9
    image_channels: int = 1
    upsample_factor: int = 2

    def validate(self) -> None:
        if self.residual_blocks < 1:
            raise ValueError(f"residual_blocks must be >= 1, got {self.residual_blocks}")
        if self.feature_channels < 1:
            raise ValueError(f"feature_channels must be >= 1, got {self.feature_channels}")
        if self.image_channels < 1:
            raise ValueError(f"image_channels must be >= 1, got {self.image_channels}")
        for field in ("head_kernel", "trunk_kernel", "tail_kernel"):
            k = getattr(self, field)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{field} must be a positive odd integer, got {k}")
        if self.upsample_factor != 2:
            raise ValueError(f"upsample_factor is fixed at 2, got {self.upsample_factor}")

    def parameter_count(self) -> int:
        """Number of trainable parameters, derived purely from the config."""
        n, f, c = self.residual_blocks, self.feature_channels, self.image_channels
        hk, tk, ok = self.head_kernel, self.trunk_kernel, self.tail_kernel
        head = c * f * hk * hk + f + 1                       # conv + bias + PReLU slope
        block = 2 * (f * f * tk * tk + f) + 2 * (2 * f) + 1  # 2 convs, 2 BN affines, PReLU
        trunk_tail = f * f * tk * tk + f + 2 * f             # fusion conv + BN affine
        upsample = f * (4 * f) * tk * tk + 4 * f + 1         # conv to 4F channels + PReLU
        tail = f * c * ok * ok + c
        return head + n * block + trunk_tail + upsample + tail

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DPNetConfig":
        unknown = set(d) - {fld for fld in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown DPNetConfig fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def pixel_shuffle(x: Tensor, factor: int = 2) -> Tensor:
    """Rearrange a (4*CO, H, W) feature map into (CO, 2H, 2W).

    Pure depth-to-space permutation: out[k, 2y+dy, 2x+dx] = in[4k + 2*dy + dx, y, x].
    This is the fixed convention used everywhere in this package, including
    checkpoints. Accepts 3D (C,H,W) or 4D (B,C,H,W) inputs.
    """
    if factor != 2:
        raise ValueError(f"only factor 2 is supported, got {factor}")
    if x.dim() not in (3, 4):
        raise ValueError(f"expected 3D or 4D input, got shape {tuple(x.shape)}")
    channels = x.shape[-3]
    if channels % 4 != 0:
        raise ValueError(f"channel count must be divisible by 4, got {channels}")
    return F.pixel_shuffle(x, 2)


class ResidualBlock(nn.Module):
    """conv-BN-PReLU-conv-BN with an identity skip; shape preserving."""

    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv2d(channels, channels, kernel, padding=pad)
        self.bn1 = nn.BatchNorm2d(channels)
        self.act = nn.PReLU()
        self.conv2 = nn.Conv2d(channels, channels, kernel, padding=pad)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.conv1.in_channels:
            raise ValueError(f"expected {self.conv1.in_channels} channels, got {x.shape[-3]}")
        r = self.bn1(self.conv1(x))
        r = self.act(r)
        r = self.bn2(self.conv2(r))
        return x + r


class DPNet(nn.Module):
    """One 2x detail-preserving generator.

    Maps (C, H, W) images in [0, 1] to (C, 2H, 2W) images in (0, 1).
    The head's low-level feature map is added to the trunk output before
    upsampling (low/high-level feature fusion).
    """

    def __init__(self, config: DPNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        c, f = config.image_channels, config.feature_channels
        self.head_conv = nn.Conv2d(c, f, config.head_kernel, padding=config.head_kernel // 2)
        self.head_act = nn.PReLU()
        self.blocks = nn.Sequential(
            *[ResidualBlock(f, config.trunk_kernel) for _ in range(config.residual_blocks)]
        )
        tk = config.trunk_kernel
        self.trunk_conv = nn.Conv2d(f, f, tk, padding=tk // 2)
        self.trunk_bn = nn.BatchNorm2d(f)
        self.up_conv = nn.Conv2d(f, 4 * f, tk, padding=tk // 2)
        self.up_act = nn.PReLU()
        self.tail_conv = nn.Conv2d(f, c, config.tail_kernel, padding=config.tail_kernel // 2)
        # When frozen, the net ignores train() so batch-norm statistics stay fixed.
        self.frozen = False

    def train(self, mode: bool = True) -> "DPNet":
        return super().train(mode and not self.frozen)

    def forward(self, x: Tensor) -> Tensor:
        unbatched = x.dim() == 3
        if unbatched:
            x = x.unsqueeze(0)
        if x.dim() != 4:
            raise ValueError(f"expected (C,H,W) or (B,C,H,W) input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.config.image_channels:
            raise ValueError(
                f"expected {self.config.image_channels} input channels, got {x.shape[1]}"
            )
        low = self.head_act(self.head_conv(x))
        high = self.blocks(low)
        high = self.trunk_bn(self.trunk_conv(high))
        fused = low + high
        up = self.up_act(pixel_shuffle(self.up_conv(fused)))
        out = torch.sigmoid(self.tail_conv(up))
        return out.squeeze(0) if unbatched else out


def init_dpnet(config: DPNetConfig, seed: int) -> DPNet:
    """Build a DPNet with deterministic, seed-driven parameter values.

    Conv weights and biases are drawn uniformly from +-1/sqrt(fan_in) using a
    private generator, PReLU slopes start at 0.25, and batch-norm layers start
    at identity (gamma 1, beta 0, running mean 0, running variance 1). Two
    calls with the same config and seed yield bit-identical parameters.
    """
    config.validate()
    net = DPNet(config)
    gen = torch.Generator().manual_seed(seed & 0x7FFF_FFFF_FFFF_FFFF)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                bound = 1.0 / math.sqrt(fan_in)
                module.weight.uniform_(-bound, bound, generator=gen)
                module.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.fill_(1.0)
                module.bias.fill_(0.0)
                module.running_mean.fill_(0.0)
                module.running_var.fill_(1.0)
                module.num_batches_tracked.fill_(0)
            elif isinstance(module, nn.PReLU):
                module.weight.fill_(0.25)
    for p in net.parameters():
        p.requires_grad_(True)
    return net


def dpnet_forward(net: DPNet, img: ImageTensor) -> ImageTensor:
    """Inference-mode forward pass: (C,H,W) -> (C,2H,2W), outputs in (0, 1)."""
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            out = net(img)
    finally:
        net.train(was_training)
    return out
