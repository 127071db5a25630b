"""Composite training objective: pixel + perceptual + edge terms.

The total loss is ``l1*pixel + l2*perceptual + l3*edge``. The perceptual term
compares deep features under a fixed pretrained network tapped before its
activation; the edge term compares edge-probability maps under a fixed edge
detector using class-balanced cross-entropy. Both backing networks sit behind
small interfaces so tests (and weight-free installs) can substitute tiny
deterministic networks.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

LOG_EPS = 1e-7

VGG19_WEIGHTS_ENV = "DOCSR_VGG19_WEIGHTS"
HED_WEIGHTS_ENV = "DOCSR_HED_WEIGHTS"


class MissingWeightsError(RuntimeError):
    """A pretrained-weight file required by a backing network is absent."""


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative coefficients of the three loss terms."""

    lambda_pixel: float = 1.0
    lambda_perceptual: float = 0.006
    lambda_edge: float = 1.0

    def validate(self) -> None:
        for name in ("lambda_pixel", "lambda_perceptual", "lambda_edge"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    """Per-term loss values plus the weighted total, as 0-dim tensors.

    ``total`` stays differentiable w.r.t. the super-resolved input.
    """

    pixel: Tensor
    perceptual: Tensor
    edge: Tensor
    total: Tensor

    def as_floats(self) -> dict:
        return {
            "pixel": float(self.pixel.detach()),
            "perceptual": float(self.perceptual.detach()),
            "edge": float(self.edge.detach()),
            "total": float(self.total.detach()),
        }


def _as_batch(img: Tensor) -> Tensor:
    return img.unsqueeze(0) if img.dim() == 3 else img


def _check_same_shape(sr: Tensor, hr: Tensor) -> None:
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {tuple(sr.shape)} vs {tuple(hr.shape)}")


def pixel_loss(sr: Tensor, hr: Tensor) -> Tensor:
    """Pixel-wise mean squared error."""
    _check_same_shape(sr, hr)
    return (sr - hr).pow(2).mean()


def perceptual_loss(sr: Tensor, hr: Tensor, extractor) -> Tensor:
    """Squared feature-map distance, averaged over spatial positions.

    Multi-channel feature maps are additionally averaged over channels so the
    term's scale does not depend on the extractor width.
    """
    _check_same_shape(sr, hr)
    f_sr = extractor(_as_batch(sr))
    f_hr = extractor(_as_batch(hr))
    return (f_hr - f_sr).pow(2).mean()


def class_balanced_bce(pred: Tensor, target: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Class-balanced binary cross-entropy over an edge map.

    ``beta = |negatives| / |all pixels|`` weights the positive term and
    ``1 - beta`` the negative term, offsetting edge-pixel scarcity:

        -( beta * sum_{y=1} log p  +  (1 - beta) * sum_{y=0} log(1 - p) )

    ``pred`` must lie in [0, 1] (it is clamped away from exact 0/1 before the
    log); ``target`` must be binary.
    """
    _check_same_shape(pred, target)
    t = target.detach()
    if not torch.logical_or(t == 0, t == 1).all():
        raise ValueError("target edge map must be binary (values in {0, 1})")
    t = t.to(pred.dtype)
    p = pred.clamp(eps, 1.0 - eps)
    n_total = t.numel()
    n_pos = t.sum()
    beta = (n_total - n_pos) / n_total
    pos_sum = (torch.log(p) * t).sum()
    neg_sum = (torch.log(1.0 - p) * (1.0 - t)).sum()
    return -(beta * pos_sum + (1.0 - beta) * neg_sum)


def binarize_edges(edge_map: Tensor, threshold: float = 0.5) -> Tensor:
    """Hard 0/1 labels from a soft edge-probability map (no gradient)."""
    return (edge_map.detach() > threshold).to(edge_map.dtype)


def edge_loss(sr: Tensor, hr: Tensor, edge_network, threshold: float = 0.5) -> Tensor:
    """Class-balanced BCE between the SR edge map and the binarized HR edge map.

    The prediction stays soft; the class split Y+/Y- comes from thresholding
    the reference image's edge map, so this term is not symmetric in (sr, hr).
    """
    _check_same_shape(sr, hr)
    pred = edge_network(_as_batch(sr))
    with torch.no_grad():
        target = binarize_edges(edge_network(_as_batch(hr)), threshold)
    return class_balanced_bce(pred, target)


def total_loss(
    sr: Tensor,
    hr: Tensor,
    weights: LossWeights,
    feature_extractor=None,
    edge_network=None,
    edge_threshold: float = 0.5,
) -> LossBreakdown:
    """Evaluate all three terms and their weighted sum.

    Terms with zero weight are skipped (reported as 0) and do not require a
    backing network; a nonzero weight without its network is an error.
    """
    weights.validate()
    _check_same_shape(sr, hr)
    zero = sr.new_zeros(())
    px = pixel_loss(sr, hr) if weights.lambda_pixel > 0 else zero
    if weights.lambda_perceptual > 0:
        if feature_extractor is None:
            raise ValueError("lambda_perceptual > 0 requires a feature extractor")
        perc = perceptual_loss(sr, hr, feature_extractor)
    else:
        perc = zero
    if weights.lambda_edge > 0:
        if edge_network is None:
            raise ValueError("lambda_edge > 0 requires an edge network")
        edge = edge_loss(sr, hr, edge_network, edge_threshold)
    else:
        edge = zero
    total = (
        weights.lambda_pixel * px
        + weights.lambda_perceptual * perc
        + weights.lambda_edge * edge
    )
    return LossBreakdown(pixel=px, perceptual=perc, edge=edge, total=total)


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------


class IdentityFeatureExtractor(nn.Module):
    """Returns the image itself; useful for reducing the perceptual term to
    a normalized pixel sum-of-squares in tests."""

    def forward(self, x: Tensor) -> Tensor:
        return x


class TinyFeatureExtractor(nn.Module):
    """A fixed, seed-determined single conv layer tapped pre-activation.

    Stands in for a large pretrained feature network in tests and in
    environments without downloaded weights. Frozen; gradients flow to the
    input only.
    """

    def __init__(self, image_channels: int = 1, feature_channels: int = 8, seed: int = 101):
        super().__init__()
        self.conv = nn.Conv2d(image_channels, feature_channels, 3, padding=1)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.conv.weight.uniform_(-0.5, 0.5, generator=gen)
            self.conv.bias.uniform_(-0.1, 0.1, generator=gen)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


_VGG19_LAYOUT = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
                 512, 512, 512, 512, "M", 512, 512, 512, 512, "M")

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


def _build_vgg19_features() -> nn.Sequential:
    layers: list[nn.Module] = []
    in_ch = 3
    for item in _VGG19_LAYOUT:
        if item == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            layers.append(nn.Conv2d(in_ch, item, 3, padding=1))
            layers.append(nn.ReLU(inplace=True))
            in_ch = item
    return nn.Sequential(*layers)


class Vgg19FeatureExtractor(nn.Module):
    """Deep features from an ImageNet-pretrained VGG19, tapped at the last
    conv of block 5 *before* its activation.

    Weights are loaded from a local file (``weights_path`` argument or the
    ``DOCSR_VGG19_WEIGHTS`` env var); nothing is downloaded. Grayscale inputs
    are replicated to 3 channels and normalized with ImageNet statistics.
    """

    # Sequential index of conv5_4; slicing up to here excludes its ReLU.
    _TAP_INDEX = 34

    def __init__(self, weights_path: Optional[str] = None):
        super().__init__()
        path = weights_path or os.environ.get(VGG19_WEIGHTS_ENV)
        if not path or not os.path.exists(path):
            raise MissingWeightsError(
                f"VGG19 weights not found at {path!r}; download a torchvision-format "
                f"vgg19 state dict and point loss.vgg19_weights or ${VGG19_WEIGHTS_ENV} at it"
            )
        features = _build_vgg19_features()
        state = torch.load(path, map_location="cpu", weights_only=True)
        feat_state = {
            k[len("features."):]: v for k, v in state.items() if k.startswith("features.")
        }
        features.load_state_dict(feat_state or state, strict=True)
        self.features = features[: self._TAP_INDEX + 1]
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        mean = torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1)
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return self.features((x - self.mean) / self.std)


# ---------------------------------------------------------------------------
# Edge networks
# ---------------------------------------------------------------------------


class SobelEdgeNetwork(nn.Module):
    """Tiny fixed edge detector: Sobel gradient magnitude squashed through a
    sigmoid into an edge-probability map in (0, 1).

    Deterministic, differentiable, and weight-free; the stand-in for a
    pretrained edge network.
    """

    def __init__(self, gain: float = 8.0, bias: float = 0.25):
        super().__init__()
        gx = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 4.0
        gy = gx.t().contiguous()
        self.register_buffer("kernel", torch.stack([gx, gy]).unsqueeze(1))
        self.gain = gain
        self.bias = bias

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] > 1:
            x = x.mean(dim=1, keepdim=True)
        g = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), self.kernel.to(x.dtype))
        mag = torch.sqrt(g[:, :1].pow(2) + g[:, 1:].pow(2) + 1e-12)
        return torch.sigmoid(self.gain * (mag - self.bias))


class HedEdgeNetwork(nn.Module):
    """Side output 1 of a pretrained holistically-nested edge detector.

    Only the first VGG16 stage plus its 1x1 score layer is needed, which
    keeps inference cheap. Weights load from a local file (``weights_path``
    or ``DOCSR_HED_WEIGHTS``); inputs are scaled to 0..255 BGR and
    mean-subtracted following the original training convention.
    """

    _BGR_MEAN = (104.00699, 116.66877, 122.67892)

    def __init__(self, weights_path: Optional[str] = None):
        super().__init__()
        path = weights_path or os.environ.get(HED_WEIGHTS_ENV)
        if not path or not os.path.exists(path):
            raise MissingWeightsError(
                f"HED weights not found at {path!r}; provide a state dict with "
                f"conv1_1/conv1_2/score_dsn1 layers via loss.hed_weights or ${HED_WEIGHTS_ENV}"
            )
        self.conv1_1 = nn.Conv2d(3, 64, 3, padding=1)
        self.conv1_2 = nn.Conv2d(64, 64, 3, padding=1)
        self.score_dsn1 = nn.Conv2d(64, 1, 1)
        state = torch.load(path, map_location="cpu", weights_only=True)
        own = {"conv1_1", "conv1_2", "score_dsn1"}
        subset = {k: v for k, v in state.items() if k.split(".")[0] in own}
        self.load_state_dict(subset, strict=True)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        mean = torch.tensor(self._BGR_MEAN).view(1, 3, 1, 1)
        self.register_buffer("mean", mean)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        # RGB -> BGR, 0..255, mean-subtracted.
        x = x.flip(1) * 255.0 - self.mean
        h = F.relu(self.conv1_1(x))
        h = F.relu(self.conv1_2(h))
        return torch.sigmoid(self.score_dsn1(h))


def make_feature_extractor(name: str, image_channels: int = 1,
                           vgg19_weights: Optional[str] = None):
    """Factory used by the run config: 'identity', 'tiny', or 'vgg19'."""
    if name == "identity":
        return IdentityFeatureExtractor()
    if name == "tiny":
        return TinyFeatureExtractor(image_channels=image_channels)
    if name == "vgg19":
        return Vgg19FeatureExtractor(vgg19_weights)
    raise ValueError(f"unknown feature extractor {name!r} (use identity, tiny, or vgg19)")


def make_edge_network(name: str, hed_weights: Optional[str] = None):
    """Factory used by the run config: 'sobel' (tiny built-in) or 'hed'."""
    if name == "sobel":
        return SobelEdgeNetwork()
    if name == "hed":
        return HedEdgeNetwork(hed_weights)
    raise ValueError(f"unknown edge network {name!r} (use sobel or hed)")
