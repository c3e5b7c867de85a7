"""Basic 1-D convolutional building blocks: shallow encoder, deep encoder,
task-specific residual adaptor, classifier.

Every block has a closed-form shape contract (`output_len`) and an analytic
multiply-add count (`multiadds`). Convolutions followed by batch norm carry no
bias; the final linear layer does. Counting rules: a convolution costs
out_len * out_ch * (in_ch / groups) * kernel multiply-adds, a linear layer
costs in * out, and pooling/normalization/activation cost zero.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

BASE_CHANNELS = 128
CLASSIFIER_POOL_LEN = 10

# First-conv strides per residual block. The single-task trunk is deeper than
# the multi-task one; both depths are pinned by the published parameter and
# multiply-add totals.
STS_STRIDES = (1, 2, 1, 2, 1)
MTS_STRIDES = (1, 2, 1)


def conv_out_len(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministic init: fan-in scaled normal for conv/linear weights,
    pass-through batch norm, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Linear)):
            fan_in = m.weight.shape[1] * (m.weight.shape[2] if m.weight.dim() == 3 else 1)
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm1d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


class ShallowEncoder(nn.Module):
    """Grouped conv (one group per link) -> BN -> ReLU -> max pool; P -> P/4."""

    def __init__(self, links: int, subcarriers: int):
        super().__init__()
        self.links = links
        self.subcarriers = subcarriers
        self.conv = nn.Conv1d(links * subcarriers, BASE_CHANNELS * links,
                              kernel_size=7, stride=2, padding=3, groups=links, bias=False)
        self.bn = nn.BatchNorm1d(BASE_CHANNELS * links)
        self.pool = nn.MaxPool1d(kernel_size=3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.links * self.subcarriers:
            raise ValueError(
                f"expected {self.links * self.subcarriers} input channels, got {x.shape[1]}"
            )
        if x.shape[-1] % 4 != 0:
            raise ValueError(f"time length must be divisible by 4, got {x.shape[-1]}")
        return self.pool(F.relu(self.bn(self.conv(x))))

    def output_len(self, length: int) -> int:
        return conv_out_len(conv_out_len(length, 7, 2, 3), 3, 2, 1)

    def multiadds(self, length: int) -> tuple[int, int]:
        conv_len = conv_out_len(length, 7, 2, 3)
        macs = conv_len * (BASE_CHANNELS * self.links) * self.subcarriers * 7
        return macs, conv_out_len(conv_len, 3, 2, 1)


class ResidualBlock(nn.Module):
    """Two 3x1 convs with BN/ReLU and an identity skip; stride-2 blocks project
    the skip with a 1x1 conv + BN."""

    def __init__(self, channels: int, stride: int):
        super().__init__()
        self.stride = stride
        self.conv1 = nn.Conv1d(channels, channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm1d(channels)
        self.conv2 = nn.Conv1d(channels, channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm1d(channels)
        if stride != 1:
            self.proj = nn.Conv1d(channels, channels, 1, stride, bias=False)
            self.proj_bn = nn.BatchNorm1d(channels)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.proj is None else self.proj_bn(self.proj(x))
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + identity)

    def output_len(self, length: int) -> int:
        return conv_out_len(length, 3, self.stride, 1)

    def multiadds(self, length: int) -> tuple[int, int]:
        ch = self.conv1.in_channels
        out_len = self.output_len(length)
        macs = out_len * ch * ch * 3 * 2
        if self.proj is not None:
            macs += out_len * ch * ch
        return macs, out_len


class DeepEncoder(nn.Module):
    """Residual trunk fusing features across links; depth set by the profile."""

    def __init__(self, links: int, strides: tuple[int, ...]):
        super().__init__()
        self.strides = tuple(strides)
        self.blocks = nn.ModuleList(ResidualBlock(BASE_CHANNELS * links, s) for s in strides)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x

    def output_len(self, length: int) -> int:
        for block in self.blocks:
            length = block.output_len(length)
        return length

    def multiadds(self, length: int) -> tuple[int, int]:
        total = 0
        for block in self.blocks:
            macs, length = block.multiadds(length)
            total += macs
        return total, length


class ResidualAdaptor(nn.Module):
    """Per-task compensation branch off the shallow features: one 3x1 stride-2
    conv -> BN -> ReLU; P/4 -> P/8."""

    def __init__(self, links: int):
        super().__init__()
        ch = BASE_CHANNELS * links
        self.conv = nn.Conv1d(ch, ch, 3, 2, 1, bias=False)
        self.bn = nn.BatchNorm1d(ch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.bn(self.conv(x)))

    def output_len(self, length: int) -> int:
        return conv_out_len(length, 3, 2, 1)

    def multiadds(self, length: int) -> tuple[int, int]:
        ch = self.conv.in_channels
        out_len = self.output_len(length)
        return out_len * ch * ch * 3, out_len


class Classifier(nn.Module):
    """Channel-doubling conv -> BN -> ReLU -> pooled to 10 then 1 -> linear.

    The conv is unpadded; this is what reconciles the published multiply-add
    totals and it also means the feature must be at least 3 steps long. Any
    longer input (the time-concatenated multi-branch feature included) is
    accepted; the pooling stage absorbs the length.
    """

    def __init__(self, links: int, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.conv = nn.Conv1d(BASE_CHANNELS * links, 2 * BASE_CHANNELS * links,
                              3, 1, 0, bias=False)
        self.bn = nn.BatchNorm1d(2 * BASE_CHANNELS * links)
        self.fc = nn.Linear(2 * BASE_CHANNELS * links, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] < 3:
            raise ValueError(f"classifier needs a feature of length >= 3, got {x.shape[-1]}")
        y = F.relu(self.bn(self.conv(x)))
        y = F.adaptive_avg_pool1d(y, min(CLASSIFIER_POOL_LEN, y.shape[-1]))
        y = F.adaptive_avg_pool1d(y, 1).flatten(1)
        return self.fc(y)

    def multiadds(self, length: int) -> int:
        in_ch = self.conv.in_channels
        out_len = conv_out_len(length, 3, 1, 0)
        if out_len < 1:
            raise ValueError(f"classifier input length {length} too short")
        return out_len * (2 * in_ch) * in_ch * 3 + self.fc.in_features * self.fc.out_features


def count_parameters(module) -> int:
    """Number of trainable array elements (running statistics excluded).

    Models that carry training-only attachments (per-task linear transforms,
    uncertainty state, frozen teachers) expose ``inference_parameters`` and are
    counted over that view, matching the published totals.
    """
    params = module.inference_parameters() if hasattr(module, "inference_parameters") else module.parameters()
    return sum(p.numel() for p in params)


def count_multiadds(model, input_shape, batch: int = 1) -> int:
    """Analytic multiply-adds for labeling ``batch`` samples of ``input_shape``.

    ``input_shape`` is (S, P) or (L, S, P); only the time length enters the
    count, the channel dimensions must match the model. Works on a full model
    (via ``multiadds_per_sample``) or a single block.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    shape = tuple(int(d) for d in input_shape)
    if len(shape) not in (2, 3):
        raise ValueError(f"input_shape must be (S, P) or (L, S, P), got {shape}")
    length = shape[-1]
    if hasattr(model, "multiadds_per_sample"):
        L, S, _ = model.geometry
        if (len(shape) == 3 and shape[:2] != (L, S)) or (len(shape) == 2 and shape[0] != S):
            raise ValueError(f"input_shape {shape} does not match model geometry {model.geometry}")
        return model.multiadds_per_sample(length) * batch
    macs = model.multiadds(length)
    if isinstance(macs, tuple):
        macs = macs[0]
    return macs * batch
