"""Sub-patch encoders: a truncated pre-activation ResNet-18 and a small CNN.

Both map a single-channel ``input_side`` x ``input_side`` block to one
d-dimensional embedding via spatial mean pooling of the final feature map.
All weights are trained from scratch; nothing is loaded from pre-trained
sources.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

BACKBONES = ("resnet18v2-block3", "small-cnn")

RESNET_BLOCK3_WIDTH = 256


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str
    embedding_dim: int
    input_side: int

    def validate(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.embedding_dim < 8:
            raise ConfigError(f"embedding_dim must be >= 8, got {self.embedding_dim}")
        if self.backbone == "resnet18v2-block3" and self.embedding_dim != RESNET_BLOCK3_WIDTH:
            raise ConfigError(
                f"resnet18v2-block3 pools to {RESNET_BLOCK3_WIDTH} channels; "
                f"embedding_dim {self.embedding_dim} is inconsistent"
            )
        if self.input_side < 8:
            raise ConfigError(f"input_side too small: {self.input_side}")


@dataclass
class EmbeddingGrid:
    """d-vectors indexed (patch_row, patch_col, sub_row, sub_col)."""

    values: np.ndarray  # (P, P, S, S, d)

    @property
    def dim(self) -> int:
        return self.values.shape[-1]


class SmallCnn(nn.Module):
    """4 stride-2 convs, widths (32, 64, 128, d), BN + ReLU, mean pool."""

    def __init__(self, embedding_dim: int):
        super().__init__()
        widths = (32, 64, 128, embedding_dim)
        layers = []
        in_ch = 1
        for w in widths:
            layers += [
                nn.Conv2d(in_ch, w, kernel_size=3, stride=2, padding=1),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
            ]
            in_ch = w
        self.features = nn.Sequential(*layers)

    def forward(self, x):
        return self.features(x).mean(dim=(2, 3))


class PreActBlock(nn.Module):
    """Pre-activation residual block (BN-ReLU-conv, twice)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)

    def forward(self, x):
        out = F.relu(self.bn1(x))
        residual = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + residual


class ResNet18v2Block3(nn.Module):
    """ResNet-18 v2 kept through its third residual stage; classifier dropped."""

    def __init__(self):
        super().__init__()
        self.stem = nn.Conv2d(1, 64, 7, stride=2, padding=3, bias=False)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.stage1 = nn.Sequential(PreActBlock(64, 64, 1), PreActBlock(64, 64, 1))
        self.stage2 = nn.Sequential(PreActBlock(64, 128, 2), PreActBlock(128, 128, 1))
        self.stage3 = nn.Sequential(PreActBlock(128, 256, 2), PreActBlock(256, 256, 1))
        self.bn_out = nn.BatchNorm2d(256)

    def forward(self, x):
        x = self.pool(self.stem(x))
        x = self.stage3(self.stage2(self.stage1(x)))
        x = F.relu(self.bn_out(x))
        return x.mean(dim=(2, 3))


def init_encoder(config: EncoderConfig, seed: int) -> nn.Module:
    """Build an encoder with seed-deterministic, from-scratch weights."""
    config.validate()
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        if config.backbone == "small-cnn":
            model = SmallCnn(config.embedding_dim)
        else:
            model = ResNet18v2Block3()
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def encode(
    blocks: np.ndarray,
    encoder: nn.Module,
    input_side: int,
    batch_size: int = 512,
) -> EmbeddingGrid:
    """Encode extracted sub-patch blocks into an EmbeddingGrid.

    Runs the encoder in inference mode (running batch-norm statistics), so
    the result is deterministic for fixed weights and independent of the
    batch grouping.
    """
    if blocks.shape[-2:] != (input_side, input_side):
        raise ShapeError(
            f"block side {blocks.shape[-2:]} does not match encoder input_side "
            f"{input_side}"
        )
    grid_shape = blocks.shape[:-2]
    flat = torch.from_numpy(
        np.ascontiguousarray(blocks, dtype=np.float32).reshape(
            -1, 1, input_side, input_side
        )
    )
    was_training = encoder.training
    encoder.eval()
    try:
        outs = []
        with torch.no_grad():
            for i in range(0, flat.shape[0], batch_size):
                outs.append(encoder(flat[i : i + batch_size]))
        z = torch.cat(outs, dim=0).numpy()
    finally:
        encoder.train(was_training)
    return EmbeddingGrid(values=z.reshape(*grid_shape, z.shape[-1]))


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
