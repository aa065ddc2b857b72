"""Network building blocks: 2D translation nets and the 3D segmentation U-Net."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Gaussian init for conv/linear weights, zeros for biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ResnetBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetEncoder(nn.Module):
    """Encoding half of a ResNet generator, with tappable intermediate features.

    Tap indices: 0 is the input image, 1 the stem conv, then one per
    downsampling block, then one per residual block.
    """

    def __init__(self, in_channels: int, base_width: int = 64,
                 downsamplings: int = 2, n_residual_blocks: int = 9):
        super().__init__()
        stages: list[nn.Module] = [
            nn.Sequential(
                nn.ReflectionPad2d(3),
                nn.Conv2d(in_channels, base_width, 7),
                nn.InstanceNorm2d(base_width),
                nn.ReLU(inplace=True),
            )
        ]
        channels = [in_channels, base_width]
        width = base_width
        for _ in range(downsamplings):
            stages.append(
                nn.Sequential(
                    nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
                    nn.InstanceNorm2d(width * 2),
                    nn.ReLU(inplace=True),
                )
            )
            width *= 2
            channels.append(width)
        for _ in range(n_residual_blocks):
            stages.append(ResnetBlock(width))
            channels.append(width)
        self.stages = nn.ModuleList(stages)
        self.tap_channels = tuple(channels)  # per tap index, including input
        self.downsamplings = downsamplings
        self.out_channels = width

    @property
    def n_taps(self) -> int:
        return len(self.stages) + 1

    def forward(self, x, taps: tuple[int, ...] = ()):
        feats = {}
        if 0 in taps:
            feats[0] = x
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if i in taps:
                feats[i] = x
        return x, feats

    def skip_taps(self) -> tuple[int, ...]:
        """Taps feeding the segmentation decoder: stem plus each downsampling."""
        return tuple(range(1, 1 + self.downsamplings))


def default_contrast_taps(encoder: ResnetEncoder, n: int = 5) -> tuple[int, ...]:
    """n tap indices evenly spread from the input to the deepest block."""
    last = encoder.n_taps - 1
    ids = sorted({int(round(i * last / (n - 1))) for i in range(n)})
    return tuple(ids)


class ResnetDecoder(nn.Module):
    """Decoding half: transposed-conv upsampling and a tanh output head."""

    def __init__(self, out_channels: int, base_width: int = 64, downsamplings: int = 2):
        super().__init__()
        layers: list[nn.Module] = []
        width = base_width * 2 ** downsamplings
        for _ in range(downsamplings):
            layers += [
                nn.ConvTranspose2d(width, width // 2, 3, stride=2,
                                   padding=1, output_padding=1),
                nn.InstanceNorm2d(width // 2),
                nn.ReLU(inplace=True),
            ]
            width //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(width, out_channels, 7), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class UnetSegDecoder(nn.Module):
    """U-Net style decoder over the translation encoder's skip features."""

    def __init__(self, base_width: int, downsamplings: int, n_classes: int):
        super().__init__()
        self.downsamplings = downsamplings
        ups, fuses = [], []
        width = base_width * 2 ** downsamplings
        for _ in range(downsamplings):
            skip = width // 2
            ups.append(nn.ConvTranspose2d(width, skip, 2, stride=2))
            fuses.append(
                nn.Sequential(
                    nn.Conv2d(skip * 2, skip, 3, padding=1),
                    nn.InstanceNorm2d(skip),
                    nn.ReLU(inplace=True),
                )
            )
            width = skip
        self.ups = nn.ModuleList(ups)
        self.fuses = nn.ModuleList(fuses)
        self.head = nn.Conv2d(width, n_classes, 1)

    def forward(self, bottleneck, skips):
        # skips ordered shallow -> deep (stem first)
        x = bottleneck
        for up, fuse, skip in zip(self.ups, self.fuses, reversed(skips)):
            x = up(x)
            x = fuse(torch.cat([x, skip], dim=1))
        return self.head(x)


class PatchDiscriminator(nn.Module):
    """70x70 patch discriminator: four strided conv blocks plus a 1-channel head."""

    def __init__(self, in_channels: int, base_width: int = 64):
        super().__init__()
        w = base_width
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, w * 2, 4, stride=2, padding=1),
            nn.InstanceNorm2d(w * 2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w * 2, w * 4, 4, stride=2, padding=1),
            nn.InstanceNorm2d(w * 4),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w * 4, w * 8, 4, stride=1, padding=1),
            nn.InstanceNorm2d(w * 8),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w * 8, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class PatchProjector(nn.Module):
    """Two-layer perceptron head per tapped encoder layer."""

    def __init__(self, tap_channels: dict[int, int], proj_dim: int = 256):
        super().__init__()
        self.heads = nn.ModuleDict(
            {
                str(tap): nn.Sequential(
                    nn.Linear(c, proj_dim),
                    nn.ReLU(inplace=True),
                    nn.Linear(proj_dim, proj_dim),
                )
                for tap, c in tap_channels.items()
            }
        )

    def forward(self, tap: int, feats: torch.Tensor) -> torch.Tensor:
        return self.heads[str(tap)](feats)


class _ConvNormAct3d(nn.Sequential):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__(
            nn.Conv3d(c_in, c_out, 3, stride=stride, padding=1),
            nn.InstanceNorm3d(c_out, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
        )


class UNet3D(nn.Module):
    """3D encoder-decoder segmentation net with deep supervision.

    `depth` resolution levels, channel width doubling capped at `max_width`,
    instance norm + leaky ReLU. Supervision heads sit on the finest
    max(1, depth - 2) decoder outputs; forward returns the head logits
    ordered fine to coarse.
    """

    def __init__(self, n_classes: int, in_channels: int = 1, base_width: int = 32,
                 depth: int = 5, max_width: int = 320):
        super().__init__()
        if depth < 2:
            raise ValueError("depth must be at least 2")
        widths = [min(base_width * 2 ** i, max_width) for i in range(depth)]
        self.depth = depth
        self.n_heads = max(1, depth - 2)

        enc = []
        c_in = in_channels
        for i, w in enumerate(widths):
            enc.append(
                nn.Sequential(
                    _ConvNormAct3d(c_in, w, stride=2 if i > 0 else 1),
                    _ConvNormAct3d(w, w),
                )
            )
            c_in = w
        self.encoder = nn.ModuleList(enc)

        ups, dec = [], []
        for i in range(depth - 1, 0, -1):
            ups.append(nn.ConvTranspose3d(widths[i], widths[i - 1], 2, stride=2))
            dec.append(
                nn.Sequential(
                    _ConvNormAct3d(widths[i - 1] * 2, widths[i - 1]),
                    _ConvNormAct3d(widths[i - 1], widths[i - 1]),
                )
            )
        self.ups = nn.ModuleList(ups)
        self.decoder = nn.ModuleList(dec)
        # heads attach to the finest n_heads decoder outputs
        self.heads = nn.ModuleList(
            nn.Conv3d(widths[i], n_classes, 1) for i in range(self.n_heads)
        )

    def forward(self, x) -> list[torch.Tensor]:
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        outs = []
        for j, (up, dec) in enumerate(zip(self.ups, self.decoder)):
            x = up(x)
            x = dec(torch.cat([x, skips[self.depth - 2 - j]], dim=1))
            level = self.depth - 2 - j  # 0 = full resolution
            if level < self.n_heads:
                outs.append((level, x))
        logits = [self.heads[level](feat) for level, feat in sorted(outs)]
        return logits


def pad_to_multiple(x: torch.Tensor, multiple: tuple[int, int, int]) -> tuple[torch.Tensor, tuple]:
    """Right-pad a (B, C, D, H, W) tensor so spatial dims divide `multiple`."""
    dims = x.shape[2:]
    pads = [(-d) % m for d, m in zip(dims, multiple)]
    if not any(pads):
        return x, tuple(dims)
    pad_arg = []
    for p in reversed(pads):
        pad_arg += [0, p]
    return F.pad(x, pad_arg, value=float(x.min())), tuple(dims)
