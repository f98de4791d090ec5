"""CIFAR-style classifiers that expose their penultimate features.

Every model takes images in [0, 1] and applies dataset normalization itself,
so triggers are always stamped in pixel space.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHITECTURES = ("vgg13", "vgg16", "resnet18", "preact_resnet18", "small_cnn", "imagenet_pretrained")

_VGG_CFG = {
    "vgg13": [64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    "vgg16": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"],
}


class Classifier(nn.Module):
    def __init__(self, body: nn.Module, embed_dim: int, num_classes: int, mean, std):
        super().__init__()
        self.body = body
        self.embed_dim = embed_dim
        self.head = nn.Linear(embed_dim, num_classes)
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.body((x - self.mean) / self.std)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def _vgg_body(cfg, in_channels: int) -> nn.Module:
    layers: list[nn.Module] = []
    c = in_channels
    for v in cfg:
        if v == "M":
            layers.append(nn.MaxPool2d(2, ceil_mode=True))
        else:
            layers += [nn.Conv2d(c, v, 3, padding=1, bias=False), nn.BatchNorm2d(v), nn.ReLU(inplace=True)]
            c = v
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class PreActBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride, bias=False)

    def forward(self, x):
        out = F.relu(self.bn1(x))
        sc = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + sc


class _ResNetBody(nn.Module):
    def __init__(self, block, in_channels: int, preact: bool, widths=(64, 128, 256, 512)):
        super().__init__()
        self.preact = preact
        self.stem = nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False)
        self.stem_bn = None if preact else nn.BatchNorm2d(widths[0])
        stages = []
        cin = widths[0]
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            stages += [block(cin, w, stride), block(w, w, 1)]
            cin = w
        self.stages = nn.Sequential(*stages)
        self.final_bn = nn.BatchNorm2d(cin) if preact else None

    def forward(self, x):
        out = self.stem(x)
        if self.stem_bn is not None:
            out = F.relu(self.stem_bn(out))
        out = self.stages(out)
        if self.final_bn is not None:
            out = F.relu(self.final_bn(out))
        return torch.flatten(F.adaptive_avg_pool2d(out, 1), 1)


def _small_cnn_body(in_channels: int, widths=(16, 32, 64)) -> nn.Module:
    layers: list[nn.Module] = []
    c = in_channels
    for i, w in enumerate(widths):
        layers += [nn.Conv2d(c, w, 3, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
        if i < len(widths) - 1:
            layers.append(nn.MaxPool2d(2, ceil_mode=True))
        c = w
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers)


def build_model(architecture: str, num_classes: int, in_channels: int = 3,
                mean=None, std=None, width: int | None = None) -> Classifier:
    """Instantiate ``architecture``; ``width`` only affects ``small_cnn``."""
    mean = mean if mean is not None else (0.5,) * in_channels
    std = std if std is not None else (0.25,) * in_channels
    if architecture in _VGG_CFG:
        return Classifier(_vgg_body(_VGG_CFG[architecture], in_channels), 512, num_classes, mean, std)
    if architecture == "resnet18":
        return Classifier(_ResNetBody(BasicBlock, in_channels, False), 512, num_classes, mean, std)
    if architecture == "preact_resnet18":
        return Classifier(_ResNetBody(PreActBlock, in_channels, True), 512, num_classes, mean, std)
    if architecture == "small_cnn":
        w = width or 16
        widths = (w, 2 * w, 4 * w)
        return Classifier(_small_cnn_body(in_channels, widths), widths[-1], num_classes, mean, std)
    if architecture == "imagenet_pretrained":
        import torchvision

        net = torchvision.models.resnet18(weights=torchvision.models.ResNet18_Weights.IMAGENET1K_V1)
        net.fc = nn.Identity()
        return Classifier(net, 512, num_classes, mean, std)
    raise ValueError(f"unknown architecture {architecture!r}")
