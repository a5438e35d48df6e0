"""Small convnets for the desk-scale model zoo (3x32x32 inputs).

Each architecture downsamples 32 -> 2 so that its last convolutions read
2x2 feature maps, which makes them eligible interception points under the
1/16 rule. They differ in depth, width, pooling and skip connections so
that transfer between them is non-trivial.
"""

import torch.nn as nn


def _conv(cin, cout, stride=1, k=3):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False)


class VGGish(nn.Module):
    def __init__(self, in_channels=3, num_classes=10):
        super().__init__()
        widths = [(in_channels, 8), (8, 16), (16, 32), (32, 48)]
        layers = []
        for cin, cout in widths:
            layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
        layers += [nn.Conv2d(48, 64, 3, padding=1), nn.ReLU(), nn.Conv2d(64, 64, 3, padding=1), nn.ReLU()]
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(64, num_classes)

    def forward(self, x):
        return self.fc(self.pool(self.features(x)).flatten(1))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = _conv(cin, cout, stride)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = _conv(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU()
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ResNetish(nn.Module):
    def __init__(self, in_channels=3, num_classes=10):
        super().__init__()
        self.stem = nn.Sequential(_conv(in_channels, 8), nn.BatchNorm2d(8), nn.ReLU())
        self.layer1 = BasicBlock(8, 16, 2)
        self.layer2 = BasicBlock(16, 32, 2)
        self.layer3 = BasicBlock(32, 48, 2)
        self.layer4 = nn.Sequential(BasicBlock(48, 64, 2), BasicBlock(64, 64))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(64, num_classes)

    def forward(self, x):
        x = self.layer3(self.layer2(self.layer1(self.stem(x))))
        return self.fc(self.pool(self.layer4(x)).flatten(1))


class MobileBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.dw = nn.Conv2d(cin, cin, 3, stride=stride, padding=1, groups=cin, bias=False)
        self.bn1 = nn.BatchNorm2d(cin)
        self.pw = nn.Conv2d(cin, cout, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.act = nn.ReLU6()

    def forward(self, x):
        return self.act(self.bn2(self.pw(self.act(self.bn1(self.dw(x))))))


class MobileNetish(nn.Module):
    def __init__(self, in_channels=3, num_classes=10):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, 12, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(12), nn.ReLU6())
        self.blocks = nn.Sequential(
            MobileBlock(12, 24, 2),
            MobileBlock(24, 48, 2),
            MobileBlock(48, 96, 2),
            MobileBlock(96, 96, 1),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Sequential(nn.Dropout(0.1), nn.Linear(96, num_classes))

    def forward(self, x):
        return self.fc(self.pool(self.blocks(self.stem(x))).flatten(1))


class WideShallow(nn.Module):
    def __init__(self, in_channels=3, num_classes=10):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 16, 5, stride=2, padding=2), nn.ELU(),
            nn.Conv2d(16, 48, 3, stride=2, padding=1), nn.ELU(),
            nn.Conv2d(48, 96, 3, stride=2, padding=1), nn.ELU(),
            nn.AvgPool2d(2),
            nn.Conv2d(96, 128, 3, padding=1), nn.ELU(),
        )
        self.pool = nn.AdaptiveMaxPool2d(1)
        self.fc = nn.Linear(128, num_classes)

    def forward(self, x):
        return self.fc(self.pool(self.features(x)).flatten(1))


class TwoLayer(nn.Module):
    """Patchify conv to 2x2 then a conv head; one eligible layer. Smooth, for gradient checks."""

    def __init__(self, in_channels=3, num_classes=10):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 6, 16, stride=16)
        self.act = nn.Tanh()
        self.conv2 = nn.Conv2d(6, num_classes, 2)

    def forward(self, x):
        return self.conv2(self.act(self.conv1(x))).flatten(1)


class FullRes(nn.Module):
    """Every conv reads a full-resolution map; has no eligible layers."""

    def __init__(self, in_channels=3, num_classes=10):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 4, 3, padding=1)
        self.conv2 = nn.Conv2d(4, 4, 3, padding=1)
        self.fc = nn.Linear(4, num_classes)

    def forward(self, x):
        return self.fc(self.conv2(self.conv1(x).relu()).relu().mean((2, 3)))


ARCHITECTURES = {
    "vggish": VGGish,
    "resnetish": ResNetish,
    "mobilenetish": MobileNetish,
    "wideshallow": WideShallow,
    "twolayer": TwoLayer,
    "fullres": FullRes,
}

DESK_ZOO = ("resnetish", "vggish", "mobilenetish", "wideshallow")
