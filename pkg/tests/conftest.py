import csv
import os

import numpy as np
import pytest
import torch
from PIL import Image

from ftmix.models import save_registry
from ftmix.zoo import ARCHITECTURES


_VERDICTS = []


@pytest.fixture
def verdict():
    """``verdict(criterion, ok, detail)`` records one acceptance line and asserts ``ok``.

    ``ok=None`` records a SKIP line and skips the test.
    """

    def record(criterion, ok, detail):
        _VERDICTS.append(f"{ {True: 'PASS', False: 'FAIL', None: 'SKIP'}[ok]:<5} {criterion}: {detail}")
        if ok is None:
            pytest.skip(detail)
        assert ok, f"{criterion}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)


def make_fake_desk(root, archs=("vggish", "wideshallow"), n=6, side=32, channels=3, seed=0):
    """Untrained models plus a small manifest: enough for plumbing tests."""
    os.makedirs(root / "images", exist_ok=True)
    entries = []
    for i, arch in enumerate(archs):
        torch.manual_seed(seed + i)
        net = ARCHITECTURES[arch](in_channels=channels)
        torch.save(net.state_dict(), root / f"{arch}.pt")
        entries.append({"name": arch, "arch": f"desk:{arch}", "weights": f"{arch}.pt", "input_side": side,
                        "mean": [0.5] * channels, "std": [0.25] * channels, "num_classes": 10})
    save_registry(entries, root / "registry.json")
    rng = np.random.default_rng(seed)
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_path", "true_label", "target_label"])
        for j in range(n):
            arr = rng.integers(0, 256, (side, side, channels), dtype=np.uint8)
            Image.fromarray(arr if channels == 3 else arr[..., 0]).save(root / "images" / f"{j}.png")
            w.writerow([f"images/{j}.png", j % 10, (j + 1) % 10])
    return root / "registry.json", root / "manifest.csv"


@pytest.fixture
def fake_desk(tmp_path):
    return make_fake_desk(tmp_path)


@pytest.fixture(scope="session")
def desk(request):
    """The full desk zoo, trained once and cached between sessions.

    The cache key covers the data and model sources, so editing either retrains.
    """
    import hashlib
    import json
    import pathlib

    from ftmix import desk as D
    from ftmix import zoo

    key = hashlib.sha256(b"".join(pathlib.Path(m.__file__).read_bytes() for m in (D, zoo))).hexdigest()[:16]
    root = pathlib.Path(request.config.cache.mkdir(f"ftmix-desk-{key}"))
    info_path = root / "info.json"
    if not info_path.exists():
        info = D.prepare_desk(root, seed=0)
        info["disagreement"] = {f"{a}/{b}": v for (a, b), v in info["disagreement"].items()}
        info_path.write_text(json.dumps(info))
    return json.loads(info_path.read_text())
