"""Desk-scale model zoo and evaluation set.

The task is photo-patch classification. Ten public photographs bundled with
scikit-image and scikit-learn are halved in resolution, and every 32x32 RGB
crop is labelled with the photograph it came from. Train and test crops sit
at disjoint random positions of the same photographs. Crops are quantized to
8 bits, which is also how the evaluation images are stored, so training and
evaluation see identical pixels.
"""

import csv
import hashlib
import itertools
import logging
import os

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .models import ModelHandle, save_registry
from .zoo import ARCHITECTURES, DESK_ZOO

logger = logging.getLogger(__name__)

SIDE = 32
MEAN, STD = (0.5, 0.5, 0.5), (0.25, 0.25, 0.25)
SOURCES = ("astronaut", "chelsea", "coffee", "immunohistochemistry", "stereo_motorcycle", "rocket",
           "china", "flower", "grass", "brick")


class TrainingError(RuntimeError):
    def __init__(self, message, curves):
        super().__init__(message)
        self.curves = curves


def _photo(name):
    if name in ("china", "flower"):
        from sklearn.datasets import load_sample_image

        arr = load_sample_image(f"{name}.jpg")
    else:
        from skimage import data

        arr = getattr(data, name)()
        if isinstance(arr, tuple):  # stereo pair
            arr = arr[0]
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, -1)
    t = torch.from_numpy(np.array(arr[..., :3])).permute(2, 0, 1).float()[None] / 255
    return F.interpolate(t, scale_factor=0.5, mode="area")[0]


def photo_patches(seed=0, n_train=300, n_test=60, side=SIDE):
    """Return ``(x_train, y_train, x_test, y_test)``; images are [N, 3, side, side] in [0, 1]."""
    rng = np.random.default_rng(seed)
    parts = {"train": ([], []), "test": ([], [])}
    for label, name in enumerate(SOURCES):
        photo = _photo(name)
        h, w = photo.shape[1] - side + 1, photo.shape[2] - side + 1
        pos = rng.choice(h * w, size=n_train + n_test, replace=False)
        for split, chosen in (("test", pos[:n_test]), ("train", pos[n_test:])):
            xs, ys = parts[split]
            for p in chosen:
                i, j = divmod(int(p), w)
                xs.append(photo[:, i:i + side, j:j + side])
                ys.append(label)
    out = []
    for split in ("train", "test"):
        xs, ys = parts[split]
        out += [torch.round(torch.stack(xs) * 255) / 255, torch.tensor(ys)]
    return tuple(out)


def _shift(x, gen, max_shift=2):
    dx, dy = torch.randint(-max_shift, max_shift + 1, (2,), generator=gen).tolist()
    return torch.roll(x, shifts=(dy, dx), dims=(2, 3))


def train_model(arch, x, y, x_test, y_test, seed=0, epochs=20, batch_size=64, lr=2e-3):
    """Train one zoo network with Adam and a cosine schedule; returns ``(net, curves)``."""
    torch.manual_seed(seed)
    net = ARCHITECTURES[arch](in_channels=x.shape[1])
    mean, std = torch.tensor(MEAN).view(1, -1, 1, 1), torch.tensor(STD).view(1, -1, 1, 1)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)
    gen = torch.Generator().manual_seed(seed)
    curves = {"train_loss": [], "test_acc": []}
    for _ in range(epochs):
        net.train()
        perm = torch.randperm(len(x), generator=gen)
        total = 0.0
        for i in range(0, len(x), batch_size):
            idx = perm[i:i + batch_size]
            loss = F.cross_entropy(net((_shift(x[idx], gen) - mean) / std), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        net.eval()
        with torch.no_grad():
            acc = (net((x_test - mean) / std).argmax(1) == y_test).float().mean().item()
        curves["train_loss"].append(total / len(x))
        curves["test_acc"].append(acc)
    return net.eval(), curves


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def pairwise_disagreement(handles, x):
    preds = {m.name: m.predict(x) for m in handles}
    return {(a, b): (preds[a] != preds[b]).float().mean().item() for a, b in itertools.combinations(preds, 2)}


def most_distinct_triple(disagreement):
    """The three models whose smallest pairwise disagreement is largest, and that value."""
    names = sorted({n for pair in disagreement for n in pair})
    best, best_val = (), 0.0
    for trio in itertools.combinations(names, 3):
        val = min(disagreement.get(pair, disagreement.get(pair[::-1])) for pair in itertools.combinations(trio, 2))
        if val > best_val:
            best, best_val = trio, val
    return best, best_val


def prepare_desk(out_dir, seed=0, n_eval=256, archs=DESK_ZOO, epochs=None, min_accuracy=0.9,
                 n_train=300, n_test=60):
    """Train the zoo and write ``registry.json``, ``manifest.csv`` and images under ``out_dir``.

    ``n_train``/``n_test`` are crops per class. The evaluation manifest is drawn
    from the test crops. Raises TrainingError if a model misses
    ``min_accuracy`` on the test split; its training curves ride on the error.
    """
    epochs = 20 if epochs is None else epochs
    os.makedirs(os.path.join(out_dir, "models"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    x, y, x_test, y_test = photo_patches(seed, n_train, n_test)
    entries, accs, handles = [], {}, []
    for i, arch in enumerate(archs):
        net, curves = train_model(arch, x, y, x_test, y_test, seed=seed + i, epochs=epochs)
        acc = curves["test_acc"][-1]
        accs[arch] = acc
        logger.info("%s: test accuracy %.4f", arch, acc)
        if acc < min_accuracy:
            raise TrainingError(f"{arch}: test accuracy {acc:.4f} < {min_accuracy}", curves)
        path = os.path.join(out_dir, "models", f"{arch}.pt")
        torch.save(net.state_dict(), path)
        handles.append(desk_handle(net, arch))
        entries.append({
            "name": arch, "arch": f"desk:{arch}", "weights": f"models/{arch}.pt",
            "input_side": SIDE, "mean": list(MEAN), "std": list(STD), "num_classes": len(SOURCES),
            "sha256": _sha256(path), "test_accuracy": acc,
        })
    save_registry(entries, os.path.join(out_dir, "registry.json"))
    disagreement = pairwise_disagreement(handles, x_test)
    triple, triple_val = most_distinct_triple(disagreement)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y_test))[:n_eval]
    y_eval = y_test[order].numpy()
    targets = (y_eval + rng.integers(1, len(SOURCES), size=len(y_eval))) % len(SOURCES)
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_path", "true_label", "target_label"])
        for j, k in enumerate(order):
            name = f"images/{j:04d}.png"
            arr = (x_test[k].permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(os.path.join(out_dir, name))
            w.writerow([name, int(y_eval[j]), int(targets[j])])
    return {"registry": os.path.join(out_dir, "registry.json"),
            "manifest": os.path.join(out_dir, "manifest.csv"), "accuracy": accs,
            "disagreement": disagreement, "triple": triple, "triple_disagreement": triple_val}


def desk_handle(net, name):
    return ModelHandle(net, name=name, input_side=SIDE, mean=MEAN, std=STD, num_classes=len(SOURCES))
