"""Classifier handles with layer interception, FTM-E ensembles and the model registry."""

import json
import os
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .zoo import ARCHITECTURES


class RegistryError(LookupError):
    """Unknown model name, missing weights or a malformed registry entry."""


class CapabilityError(RuntimeError):
    """The wrapped model cannot do what the caller asked (e.g. no shape metadata)."""


@dataclass(frozen=True)
class LayerHandle:
    layer_id: str
    feature_shape: tuple


class ModelHandle:
    """A classifier taking raw [0, 1] pixels.

    Per-channel normalization happens inside the handle, so callers never see
    normalized pixel space. Interception points are the modules whose type
    is in ``candidate_types`` (or named in ``candidates``); their *input*
    feature can be rewritten during a forward pass.

    Arguments:
        net (nn.Module): the classifier, put in eval mode.
        name (str): registry name.
        input_side (int): nominal input side length.
        mean, std (sequence): per-channel normalizer.
        num_classes (int): logit dimension.
        candidates (list[str] | None): explicit interception module names.
        candidate_types (tuple): module types used when ``candidates`` is None.
    """

    def __init__(self, net, name="model", input_side=32, mean=(0.0,), std=(1.0,), num_classes=10,
                 candidates=None, candidate_types=(nn.Conv2d,)):
        self.net = net.eval()
        for prm in self.net.parameters():
            prm.requires_grad_(False)
        self.name = name
        self.input_side = int(input_side)
        self.num_classes = int(num_classes)
        self.in_channels = len(mean)
        dtype = next(net.parameters()).dtype
        self.mean = torch.as_tensor(mean, dtype=dtype).view(1, -1, 1, 1)
        self.std = torch.as_tensor(std, dtype=dtype).view(1, -1, 1, 1)
        self._modules = dict(net.named_modules())
        if candidates is None:
            candidates = [n for n, m in self._modules.items() if n and isinstance(m, candidate_types)]
        missing = [c for c in candidates if c not in self._modules]
        if missing:
            raise RegistryError(f"{name}: unknown interception modules {missing}")
        self._candidates = list(candidates)
        self._points = None
        self.forward_calls = 0

    def __repr__(self):
        return f"ModelHandle({self.name!r}, input_side={self.input_side})"

    @property
    def dtype(self):
        return self.mean.dtype

    @property
    def device(self):
        return self.mean.device

    def to(self, device):
        self.net.to(device)
        self.mean, self.std = self.mean.to(device), self.std.to(device)
        return self

    @property
    def interception_points(self):
        if self._points is None:
            self._points = self.layer_shapes((self.in_channels, self.input_side, self.input_side))
        return self._points

    def layer_shapes(self, input_shape):
        """Probe the input feature shape of every candidate module, in forward order."""
        seen = {}

        def probe(name):
            def hook(module, args):
                if name not in seen and args and isinstance(args[0], torch.Tensor):
                    seen[name] = tuple(args[0].shape[1:])
            return hook

        handles = [self._modules[n].register_forward_pre_hook(probe(n)) for n in self._candidates]
        try:
            with torch.no_grad():
                self.net(torch.zeros((1, *input_shape), dtype=self.dtype, device=self.device))
        finally:
            for h in handles:
                h.remove()
        return [LayerHandle(n, s) for n, s in seen.items()]

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"{self.name}: expected [B, {self.in_channels}, H, W] input, got {tuple(x.shape)}")
        return x.to(device=self.device, dtype=self.dtype)

    def predict_logits(self, x):
        x = self._check(x)
        self.forward_calls += 1
        return self.net((x - self.mean) / self.std)

    def predict_with_interception(self, x, hooks):
        """Forward pass with ``hooks[layer_id](z)`` replacing each hooked layer's input."""
        unknown = [k for k in hooks if k not in self._candidates]
        if unknown:
            raise ValueError(f"{self.name}: unknown interception layer(s) {unknown}")
        handles = []
        for layer_id, fn in hooks.items():
            def pre(module, args, fn=fn):
                return (fn(args[0]),) + tuple(args[1:])
            handles.append(self._modules[layer_id].register_forward_pre_hook(pre))
        try:
            return self.predict_logits(x)
        finally:
            for h in handles:
                h.remove()

    def predict(self, x, batch_size=256):
        with torch.no_grad():
            return torch.cat([self.predict_logits(x[i:i + batch_size]).argmax(1).cpu()
                              for i in range(0, len(x), batch_size)])


@dataclass
class EnsembleCopy:
    model: ModelHandle
    state: object = None
    store: object = None


@dataclass
class EnsembleHandle:
    """K perturbed copies of one surrogate; weights shared, perturbation state per copy."""

    model: ModelHandle
    k: int = 2
    copies: list = field(default_factory=list)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"ensemble size must be >= 1, got {self.k}")
        if not self.copies:
            self.copies = [EnsembleCopy(self.model) for _ in range(self.k)]


def ensemble_logits(ens, x, hooks_per_copy):
    """Mean of the copies' intercepted logits; ``hooks_per_copy[i]`` drives copy ``i``."""
    if ens.k < 1 or not ens.copies:
        raise ValueError("ensemble has no copies")
    if len(hooks_per_copy) != len(ens.copies):
        raise ValueError(f"got hooks for {len(hooks_per_copy)} copies, ensemble has {len(ens.copies)}")
    out = [c.model.predict_with_interception(x, h) for c, h in zip(ens.copies, hooks_per_copy)]
    if len(out) == 1:
        return out[0]
    return torch.stack(out).mean(0)


# --- registry -----------------------------------------------------------------

def load_registry(path):
    """Read ``{"models": [...]}`` and return entries keyed by name."""
    if not os.path.exists(path):
        raise RegistryError(f"registry not found: {path}")
    try:
        with open(path) as fh:
            data = json.load(fh)
        entries = {e["name"]: dict(e) for e in data["models"]}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise RegistryError(f"malformed registry {path}: {exc}") from None
    base = os.path.dirname(os.path.abspath(path))
    for e in entries.values():
        if e.get("weights") and not os.path.isabs(e["weights"]):
            e["weights"] = os.path.join(base, e["weights"])
    return entries


def save_registry(entries, path):
    with open(path, "w") as fh:
        json.dump({"models": list(entries)}, fh, indent=2, sort_keys=True)


def build_model(entry):
    """Instantiate the network for a registry entry (weights not loaded)."""
    arch = entry.get("arch", "")
    kind, _, name = arch.partition(":")
    if kind == "desk" and name in ARCHITECTURES:
        return ARCHITECTURES[name](in_channels=len(entry.get("mean", (0.0,))), num_classes=entry.get("num_classes", 10))
    if kind == "torchvision":
        import torchvision.models

        if not hasattr(torchvision.models, name):
            raise RegistryError(f"{entry.get('name')}: unknown torchvision model {name!r}")
        return getattr(torchvision.models, name)(weights=None, num_classes=entry.get("num_classes", 1000))
    raise RegistryError(f"{entry.get('name')}: unknown arch {arch!r}")


def load_model(entry):
    """Build a ModelHandle from a registry entry, loading its weights."""
    weights = entry.get("weights")
    if not weights or not os.path.exists(weights):
        raise RegistryError(f"{entry.get('name')}: weights not found: {weights}")
    net = build_model(entry)
    try:
        net.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
    except (RuntimeError, OSError) as exc:
        raise RegistryError(f"{entry.get('name')}: cannot load weights: {exc}") from None
    return ModelHandle(
        net,
        name=entry["name"],
        input_side=entry.get("input_side", 224),
        mean=entry.get("mean", (0.485, 0.456, 0.406)),
        std=entry.get("std", (0.229, 0.224, 0.225)),
        num_classes=entry.get("num_classes", 1000),
        candidates=entry.get("interception"),
    )


def load_models(registry_path, names):
    entries = load_registry(registry_path)
    unknown = [n for n in names if n not in entries]
    if unknown:
        raise RegistryError(f"unknown model(s) {unknown}; registry has {sorted(entries)}")
    return [load_model(entries[n]) for n in names]
