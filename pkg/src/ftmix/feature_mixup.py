"""Feature tuning mixup: learnable feature perturbations mixed with clean features.

At each eligible layer ``k`` the input feature ``z`` is replaced by::

    z_bar = z + beta * ||z|| * dz / (||dz|| + eps_bar)
    z'    = (1 - alpha) * z_bar + alpha * z_clean   if tau_k < p
          = z_bar                                  otherwise

with per-image L2 norms over the whole feature tensor and channel-wise
``alpha ~ U(0, alpha_max)``. After the joint backward pass the selected
layers take an ascent step ``dz <- dz + dL/d(dz)`` without step size: the
normalization above makes ``z_bar`` invariant to the scale of ``dz``, so
only its direction matters.
"""

from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F

from .models import CapabilityError, LayerHandle, ModelHandle


@dataclass(frozen=True)
class MixParams:
    beta: float = 0.01
    p: float = 0.1
    alpha_max: float = 0.75
    eps_bar: float = 1e-12


@dataclass
class PerturbState:
    """Per-layer perturbations ``delta`` ([B, C, H, W] each) and this iteration's draws ``tau``."""

    delta: dict
    tau: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, layers, batch_size, dtype=torch.float32, device="cpu"):
        return cls({l.layer_id: torch.zeros((batch_size, *l.feature_shape), dtype=dtype, device=device)
                    for l in layers})

    def selected(self, p):
        return [k for k, t in self.tau.items() if t < p]


@dataclass(frozen=True)
class CleanFeatureStore:
    features: dict
    shuffle_perm: torch.Tensor

    def paired(self, layer_id):
        """Clean features re-ordered so image ``b`` gets image ``perm[b]``'s feature."""
        return self.features[layer_id][self.shuffle_perm]


def enumerate_eligible_layers(model, input_shape=None):
    """Interception points whose input feature has min side <= input side / 16."""
    if not isinstance(model, ModelHandle):
        raise CapabilityError(f"{type(model).__name__} exposes no layer shape metadata")
    if input_shape is None:
        input_shape = (model.in_channels, model.input_side, model.input_side)
    side = min(input_shape[-2:])
    out = []
    for layer in model.layer_shapes(tuple(input_shape)):
        if len(layer.feature_shape) == 3 and min(layer.feature_shape[1:]) * 16 <= side:
            out.append(layer)
    return out


def derangement(n, rng):
    """Random permutation without fixed points (identity when ``n == 1``)."""
    if n == 1:
        return torch.zeros(1, dtype=torch.long)
    idx = torch.arange(n)
    while True:
        perm = torch.randperm(n, generator=rng)
        if not (perm == idx).any():
            return perm


def record_clean_features(model, x_clean, layers, rng):
    """One forward pass on benign images capturing each layer's input feature."""
    feats = {}

    def grab(layer_id):
        def hook(z):
            feats[layer_id] = z.detach().clone()
            return z
        return hook

    with torch.no_grad():
        model.predict_with_interception(x_clean, {l.layer_id: grab(l.layer_id) for l in layers})
    return CleanFeatureStore(feats, derangement(x_clean.shape[0], rng))


def sample_selection(layers, p, rng):
    """Draw ``tau_k ~ U(0, 1)`` per layer; layer ``k`` is selected iff ``tau_k < p``."""
    if not 0 <= p <= 1:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    ids = [l.layer_id if isinstance(l, LayerHandle) else l for l in layers]
    taus = torch.rand(len(ids), generator=rng, dtype=torch.float64).tolist()
    return dict(zip(ids, taus))


def _image_norm(t):
    return torch.linalg.vector_norm(t.flatten(1), dim=1).view(-1, *([1] * (t.ndim - 1)))


def ftm_forward(z, delta, params):
    """``z + beta * ||z|| * delta / (||delta|| + eps_bar)``, norms per image."""
    return z + params.beta * _image_norm(z) * delta / (_image_norm(delta) + params.eps_bar)


def clean_mixup(z_bar, z_c, alpha_max, selected, rng, alpha=None):
    """Channel-wise convex mix of ``z_bar`` with clean features when ``selected``.

    ``alpha`` ([B, C, 1, 1]) is drawn from ``U(0, alpha_max)`` unless given.
    """
    if not selected:
        return z_bar
    if z_c.shape != z_bar.shape:
        raise RuntimeError(f"clean feature shape {tuple(z_c.shape)} != feature shape {tuple(z_bar.shape)}")
    if alpha is None:
        alpha = (torch.rand((z_bar.shape[0], z_bar.shape[1], 1, 1), generator=rng, dtype=z_bar.dtype) * alpha_max).to(z_bar.device)
    return (1 - alpha) * z_bar + alpha * z_c


def update_perturbations(state, grads, p):
    """Ascent step on the selected layers; unselected layers are left untouched."""
    chosen = set(state.selected(p))
    extra = [k for k in grads if k not in chosen]
    if extra:
        raise ValueError(f"gradient given for unselected layer(s) {extra}")
    delta = dict(state.delta)
    for k, g in grads.items():
        delta[k] = state.delta[k] + g
    return replace(state, delta=delta)


def match_batch(t, batch, spatial):
    """Tile a per-image tensor over stacked copies and resize to the live feature's spatial size."""
    if t.shape[0] != batch:
        if batch % t.shape[0]:
            raise RuntimeError(f"cannot tile batch {t.shape[0]} to {batch}")
        t = t.repeat(batch // t.shape[0], *([1] * (t.ndim - 1)))
    if tuple(t.shape[-2:]) != tuple(spatial):
        t = F.interpolate(t, size=tuple(spatial), mode="bilinear", align_corners=False)
    return t


class FeatureMixer:
    """Per-run owner of one surrogate copy's perturbation state and clean features.

    Call :meth:`begin_iteration` once per attack iteration to draw the layer
    selection, use :meth:`hooks` for the forward pass, then
    :meth:`apply_gradients` with the gradients of the returned leaves.
    """

    def __init__(self, model, layers, params, x_clean, rng, trace=None):
        self.model = model
        self.layers = list(layers)
        self.params = params
        self.rng = rng
        self.trace = trace
        self.store = record_clean_features(model, x_clean, self.layers, rng)
        self.state = PerturbState.zeros(self.layers, x_clean.shape[0], dtype=model.dtype, device=model.device)
        self._leaves = {}

    def begin_iteration(self):
        self.state = replace(self.state, tau=sample_selection(self.layers, self.params.p, self.rng))
        sel = self.state.selected(self.params.p)
        self._leaves = {k: self.state.delta[k].clone().requires_grad_(True) for k in sel}
        return self._leaves

    def hooks(self, requires_delta_grad=True):
        out = {}
        for layer in self.layers:
            k = layer.layer_id
            selected = self.state.tau[k] < self.params.p
            dz = self._leaves[k] if (selected and requires_delta_grad) else self.state.delta[k]
            out[k] = self._hook(k, dz, selected)
        return out

    def _hook(self, layer_id, dz, selected):
        def hook(z):
            dz_live = match_batch(dz, z.shape[0], z.shape[-2:])
            z_bar = ftm_forward(z, dz_live, self.params)
            z_c = match_batch(self.store.paired(layer_id), z.shape[0], z.shape[-2:]) if selected else None
            z_out = clean_mixup(z_bar, z_c, self.params.alpha_max, selected, self.rng)
            if self.trace is not None:
                self.trace(layer_id, z_out.detach())
            return z_out
        return hook

    def leaves(self):
        return list(self._leaves.values())

    def apply_gradients(self, grads):
        """``grads`` aligns with :meth:`leaves`."""
        named = dict(zip(self._leaves, grads))
        self.state = update_perturbations(self.state, {k: g.detach() for k, g in named.items()}, self.params.p)
        self._leaves = {}
