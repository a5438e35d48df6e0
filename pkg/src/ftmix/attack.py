"""Momentum-iterative targeted attack loop with optional feature tuning mixup."""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import transforms as T
from ._validation import check_images, check_target_labels
from .config import PIPELINES, AttackConfig, ConfigError, TransformParams
from .feature_mixup import FeatureMixer, MixParams, enumerate_eligible_layers
from .models import EnsembleHandle, ensemble_logits

logger = logging.getLogger(__name__)


@dataclass
class AttackState:
    x_adv: torch.Tensor
    g_momentum: torch.Tensor
    iter: int = 0


@dataclass
class AdvResult:
    x_adv_final: torch.Tensor
    per_iter_loss: list = field(default_factory=list)
    elapsed_seconds: float = 0.0


def logit_loss(logits, y_t):
    """Negative target logit per row; minimizing it raises the target logit."""
    y_t = check_target_labels(y_t, logits.shape[0], logits.shape[1])
    return -logits.gather(1, y_t.to(logits.device).view(-1, 1)).squeeze(1)


def momentum_update(g_prev, g_new, mu):
    """``mu * g_prev + g_new / ||g_new||_1`` with the L1 norm taken per image.

    Images whose gradient is exactly zero skip the normalized term.
    """
    l1 = g_new.abs().flatten(1).sum(1).view(-1, *([1] * (g_new.ndim - 1)))
    zero = l1 == 0
    if zero.any():
        logger.warning("zero gradient for %d image(s); momentum carried without new term", int(zero.sum()))
        l1 = torch.where(zero, torch.ones_like(l1), l1)
    return mu * g_prev + g_new / l1


def ball_bounds(x_ref, epsilon):
    """Bounds ``lo, hi`` in ``x_ref``'s dtype with ``|bound - x_ref| <= epsilon`` in exact arithmetic.

    ``x_ref + epsilon`` rounded to float32 overshoots by up to half an ulp for
    about a quarter of pixel values; such bounds are pulled one ulp inward.
    """
    wide = x_ref.to(torch.float64)
    lo, hi = (wide - epsilon).to(x_ref.dtype), (wide + epsilon).to(x_ref.dtype)
    inf = torch.tensor(float("inf"), dtype=x_ref.dtype, device=x_ref.device)
    hi = torch.where(hi.to(torch.float64) - wide > epsilon, torch.nextafter(hi, -inf), hi)
    lo = torch.where(wide - lo.to(torch.float64) > epsilon, torch.nextafter(lo, inf), lo)
    return lo, hi


def step_and_clip(x_adv, g_tilde, x_ref, eta, epsilon):
    """Signed descent step, then projection onto the L-inf ball and the unit box."""
    x = x_adv - eta * torch.sign(g_tilde)
    lo, hi = ball_bounds(x_ref, epsilon)
    return torch.min(torch.max(x, lo), hi).clamp(0, 1)


def make_generators(seed, batch_index=0):
    """Independent torch generators for the transform and feature-mixing streams.

    Keeping the streams separate means switching feature mixup on or off does
    not shift the input-transform randomness.
    """
    states = np.random.SeedSequence(seed, spawn_key=(batch_index,)).generate_state(2, dtype=np.uint64)
    gens = {}
    for name, s in zip(("transform", "mix"), states):
        g = torch.Generator()
        g.manual_seed(int(s) & 0x7FFF_FFFF_FFFF_FFFF)
        gens[name] = g
    return gens


def _gradient(kinds, params, x_adv, y_t, rng, forward, pool):
    """Forward through the image transforms; returns the leaf input and per-image loss."""
    x_in = x_adv.detach().clone().requires_grad_(True)
    batch, copies = T.expand_copies(x_in, kinds, params, rng, pool=pool)
    logits = forward(batch)
    loss_vec = logit_loss(logits, y_t.repeat(copies)).view(copies, -1).mean(0)
    return x_in, loss_vec


def run_attack(surrogate, x, y_t, cfg, batch_index=0, trace=None, checkpoints=None, checkpoint_every=20):
    """Craft targeted adversarial examples.

    Arguments:
        surrogate (ModelHandle): white-box model with layer interception.
        x (Tensor): benign images [B, C, H, W] in [0, 1].
        y_t (Tensor): target labels [B].
        cfg (AttackConfig): hyperparameters; validated here.
        batch_index (int): selects the RNG stream for this batch.
        trace (callable | None): ``trace(iteration, copy, layer_id, feature)``
            receives every hooked feature after mixing.
        checkpoints (dict | None): filled with ``{iteration: x_adv}`` every
            ``checkpoint_every`` iterations and at the end.

    Returns:
        AdvResult
    """
    cfg = cfg.validate()
    x = check_images(x).to(device=surrogate.device, dtype=surrogate.dtype)
    y_t = check_target_labels(y_t, x.shape[0], surrogate.num_classes)
    params = cfg.transform_params
    gens = make_generators(cfg.seed, batch_index)
    kinds = cfg.transforms
    t0 = time.perf_counter()

    ens = EnsembleHandle(surrogate, cfg.ensemble_k)
    mixers = []
    if cfg.feature_mixup:
        layers = enumerate_eligible_layers(surrogate)
        if not layers and cfg.p > 0:
            raise ConfigError(f"attack.p: {surrogate.name} has no eligible layers for feature mixup")
        mix = MixParams(cfg.beta, cfg.p, cfg.alpha_max, cfg.eps_bar)
        for c in range(cfg.ensemble_k):
            tr = None if trace is None else (lambda lid, z, c=c: trace(state.iter, c, lid, z))
            mixers.append(FeatureMixer(surrogate, layers, mix, x, gens["mix"], trace=tr))

    def forward(batch, delta_grad=True):
        if not mixers:
            hooks = [{} for _ in range(cfg.ensemble_k)]
        else:
            hooks = [m.hooks(requires_delta_grad=delta_grad) for m in mixers]
        return ensemble_logits(ens, batch, hooks)

    state = AttackState(x.clone(), torch.zeros_like(x))
    v = torch.zeros_like(x)
    losses = []
    for i in range(cfg.n_iter):
        state.iter = i
        leaves = []
        for m in mixers:
            m.begin_iteration()
            leaves += m.leaves()
        x_in, loss_vec = _gradient(kinds, params, state.x_adv, y_t, gens["transform"], forward, state.x_adv)
        loss = loss_vec.sum()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss.item()} at iteration {i}")
        grads = torch.autograd.grad(loss, [x_in, *leaves])
        g = grads[0]
        offset = 1
        for m in mixers:
            n = len(m.leaves())
            m.apply_gradients(grads[offset:offset + n])
            offset += n
        losses.append(loss_vec.mean().item())

        if "VT" in kinds:
            def neighbour_grad(xp):
                xi, lv = _gradient(kinds, params, xp, y_t, gens["transform"], lambda b: forward(b, False), xp)
                return torch.autograd.grad(lv.sum(), xi)[0]

            g, v = T.vt_gradient(neighbour_grad, state.x_adv, params.vt_samples,
                                 params.vt_bound * cfg.epsilon, v, gens["transform"], grad_x=g)
        if "TI" in kinds:
            g = T.ti_smooth(g, params.ti_kernel_size, params.ti_sigma)
        state.g_momentum = momentum_update(state.g_momentum, g, cfg.mu)
        state.x_adv = step_and_clip(state.x_adv, state.g_momentum, x, cfg.eta, cfg.epsilon).detach()
        if checkpoints is not None and ((i + 1) % checkpoint_every == 0 or i + 1 == cfg.n_iter):
            checkpoints[i + 1] = state.x_adv.cpu().clone()

    elapsed = (time.perf_counter() - t0) / x.shape[0]
    return AdvResult(state.x_adv.cpu(), losses, elapsed)


class TargetedTransferAttack(BaseEstimator):
    """Targeted transfer attack estimator (MI-FGSM family, FTM and baselines).

    Hyperparameters follow sklearn conventions so ``get_params``,
    ``set_params`` and ``sklearn.base.clone`` work; ablation sweeps rely on
    that. ``None`` for ``transforms``, ``feature_mixup``, ``beta`` or
    ``ensemble_k`` means "take the value of the named ``attack`` pipeline".

    Fitting crafts adversarial examples for ``(X, y)`` where ``y`` holds the
    target labels. Like ``TSNE``, there is no separate ``transform``.

    Attributes:
        adv_ (Tensor): adversarial images, same shape as ``X``.
        loss_curves_ (list[list[float]]): per batch, mean loss per iteration.
        time_per_image_ (float): crafting wall time divided by ``len(X)``.
    """

    def __init__(self, surrogate=None, attack="RDI-FTM", epsilon=16 / 255, eta=2 / 255, mu=1.0,
                 n_iter=300, beta=None, p=0.1, alpha_max=0.75, ensemble_k=None, eps_bar=1e-12,
                 transforms=None, feature_mixup=None, transform_params=None, seed=0, batch_size=64):
        self.surrogate = surrogate
        self.attack = attack
        self.epsilon = epsilon
        self.eta = eta
        self.mu = mu
        self.n_iter = n_iter
        self.beta = beta
        self.p = p
        self.alpha_max = alpha_max
        self.ensemble_k = ensemble_k
        self.eps_bar = eps_bar
        self.transforms = transforms
        self.feature_mixup = feature_mixup
        self.transform_params = transform_params
        self.seed = seed
        self.batch_size = batch_size

    @classmethod
    def from_config(cls, surrogate, cfg, attack="custom", batch_size=64):
        fields = {k: getattr(cfg, k) for k in ("epsilon", "eta", "mu", "n_iter", "beta", "p", "alpha_max",
                                               "ensemble_k", "eps_bar", "transforms", "feature_mixup",
                                               "transform_params", "seed")}
        return cls(surrogate, attack=attack, batch_size=batch_size, **fields)

    def get_config(self):
        """Resolve pipeline defaults into a validated AttackConfig."""
        base = dict(PIPELINES.get(self.attack, {}))
        if self.attack not in PIPELINES and self.attack != "custom":
            raise ConfigError(f"run.attack: unknown attack {self.attack!r}")
        explicit = {
            "epsilon": self.epsilon, "eta": self.eta, "mu": self.mu, "n_iter": self.n_iter,
            "p": self.p, "alpha_max": self.alpha_max, "eps_bar": self.eps_bar, "seed": self.seed,
            "transform_params": self.transform_params or TransformParams(),
        }
        for k in ("beta", "ensemble_k", "transforms", "feature_mixup"):
            if getattr(self, k) is not None:
                explicit[k] = tuple(getattr(self, k)) if k == "transforms" else getattr(self, k)
        if self.attack == "RDI-FTM-E" and explicit.get("ensemble_k", 2) < 2:
            raise ConfigError("attack.ensemble_k: RDI-FTM-E requires ensemble_k >= 2")
        return replace(AttackConfig(), **{**base, **explicit}).validate()

    def fit(self, X, y):
        if self.surrogate is None:
            raise ValueError("surrogate model is required")
        cfg = self.get_config()
        X = check_images(X)
        y = check_target_labels(y, X.shape[0], self.surrogate.num_classes)
        out, curves, total = [], [], 0.0
        for b, start in enumerate(range(0, X.shape[0], self.batch_size)):
            sl = slice(start, start + self.batch_size)
            res = run_attack(self.surrogate, X[sl], y[sl], cfg, batch_index=b)
            out.append(res.x_adv_final)
            curves.append(res.per_iter_loss)
            total += res.elapsed_seconds * res.x_adv_final.shape[0]
        self.adv_ = torch.cat(out)
        self.loss_curves_ = curves
        self.time_per_image_ = total / X.shape[0]
        self.config_ = cfg
        return self

    def fit_transform(self, X, y):
        return self.fit(X, y).adv_

    def score(self, X, y, model=None):
        """Targeted success rate of the fitted ``adv_`` on ``model`` (default: surrogate)."""
        check_is_fitted(self, "adv_")
        model = model or self.surrogate
        y = check_target_labels(y, self.adv_.shape[0], model.num_classes)
        return float((model.predict(self.adv_) == y).float().mean())
