"""Standalone reference attacks.

These loops are written independently of :func:`ftmix.attack.run_attack`
(no ensemble wrapper, no perturbation state) and serve as the comparison
paths for its reductions: MI-FGSM with input transforms, and clean feature
mixup. They share only the primitive helpers.
"""

import torch

from . import transforms as T
from .attack import logit_loss, make_generators, momentum_update, step_and_clip
from .feature_mixup import enumerate_eligible_layers, match_batch, record_clean_features, sample_selection


def _loss(model, x_in, y_t, cfg, rng, pool, hooks=None):
    batch, copies = T.expand_copies(x_in, cfg.transforms, cfg.transform_params, rng, pool=pool)
    logits = model.predict_with_interception(batch, hooks) if hooks else model.predict_logits(batch)
    return logit_loss(logits, y_t.repeat(copies)).view(copies, -1).mean(0).sum()


def mi_fgsm(model, x, y_t, cfg, batch_index=0):
    """MI-FGSM with the image transforms and TI of ``cfg.transforms`` (VT unsupported)."""
    if "VT" in cfg.transforms:
        raise ValueError("reference MI-FGSM does not implement VT")
    x = x.to(model.dtype)
    rng = make_generators(cfg.seed, batch_index)["transform"]
    x_adv, g = x.clone(), torch.zeros_like(x)
    for _ in range(cfg.n_iter):
        x_in = x_adv.detach().clone().requires_grad_(True)
        grad = torch.autograd.grad(_loss(model, x_in, y_t, cfg, rng, x_adv), x_in)[0]
        if "TI" in cfg.transforms:
            grad = T.ti_smooth(grad, cfg.transform_params.ti_kernel_size, cfg.transform_params.ti_sigma)
        g = momentum_update(g, grad, cfg.mu)
        x_adv = step_and_clip(x_adv, g, x, cfg.eta, cfg.epsilon).detach()
    return x_adv


def cfm(model, x, y_t, cfg, batch_index=0, trace=None):
    """Clean feature mixup on top of MI-FGSM: per eligible layer, with probability
    ``p`` mix the input feature channel-wise with another image's clean feature.

    ``trace(iteration, layer_id, feature)`` sees every mixed feature.
    """
    x = x.to(model.dtype)
    gens = make_generators(cfg.seed, batch_index)
    rng, mix_rng = gens["transform"], gens["mix"]
    layers = enumerate_eligible_layers(model)
    store = record_clean_features(model, x, layers, mix_rng)
    x_adv, g = x.clone(), torch.zeros_like(x)
    for i in range(cfg.n_iter):
        taus = sample_selection(layers, cfg.p, mix_rng)

        def make_hook(layer_id, selected, i=i):
            def hook(z):
                if selected:
                    zc = match_batch(store.paired(layer_id), z.shape[0], z.shape[-2:])
                    a = (torch.rand((z.shape[0], z.shape[1], 1, 1), generator=mix_rng, dtype=z.dtype) * cfg.alpha_max).to(z.device)
                    z = (1 - a) * z + a * zc
                if trace is not None:
                    trace(i, layer_id, z.detach())
                return z
            return hook

        hooks = {k: make_hook(k, t < cfg.p) for k, t in taus.items()}
        x_in = x_adv.detach().clone().requires_grad_(True)
        grad = torch.autograd.grad(_loss(model, x_in, y_t, cfg, rng, x_adv, hooks), x_in)[0]
        if "TI" in cfg.transforms:
            grad = T.ti_smooth(grad, cfg.transform_params.ti_kernel_size, cfg.transform_params.ti_sigma)
        g = momentum_update(g, grad, cfg.mu)
        x_adv = step_and_clip(x_adv, g, x, cfg.eta, cfg.epsilon).detach()
    return x_adv
