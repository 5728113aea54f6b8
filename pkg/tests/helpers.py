"""Shared fixtures: small seeded instances and a finite-difference oracle."""

import numpy as np
import torch

from isac.attention import DTYPE, PromptSpec
from isac.losses import LossWeights, build_step_context, loss_gradient, selections_signature
from isac.toybench import build_seeded_denoiser


def small_instance(seed, H=8, W=8, d=4, weights=LossWeights(0.6, 0.4)):
    """Seeded-attention backend with L = 4 tokens, k = 2 classes, N = 3."""
    prompt = PromptSpec.from_text("a cat two dogs", ["cat", "dog"], [1, 2], dim=d, seed=seed)
    backend = build_seeded_denoiser((H, W, d), [(H, W, 2), (H // 2, W // 2, 2)], seed)
    latent = torch.as_tensor(np.random.default_rng(seed).standard_normal((H, W, d)), dtype=DTYPE)
    return latent, backend, prompt, weights


def fd_check(latent, backend, prompt, weights, h=1e-3, kind="MPO", cluster_seed=0):
    """(analytic gradient, FD gradient, mask of coordinates whose stencil kept every selection)."""
    ctx = build_step_context(latent, backend, prompt, weights, kind, 1, cluster_seed)
    grad = loss_gradient(latent, ctx).reshape(-1)
    sig = selections_signature(ctx)
    flat = latent.reshape(-1)
    fd = torch.zeros_like(flat)
    keep = torch.ones_like(flat, dtype=torch.bool)
    for i in range(flat.numel()):
        vals = []
        for sign in (1.0, -1.0):
            x = flat.clone()
            x[i] += sign * h
            c = build_step_context(x.reshape(latent.shape), backend, prompt, weights, kind, 1, cluster_seed)
            if selections_signature(c) != sig:
                keep[i] = False
            vals.append(c.total.item())
        fd[i] = (vals[0] - vals[1]) / (2 * h)
    return grad, fd, keep, ctx


def relative_error(a, b):
    den = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / den
