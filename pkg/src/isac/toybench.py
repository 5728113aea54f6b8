"""Desk-scale denoiser backends and the blob-scene world they live in.

Two backends share one interface:

* ``SeededAttentionBackend``: random projection attention layers in the usual
  softmax(QK^T) form, with a linear noise read-out of attended features.
* ``SceneBackend``: the latent linearly encodes N blobs (center, radius,
  class logits).  Attention is computed from soft blob membership, and the
  noise prediction is the exact posterior-mean denoiser for a
  prompt-conditioned prior over blob parameters.

Both expose ``forward(latent, prompt, t=None, schedule=None, hooks=())``
which returns the noise prediction (None when ``t`` is None) and reports
every layer's per-head maps to the hooks without touching the output.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np
import torch

from isac.attention import (
    DTYPE,
    AttentionLayerConfig,
    PromptSpec,
    average_pool,
    compute_cross_attention,
    compute_self_attention,
    upsample_factor,
    upsample_map,
)
from isac.errors import ConfigError, UnsupportedOperation

MAX_INSTANCES = 6
MAX_CLASSES = 4

TOY_CATEGORIES = {
    "animal": ["cat", "dog", "horse", "sheep"],
    "vehicle": ["car", "bus", "boat", "train"],
}
TOY_PALETTE = np.array(
    [
        [0.90, 0.25, 0.20],
        [0.20, 0.75, 0.25],
        [0.25, 0.35, 0.95],
        [0.95, 0.85, 0.20],
    ]
)
BACKGROUND = np.array([0.08, 0.08, 0.10])


def weight_hash(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.detach().numpy()).tobytes())
    return h.hexdigest()


def _hook_all(hooks, kind, res, maps):
    for hook in hooks:
        hook(kind, res, maps)


# -- seeded attention backend ------------------------------------------------


class SeededAttentionBackend:
    backend_id = "seeded-attention"

    def __init__(self, dims, layers, value_weights, out_weights, rgb_weights, seed):
        self.dims = dims
        self.layers = layers
        self.value_weights = value_weights  # per layer (heads, d, d_h)
        self.out_weights = out_weights  # per layer (heads, d_h, d)
        self.rgb_weights = rgb_weights  # (d, 3)
        self.seed = seed

    def weights(self):
        for cfg, wv, wo in zip(self.layers, self.value_weights, self.out_weights):
            yield from (cfg.w_q_self, cfg.w_k_self, cfg.w_q_cross, cfg.w_k_cross, wv, wo)
        yield self.rgb_weights

    def forward(self, latent, prompt, t=None, schedule=None, hooks=()):
        H, W, d = latent.shape
        feats = None
        for cfg, wv, wo in zip(self.layers, self.value_weights, self.out_weights):
            sa = compute_self_attention(latent, cfg)
            ca = compute_cross_attention(latent, prompt.embeddings, cfg)
            _hook_all(hooks, "self", cfg.resolution, sa)
            _hook_all(hooks, "cross", cfg.resolution, ca)
            if t is None:
                continue
            x = average_pool(latent, cfg.resolution).reshape(-1, d)
            v = torch.einsum("pd,hde->hpe", x, wv)
            attended = torch.einsum("hpq,hqe,hed->pd", sa, v, wo) / cfg.heads
            up = upsample_map(attended, cfg.resolution, (H, W), "cross")
            feats = up if feats is None else feats + up
        if t is None:
            return None
        return (feats / len(self.layers)).reshape(H, W, d)

    def decode(self, latent):
        img = 0.5 + latent.detach() @ self.rgb_weights
        return img.clamp(0.0, 1.0).numpy()

    def ground_truth(self, latent):
        raise UnsupportedOperation("seeded-attention backend has no scene ground truth")


def build_seeded_denoiser(dims, layer_plan, seed, head_dim=None) -> SeededAttentionBackend:
    """``layer_plan``: list of (H_l, W_l, heads).  Weights ~ N(0, 1/d)."""
    H, W, d = dims
    if not layer_plan:
        raise ConfigError("layer plan is empty")
    d_h = head_dim or d
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(d)

    def draw(*shape):
        return torch.as_tensor(rng.standard_normal(shape) * scale, dtype=DTYPE)

    layers, wvs, wos = [], [], []
    for i, (h_l, w_l, heads) in enumerate(layer_plan):
        upsample_factor((h_l, w_l), (H, W))
        if heads < 1:
            raise ConfigError("each layer needs at least one head")
        layers.append(
            AttentionLayerConfig(
                layer_index=i,
                height=h_l,
                width=w_l,
                w_q_self=draw(heads, d, d_h),
                w_k_self=draw(heads, d, d_h),
                w_q_cross=draw(heads, d, d_h),
                w_k_cross=draw(heads, d, d_h),
            )
        )
        wvs.append(draw(heads, d, d_h))
        wos.append(draw(heads, d_h, d))
    return SeededAttentionBackend(dims, layers, wvs, wos, draw(d, 3), seed)


# -- scene backend -----------------------------------------------------------


@dataclass(frozen=True)
class ScenePrior:
    """Prior over each blob's read-out coordinates, plus the read-out gains.

    Everything is in latent units, where the forward process adds unit
    variance noise.  A read-out value ``v`` maps to a center coordinate
    ``sigmoid(center_gain * v)``, a radius ``r_max * s^2 / (1 + s^2)`` with
    ``s = radius_gain * v`` and a class logit ``class_gain * v``.  Each
    center follows an equal-weight mixture of Gaussians at the cells of an
    ``anchor_grid`` x ``anchor_grid`` layout, independently per blob, so two
    blobs can claim the same cell; one cell gives a plain Gaussian around
    the image center.  The radius is Gaussian.  Class
    read-outs follow an equal-weight mixture over the class assignments the
    prompt allows, each component placing ``class_sep`` on the assigned class.
    """

    center_gain: float = 10.0
    anchor_grid: int = 1
    anchor_std: float = 0.12
    radius_gain: float = 4.0
    radius_mean: float = 0.33
    radius_std: float = 0.05
    class_gain: float = 5.0
    class_sep: float = 0.5
    class_std: float = 0.1


@dataclass(frozen=True)
class SceneSpec:
    instances: tuple  # of (class index, (cx, cy), radius)
    palette: np.ndarray  # (num classes, 3)
    background: np.ndarray  # (3,)


class SceneBackend:
    backend_id = "synthetic-scene"

    #: self-attention membership temperature
    temperature = 10.0
    #: cross-attention logit scale for class tokens
    token_gain = 4.0
    #: soft edge width of blob membership, pixels
    edge = 0.5
    #: weight of class membership in the attention features
    membership_weight = 0.7
    #: pixel distance that counts as one feature unit
    spatial_scale = 12.0
    #: radius upper bound as a fraction of the image side
    r_max = 0.3

    def __init__(
        self,
        prompt: PromptSpec,
        dims,
        readout: torch.Tensor,
        class_ids: tuple[int, ...],
        palette: np.ndarray,
        seed: int,
        prior: ScenePrior = ScenePrior(),
        layer_plan=((1, 2), (2, 2)),
    ):
        self.prompt = prompt
        self.dims = dims
        self.readout = readout  # (P, H W d), orthonormal rows
        self.class_ids = class_ids
        self.palette = palette
        self.seed = seed
        self.prior = prior
        self.layer_plan = layer_plan  # (downsample factor, heads)
        self.num_instances = prompt.num_instances
        self.num_classes = prompt.num_classes
        self._components = self._class_components()
        self._anchors = self._center_anchors()

    # parameter read-out

    @property
    def block(self) -> int:
        return 3 + self.num_classes

    def raw_params(self, latent: torch.Tensor) -> torch.Tensor:
        """(N, 3 + k) read-out coordinates of every blob."""
        return (self.readout @ latent.reshape(-1)).reshape(self.num_instances, self.block)

    def params(self, latent: torch.Tensor):
        """(centers (N, 2) as (x, y) in [0, 1], radii (N,), class probs (N, k))."""
        pr = self.prior
        v = self.raw_params(latent)
        centers = torch.sigmoid(pr.center_gain * v[:, :2])
        s = pr.radius_gain * v[:, 2]
        radii = self.r_max * s**2 / (1.0 + s**2)
        probs = torch.softmax(pr.class_gain * v[:, 3:], dim=1)
        return centers, radii, probs

    def encode(self, centers, radii, class_logits) -> torch.Tensor:
        """Latent whose read-out is exactly the given parameters."""
        pr = self.prior
        centers = torch.as_tensor(np.asarray(centers, dtype=float), dtype=DTYPE)
        radii = torch.as_tensor(np.asarray(radii, dtype=float), dtype=DTYPE)
        logits = torch.as_tensor(np.asarray(class_logits, dtype=float), dtype=DTYPE)
        r = radii / self.r_max
        v = torch.cat(
            [
                torch.logit(centers) / pr.center_gain,
                (torch.sqrt(r / (1.0 - r)) / pr.radius_gain)[:, None],
                logits.reshape(len(radii), -1) / pr.class_gain,
            ],
            dim=1,
        )
        return (self.readout.T @ v.reshape(-1)).reshape(self.dims)

    # attention

    def _membership(self, latent, res, factor):
        """(P_l, N) soft membership of each layer pixel in each blob."""
        H, W, _ = self.dims
        centers, radii, _ = self.params(latent)
        h, w = res
        ys = (torch.arange(h, dtype=DTYPE) + 0.5) * factor
        xs = (torch.arange(w, dtype=DTYPE) + 0.5) * factor
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        px = gx.reshape(-1, 1) - centers[None, :, 0] * W
        py = gy.reshape(-1, 1) - centers[None, :, 1] * H
        dist = torch.sqrt(px**2 + py**2 + 1e-9)
        r_px = radii[None, :] * min(H, W)
        return torch.sigmoid((r_px - dist) / self.edge)

    def _features(self, m, probs, res, factor):
        """Per-pixel attention features: class-wise soft union of blob
        membership, plus the pixel position gated by overall membership.

        Same-class blobs that touch share features and fuse, as merged
        instances do; gating keeps background rows spread out.
        """
        H, W, _ = self.dims
        U_cls = 1.0 - torch.prod(1.0 - m[:, :, None] * probs[None], dim=1)
        U_all = 1.0 - torch.prod(1.0 - m, dim=1, keepdim=True)
        h, w = res
        ys = (torch.arange(h, dtype=DTYPE) + 0.5) * factor - H / 2
        xs = (torch.arange(w, dtype=DTYPE) + 0.5) * factor - W / 2
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        pos = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1) / self.spatial_scale
        return torch.cat([self.membership_weight * U_cls, U_all * pos], dim=1)

    def forward(self, latent, prompt=None, t=None, schedule=None, hooks=()):
        if t is not None and not hooks:
            # the noise prediction does not read the attention maps
            return self.predict_noise(latent, t, schedule)
        H, W, _ = self.dims
        _, _, probs = self.params(latent)
        L = self.prompt.length
        for factor, heads in self.layer_plan:
            res = (H // factor, W // factor)
            m = self._membership(latent, res, factor)
            f = self._features(m, probs, res, factor)
            sq = (f * f).sum(1)
            dist2 = (sq[:, None] + sq[None, :] - 2.0 * f @ f.T).clamp_min(0.0)
            scales = torch.linspace(1.0, 0.5, heads, dtype=DTYPE) if heads > 1 else torch.ones(1, dtype=DTYPE)
            sa = torch.softmax(dist2[None] * (-self.temperature * scales)[:, None, None], dim=-1)
            tok = torch.zeros(m.shape[0], L, dtype=DTYPE)
            tok[:, list(self.prompt.class_token_indices)] = self.token_gain * (m @ probs)
            ca = torch.softmax(tok, dim=-1).expand(heads, -1, -1)
            _hook_all(hooks, "self", res, sa)
            _hook_all(hooks, "cross", res, ca)
        if t is None:
            return None
        return self.predict_noise(latent, t, schedule)

    # denoiser

    def _class_components(self) -> torch.Tensor:
        """Distinct class assignments consistent with the prompt counts."""
        labels = self.prompt.instance_classes()
        comps = sorted(set(permutations(labels)))
        eye = torch.eye(self.num_classes, dtype=DTYPE)
        return torch.stack([eye[list(c)] for c in comps]) * self.prior.class_sep

    def _center_anchors(self) -> torch.Tensor:
        """(G^2, 2) center read-outs of the layout cells, row-major."""
        g = self.prior.anchor_grid
        frac = (torch.arange(g, dtype=DTYPE) + 0.5) / g
        ax = torch.logit(frac) / self.prior.center_gain
        gy, gx = torch.meshgrid(ax, ax, indexing="ij")
        return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1)

    @staticmethod
    def _mixture_mean(y, comps, std, var_n):
        """E[x | y] for y = x + N(0, var_n), x ~ equal mixture of N(comps[m], std^2).

        ``comps`` has one more leading axis than ``y``; all other axes are
        scored jointly.
        """
        var = std**2 + var_n
        axes = tuple(range(1, comps.dim()))
        w = torch.softmax(-((y[None] - comps) ** 2).sum(dim=axes) / (2.0 * var), dim=0)
        post = comps + std**2 / var * (y[None] - comps)
        return torch.tensordot(w, post, dims=1)

    def clean_estimate(self, v: torch.Tensor, alpha_bar: float) -> torch.Tensor:
        """Posterior mean of the clean read-out given the noisy one."""
        pr = self.prior
        y = v / math.sqrt(alpha_bar)
        var_n = (1.0 - alpha_bar) / alpha_bar
        out = torch.empty_like(v)

        def shrink(x, mean, std):
            return mean + std**2 / (std**2 + var_n) * (x - mean)

        for i in range(self.num_instances):
            out[i, :2] = self._mixture_mean(y[i, :2], self._anchors, pr.anchor_std, var_n)
        out[:, 2] = shrink(y[:, 2], pr.radius_mean, pr.radius_std)
        out[:, 3:] = self._mixture_mean(y[:, 3:], self._components, pr.class_std, var_n)
        return out

    def predict_noise(self, latent, t, schedule):
        ab = schedule.alpha_bar(t)
        u = self.raw_params(latent)
        x0 = (self.readout.T @ self.clean_estimate(u, ab).reshape(-1)).reshape(latent.shape)
        return (latent - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)

    # outputs

    def scene(self, latent) -> SceneSpec:
        centers, radii, probs = self.params(latent.detach())
        inst = []
        for i in range(self.num_instances):
            cls = self.class_ids[int(torch.argmax(probs[i]))]
            inst.append((cls, (float(centers[i, 0]), float(centers[i, 1])), float(radii[i])))
        return SceneSpec(tuple(inst), self.palette, BACKGROUND)

    def ground_truth(self, latent):
        return list(self.scene(latent).instances)

    def decode(self, latent) -> np.ndarray:
        s = self.scene(latent)
        return render_scene(s.instances, s.palette, self.dims[:2], s.background)

    def weights(self):
        yield self.readout


def build_scene_denoiser(
    prompt: PromptSpec,
    seed: int,
    dims=(16, 16, 8),
    class_ids: tuple[int, ...] | None = None,
    palette: np.ndarray | None = None,
    prior: ScenePrior = ScenePrior(),
) -> SceneBackend:
    if prompt.num_instances > MAX_INSTANCES or prompt.num_classes > MAX_CLASSES:
        raise ConfigError(
            f"scene backend supports N <= {MAX_INSTANCES}, k <= {MAX_CLASSES}; "
            f"got N={prompt.num_instances}, k={prompt.num_classes}"
        )
    H, W, d = dims
    if H % 2 or W % 2:
        raise ConfigError("scene backend needs even grid sides for its half-resolution layer")
    class_ids = tuple(range(prompt.num_classes)) if class_ids is None else tuple(class_ids)
    palette = TOY_PALETTE if palette is None else np.asarray(palette)
    P = prompt.num_instances * (3 + prompt.num_classes)
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((H * W * d, P)))
    readout = torch.as_tensor(q.T.copy(), dtype=DTYPE)
    return SceneBackend(prompt, dims, readout, class_ids, palette, seed, prior)


def render_scene(instances, palette, dims, background=BACKGROUND) -> np.ndarray:
    """Blobs in class colors over a flat background, 1-pixel anti-aliased edge.

    Each pixel takes the color of the covering blob whose center is nearest
    (relative to its radius), blended with the background by edge coverage.
    """
    H, W = dims
    img = np.tile(np.asarray(background, dtype=float), (H, W, 1))
    if not instances:
        return img
    ys, xs = np.mgrid[0:H, 0:W]
    px, py = xs + 0.5, ys + 0.5
    best = np.full((H, W), -np.inf)
    color = np.zeros((H, W, 3))
    cover = np.zeros((H, W))
    for cls, (cx, cy), r in instances:
        d = np.hypot(px - cx * W, py - cy * H)
        r_px = r * min(H, W)
        cov = np.clip(r_px - d + 0.5, 0.0, 1.0)
        score = r_px - d
        take = (cov > 0) & (score > best)
        best[take] = score[take]
        color[take] = palette[cls]
        cover[take] = cov[take]
    return img * (1.0 - cover[..., None]) + color * cover[..., None]
