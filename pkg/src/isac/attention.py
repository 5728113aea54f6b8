"""Per-layer self/cross attention and accumulation into full-resolution maps.

Maps are float64 torch tensors so the whole chain stays differentiable with
respect to the latent.  Pixel axes are flattened row-major.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field

import numpy as np
import torch

from isac.errors import ConfigError
from isac.prompts import plural

DTYPE = torch.float64

_PUNCT = re.compile(r"^[^\w]+|[^\w]+$")


def token_embedding(token: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic unit-scale embedding for a token string."""
    digest = hashlib.sha256(f"{seed}:{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(dim) / math.sqrt(dim)


def normalize_token(token: str) -> str:
    return _PUNCT.sub("", token).lower()


@dataclass(frozen=True)
class PromptSpec:
    tokens: tuple[str, ...]
    embeddings: torch.Tensor  # (L, d)
    class_token_indices: tuple[int, ...]
    instance_counts: tuple[int, ...]
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        L = len(self.tokens)
        if L == 0:
            raise ConfigError("prompt has no tokens")
        if self.embeddings.shape[0] != L:
            raise ConfigError("one embedding per token required")
        idx = self.class_token_indices
        if not idx:
            raise ConfigError("at least one class token required")
        if len(set(idx)) != len(idx) or min(idx) < 0 or max(idx) >= L:
            raise ConfigError(f"bad class token indices {idx} for L={L}")
        if len(self.instance_counts) != len(idx) or min(self.instance_counts) < 1:
            raise ConfigError("need one count >= 1 per class token")

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def num_classes(self) -> int:
        return len(self.class_token_indices)

    @property
    def num_instances(self) -> int:
        return sum(self.instance_counts)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def instance_classes(self) -> list[int]:
        """Prompt-class position of every instance, in prompt order."""
        return [j for j, n in enumerate(self.instance_counts) for _ in range(n)]

    @classmethod
    def from_text(
        cls,
        text: str,
        class_names: list[str] | tuple[str, ...],
        counts: list[int] | tuple[int, ...],
        dim: int,
        seed: int = 0,
    ) -> PromptSpec:
        """Whitespace-tokenize ``text`` and locate one token per class name.

        Multi-word names are matched on their last word, singular or plural.
        """
        tokens = tuple(text.split())
        norm = [normalize_token(t) for t in tokens]
        indices = []
        for name in class_names:
            head = name.split()[-1].lower()
            hit = None
            for i, tok in enumerate(norm):
                if i in indices:
                    continue
                if tok == head or tok == plural(head):
                    hit = i
                    break
            if hit is None:
                raise ConfigError(f"class {name!r} not found in prompt {text!r}")
            indices.append(hit)
        emb = np.stack([token_embedding(t, dim, seed) for t in norm])
        return cls(
            tokens=tokens,
            embeddings=torch.as_tensor(emb, dtype=DTYPE),
            class_token_indices=tuple(indices),
            instance_counts=tuple(int(c) for c in counts),
            class_names=tuple(class_names),
        )


@dataclass(frozen=True)
class AttentionLayerConfig:
    layer_index: int
    height: int
    width: int
    w_q_self: torch.Tensor  # (heads, d, d_h)
    w_k_self: torch.Tensor
    w_q_cross: torch.Tensor
    w_k_cross: torch.Tensor

    @property
    def heads(self) -> int:
        return self.w_q_self.shape[0]

    @property
    def head_dim(self) -> int:
        return self.w_q_self.shape[2]

    @property
    def in_dim(self) -> int:
        return self.w_q_self.shape[1]

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class AccumulatedAttention:
    sa: torch.Tensor  # (HW, HW)
    ca: torch.Tensor  # (HW, L)
    raw: dict = field(default_factory=dict, compare=False, repr=False)


def upsample_factor(source_res: tuple[int, int], target_res: tuple[int, int]) -> int:
    (h, w), (H, W) = source_res, target_res
    if h <= 0 or w <= 0 or H % h or W % w or H // h != W // w:
        raise ConfigError(f"no integer upsampling factor from {source_res} to {target_res}")
    return H // h


def average_pool(latent: torch.Tensor, res: tuple[int, int]) -> torch.Tensor:
    """Non-overlapping average pooling of an (H, W, d) grid to ``res``."""
    H, W, d = latent.shape
    f = upsample_factor(res, (H, W))
    if f == 1:
        return latent
    h, w = res
    return latent.reshape(h, f, w, f, d).mean(dim=(1, 3))


def _check_proj(x: torch.Tensor, w: torch.Tensor, what: str) -> None:
    if x.shape[-1] != w.shape[1]:
        raise ConfigError(f"{what}: input dim {x.shape[-1]} != weight rows {w.shape[1]}")


def compute_self_attention(latent: torch.Tensor, cfg: AttentionLayerConfig) -> torch.Tensor:
    """Per-head softmax(Q K^T / sqrt(d_h)) at the layer's resolution -> (h, P, P)."""
    x = average_pool(latent, cfg.resolution).reshape(-1, latent.shape[-1])
    _check_proj(x, cfg.w_q_self, "self-attention")
    q = torch.einsum("pd,hde->hpe", x, cfg.w_q_self)
    k = torch.einsum("pd,hde->hpe", x, cfg.w_k_self)
    logits = q @ k.transpose(1, 2) / math.sqrt(cfg.head_dim)
    return torch.softmax(logits, dim=-1)


def compute_cross_attention(
    latent: torch.Tensor, embeddings: torch.Tensor, cfg: AttentionLayerConfig
) -> torch.Tensor:
    """Per-head pixel-to-token attention -> (h, P, L)."""
    if embeddings.shape[0] == 0:
        raise ConfigError("cross-attention needs at least one token")
    x = average_pool(latent, cfg.resolution).reshape(-1, latent.shape[-1])
    _check_proj(x, cfg.w_q_cross, "cross-attention")
    _check_proj(embeddings, cfg.w_k_cross, "cross-attention keys")
    q = torch.einsum("pd,hde->hpe", x, cfg.w_q_cross)
    k = torch.einsum("ld,hde->hle", embeddings, cfg.w_k_cross)
    logits = q @ k.transpose(1, 2) / math.sqrt(cfg.head_dim)
    return torch.softmax(logits, dim=-1)


_BILINEAR_CACHE: dict[tuple[int, int], torch.Tensor] = {}


def bilinear_matrix(n: int, factor: int) -> torch.Tensor:
    """(n*factor, n) 1-D bilinear interpolation weights.

    Output samples sit at pixel centres, so edge pixels replicate rather
    than extrapolate; rows sum to one. Cached; treat the result as read-only.
    """
    key = (n, factor)
    if key in _BILINEAR_CACHE:
        return _BILINEAR_CACHE[key]
    m = n * factor
    out = torch.zeros(m, n, dtype=DTYPE)
    for i in range(m):
        src = min(max((i + 0.5) / factor - 0.5, 0.0), n - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        out[i, i0] += 1.0 - frac
        out[i, i1] += frac
    _BILINEAR_CACHE[key] = out
    return out


_GRID_CACHE: dict[tuple[int, int, int], torch.Tensor] = {}


def grid_upsample_matrix(res: tuple[int, int], factor: int) -> torch.Tensor:
    """(H W, h w) dense matrix applying 2-D bilinear upsampling to a flattened grid.

    Reference form of the axis-by-axis upsampling used by ``upsample_map``.
    """
    key = (res[0], res[1], factor)
    if key not in _GRID_CACHE:
        _GRID_CACHE[key] = torch.kron(bilinear_matrix(res[0], factor), bilinear_matrix(res[1], factor))
    return _GRID_CACHE[key]


def _upsample_axes(x: torch.Tensor, res: tuple[int, int], f: int, first: int) -> torch.Tensor:
    """Bilinear upsampling of the flattened grid axis ``first`` (a negative index), one spatial axis at a time."""
    Uh, Uw = bilinear_matrix(res[0], f), bilinear_matrix(res[1], f)
    x = x.movedim(first, -1)
    x = x.reshape(*x.shape[:-1], res[0], res[1])
    x = torch.matmul(x, Uw.T)
    x = torch.matmul(Uh, x)
    x = x.reshape(*x.shape[:-2], -1)
    return x.movedim(-1, first)


def upsample_map(
    amap: torch.Tensor,
    source_res: tuple[int, int],
    target_res: tuple[int, int],
    kind: str,
) -> torch.Tensor:
    """Upsample a self (P x P) or cross (P x L) map; leading head axes allowed.

    Equal to U A U^T (self) or U A (cross) with U the Kronecker product of the
    per-axis bilinear matrices, applied axis by axis.
    """
    if kind not in ("self", "cross"):
        raise ConfigError(f"unknown map kind {kind!r}")
    f = upsample_factor(source_res, target_res)
    if f == 1:
        return amap
    out = _upsample_axes(amap, source_res, f, -2)
    if kind == "self":
        out = _upsample_axes(out, source_res, f, -1)
    return out


def minmax_normalize(amap: torch.Tensor) -> torch.Tensor:
    """Global min-max rescale to [0, 1]; a constant map becomes all zeros.

    The min and max are read at their first occurrence so gradients flow
    through exactly one element each.
    """
    flat = amap.reshape(-1)
    lo = flat[torch.argmin(flat)]
    hi = flat[torch.argmax(flat)]
    span = hi - lo
    if span.item() <= 0.0:
        return torch.zeros_like(amap)
    return (amap - lo) / span


def accumulate(
    layers: list[tuple[torch.Tensor, tuple[int, int]]],
    target_res: tuple[int, int],
    kind: str,
) -> torch.Tensor:
    """Average every head of every layer at full resolution, then min-max.

    ``layers`` holds (per-head maps of shape (h, P_l, .), layer resolution).
    Heads are summed at layer resolution before upsampling (upsampling is
    linear); layers are added in order.
    """
    if not layers:
        raise ConfigError("nothing to accumulate")
    total = None
    heads = 0
    for maps, res in layers:
        up = upsample_map(maps.sum(dim=0), res, target_res, kind)
        total = up if total is None else total + up
        heads += maps.shape[0]
    # the 1 / heads of the mean cancels inside the min-max rescale
    return minmax_normalize(total)
