"""Overlap losses, schedules, and the per-step loss with its latent gradient."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import torch

from isac import masking
from isac.attention import DTYPE, AccumulatedAttention, accumulate
from isac.errors import ConfigError, NumericalError

SCHEDULES = ("A", "B", "C", "D", "E")
LOSS_KINDS = ("MPO", "MAE", "KL", "IoU")
KL_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_ins: float
    lambda_cls: float
    schedule_id: str = ""


@dataclass
class LossReport:
    t: int
    lambda_ins: float
    lambda_cls: float
    L_ins: float
    L_cls: float
    L_total: float
    ins_pair: tuple[int, int] | None = None
    ins_pixel: int | None = None  # flat pixel index in the H x W grid
    cls_pair: tuple[int, int] | None = None
    cls_pixel: int | None = None
    foreground: int = 0

    def row(self) -> dict:
        return {
            "t": self.t,
            "lambda_ins": self.lambda_ins,
            "lambda_cls": self.lambda_cls,
            "L_ins": self.L_ins,
            "L_cls": self.L_cls,
            "L_total": self.L_total,
        }


def schedule_weights(schedule_id: str, t: int, T: int) -> LossWeights:
    """Instance/class weights at timestep t (counting down from T to 1)."""
    if not 1 <= t <= T:
        raise ConfigError(f"timestep {t} outside 1..{T}")
    r = t / T
    table = {
        "A": (1.0, 0.0),
        "B": (0.0, 1.0),
        "C": (0.5, 0.5),
        "D": (1.0 - r, r),
        "E": (r, 1.0 - r),
    }
    if schedule_id not in table:
        raise ConfigError(f"unknown schedule {schedule_id!r}")
    lam_ins, lam_cls = table[schedule_id]
    return LossWeights(lam_ins, lam_cls, schedule_id)


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mpo_argmax(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, int]:
    _check_pair(a, b)
    prod = a * b
    p = int(torch.argmax(prod))
    return prod[p], p


def mpo(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Peak elementwise product of two soft masks."""
    return mpo_argmax(a, b)[0]


def alt_overlap(a: torch.Tensor, b: torch.Tensor, kind: str) -> torch.Tensor:
    """Global overlap scores used as drop-in replacements for MPO.

    All three grow with overlap: MAE -> 1 - mean|a - b|, KL ->
    exp(-symmetric KL of the sum-normalized masks), IoU -> soft
    intersection over union (0 when both masks are empty).
    """
    _check_pair(a, b)
    if kind == "MAE":
        return 1.0 - (a - b).abs().mean()
    if kind == "KL":
        if a.sum().item() <= 0 or b.sum().item() <= 0:
            raise ValueError("KL overlap needs masks with positive mass")
        pa = (a + KL_EPS) / (a + KL_EPS).sum()
        pb = (b + KL_EPS) / (b + KL_EPS).sum()
        sym = ((pa - pb) * (pa.log() - pb.log())).sum()
        return torch.exp(-sym)
    if kind == "IoU":
        union = torch.maximum(a, b).sum()
        if union.item() <= 0:
            return union * 0.0
        return torch.minimum(a, b).sum() / union
    if kind == "MPO":
        return mpo(a, b)
    raise ConfigError(f"unknown overlap kind {kind!r}")


def max_pairwise(masks: torch.Tensor, kind: str = "MPO"):
    """Max overlap over column pairs i < j of an (F, n) mask matrix.

    Returns (value, pair, pixel); value is 0 with pair/pixel None when n < 2.
    Ties resolve to the first pair in lexicographic order.
    """
    n = masks.shape[1]
    if n < 2 or masks.shape[0] == 0:
        return masks.new_zeros(()), None, None
    pairs = list(combinations(range(n), 2))
    if kind == "MPO":
        left = masks[:, [i for i, _ in pairs]]
        right = masks[:, [j for _, j in pairs]]
        prod = left * right
        flat = int(torch.argmax(prod.T.reshape(-1)))
        k, p = divmod(flat, masks.shape[0])
        best = prod[p, k]
        return best, pairs[k], p
    values = torch.stack([alt_overlap(masks[:, i], masks[:, j], kind) for i, j in pairs])
    k = int(torch.argmax(values))
    return values[k], pairs[k], None


def instance_loss(masks: torch.Tensor, kind: str = "MPO") -> torch.Tensor:
    return max_pairwise(masks, kind)[0]


def class_loss(cls_masks: torch.Tensor, kind: str = "MPO") -> torch.Tensor:
    return max_pairwise(cls_masks, kind)[0]


def combined_loss(
    ins: tuple | None,
    cls: tuple | None,
    weights: LossWeights,
    t: int = 0,
) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum of the instance and class terms.

    ``ins``/``cls`` are ``max_pairwise`` results, or None when a skip rule
    applies (the term is then zero).
    """
    zero = torch.zeros((), dtype=DTYPE)
    l_ins, ins_pair, ins_pix = ins if ins is not None else (zero, None, None)
    l_cls, cls_pair, cls_pix = cls if cls is not None else (zero, None, None)
    total = weights.lambda_ins * l_ins + weights.lambda_cls * l_cls
    report = LossReport(
        t=t,
        lambda_ins=weights.lambda_ins,
        lambda_cls=weights.lambda_cls,
        L_ins=float(l_ins.detach()),
        L_cls=float(l_cls.detach()),
        L_total=float(total.detach()),
        ins_pair=ins_pair,
        ins_pixel=ins_pix,
        cls_pair=cls_pair,
        cls_pixel=cls_pix,
    )
    return total, report


@dataclass
class Frozen:
    """Hard selections held constant within one gradient evaluation."""

    foreground: masking.ForegroundSelection
    assignment: masking.HardInstanceAssignment | None


@dataclass
class StepContext:
    t: int
    backend: object
    prompt: object
    weights: LossWeights
    kind: str
    cluster_seed: int
    frozen: Frozen
    attention: AccumulatedAttention
    ca_prop: torch.Tensor
    inst_masks: torch.Tensor | None
    cls_masks: torch.Tensor
    report: LossReport
    total: torch.Tensor
    leaf: torch.Tensor = field(repr=False)
    source: torch.Tensor = field(repr=False)


def capture_attention(latent: torch.Tensor, backend, prompt) -> AccumulatedAttention:
    """Probe forward pass with hooks; returns accumulated, normalized maps."""
    store = {"self": [], "cross": []}

    def hook(kind, cfg_res, maps):
        store[kind].append((maps, cfg_res))

    backend.forward(latent, prompt, hooks=[hook])
    H, W = latent.shape[:2]
    sa = accumulate(store["self"], (H, W), "self")
    ca = accumulate(store["cross"], (H, W), "cross")
    return AccumulatedAttention(sa=sa, ca=ca, raw=store)


def _forward(latent, backend, prompt, weights, kind, t, cluster_seed, frozen=None):
    H, W = latent.shape[:2]
    att = capture_attention(latent, backend, prompt)
    ca_prop = masking.propagate_classes(att.sa, att.ca)
    sa_fg = None
    if frozen is None:
        sel = masking.global_foreground(masking.binarize(ca_prop), prompt.class_token_indices)
        assignment = None
        N = prompt.num_instances
        if N >= 2 and sel.size >= N:
            sa_fg = masking.filter_self_attention(att.sa, sel)
            pts = masking.append_coordinates(sa_fg, sel, H, W)
            assignment = masking.kmeans_cluster(pts, N, cluster_seed)
        frozen = Frozen(sel, assignment)
    sel = frozen.foreground

    ins = None
    inst = None
    if frozen.assignment is not None:
        if sa_fg is None:
            sa_fg = masking.filter_self_attention(att.sa, sel)
        inst = masking.instance_masks(sa_fg, frozen.assignment)
        value, pair, p = max_pairwise(inst, kind)
        ins = (value, pair, int(sel.indices[p]) if p is not None else None)

    cls_m = masking.class_masks(ca_prop, prompt.class_token_indices)
    cls = max_pairwise(cls_m, kind) if prompt.num_classes >= 2 else None
    total, report = combined_loss(ins, cls, weights, t)
    report.foreground = sel.size
    return att, ca_prop, frozen, inst, cls_m, total, report


def build_step_context(
    latent: torch.Tensor,
    backend,
    prompt,
    weights: LossWeights,
    kind: str = "MPO",
    t: int = 0,
    cluster_seed: int = 0,
) -> StepContext:
    """Forward pass at ``latent`` recording maps, selections and the loss."""
    if kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {kind!r}")
    leaf = latent.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        att, ca_prop, frozen, inst, cls_m, total, report = _forward(
            leaf, backend, prompt, weights, kind, t, cluster_seed
        )
    return StepContext(
        t=t,
        backend=backend,
        prompt=prompt,
        weights=weights,
        kind=kind,
        cluster_seed=cluster_seed,
        frozen=frozen,
        attention=att,
        ca_prop=ca_prop,
        inst_masks=inst,
        cls_masks=cls_m,
        report=report,
        total=total,
        leaf=leaf,
        source=latent.detach().clone(),
    )


def frozen_loss(latent: torch.Tensor, ctx: StepContext) -> torch.Tensor:
    """Loss at ``latent`` with the context's hard selections held fixed."""
    return _forward(
        latent, ctx.backend, ctx.prompt, ctx.weights, ctx.kind, ctx.t, ctx.cluster_seed, ctx.frozen
    )[5]


def loss_gradient(latent: torch.Tensor, ctx: StepContext) -> torch.Tensor:
    """Gradient of the step loss w.r.t. the latent, selections frozen."""
    if torch.equal(latent.detach(), ctx.source) and ctx.total.requires_grad:
        (grad,) = torch.autograd.grad(ctx.total, ctx.leaf, retain_graph=True)
    else:
        leaf = latent.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            total = frozen_loss(leaf, ctx)
        if not total.requires_grad:
            return torch.zeros_like(leaf)
        (grad,) = torch.autograd.grad(total, leaf)
    if not bool(torch.isfinite(grad).all()):
        raise NumericalError("non-finite loss gradient", ctx.t)
    return grad


def selections_signature(ctx: StepContext) -> tuple:
    """Everything discrete the gradient depends on, for switch detection."""
    fr = ctx.frozen
    sa = ctx.attention.sa.detach().reshape(-1)
    ca = ctx.attention.ca.detach().reshape(-1)
    rep = ctx.report
    return (
        tuple(fr.foreground.indices.tolist()),
        None if fr.assignment is None else tuple(fr.assignment.labels.tolist()),
        rep.ins_pair,
        rep.ins_pixel,
        rep.cls_pair,
        rep.cls_pixel,
        int(torch.argmin(sa)),
        int(torch.argmax(sa)),
        int(torch.argmin(ca)),
        int(torch.argmax(ca)),
    )
