"""The sampling loop with one latent-gradient update per timestep."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from isac.attention import DTYPE, PromptSpec
from isac.errors import ConfigError, NumericalError, UnsupportedOperation
from isac.losses import LOSS_KINDS, SCHEDULES, LossReport, build_step_context, loss_gradient, schedule_weights
from isac.prompts import render_prompt
from isac.toybench import TOY_CATEGORIES, build_scene_denoiser, build_seeded_denoiser

BACKENDS = ("synthetic-scene", "seeded-attention")


class NoiseSchedule:
    """Linear beta schedule; index t runs 1..T and alpha_bar(0) = 1."""

    def __init__(self, T: int, beta_start: float = 1e-4, beta_end: float = 0.02):
        self.T = T
        self.betas = np.linspace(beta_start, beta_end, T)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def posterior_std(self, t: int) -> float:
        if t <= 1:
            return 0.0
        return math.sqrt(self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)))


@dataclass
class RunConfig:
    T: int = 50
    eta: float = 0.01
    schedule: str = "E"
    loss_kind: str = "MPO"
    backend: str = "synthetic-scene"
    backend_seed: int | None = None
    prompt: str = ""
    classes: tuple[str, ...] = ("cat", "dog")
    counts: tuple[int, ...] = (1, 1)
    category: str | None = None
    height: int = 16
    width: int = 16
    dim: int = 8
    layer_plan: tuple = ((16, 16, 2), (8, 8, 2))
    dump_timesteps: tuple[int, ...] = ()

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.counts = tuple(int(c) for c in self.counts)
        self.dump_timesteps = tuple(int(t) for t in self.dump_timesteps)
        self.layer_plan = tuple(tuple(int(v) for v in layer) for layer in self.layer_plan)
        self.validate()

    def validate(self):
        if self.T < 2:
            raise ConfigError("T must be at least 2")
        if not self.eta >= 0 or not math.isfinite(self.eta):
            raise ConfigError("eta must be a finite non-negative number")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}")
        if min(self.height, self.width, self.dim) < 2:
            raise ConfigError("grid sides and latent dim must be >= 2")
        if not self.classes or len(self.classes) != len(self.counts):
            raise ConfigError("need one count per class")
        if any(t < 1 or t > self.T for t in self.dump_timesteps):
            raise ConfigError(f"dump timesteps must lie in 1..{self.T}")

    def prompt_text(self) -> str:
        return self.prompt or render_prompt(self.classes, self.counts)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["classes"] = list(self.classes)
        d["counts"] = list(self.counts)
        d["layer_plan"] = [list(x) for x in self.layer_plan]
        d["dump_timesteps"] = list(self.dump_timesteps)
        return d


@dataclass
class RunRecord:
    config: RunConfig
    seed: int
    reports: list[LossReport] = field(default_factory=list)
    hashes: list[tuple[str, str]] = field(default_factory=list)
    final_latent: torch.Tensor | None = None
    image: np.ndarray | None = None
    ground_truth: list | None = None
    dumps: dict = field(default_factory=dict)


def latent_hash(x: torch.Tensor) -> str:
    """Short content hash of a latent, stable after rounding to 6 decimals."""
    arr = np.round(x.detach().numpy(), 6) + 0.0
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


def make_prompt(config: RunConfig) -> PromptSpec:
    return PromptSpec.from_text(config.prompt_text(), config.classes, config.counts, config.dim, seed=0)


def class_palette_ids(config: RunConfig) -> tuple[int, ...]:
    """Palette index of each prompt class (position within its toy category)."""
    cats = [config.category] if config.category else list(TOY_CATEGORIES)
    for cat in cats:
        names = TOY_CATEGORIES.get(cat, [])
        if all(c in names for c in config.classes):
            return tuple(names.index(c) for c in config.classes)
    return tuple(range(len(config.classes)))


def backend_seed(config: RunConfig, seed: int) -> int:
    """Explicit backend seed, else one derived from the run seed and prompt text."""
    if config.backend_seed is not None:
        return config.backend_seed
    digest = hashlib.sha256(config.prompt_text().encode()).digest()
    return int(np.random.SeedSequence([seed, int.from_bytes(digest[:4], "little")]).generate_state(1)[0])


def make_backend(config: RunConfig, prompt: PromptSpec, seed: int):
    bseed = backend_seed(config, seed)
    dims = (config.height, config.width, config.dim)
    if config.backend == "synthetic-scene":
        return build_scene_denoiser(prompt, bseed, dims, class_ids=class_palette_ids(config))
    return build_seeded_denoiser(dims, list(config.layer_plan), bseed)


def step_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])


def denoise_step(x, t, backend, prompt, schedule: NoiseSchedule, rng: np.random.Generator | None):
    """Posterior-mean step x_t -> x_{t-1}; noise is injected for t > 1 only."""
    eps = backend.forward(x, prompt, t=t, schedule=schedule)
    mean = (x - schedule.beta(t) / math.sqrt(1.0 - schedule.alpha_bar(t)) * eps) / math.sqrt(schedule.alpha(t))
    sigma = schedule.posterior_std(t)
    if sigma > 0 and rng is not None:
        noise = torch.as_tensor(rng.standard_normal(tuple(x.shape)), dtype=DTYPE)
        mean = mean + sigma * noise
    if not bool(torch.isfinite(mean).all()):
        raise NumericalError("non-finite latent after denoising", t)
    return mean.detach()


def isac_step(x, t, config: RunConfig, backend, prompt, seed: int = 0):
    """One loss evaluation and at most one gradient update at timestep t.

    Returns (updated latent, step context).
    """
    weights = schedule_weights(config.schedule, t, config.T)
    ctx = build_step_context(x, backend, prompt, weights, config.loss_kind, t, step_seed(seed, t))
    if not math.isfinite(ctx.report.L_total):
        raise NumericalError("non-finite loss", t)
    if config.eta == 0 or not ctx.total.requires_grad:
        return x, ctx
    grad = loss_gradient(x, ctx)
    return (x - config.eta * grad).detach(), ctx


def _dump(ctx, x_shape):
    H, W = x_shape[:2]
    out = {
        "sa": ctx.attention.sa.detach().numpy(),
        "ca": ctx.attention.ca.detach().numpy(),
        "caprop": ctx.ca_prop.detach().numpy(),
        "fg": ctx.frozen.foreground.mask.numpy().astype(np.float64).reshape(H, W),
        "clsmasks": ctx.cls_masks.detach().numpy(),
    }
    if ctx.inst_masks is not None:
        full = np.zeros((H * W, ctx.inst_masks.shape[1]))
        full[ctx.frozen.foreground.indices.numpy()] = ctx.inst_masks.detach().numpy()
        out["masks"] = full
        out["assignment"] = ctx.frozen.assignment.onehot.numpy()
    return out


def run(config: RunConfig, seed: int, backend=None) -> RunRecord:
    """Sample from X_T ~ N(0, I) down to X_0, optimizing the latent each step."""
    prompt = make_prompt(config)
    backend = backend or make_backend(config, prompt, seed)
    schedule = NoiseSchedule(config.T)
    rng = np.random.default_rng(seed)
    record = RunRecord(config=config, seed=seed)
    x = torch.as_tensor(rng.standard_normal((config.height, config.width, config.dim)), dtype=DTYPE)
    try:
        for t in range(config.T, 0, -1):
            x_opt, ctx = isac_step(x, t, config, backend, prompt, seed)
            record.reports.append(ctx.report)
            record.hashes.append((latent_hash(x), latent_hash(x_opt)))
            if t in config.dump_timesteps:
                record.dumps[t] = _dump(ctx, x.shape)
            x = denoise_step(x_opt, t, backend, prompt, schedule, rng)
    except NumericalError as exc:
        exc.record = record
        raise
    record.final_latent = x
    record.image = decode(x, backend)
    try:
        record.ground_truth = backend.ground_truth(x)
    except UnsupportedOperation:
        record.ground_truth = None
    return record


def decode(x, backend) -> np.ndarray:
    return np.clip(backend.decode(x), 0.0, 1.0)

