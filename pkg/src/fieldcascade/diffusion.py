"""Conditional denoising diffusion over residual grid fields.

Implements the linear noise schedule, forward diffusion, noise-prediction
training, ancestral sampling, posterior-expectation (Tweedie) denoising, and
measurement-guided sampling (projection and manifold-constrained-gradient
modes). Grid fields are channel-first tensors (C, H, W) whose flattened
index i = row * W + col matches the data layer's node indexing.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, NumericalError, ParameterError
from .nn import TrainConfig, load_checkpoint, load_into_module, module_tensors, save_checkpoint


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha tables for T steps; timesteps are 1-indexed."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigma2s: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def _at(self, table: np.ndarray, t) -> float | np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ParameterError(f"timestep {t} outside [1, {self.T}]")
        return table[t - 1]

    def beta(self, t):
        return self._at(self.betas, t)

    def alpha(self, t):
        return self._at(self.alphas, t)

    def alpha_bar(self, t):
        return self._at(self.alpha_bars, t)

    def sigma2(self, t):
        return self._at(self.sigma2s, t)


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule; sigma_1^2 = 0 by the alpha_bar_0 = 1 convention."""
    if T < 2:
        raise ParameterError("schedule needs at least two steps")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ParameterError(f"need 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})")
    ts = np.arange(T, dtype=np.float64)
    betas = beta_min + ts / (T - 1) * (beta_max - beta_min)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev_bars = np.concatenate([[1.0], alpha_bars[:-1]])
    sigma2s = betas * (1.0 - prev_bars) / (1.0 - alpha_bars)
    for arr in (betas, alphas, alpha_bars, sigma2s):
        arr.setflags(write=False)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars, sigma2s=sigma2s)


def _coef(value, like: torch.Tensor) -> torch.Tensor:
    """Schedule coefficient(s) as a tensor broadcastable against `like`."""
    c = torch.as_tensor(value, dtype=like.dtype)
    if c.ndim == 0:
        return c
    return c.reshape(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(d0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """d_t = sqrt(alpha_bar_t) d_0 + sqrt(1 - alpha_bar_t) eps (noise supplied)."""
    if d0.shape != eps.shape:
        raise ParameterError(f"noise shape {tuple(eps.shape)} does not match field {tuple(d0.shape)}")
    ab = schedule.alpha_bar(t)
    return _coef(np.sqrt(ab), d0) * d0 + _coef(np.sqrt(1.0 - ab), d0) * eps


def score_from_eps(eps_pred: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Score of the perturbed density implied by a noise prediction."""
    ab = schedule.alpha_bar(t)
    return -eps_pred / _coef(np.sqrt(1.0 - ab), eps_pred)


def train_step(
    d0: torch.Tensor,
    condition: torch.Tensor,
    net: "ConditionalDenoiser",
    schedule: NoiseSchedule,
    seed: int | torch.Generator,
) -> torch.Tensor:
    """Noise-prediction loss on a batch: draw t and eps, diffuse, regress eps."""
    if d0.ndim != 4 or condition.shape != d0.shape:
        raise ParameterError("train_step expects matching (B, C, H, W) tensors")
    gen = torch.Generator().manual_seed(seed) if isinstance(seed, int) else seed
    B = d0.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=gen)
    eps = torch.randn(d0.shape, generator=gen, dtype=d0.dtype)
    d_t = forward_diffuse(d0, t, eps, schedule)
    pred = net(d_t, t, condition)
    return ((pred - eps) ** 2).mean()


def _net_single(net, d: torch.Tensor, t: int, condition: torch.Tensor) -> torch.Tensor:
    return net(d.unsqueeze(0), torch.tensor([t]), condition.unsqueeze(0)).squeeze(0)


def ancestral_step(
    d_t: torch.Tensor,
    t: int,
    condition: torch.Tensor,
    net: "ConditionalDenoiser",
    schedule: NoiseSchedule,
    eps: torch.Tensor,
) -> torch.Tensor:
    """One reverse transition d_t -> d_{t-1} with supplied Gaussian noise."""
    if d_t.shape != eps.shape:
        raise ParameterError("noise shape does not match state shape")
    a = float(schedule.alpha(t))
    ab = float(schedule.alpha_bar(t))
    with torch.no_grad():
        eps_pred = _net_single(net, d_t, t, condition)
    inner = d_t - (1.0 - a) / math.sqrt(1.0 - ab) * eps_pred
    return inner / math.sqrt(a) + math.sqrt(float(schedule.sigma2(t))) * eps


def tweedie_denoise(
    d_t: torch.Tensor,
    t: int,
    condition: torch.Tensor,
    net: "ConditionalDenoiser",
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Posterior-expectation estimate of the clean residual from state d_t."""
    with torch.no_grad():
        eps_pred = _net_single(net, d_t, t, condition)
    return denoised_from_eps(d_t, t, eps_pred, schedule)


def denoised_from_eps(d_t: torch.Tensor, t, eps_pred: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """d_hat_0 = (d_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)."""
    ab = schedule.alpha_bar(t)
    return (d_t - _coef(np.sqrt(1.0 - ab), d_t) * eps_pred) / _coef(np.sqrt(ab), d_t)


# ---------------------------------------------------------------------------
# Measurement guidance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GuidanceConfig:
    """Measurement-consistency settings for guided sampling."""

    sigma_sq: float = 10000.0
    mode: str = "mcg"  # one of plain / projection / mcg
    grad_through_network: bool = True

    def __post_init__(self):
        if self.sigma_sq <= 0:
            raise ParameterError("measurement variance must be positive")
        if self.mode not in ("plain", "projection", "mcg"):
            raise ParameterError(f"unknown guidance mode {self.mode!r}")


def gather_observed(field: torch.Tensor, indices: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Values of a (C, H, W) field at flat node indices; returns (k, C)."""
    idx = torch.from_numpy(np.array(indices, dtype=np.int64))
    C = field.shape[0]
    return field.reshape(C, -1)[:, idx].T


def _scatter_observed(template: torch.Tensor, indices, values: torch.Tensor) -> torch.Tensor:
    """Zero field shaped like template with (k, C) values placed at indices."""
    idx = torch.from_numpy(np.array(indices, dtype=np.int64))
    C = template.shape[0]
    out = torch.zeros_like(template).reshape(C, -1)
    out[:, idx] = values.T.to(template.dtype)
    return out.reshape(template.shape)


def measurement_grad(
    d_t: torch.Tensor,
    t: int,
    condition: torch.Tensor,
    y: torch.Tensor,
    observed_indices,
    net: "ConditionalDenoiser",
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    residual_scale: float = 1.0,
) -> torch.Tensor:
    """Gradient of the Gaussian measurement log-likelihood with respect to d_t.

    Returns -(1/sigma_sq) * d/d(d_t) ||y - M(condition + scale * r)||^2 where
    r is d_t itself in projection mode or the Tweedie-denoised estimate in
    mcg mode. With grad_through_network off, the denoised estimate is treated
    as affine in d_t with coefficient 1/sqrt(alpha_bar_t) (an approximation
    that skips backpropagating through the denoiser).
    """
    if d_t.ndim != 3 or condition.shape != d_t.shape:
        raise ParameterError("measurement_grad expects matching (C, H, W) tensors")
    if guidance.mode == "plain":
        return torch.zeros_like(d_t)
    s = float(residual_scale)
    y = y.to(d_t.dtype)

    if guidance.mode == "projection":
        resid = y - gather_observed(condition + s * d_t, observed_indices)
        grad = _scatter_observed(d_t, observed_indices, (2.0 * s / guidance.sigma_sq) * resid)
    elif guidance.grad_through_network:
        d_req = d_t.detach().requires_grad_(True)
        with torch.enable_grad():
            eps_pred = _net_single(net, d_req, t, condition)
            d0_hat = denoised_from_eps(d_req, t, eps_pred, schedule)
            resid = y - gather_observed(condition + s * d0_hat, observed_indices)
            objective = (resid**2).sum()
        (obj_grad,) = torch.autograd.grad(objective, d_req)
        grad = -obj_grad / guidance.sigma_sq
    else:
        d0_hat = tweedie_denoise(d_t, t, condition, net, schedule)
        resid = y - gather_observed(condition + s * d0_hat, observed_indices)
        ab = float(schedule.alpha_bar(t))
        grad = _scatter_observed(
            d_t, observed_indices, (2.0 * s / (guidance.sigma_sq * math.sqrt(ab))) * resid
        )
    if not torch.isfinite(grad).all():
        raise NumericalError("non-finite measurement gradient")
    return grad


def guided_sample(
    condition: torch.Tensor,
    y: torch.Tensor | None,
    observed_indices,
    net: "ConditionalDenoiser",
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    seed: int,
    residual_scale: float = 1.0,
) -> torch.Tensor:
    """Run the full reverse process from pure noise; returns the sampled d_0.

    Each step applies the ancestral update with the guidance gradient added
    inside the 1/sqrt(alpha_t) bracket, scaled by (1 - alpha_t). Deterministic
    given the seed.
    """
    if condition.ndim != 3:
        raise ParameterError("guided_sample expects a (C, H, W) condition")
    if guidance.mode != "plain" and (y is None or observed_indices is None):
        raise ParameterError(f"{guidance.mode} guidance requires observations")
    gen = torch.Generator().manual_seed(seed)
    d = torch.randn(condition.shape, generator=gen, dtype=condition.dtype)
    for t in range(schedule.T, 0, -1):
        a = float(schedule.alpha(t))
        ab = float(schedule.alpha_bar(t))
        with torch.no_grad():
            eps_pred = _net_single(net, d, t, condition)
        inner = d - (1.0 - a) / math.sqrt(1.0 - ab) * eps_pred
        if guidance.mode != "plain":
            g = measurement_grad(
                d, t, condition, y, observed_indices, net, schedule, guidance, residual_scale
            )
            inner = inner + (1.0 - a) * g
        d = inner / math.sqrt(a)
        if t > 1:
            d = d + math.sqrt(float(schedule.sigma2(t))) * torch.randn(
                condition.shape, generator=gen, dtype=condition.dtype
            )
    return d


# ---------------------------------------------------------------------------
# Denoiser network: a small U-Net over the grid, conditioned by channel
# concatenation, with a sinusoidal timestep embedding added in every block.
# ---------------------------------------------------------------------------


def _groups(channels: int) -> int:
    return math.gcd(channels, 8)


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ParameterError("time embedding dim must be even")
        half = dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half) / max(half - 1, 1))
        self.register_buffer("freqs", freqs)

    def forward(self, t: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        args = t.to(dtype)[:, None] * self.freqs.to(dtype)[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 1
    widths: tuple[int, ...] = (32, 64, 128)
    blocks_per_level: int = 2
    time_dim: int = 64
    init_seed: int = 0

    def __post_init__(self):
        if len(self.widths) < 1 or self.blocks_per_level < 1:
            raise ParameterError("denoiser needs at least one level and one block")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))


class ConditionalDenoiser(nn.Module):
    """Noise-prediction U-Net: input channels are [noisy residual, condition]."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        torch.manual_seed(config.init_seed)
        self.config = config
        w = config.widths
        td = config.time_dim
        self.time_embed = SinusoidalTimeEmbedding(td)
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.GELU(), nn.Linear(td, td))
        self.stem = nn.Conv2d(2 * config.channels, w[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, width in enumerate(w):
            self.down_blocks.append(
                nn.ModuleList([ResBlock(width, width, td) for _ in range(config.blocks_per_level)])
            )
            if i < len(w) - 1:
                self.downsamples.append(nn.Conv2d(width, w[i + 1], 3, stride=2, padding=1))

        self.upsamples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in range(len(w) - 2, -1, -1):
            self.upsamples.append(nn.ConvTranspose2d(w[i + 1], w[i], 2, stride=2))
            blocks = [ResBlock(2 * w[i], w[i], td)]
            blocks += [ResBlock(w[i], w[i], td) for _ in range(config.blocks_per_level - 1)]
            self.up_blocks.append(nn.ModuleList(blocks))

        self.out_norm = nn.GroupNorm(_groups(w[0]), w[0])
        self.out_act = nn.GELU()
        self.out_conv = nn.Conv2d(w[0], config.channels, 3, padding=1)

    @property
    def levels(self) -> int:
        return len(self.config.widths)

    def forward(self, d_t: torch.Tensor, t: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        if d_t.ndim != 4 or condition.shape != d_t.shape:
            raise ParameterError("denoiser expects matching (B, C, H, W) inputs")
        factor = 2 ** (self.levels - 1)
        H, W = d_t.shape[-2:]
        if H % factor or W % factor:
            raise ParameterError(f"grid {H}x{W} must be divisible by {factor} for {self.levels} levels")
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(d_t.shape[0])
        temb = self.time_mlp(self.time_embed(t, d_t.dtype))

        x = self.stem(torch.cat([d_t, condition], dim=1))
        skips = []
        for i, blocks in enumerate(self.down_blocks):
            for block in blocks:
                x = block(x, temb)
            skips.append(x)
            if i < len(self.downsamples):
                x = self.downsamples[i](x)
        for up, blocks, skip in zip(self.upsamples, self.up_blocks, reversed(skips[:-1])):
            x = torch.cat([up(x), skip], dim=1)
            for block in blocks:
                x = block(x, temb)
        return self.out_conv(self.out_act(self.out_norm(x)))


def save_denoiser(
    path: Path | str,
    net: ConditionalDenoiser,
    schedule: NoiseSchedule,
    residual_scale: float,
    train_config: TrainConfig | None = None,
) -> None:
    """Persist the denoiser with its schedule parameters and residual scale,
    so sampling is self-contained."""
    extra = {
        "kind": "conditional_denoiser",
        "config": asdict(net.config),
        "schedule": {
            "T": schedule.T,
            "beta_min": float(schedule.betas[0]),
            "beta_max": float(schedule.betas[-1]),
        },
        "residual_scale": float(residual_scale),
    }
    save_checkpoint(path, module_tensors(net), train_config=train_config, extra=extra)


def load_denoiser(path: Path | str) -> tuple[ConditionalDenoiser, NoiseSchedule, float]:
    tensors, _, extra = load_checkpoint(path)
    if extra.get("kind") != "conditional_denoiser":
        raise CheckpointError("checkpoint does not hold a conditional denoiser")
    cfg = DenoiserConfig(**{**extra["config"], "widths": tuple(extra["config"]["widths"])})
    net = ConditionalDenoiser(cfg)
    load_into_module(net, tensors)
    net.eval()
    sched = extra["schedule"]
    schedule = make_schedule(sched["T"], sched["beta_min"], sched["beta_max"])
    return net, schedule, float(extra["residual_scale"])
