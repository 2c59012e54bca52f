"""Return-conditioned trajectory diffusion: schedule, temporal U-Net denoiser, samplers, loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .neuralcore import init_params


# --- noise schedule -------------------------------------------------------

@dataclass
class NoiseSchedule:
    """Arrays are indexed by diffusion step ``k`` with a sentinel at ``k = 0``
    (``beta[0] = 0``, ``alpha_bar[0] = 1``) so ``alpha_bar[k - 1]`` is always defined."""

    K: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        ab = self.alpha_bar[1:]
        if not (np.all(ab > 0) and np.all(ab < 1) and np.all(np.diff(ab) < 0)):
            raise ValueError("alpha_bar must be strictly decreasing inside (0, 1)")
        self._t = {}

    def t(self, name: str, dtype=torch.float32) -> torch.Tensor:
        key = (name, dtype)
        if key not in self._t:
            self._t[key] = torch.as_tensor(getattr(self, name), dtype=dtype)
        return self._t[key]

    @property
    def posterior_variance(self) -> np.ndarray:
        var = np.zeros(self.K + 1)
        var[1] = self.beta[1]
        k = np.arange(2, self.K + 1)
        var[2:] = self.beta[k] * (1 - self.alpha_bar[k - 1]) / (1 - self.alpha_bar[k])
        return var


def schedule_from_betas(betas, kind: str = "custom") -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    return NoiseSchedule(len(betas), beta, alpha, np.cumprod(alpha), kind)


def make_schedule(K: int, kind: str = "cosine") -> NoiseSchedule:
    if K < 1:
        raise ValueError(f"invalid-K: need K >= 1, got {K}")
    if kind == "cosine":
        s = 0.008
        steps = np.arange(K + 1, dtype=np.float64) / K
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1 - ab[1:] / ab[:-1], 1e-8, 0.999)
    elif kind == "linear":
        scale = 1000.0 / K
        betas = np.linspace(min(scale * 1e-4, 0.999), min(scale * 0.02, 0.999), K)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return schedule_from_betas(betas, kind)


def _coef(schedule: NoiseSchedule, name: str, k, like: torch.Tensor) -> torch.Tensor:
    table = schedule.t(name, like.dtype)
    if isinstance(k, torch.Tensor) and k.ndim > 0:
        return table[k].view(-1, *([1] * (like.ndim - 1)))
    return table[int(k)]


def _check_k(k, schedule):
    kk = k if isinstance(k, torch.Tensor) else torch.as_tensor(k)
    if kk.numel() and (kk.min() < 1 or kk.max() > schedule.K):
        raise ValueError(f"k must lie in [1, {schedule.K}]")


def forward_diffuse(x0: torch.Tensor, k, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    if eps.shape != x0.shape:
        raise ValueError(f"shape-mismatch: eps {tuple(eps.shape)} vs x0 {tuple(x0.shape)}")
    _check_k(k, schedule)
    ab = _coef(schedule, "alpha_bar", k, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * eps


def reconstruct_x0(x_k: torch.Tensor, eps_hat: torch.Tensor, k, schedule: NoiseSchedule) -> torch.Tensor:
    if eps_hat.shape != x_k.shape:
        raise ValueError(f"shape-mismatch: eps_hat {tuple(eps_hat.shape)} vs x_k {tuple(x_k.shape)}")
    ab = _coef(schedule, "alpha_bar", k, x_k)
    return (x_k - torch.sqrt(1 - ab) * eps_hat) / torch.sqrt(ab)


def posterior_mean(x_k, eps_hat, k, schedule):
    a = _coef(schedule, "alpha", k, x_k)
    ab = _coef(schedule, "alpha_bar", k, x_k)
    return x_k / torch.sqrt(a) - (1 - a) / (torch.sqrt(1 - ab) * torch.sqrt(a)) * eps_hat


def posterior_step(x_k: torch.Tensor, eps_hat: torch.Tensor, k: int, schedule: NoiseSchedule,
                   xi: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """One ancestral step: sample ``N(mu, xi * sigma_k^2 I)``; ``xi = 0`` returns the mean."""
    if eps_hat.shape != x_k.shape:
        raise ValueError(f"shape-mismatch: eps_hat {tuple(eps_hat.shape)} vs x_k {tuple(x_k.shape)}")
    _check_k(k, schedule)
    mu = posterior_mean(x_k, eps_hat, k, schedule)
    if xi == 0:
        return mu
    var = float(schedule.posterior_variance[int(k)])
    noise = torch.randn(x_k.shape, generator=generator, dtype=x_k.dtype)
    return mu + math.sqrt(xi * var) * noise


# --- denoiser -------------------------------------------------------------

@dataclass
class DenoiserConfig:
    horizon: int = 8
    state_dim: int = 32
    base_channels: int = 32
    step_embed_dim: int = 64
    cond_embed_dim: int = 64
    n_res_blocks: int = 6
    kernel_size: int = 5

    def validate(self):
        for name, v in vars(self).items():
            if v <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.n_res_blocks != 6:
            raise ValueError("the U-Net layout has exactly 6 residual blocks (2 down, 2 mid, 2 up)")


class SinusoidalEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        half = dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
        self.register_buffer("freqs", freqs, persistent=False)

    def forward(self, k: torch.Tensor) -> torch.Tensor:
        ang = k.to(self.freqs.dtype)[:, None] * self.freqs[None]
        return torch.cat([ang.sin(), ang.cos()], dim=-1)


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, kernel):
        super().__init__(nn.Conv1d(cin, cout, kernel, padding=kernel // 2),
                         nn.GroupNorm(_groups(cout), cout), nn.Mish())


class ResidualBlock(nn.Module):
    """Two conv/GroupNorm/Mish stages; the step+condition embedding is added after the first."""

    def __init__(self, cin, cout, embed_dim, kernel):
        super().__init__()
        self.first = ConvBlock(cin, cout, kernel)
        self.second = ConvBlock(cout, cout, kernel)
        self.embed = nn.Sequential(nn.Mish(), nn.Linear(embed_dim, cout))
        self.skip = nn.Conv1d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.first(x) + self.embed(emb)[:, :, None]
        return self.second(h) + self.skip(x)


class Denoiser(nn.Module):
    """Temporal U-Net over the horizon axis predicting the injected noise."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w, d, ker = cfg.base_channels, cfg.state_dim, cfg.kernel_size
        te, ce = cfg.step_embed_dim, cfg.cond_embed_dim
        self.step_embed = nn.Sequential(SinusoidalEmbedding(te), nn.Linear(te, te * 2), nn.Mish(),
                                        nn.Linear(te * 2, te))
        self.cond_embed = nn.Sequential(nn.Linear(1, ce), nn.Mish(), nn.Linear(ce, ce))
        self.null_cond = nn.Parameter(torch.zeros(ce))
        emb = te + ce
        self.down0 = ResidualBlock(d, w, emb, ker)
        self.pool0 = nn.Conv1d(w, w, 3, stride=2, padding=1)
        self.down1 = ResidualBlock(w, 2 * w, emb, ker)
        self.pool1 = nn.Conv1d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.mid0 = ResidualBlock(2 * w, 2 * w, emb, ker)
        self.mid1 = ResidualBlock(2 * w, 2 * w, emb, ker)
        self.unpool1 = nn.ConvTranspose1d(2 * w, 2 * w, 4, stride=2, padding=1)
        self.up1 = ResidualBlock(4 * w, w, emb, ker)
        self.unpool0 = nn.ConvTranspose1d(w, w, 4, stride=2, padding=1)
        self.up0 = ResidualBlock(2 * w, w, emb, ker)
        self.head = nn.Sequential(ConvBlock(w, w, ker), nn.Conv1d(w, d, 1))
        init_params(self, seed)
        with torch.no_grad():
            self.null_cond.copy_(torch.randn(ce, generator=torch.Generator().manual_seed(seed + 1)))

    def embedding(self, k, y, drop):
        b = k.shape[0]
        t = self.step_embed(k)
        if y is None:
            c = self.null_cond.expand(b, -1)
        else:
            c = self.cond_embed(y.to(t.dtype).view(b, 1))
            if drop is not None:
                c = torch.where(drop.view(b, 1), self.null_cond.expand(b, -1), c)
        return torch.cat([t, c], dim=-1)

    def forward(self, x: torch.Tensor, k, y: torch.Tensor | None = None,
                drop: torch.Tensor | None = None) -> torch.Tensor:
        """``x`` is (B, H, D); ``y=None`` or ``drop[i]`` selects the null condition."""
        b, h, _ = x.shape
        if not isinstance(k, torch.Tensor) or k.ndim == 0:
            k = torch.full((b,), int(k), dtype=torch.long)
        emb = self.embedding(k, y, drop)
        z = x.transpose(1, 2)
        h0 = self.down0(z, emb)
        h1 = self.down1(self.pool0(h0), emb)
        m = self.pool1(h1)
        m = self.mid1(self.mid0(m, emb), emb)
        u = self.unpool1(m)[..., :h1.shape[-1]]
        u = self.up1(torch.cat([u, h1], dim=1), emb)
        u = self.unpool0(u)[..., :h0.shape[-1]]
        u = self.up0(torch.cat([u, h0], dim=1), emb)
        return self.head(u).transpose(1, 2)


# --- guidance and sampling ------------------------------------------------

def guided_noise(denoiser, x_k: torch.Tensor, y, k, omega: float) -> torch.Tensor:
    """Classifier-free guidance: blend of unconditional and conditional predictions.

    Written as ``(1 - w) * eps_null + w * eps_cond`` so that ``w = 0`` and
    ``w = 1`` return the respective branch bit-for-bit.
    """
    eps_null = denoiser(x_k, k, None)
    if y is None:
        return eps_null
    eps_cond = denoiser(x_k, k, y)
    return (1.0 - omega) * eps_null + omega * eps_cond


def parse_sampler(sampler) -> tuple[str, int]:
    """``"ddpm"`` -> ("ddpm", 1); ``"ddim:4"`` or ("ddim", 4) -> ("ddim", 4)."""
    if isinstance(sampler, (tuple, list)):
        name, stride = sampler
    elif isinstance(sampler, str) and ":" in sampler:
        name, stride = sampler.split(":", 1)
    else:
        name, stride = sampler, 1
    name = str(name).lower()
    if name not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampler {sampler!r}")
    return name, int(stride)


def ddim_steps(K: int, stride: int) -> list[int]:
    if stride < 1 or stride > K:
        raise ValueError(f"invalid stride {stride} for K={K}")
    return list(range(1, K + 1, stride))[::-1]


@torch.no_grad()
def sample_trajectory(denoiser, schedule: NoiseSchedule, y_target, omega: float, xi: float,
                      s_now: torch.Tensor, sampler="ddpm", generator: torch.Generator | None = None,
                      horizon: int | None = None, clip_x0: float | None = 1.0) -> torch.Tensor:
    """Generate state windows whose first row is pinned to ``s_now`` (B, D).

    Returns (B, H, D).  ``y_target=None`` runs the unconditional branch only.
    With ``clip_x0`` set, each step's reconstruction is clamped to
    ``[-clip_x0, clip_x0]`` (the normalized data range) and the noise estimate
    is re-derived from the clamped value before the update.  Without it, the
    ``1/sqrt(alpha_k)`` factor of the near-terminal steps amplifies noise-estimate
    errors until samples leave the data range by orders of magnitude.
    """
    name, stride = parse_sampler(sampler)
    s_now = torch.as_tensor(s_now, dtype=torch.float32)
    if s_now.ndim == 1:
        s_now = s_now[None]
    b, d = s_now.shape
    horizon = horizon or denoiser.cfg.horizon
    y = None
    if y_target is not None:
        y = torch.full((b,), float(y_target)) if np.isscalar(y_target) else torch.as_tensor(y_target).float()
    x = math.sqrt(xi) * torch.randn((b, horizon, d), generator=generator)
    x[:, 0] = s_now
    if name == "ddpm":
        for k in range(schedule.K, 0, -1):
            eps = guided_noise(denoiser, x, y, k, omega)
            if clip_x0 is not None:
                eps = _clipped_noise(x, eps, k, schedule, clip_x0)
            x = posterior_step(x, eps, k, schedule, xi, generator)
            x[:, 0] = s_now
    else:
        steps = ddim_steps(schedule.K, stride)
        for i, k in enumerate(steps):
            k_prev = steps[i + 1] if i + 1 < len(steps) else 0
            eps = guided_noise(denoiser, x, y, k, omega)
            if clip_x0 is not None:
                eps = _clipped_noise(x, eps, k, schedule, clip_x0)
            x0 = reconstruct_x0(x, eps, k, schedule)
            ab_prev = float(schedule.alpha_bar[k_prev])
            x = math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps
            x[:, 0] = s_now
    return x


def _clipped_noise(x_k, eps_hat, k, schedule, bound):
    x0 = reconstruct_x0(x_k, eps_hat, k, schedule).clamp(-bound, bound)
    ab = float(schedule.alpha_bar[k])
    return (x_k - math.sqrt(ab) * x0) / math.sqrt(1 - ab)


# --- training loss --------------------------------------------------------

@dataclass
class DiffusionLossOutput:
    loss: torch.Tensor
    x_k: torch.Tensor
    eps: torch.Tensor
    eps_hat: torch.Tensor
    k: torch.Tensor
    dropped: torch.Tensor


def diffusion_loss(denoiser, x0: torch.Tensor, y: torch.Tensor, schedule: NoiseSchedule,
                   beta_drop: float, generator: torch.Generator | None = None,
                   pin_first_row: bool = True) -> DiffusionLossOutput:
    """Noise-prediction loss with per-element condition dropout.

    With ``pin_first_row`` the first state of every noised window is reset to
    its clean value (as the sampler does) and left out of the loss.
    """
    if not 0.0 <= beta_drop <= 1.0:
        raise ValueError("beta_drop must be in [0, 1]")
    b = x0.shape[0]
    k = torch.randint(1, schedule.K + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    dropped = torch.rand((b,), generator=generator) < beta_drop
    x_k = forward_diffuse(x0, k, eps, schedule)
    if pin_first_row:
        x_k = x_k.clone()
        x_k[:, 0] = x0[:, 0]
    eps_hat = denoiser(x_k, k, y, dropped)
    err = (eps - eps_hat) ** 2
    loss = err[:, 1:].mean() if pin_first_row else err.mean()
    return DiffusionLossOutput(loss, x_k, eps, eps_hat, k, dropped)
