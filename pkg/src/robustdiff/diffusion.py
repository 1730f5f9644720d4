"""Demonstration-side diffusion: sigma schedule, perturbation kernel, denoiser
parameterization, score-matching loss, guidance, and the deterministic
second-order sampler.

Conventions: time equals noise level (sigma(t) = t), drift is zero, so the
forward kernel is x_t = x0 + sigma * eps. The denoiser D predicts x0; the
score is recovered as (D - x_t) / sigma^2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .network import ScoreNetwork

# Distinguished unconditional token: callers pass UNCOND (or an all-zero
# vector, which is what it stands for) to request the unconditional branch.
UNCOND = None


@dataclass(frozen=True)
class NoiseSchedule:
    """Power-law sigma grid between sigma_max and sigma_min with exponent rho."""

    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    num_steps: int = 18

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("require 0 < sigma_min < sigma_max")
        if self.rho < 1:
            raise ValueError("require rho >= 1")
        if self.num_steps < 2:
            raise ValueError("require num_steps >= 2")

    @property
    def nfe(self) -> int:
        # Heun does two denoiser calls per step except the final Euler-only one.
        return 2 * self.num_steps - 1


def sigma_grid(schedule: NoiseSchedule) -> np.ndarray:
    """Descending sigma values, sigma_max first, sigma_min at index N-1, then 0."""
    n = schedule.num_steps
    a = schedule.sigma_max ** (1.0 / schedule.rho)
    b = schedule.sigma_min ** (1.0 / schedule.rho)
    ramp = np.arange(n) / (n - 1)
    grid = (a + ramp * (b - a)) ** schedule.rho
    grid[0] = schedule.sigma_max  # exact endpoints, no power round-trip error
    grid[-1] = schedule.sigma_min
    return np.concatenate([grid, [0.0]])


def mirror_sigma(sigma, schedule: NoiseSchedule):
    """Continuous index-mirror of the power-law grid.

    Maps sigma_max <-> sigma_min along the rho-warped axis; used to pair a
    demonstration noise level with the condition noise level running in the
    opposite direction. Inputs are clamped to [sigma_min, sigma_max].
    """
    a = schedule.sigma_max ** (1.0 / schedule.rho)
    b = schedule.sigma_min ** (1.0 / schedule.rho)
    s = np.clip(sigma, schedule.sigma_min, schedule.sigma_max) ** (1.0 / schedule.rho)
    return (a + b - s) ** schedule.rho


def perturb(x0: np.ndarray, sigma, eps: np.ndarray) -> np.ndarray:
    """Forward kernel: x_t = x0 + sigma * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if np.any(np.asarray(sigma) < 0):
        raise ValueError("sigma must be >= 0")
    if x0.shape != eps.shape:
        raise ValueError("eps must match x0 shape")
    return x0 + np.asarray(sigma) * eps


@dataclass
class DenoiserOutput:
    denoised: np.ndarray
    score: np.ndarray


def c_skip(sigma, sigma_data):
    return sigma_data**2 / (sigma**2 + sigma_data**2)


def c_out(sigma, sigma_data):
    return sigma * sigma_data / np.sqrt(sigma**2 + sigma_data**2)


def c_in(sigma, sigma_data):
    return 1.0 / np.sqrt(sigma**2 + sigma_data**2)


def c_noise(sigma):
    return np.log(sigma) / 4.0


def loss_weight(sigma, sigma_data):
    """lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def resolve_cond(cond, cond_dim: int, batch: int | None = None) -> np.ndarray:
    """Normalize a condition argument: UNCOND becomes the all-zero vector."""
    if cond is UNCOND:
        c = np.zeros(cond_dim)
    else:
        c = np.asarray(cond, dtype=np.float64)
    if c.shape[-1] != cond_dim:
        raise ValueError(f"condition width {c.shape[-1]}, expected {cond_dim}")
    if batch is not None and c.ndim == 1:
        c = np.broadcast_to(c, (batch, cond_dim))
    return c


def network_input(net: ScoreNetwork, x_t: np.ndarray, sigma, cond) -> np.ndarray:
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x_t.shape[0], 1))
    c = resolve_cond(cond, net.cond_dim, x_t.shape[0])
    c = np.atleast_2d(c)
    sd = net.sigma_data
    return np.concatenate(
        [c_in(sig, sd) * x_t, c_noise(sig), c], axis=1
    )


def denoise(net: ScoreNetwork, x_t: np.ndarray, sigma, cond=UNCOND) -> DenoiserOutput:
    """Preconditioned denoiser evaluation.

    denoised = c_skip(sigma) * x_t + c_out(sigma) * F(c_in(sigma) * x_t,
    c_noise(sigma), cond); the score follows from the exact algebraic relation
    score = (denoised - x_t) / sigma^2.
    """
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be > 0")
    x_arr = np.asarray(x_t, dtype=np.float64)
    squeeze = x_arr.ndim == 1
    x2 = np.atleast_2d(x_arr)
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x2.shape[0], 1))
    raw = net.demo_out(network_input(net, x2, sig, cond))
    sd = net.sigma_data
    den = c_skip(sig, sd) * x2 + c_out(sig, sd) * raw
    score = (den - x2) / sig**2
    if squeeze:
        return DenoiserOutput(den[0], score[0])
    return DenoiserOutput(den, score)


Denoiser = Union[ScoreNetwork, Callable[[np.ndarray, float], np.ndarray]]


def _denoised_fn(net_or_fn: Denoiser, cond, w: float):
    """Uniform denoiser interface: (x, sigma) -> denoised, with guidance."""
    if isinstance(net_or_fn, ScoreNetwork):

        def fn(x, sigma):
            d_cond = denoise(net_or_fn, x, sigma, cond).denoised
            if w == 1.0:
                return d_cond
            d_unc = denoise(net_or_fn, x, sigma, UNCOND).denoised
            return d_unc + w * (d_cond - d_unc)

        return fn
    return lambda x, sigma: net_or_fn(x, sigma)


def dsm_loss(
    net_or_fn: Denoiser,
    x0: np.ndarray,
    cond,
    sigmas: np.ndarray,
    eps: np.ndarray,
) -> float:
    """Denoising score-matching loss.

    Mean over the batch of lambda(sigma) * ||D(x0 + sigma*eps, sigma, cond) - x0||^2.
    `cond` may be a (batch, cond_dim) array, a single vector, or UNCOND.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    sig = np.asarray(sigmas, dtype=np.float64).reshape(x0.shape[0], 1)
    if np.any(sig <= 0):
        raise ValueError("sigma must be > 0")
    eps = np.asarray(eps, dtype=np.float64).reshape(x0.shape)
    x_t = x0 + sig * eps
    if isinstance(net_or_fn, ScoreNetwork):
        den = denoise(net_or_fn, x_t, sig, cond).denoised
        sd = net_or_fn.sigma_data
    else:
        den = np.stack([net_or_fn(x_t[i], float(sig[i, 0])) for i in range(len(x_t))])
        sd = 0.5
    err = ((den - x0) ** 2).sum(axis=1, keepdims=True)
    return float(np.mean(loss_weight(sig, sd) * err))


def cfg_score(net: ScoreNetwork, x_t: np.ndarray, sigma, cond, w: float) -> np.ndarray:
    """Guided score: s_uncond + w * (s_cond - s_uncond)."""
    if w < 1.0:
        raise ValueError("guidance scale w must be >= 1")
    s_cond = denoise(net, x_t, sigma, cond).score
    if w == 1.0:
        return s_cond
    s_unc = denoise(net, x_t, sigma, UNCOND).score
    return s_unc + w * (s_cond - s_unc)


def heun_sample(
    net_or_fn: Denoiser,
    cond,
    w: float,
    schedule: NoiseSchedule,
    count: int,
    seed: int,
) -> np.ndarray:
    """Deterministic probability-flow sampler, Heun second order.

    Starts from N(0, sigma_max^2 I); per step the slope is
    d = (x - D(x, sigma)) / sigma, with a midpoint correction except on the
    final step to sigma = 0, which is Euler-only.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    grid = sigma_grid(schedule)
    rng = np.random.default_rng(seed)
    if isinstance(net_or_fn, ScoreNetwork):
        x_dim = net_or_fn.x_dim
    else:
        x_dim = 2
    x = rng.standard_normal((count, x_dim)) * grid[0]
    dfn = _denoised_fn(net_or_fn, cond, w)
    for i in range(len(grid) - 1):
        s, s_next = grid[i], grid[i + 1]
        d = (x - dfn(x, s)) / s
        x_euler = x + (s_next - s) * d
        if s_next == 0.0:
            x = x_euler
        else:
            d_next = (x_euler - dfn(x_euler, s_next)) / s_next
            x = x + (s_next - s) * 0.5 * (d + d_next)
    return x


def write_samples(path, samples: np.ndarray, class_ids: np.ndarray) -> None:
    """One record per line: comma-separated coordinates then the class id."""
    with open(path, "w") as f:
        f.write("x1,x2,class\n")
        for row, cid in zip(samples, class_ids):
            coords = ",".join(repr(float(v)) for v in row)
            f.write(f"{coords},{int(cid)}\n")


def read_samples(path) -> tuple[np.ndarray, np.ndarray]:
    pts, cids = [], []
    with open(path) as f:
        header = f.readline()
        if not header.startswith("x1,"):
            raise ValueError("bad sample file header")
        for line in f:
            parts = line.strip().split(",")
            pts.append([float(v) for v in parts[:-1]])
            cids.append(int(parts[-1]))
    return np.array(pts), np.array(cids)
