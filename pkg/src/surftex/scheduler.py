"""DDPM arithmetic and the view-dependent latent merge.

The noise schedule follows the stable-diffusion convention: a scaled-linear
beta ramp over 1000 training steps, subsampled to T inference steps. Step
indices run t = T..1; alpha_bar is stored with the t=0 entry pinned to 1 so
the final step collapses to the denoised estimate.

The backward step implements

    z_{t-1} = sqrt(abar_{t-1}) * beta_t / (1 - abar_t) * x0_hat
            + (1 - abar_{t-1}) * (sqrt(alpha_t) * z_t + beta_t * eps) / (1 - abar_t)

with alpha_t = abar_t / abar_{t-1} and beta_t = 1 - alpha_t. Noise is always
injected by the caller so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TRAIN_STEPS = 1000
BETA_START = 0.00085
BETA_END = 0.012


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-inference-step alpha/beta with cumulative products.

    alpha_bar has length T+1, indexed by t with alpha_bar[0] = 1.
    alpha[t-1] and beta[t-1] belong to step t.
    """

    timesteps: int
    alpha: np.ndarray
    beta: np.ndarray
    alpha_bar: np.ndarray
    train_indices: np.ndarray  # subsampled 0-based training timesteps

    def abar(self, t: int) -> float:
        if not 0 <= t <= self.timesteps:
            raise ValueError(f"step {t} outside [0, {self.timesteps}]")
        return float(self.alpha_bar[t])

    def forward_diffuse(self, z0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
        """Closed-form forward process: sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
        z0 = np.asarray(z0, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        if z0.shape != eps.shape:
            raise ValueError(f"noise shape {eps.shape} != latent shape {z0.shape}")
        ab = self.abar(t)
        return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps

    def predict_x0(self, z_t: np.ndarray, eps_hat: np.ndarray, t: int) -> np.ndarray:
        """Invert the forward process given predicted noise."""
        z_t = np.asarray(z_t, dtype=np.float64)
        eps_hat = np.asarray(eps_hat, dtype=np.float64)
        if z_t.shape != eps_hat.shape:
            raise ValueError(f"noise shape {eps_hat.shape} != latent shape {z_t.shape}")
        ab = self.abar(t)
        return (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)

    def step_coefficients(self, t: int) -> tuple[float, float, float]:
        """(x0 coefficient, z_t coefficient, noise coefficient) for step t."""
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"step {t} outside [1, {self.timesteps}]")
        ab_t = self.abar(t)
        ab_prev = self.abar(t - 1)
        alpha_t = float(self.alpha[t - 1])
        beta_t = float(self.beta[t - 1])
        denom = 1.0 - ab_t
        c_x0 = np.sqrt(ab_prev) * beta_t / denom
        c_zt = (1.0 - ab_prev) * np.sqrt(alpha_t) / denom
        c_eps = (1.0 - ab_prev) * beta_t / denom
        return c_x0, c_zt, c_eps

    def ddpm_step(
        self, x0_hat: np.ndarray, z_t: np.ndarray, t: int, noise: np.ndarray
    ) -> np.ndarray:
        """One backward step; at t=1 the coefficients collapse to x0_hat."""
        c_x0, c_zt, c_eps = self.step_coefficients(t)
        return c_x0 * np.asarray(x0_hat) + c_zt * np.asarray(z_t) + c_eps * np.asarray(noise)


def make_schedule(timesteps: int) -> NoiseSchedule:
    """Scaled-linear ramp over 1000 training steps, subsampled to T steps.

    Inference step k uses training timestep floor(k * 1000 / T) - 1, which is
    strictly increasing for T <= 1000 and hits timestep 999 at k = T.
    """
    if not 1 <= timesteps <= TRAIN_STEPS:
        raise ValueError(f"timesteps must be in [1, {TRAIN_STEPS}]")
    betas = (
        np.linspace(np.sqrt(BETA_START), np.sqrt(BETA_END), TRAIN_STEPS) ** 2
    )
    abar_train = np.cumprod(1.0 - betas)
    train_idx = np.array(
        [(k * TRAIN_STEPS) // timesteps - 1 for k in range(1, timesteps + 1)],
        dtype=np.int64,
    )
    alpha_bar = np.concatenate([[1.0], abar_train[train_idx]])
    alpha = alpha_bar[1:] / alpha_bar[:-1]
    return NoiseSchedule(
        timesteps=timesteps,
        alpha=alpha,
        beta=1.0 - alpha,
        alpha_bar=alpha_bar,
        train_indices=train_idx,
    )


@dataclass
class LatentTexture:
    """Texture-space latent state: (T, T, C) data plus a texel validity mask.

    Invalid texels (no UV chart, or never written) hold exact zeros.
    """

    data: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[..., None]
        if self.valid.shape != self.data.shape[:2]:
            raise ValueError("validity mask shape does not match texture")

    @property
    def resolution(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    def copy(self) -> "LatentTexture":
        return LatentTexture(data=self.data.copy(), valid=self.valid.copy())


@dataclass(frozen=True)
class ViewWeightSchedule:
    """Per-view merge weights: 1 at t=T, linearly interpolated (in step index)
    down to max(|cos theta|^gamma, omega_min) at t', constant below."""

    timesteps: int
    t_prime: int
    gamma: float = 8.0
    omega_min: float = 1e-3
    thetas: np.ndarray = None  # (N,) radians to the reference view

    @classmethod
    def from_interp_steps(
        cls, timesteps: int, interp_steps: int, thetas, gamma: float = 8.0,
        omega_min: float = 1e-3,
    ) -> "ViewWeightSchedule":
        t_prime = max(timesteps - interp_steps, 0)
        return cls(
            timesteps=timesteps,
            t_prime=t_prime,
            gamma=gamma,
            omega_min=omega_min,
            thetas=np.asarray(thetas, dtype=np.float64),
        )

    def final_weight(self, theta: float) -> float:
        return max(abs(np.cos(theta)) ** self.gamma, self.omega_min)

    def weight(self, t: int, theta: float) -> float:
        w_final = self.final_weight(theta)
        if t >= self.timesteps:
            return 1.0
        if t <= self.t_prime:
            return w_final
        frac = (t - self.t_prime) / (self.timesteps - self.t_prime)
        return w_final + (1.0 - w_final) * frac

    def weights(self, t: int) -> np.ndarray:
        return np.array([self.weight(t, th) for th in self.thetas])


def view_weight(t: int, theta: float, sched: ViewWeightSchedule) -> float:
    """Functional form of ViewWeightSchedule.weight."""
    return sched.weight(t, theta)


def merge_partial_textures(
    partials: list[np.ndarray],
    cos_tex: list[np.ndarray],
    coverage: list[np.ndarray],
    omegas: np.ndarray,
) -> LatentTexture:
    """View-dependent merge: per-texel weighted average with weights
    omega_n * cosine_n * coverage_n; zero-weight texels come back invalid."""
    if len(partials) == 0:
        raise ValueError("no partial textures to merge")
    if not len(partials) == len(cos_tex) == len(coverage) == len(omegas):
        raise ValueError("partials, cosines, coverage, and omegas must align")
    num = np.zeros_like(np.asarray(partials[0], dtype=np.float64))
    den = np.zeros(num.shape[:2], dtype=np.float64)
    for part, cos_n, cov, om in zip(partials, cos_tex, coverage, omegas):
        w = float(om) * np.asarray(cos_n, dtype=np.float64) * cov
        num += w[..., None] * part
        den += w
    valid = den > 1e-12
    safe = np.where(valid, den, 1.0)
    data = np.where(valid[..., None], num / safe[..., None], 0.0)
    return LatentTexture(data=data, valid=valid)


def texture_ddpm_step(
    sched: NoiseSchedule,
    u0_hat: LatentTexture,
    u_t: LatentTexture,
    t: int,
    noise: np.ndarray,
) -> LatentTexture:
    """Backward step applied texel-wise; invalid texels stay exactly zero."""
    stepped = sched.ddpm_step(u0_hat.data, u_t.data, t, noise)
    valid = u0_hat.valid
    return LatentTexture(data=np.where(valid[..., None], stepped, 0.0), valid=valid.copy())


def blend_latents(
    fg_mask: np.ndarray, rendered: np.ndarray, z_hat: np.ndarray
) -> np.ndarray:
    """Foreground takes the rendered latent, background keeps the view's own."""
    if rendered.shape != z_hat.shape:
        raise ValueError(f"rendered {rendered.shape} vs z_hat {z_hat.shape}")
    if fg_mask.shape != rendered.shape[:2]:
        raise ValueError(f"mask {fg_mask.shape} vs image {rendered.shape[:2]}")
    m = fg_mask.astype(np.float64)[..., None]
    return m * rendered + (1.0 - m) * z_hat
