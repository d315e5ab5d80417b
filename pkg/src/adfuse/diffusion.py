"""Forward noising, noise schedules, and reverse samplers.

Diffusion runs directly in pixel space at training resolution (no
autoencoder): the "latent" is the image itself, C_lat channels, values in
[-1, 1]. Schedule tables are float64 so derived quantities like the final
cumulative alpha are accurate to ~1e-15.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, NonFiniteError, RangeError

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass
class DiffusionSchedule:
    """Per-step variance table and derived coefficients.

    Arrays are laid out with a leading dummy entry so beta[t] is indexed by
    the 1-based timestep t in [1..T].
    """

    T: int
    beta: np.ndarray  # (T+1,), beta[0] unused
    alpha: np.ndarray
    alpha_bar: np.ndarray  # alpha_bar[0] == 1.0 by convention

    def validate(self):
        b = self.beta[1:]
        if not (np.all(b > 0.0) and np.all(b < 1.0)):
            raise InvalidConfigError("beta must lie strictly inside (0, 1)")
        if np.any(np.diff(b) < 0.0):
            raise InvalidConfigError("beta must be non-decreasing")
        ab = self.alpha_bar
        if np.any(np.diff(ab) >= 0.0):
            raise InvalidConfigError("alpha_bar must be strictly decreasing")
        if ab[self.T] >= 1e-3:
            raise InvalidConfigError(
                f"terminal alpha_bar {ab[self.T]:.3e} >= 1e-3; end-of-chain is not close enough to pure noise"
            )

    def check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise RangeError(f"timestep {t} outside [1..{self.T}]")
        return t


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> DiffusionSchedule:
    """Linear beta schedule with derived alpha / cumulative-alpha tables."""
    if T < 2:
        raise InvalidConfigError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise InvalidConfigError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.zeros(T + 1, dtype=np.float64)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.ones(T + 1, dtype=np.float64)
    alpha_bar[1:] = np.cumprod(alpha[1:])
    sched = DiffusionSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)
    sched.validate()
    return sched


def apply_noise_offset(eps: np.ndarray, noise_offset: float, rng: np.random.Generator) -> np.ndarray:
    """Add a per-(batch, channel) scalar normal draw, scaled by noise_offset.

    eps is (B, C, H, W); the offset broadcasts over the spatial dims.
    """
    if noise_offset == 0.0:
        return eps
    b, c = eps.shape[0], eps.shape[1]
    shift = rng.standard_normal((b, c, 1, 1)).astype(eps.dtype)
    return eps + eps.dtype.type(noise_offset) * shift


def q_sample(z0: np.ndarray, t, eps: np.ndarray, sched: DiffusionSchedule,
             noise_offset: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Noise z0 forward to step t: sqrt(ab_t) z0 + sqrt(1-ab_t) eps'.

    t may be a scalar or a per-sample integer array matching z0's batch dim.
    With noise_offset > 0 an rng must be supplied for the per-channel shift.
    """
    t = sched.check_t(t)
    if eps.shape != z0.shape:
        raise InvalidConfigError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    if noise_offset > 0.0:
        if rng is None:
            raise InvalidConfigError("noise_offset > 0 requires an rng")
        eps = apply_noise_offset(eps, noise_offset, rng)
    ab = sched.alpha_bar[t]
    extra = (1,) * (z0.ndim - np.ndim(ab))
    ab = np.asarray(ab).reshape(np.shape(ab) + extra)
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype)


def predict_clean(z_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Invert q_sample given a noise estimate: (z_t - sqrt(1-ab_t) eps)/sqrt(ab_t)."""
    ab = sched.alpha_bar[t]
    return (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ancestral_step(eps_model, z_t: np.ndarray, t: int, sched: DiffusionSchedule,
                   rng: np.random.Generator) -> np.ndarray:
    """One stochastic reverse step z_t -> z_{t-1} (no fresh noise at t=1)."""
    t = int(sched.check_t(t))
    eps_hat = eps_model(z_t, np.full(z_t.shape[0], t, dtype=np.int64))
    if not np.isfinite(eps_hat).all():
        raise NonFiniteError(f"sampling aborted: non-finite noise prediction at t={t}")
    beta_t = sched.beta[t]
    alpha_t = sched.alpha[t]
    ab_t = sched.alpha_bar[t]
    mean = (z_t - beta_t / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(alpha_t)
    if t == 1:
        return mean.astype(z_t.dtype)
    noise = rng.standard_normal(z_t.shape)
    return (mean + np.sqrt(beta_t) * noise).astype(z_t.dtype)


def ancestral_sample(eps_model, shape, sched: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal(shape).astype(np.float32)
    for t in range(sched.T, 0, -1):
        z = ancestral_step(eps_model, z, t, sched, rng)
    return z


@dataclass
class Trajectory:
    """Predicted-clean-latent snapshots captured along a sampling run."""

    steps: list = field(default_factory=list)  # [(t, z0_hat), ...], t strictly decreasing

    def append(self, t: int, snapshot: np.ndarray):
        if self.steps and t >= self.steps[-1][0]:
            raise InvalidConfigError(f"trajectory steps must strictly decrease, got {t} after {self.steps[-1][0]}")
        self.steps.append((t, snapshot))

    def __len__(self):
        return len(self.steps)


def skip_steps(T: int, n_steps: int) -> np.ndarray:
    """Uniform-stride descending step subset including both T and 1."""
    if not 1 <= n_steps <= T:
        raise InvalidConfigError(f"n_steps must lie in [1..{T}], got {n_steps}")
    if n_steps == 1:
        return np.array([T], dtype=np.int64)
    ts = np.linspace(T, 1, n_steps)
    ts = np.unique(np.round(ts).astype(np.int64))[::-1]
    return ts


def skip_sample(eps_model, shape, sched: DiffusionSchedule, rng: np.random.Generator,
                n_steps: int, capture: bool = False):
    """Deterministic (eta=0) skip sampler.

    Returns (z0, Trajectory | None). The model is evaluated once per
    selected step; with capture=True the predicted clean latent at each
    executed step is recorded.
    """
    ts = skip_steps(sched.T, n_steps)
    z = rng.standard_normal(shape).astype(np.float32)
    traj = Trajectory() if capture else None
    for i, t in enumerate(ts):
        t = int(t)
        eps_hat = eps_model(z, np.full(shape[0], t, dtype=np.int64))
        if not np.isfinite(eps_hat).all():
            raise NonFiniteError(f"sampling aborted: non-finite noise prediction at t={t}")
        z0_hat = predict_clean(z, t, eps_hat, sched)
        if capture:
            traj.append(t, z0_hat.copy())
        if i + 1 < len(ts):
            ab_prev = sched.alpha_bar[int(ts[i + 1])]
            z = (np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps_hat).astype(np.float32)
        else:
            z = z0_hat.astype(np.float32)
    return z, traj
