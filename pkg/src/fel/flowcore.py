"""Rectified-flow process, losses, and the Euler sampler.

Latents travel the straight path z_t = (1-t) z_0 + t z_1 between data
(t=0) and noise (t=1); the model regresses the constant path velocity
z_1 - z_0, and sampling runs Euler steps backwards from t=1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import DTensor
from .errors import NonFiniteError


@dataclass
class FlowState:
    """A point on the interpolation path together with its noise draw."""
    z_t: DTensor
    t: float
    z_1: DTensor

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {self.t}")
        if self.z_t.shape != self.z_1.shape:
            raise ValueError(f"z_t shape {self.z_t.shape} != z_1 shape {self.z_1.shape}")


@dataclass
class Schedule:
    """Strictly decreasing sampling timesteps from exactly 1 down to exactly 0."""
    timesteps: list[float]

    def __post_init__(self):
        ts = self.timesteps
        if len(ts) < 2 or ts[0] != 1.0 or ts[-1] != 0.0:
            raise ValueError(f"schedule endpoints must be exactly 1 and 0, got {ts[:1]}..{ts[-1:]}")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError("schedule timesteps must decrease strictly")

    @property
    def T(self) -> int:
        return len(self.timesteps) - 1


@dataclass
class ContrastivePair:
    """Clean best/worst latents that share one noise draw."""
    z0_best: DTensor
    z0_worst: DTensor
    shared_noise: DTensor
    lam: float = 0.2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {self.z0_best.shape, self.z0_worst.shape, self.shared_noise.shape}
        if len(shapes) != 1:
            raise ValueError(f"contrastive pair tensors must share a shape, got {sorted(shapes)}")
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")


def linear_schedule(T: int) -> Schedule:
    """Uniform schedule t_i = i/T for i = T..0."""
    if T < 1:
        raise ValueError(f"schedule needs T >= 1, got {T}")
    ts = [i / T for i in range(T, -1, -1)]
    ts[0], ts[-1] = 1.0, 0.0
    return Schedule(ts)


def interpolate(z0: DTensor, z1: DTensor, t: float) -> DTensor:
    """(1-t) z0 + t z1, exact at both endpoints."""
    if z0.shape != z1.shape:
        raise ValueError(f"interpolate shape mismatch: {z0.shape} vs {z1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        return ad.scale(z0, 1.0)
    if t == 1.0:
        return ad.scale(z1, 1.0)
    return ad.add(ad.scale(z0, 1.0 - t), ad.scale(z1, t))


def oracle_velocity(z0: DTensor, z1: DTensor) -> DTensor:
    """Ground-truth path velocity z1 - z0 (constant in t)."""
    if z0.shape != z1.shape:
        raise ValueError(f"velocity shape mismatch: {z0.shape} vs {z1.shape}")
    return ad.sub(z1, z0)


def fm_loss(v_pred: DTensor, z0: DTensor, z1: DTensor) -> DTensor:
    """Mean-squared error between the predicted and ground-truth velocity."""
    target = oracle_velocity(z0, z1)
    if not np.isfinite(v_pred.data).all() or not np.isfinite(target.data).all():
        raise NonFiniteError("non-finite inputs to the flow-matching loss")
    return ad.mse(target, v_pred)


def euler_step(z_ti: DTensor, v: DTensor, t_i: float, t_prev: float) -> DTensor:
    """One Euler update z + (t_prev - t_i) v, integrating toward t=0."""
    if t_prev >= t_i:
        raise ValueError(f"euler_step needs t_prev < t_i, got {t_prev} >= {t_i}")
    return ad.add(z_ti, ad.scale(v, t_prev - t_i))


def contrastive_velocity(pair: ContrastivePair) -> DTensor:
    """(z0_best - z0_worst) / lambda."""
    if pair.lam <= 0:
        raise ValueError(f"lambda must be positive, got {pair.lam}")
    return ad.scale(ad.sub(pair.z0_best, pair.z0_worst), 1.0 / pair.lam)


def contrastive_z_t(pair: ContrastivePair, t: float, anchor: str = "best") -> DTensor:
    """The z_t fed to the model during refinement, built from the shared noise.

    The path is anchored at the best latent by default; ``anchor`` also
    accepts "worst" for the alternative regime.
    """
    if anchor == "best":
        z0 = pair.z0_best
    elif anchor == "worst":
        z0 = pair.z0_worst
    else:
        raise ValueError(f"anchor must be 'best' or 'worst', got {anchor!r}")
    return interpolate(z0, pair.shared_noise, t)


def contrastive_loss(v_pred: DTensor, pair: ContrastivePair) -> DTensor:
    """Mean-squared error against the contrastive velocity target."""
    target = contrastive_velocity(pair)
    if v_pred.shape != target.shape:
        raise ValueError(f"velocity shape mismatch: {v_pred.shape} vs {target.shape}")
    if not np.isfinite(v_pred.data).all():
        raise NonFiniteError("non-finite velocity prediction in contrastive loss")
    return ad.mse(target, v_pred)


VelocityFn = Callable[[DTensor, float], DTensor]


def sample(velocity_fn: VelocityFn, latent_shape: tuple[int, ...], seed: int,
           schedule: Schedule) -> DTensor:
    """Integrate the learned velocity field from seeded noise down to t=0.

    Deterministic: identical (velocity_fn weights, seed, schedule) give a
    bitwise-identical result. Raises on the first non-finite intermediate,
    naming the offending step index.
    """
    noise = rng.normal_array(rng.split(seed, 0xF10A), latent_shape, dtype=ad.active_dtype())
    z = DTensor(noise)
    ts = schedule.timesteps
    with ad.no_grad():
        for i in range(len(ts) - 1):
            t_i, t_prev = ts[i], ts[i + 1]
            v = velocity_fn(z, t_i)
            z = euler_step(z, v, t_i, t_prev)
            if not np.isfinite(z.data).all():
                raise NonFiniteError(f"non-finite latent after sampling step {i} (t={t_i} -> {t_prev})")
    return z
