"""Conditional flow matching in latent space and ODE-based enhancement.

Optimal-transport conditional path with noise floor ``sigma_min``::

    x_t      = (1 - (1 - sigma_min) t) x0 + t x1
    v_target = x1 - (1 - sigma_min) x0

The velocity model is called as ``model(cat([x_t, z_d], dim=channels), t)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .errors import ConfigError, ContractError, DimensionError, SolverError
from .numeric import Rng, seeded_normal, seeded_uniform


@dataclass
class FlowPathConfig:
    sigma_min: float = 1e-4
    path: str = "optimal-transport"

    def __post_init__(self):
        if not 0 <= self.sigma_min < 1:
            raise ConfigError("sigma_min must lie in [0, 1)")
        if self.path != "optimal-transport":
            raise ConfigError(f"unsupported path '{self.path}'")


@dataclass
class SolverConfig:
    steps: int = 50
    scheme: str = "euler"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("solver needs at least one step")
        if self.scheme not in ("euler", "midpoint"):
            raise ConfigError(f"unknown solver scheme '{self.scheme}'")

    def to_dict(self) -> dict:
        return asdict(self)


def _bcast(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if t.dim() == 0:
        return t
    return t.reshape(-1, *([1] * (like.dim() - 1)))


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t, sigma_min: float) -> torch.Tensor:
    t = _bcast(torch.as_tensor(t, dtype=x1.dtype), x1)
    return (1 - (1 - sigma_min) * t) * x0 + t * x1


def sample_path(x1: torch.Tensor, t, rng: Rng, cfg: FlowPathConfig = FlowPathConfig(),
                x0: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw ``x0 ~ N(0, I)`` and return ``(x_t, v_target)``.

    ``t`` may be a scalar or one value per batch element.
    """
    t = torch.as_tensor(t, dtype=x1.dtype)
    if ((t < 0) | (t > 1)).any():
        raise ContractError("t must lie in [0, 1]")
    if x0 is None:
        x0 = seeded_normal(rng, x1.shape, x1.dtype)
    xt = interpolate(x0, x1, t, cfg.sigma_min)
    return xt, x1 - (1 - cfg.sigma_min) * x0


def cfm_loss(model, z_clean: torch.Tensor, z_dist: torch.Tensor, rng: Rng,
             cfg: FlowPathConfig = FlowPathConfig()) -> torch.Tensor:
    """Mean squared error between predicted and conditional target velocity.

    ``t`` is drawn uniformly per batch element; inputs are ``(B, D, L)`` or ``(D, L)``.
    """
    if z_clean.shape != z_dist.shape:
        raise ContractError(f"clean/distorted latent shapes differ: {tuple(z_clean.shape)} vs {tuple(z_dist.shape)}")
    batched = z_clean.dim() == 3
    n = z_clean.shape[0] if batched else 1
    t = seeded_uniform(rng.derive("t"), (n,), z_clean.dtype)
    if not batched:
        t = t[0]
    xt, target = sample_path(z_clean, t, rng.derive("x0"), cfg)
    pred = model(torch.cat([xt, z_dist], dim=-2), t)
    return ((pred - target) ** 2).mean()


@torch.no_grad()
def ode_solve(model, z_dist: torch.Tensor, rng: Rng, solver: SolverConfig = SolverConfig(),
              x0: torch.Tensor | None = None) -> torch.Tensor:
    """Integrate ``dx/dt = v(x, t)`` from noise at t=0 to t=1 on a uniform grid."""
    x = seeded_normal(rng, z_dist.shape, z_dist.dtype) if x0 is None else x0.clone()
    dt = 1.0 / solver.steps
    batch = z_dist.shape[0] if z_dist.dim() == 3 else 1

    def v(state, t):
        tt = torch.full((batch,), t, dtype=z_dist.dtype)
        if z_dist.dim() == 2:
            tt = tt[0]
        return model(torch.cat([state, z_dist], dim=-2), tt)

    for i in range(solver.steps):
        t = i * dt
        if solver.scheme == "euler":
            x = x + dt * v(x, t)
        else:
            mid = x + 0.5 * dt * v(x, t)
            x = x + dt * v(mid, t + 0.5 * dt)
        if not torch.isfinite(x).all():
            raise SolverError(f"non-finite state at solver step {i}")
    return x


@dataclass
class LatentScaler:
    """Per-channel affine map putting clean latents at zero mean, unit variance."""

    mean: torch.Tensor
    std: torch.Tensor

    @classmethod
    def identity(cls, channels: int) -> "LatentScaler":
        return cls(torch.zeros(channels), torch.ones(channels))

    @classmethod
    def fit(cls, latents, floor: float = 1e-3) -> "LatentScaler":
        """``latents``: iterable of ``(D, L)`` arrays or tensors."""
        z = torch.cat([torch.as_tensor(a, dtype=torch.float64) for a in latents], dim=-1)
        return cls(z.mean(-1).float(), z.std(-1).clamp_min(floor).float())

    def _shape(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        return t.to(like.dtype).reshape(-1, 1)

    def normalize(self, z: torch.Tensor) -> torch.Tensor:
        return (z - self._shape(self.mean, z)) / self._shape(self.std, z)

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        return z * self._shape(self.std, z) + self._shape(self.mean, z)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentScaler":
        return cls(torch.tensor(d["mean"]), torch.tensor(d["std"]))


@torch.no_grad()
def enhance(x_dist: torch.Tensor, compressor, model, solver: SolverConfig, rng: Rng,
            scaler: LatentScaler | None = None) -> torch.Tensor:
    """Distorted waveform -> encoder mean -> ODE in latent space -> decoded waveform.

    With a ``scaler`` the ODE runs in normalised latent coordinates.
    """
    x_dist = torch.as_tensor(x_dist, dtype=torch.float32)
    z_d = compressor.encode(x_dist).mu
    max_len = getattr(getattr(model, "cfg", None), "max_len", None)
    extend = getattr(getattr(model, "cfg", None), "extend_positions", False)
    if max_len is not None and z_d.shape[-1] > max_len and not extend:
        raise ContractError(f"latent length {z_d.shape[-1]} exceeds model max_len {max_len}")
    latent_dim = getattr(getattr(model, "cfg", None), "latent_dim", z_d.shape[-2])
    if latent_dim != z_d.shape[-2]:
        raise DimensionError(f"compressor latent dim {z_d.shape[-2]} != model latent dim {latent_dim}")
    if scaler is not None:
        z_hat = scaler.denormalize(ode_solve(model, scaler.normalize(z_d), rng, solver))
    else:
        z_hat = ode_solve(model, z_d, rng, solver)
    return compressor.decode(z_hat, x_dist.shape[-1])
