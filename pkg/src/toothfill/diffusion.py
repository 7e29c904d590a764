"""Denoising diffusion on SDF grids: schedules, sampling steps, guidance and training.

Timesteps are 1-based throughout: ``t = 1`` is the least noisy step and
``alpha_bar(0) == 1``. The schedule algebra is done in float64 numpy; the
network runs in torch float32.

The diffusion operates on SDF values divided by the truncation bound, so
``x0`` lives in ``[-1, 1]``; the null (dropped) condition is the all-outside
grid, +1 after scaling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, NumericError, ShapeMismatchError, ValidationError
from .geometry import TAU, SdfGrid

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step variances; ``betas[t - 1]`` is beta_t."""

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64).reshape(-1)
        if b.size < 1:
            raise ConfigError("schedule needs at least one step")
        if not np.all((b > 0) & (b < 1)):
            raise ValidationError("betas must lie strictly inside (0, 1)")
        b = b.copy()
        b.flags.writeable = False
        object.__setattr__(self, "betas", b)
        abar = np.cumprod(1.0 - b)
        abar.flags.writeable = False
        object.__setattr__(self, "_alpha_bars", abar)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return self._alpha_bars

    def _check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValidationError(f"timestep outside 1..{self.T}: {t}")
        return t.astype(np.int64)

    def beta(self, t):
        return self.betas[self._check_t(t) - 1]

    def alpha_bar(self, t):
        """ᾱ_t for t in 0..T (ᾱ_0 = 1)."""
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValidationError(f"timestep outside 0..{self.T}: {t}")
        padded = np.concatenate([[1.0], self._alpha_bars])
        return padded[t]

    def posterior_variance(self, t):
        """beta~_t = beta_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t)."""
        t = self._check_t(t)
        return self.betas[t - 1] * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))

    def model_timestep(self, t):
        """Timestep index handed to the network (identity for a base schedule)."""
        return self._check_t(t)


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear betas, with endpoints rescaled by 1000/T so short schedules stay comparable."""
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    scale = 1000.0 / T
    lo = min(beta_start * scale, 0.999)
    hi = min(beta_end * scale, 0.999)
    return NoiseSchedule(np.linspace(lo, hi, int(T), dtype=np.float64))


@dataclass(frozen=True, eq=False)
class RespacedSchedule(NoiseSchedule):
    """A schedule on a subsequence of ``base`` steps with recomputed betas."""

    base: NoiseSchedule = None
    kept_indices: np.ndarray = None

    def __post_init__(self):
        super().__post_init__()
        # take ᾱ from the base schedule verbatim; a cumulative product of the
        # recomputed betas would differ in the last bits
        abar = np.asarray(self.base.alpha_bar(self.kept_indices), dtype=np.float64)
        abar.flags.writeable = False
        object.__setattr__(self, "_alpha_bars", abar)

    def model_timestep(self, t):
        return self.kept_indices[self._check_t(t) - 1]


def respace(schedule: NoiseSchedule, target_steps: int) -> RespacedSchedule:
    """Keep ``target_steps`` evenly strided steps, always including step T.

    Step ``j`` of the result keeps base step ``k_j = floor(j T / target)`` and
    gets ``beta'_j = 1 - ᾱ_{k_j} / ᾱ_{k_{j-1}}``, so its cumulative product
    reproduces the base ᾱ at the kept steps.
    """
    T = schedule.T
    if int(target_steps) != target_steps or not 1 <= target_steps <= T:
        raise ValidationError(f"target_steps must be in 1..{T}, got {target_steps}")
    n = int(target_steps)
    kept = (np.arange(1, n + 1, dtype=np.int64) * T) // n
    abar = schedule.alpha_bar(kept)
    prev = np.concatenate([[1.0], abar[:-1]])
    betas = 1.0 - abar / prev
    kept.flags.writeable = False
    return RespacedSchedule(betas, base=schedule, kept_indices=kept)


# ---------------------------------------------------------------------------
# Forward / reverse steps
# ---------------------------------------------------------------------------

def _coef(values, like):
    """Broadcastable per-batch coefficient matching ``like``'s array type."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim:
        v = v.reshape((-1,) + (1,) * (np.ndim(like) - 1))
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(v, dtype=like.dtype, device=like.device)
    return v


def _same_shape(a, b, what):
    if tuple(np.shape(a)) != tuple(np.shape(b)):
        raise ShapeMismatchError(f"{what}: shapes {tuple(np.shape(a))} and {tuple(np.shape(b))} differ")


def noise_at(x0, eps, alpha_bar):
    """sqrt(ᾱ) x0 + sqrt(1 - ᾱ) eps for an explicit ᾱ."""
    _same_shape(x0, eps, "noise_at")
    return _coef(np.sqrt(alpha_bar), x0) * x0 + _coef(np.sqrt(1.0 - np.asarray(alpha_bar)), x0) * eps


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Closed-form forward noising to step ``t`` with caller-supplied ``eps``."""
    return noise_at(x0, eps, schedule.alpha_bar(schedule._check_t(t)))


def predict_x0(eps, x_t, t, schedule: NoiseSchedule):
    """Invert the forward map: (x_t - sqrt(1 - ᾱ_t) eps) / sqrt(ᾱ_t)."""
    _same_shape(eps, x_t, "predict_x0")
    abar = schedule.alpha_bar(schedule._check_t(t))
    return (x_t - _coef(np.sqrt(1.0 - abar), x_t) * eps) / _coef(np.sqrt(abar), x_t)


def eps_from_x0(x0, x_t, t, schedule: NoiseSchedule):
    """Noise that maps ``x0`` to ``x_t`` at step ``t``."""
    _same_shape(x0, x_t, "eps_from_x0")
    abar = schedule.alpha_bar(schedule._check_t(t))
    return (x_t - _coef(np.sqrt(abar), x_t) * x0) / _coef(np.sqrt(1.0 - abar), x_t)


def posterior_mean(eps, x_t, t, schedule: NoiseSchedule):
    """(1 / sqrt(alpha_t)) (x_t - beta_t / sqrt(1 - ᾱ_t) eps)."""
    _same_shape(eps, x_t, "posterior_mean")
    t = schedule._check_t(t)
    beta = schedule.betas[t - 1]
    abar = schedule.alpha_bar(t)
    return (x_t - _coef(beta / np.sqrt(1.0 - abar), x_t) * eps) / _coef(np.sqrt(1.0 - beta), x_t)


def p_sample_step(predicted_eps, x_t, t: int, schedule: NoiseSchedule, rng=None, z=None):
    """One reverse step ``x_t -> x_{t-1}`` with posterior variance beta~_t.

    ``z`` is the injected standard normal draw; when omitted it comes from
    ``rng`` (numpy Generator). No noise is added at ``t = 1``.
    """
    mean = posterior_mean(predicted_eps, x_t, t, schedule)
    if int(t) == 1:
        return mean
    if z is None:
        if rng is None:
            raise ValidationError("p_sample_step needs rng or z for t > 1")
        z = rng.standard_normal(np.shape(x_t))
        if isinstance(x_t, torch.Tensor):
            z = torch.as_tensor(z, dtype=x_t.dtype)
    _same_shape(z, x_t, "p_sample_step noise")
    return mean + float(np.sqrt(schedule.posterior_variance(t))) * z


def cfg_mix(eps_uncond, eps_cond, w: float):
    """Guided noise eps_u + w (eps_c - eps_u)."""
    _same_shape(eps_uncond, eps_cond, "cfg_mix")
    return eps_uncond + w * (eps_cond - eps_uncond)


# ---------------------------------------------------------------------------
# Timestep resampling
# ---------------------------------------------------------------------------

class SecondMomentResampler:
    """Loss-aware timestep sampler.

    Each timestep keeps its last ``history`` losses. Until every timestep has
    a full history, sampling is uniform with unit weights; afterwards
    ``p_t ∝ sqrt(mean(loss_t^2))`` mixed with a ``uniform_prob`` floor and the
    importance weight is ``1 / (T p_t)``.
    """

    def __init__(self, T: int, history: int = 10, uniform_prob: float = 0.001):
        if T < 1 or history < 1 or not 0 <= uniform_prob <= 1:
            raise ConfigError("invalid resampler parameters")
        self.T = int(T)
        self.history = int(history)
        self.uniform_prob = float(uniform_prob)
        self._losses = np.zeros((self.T, self.history), dtype=np.float64)
        self._counts = np.zeros(self.T, dtype=np.int64)

    def warmed_up(self) -> bool:
        return bool(np.all(self._counts == self.history))

    def probabilities(self) -> np.ndarray:
        if not self.warmed_up():
            return np.full(self.T, 1.0 / self.T)
        w = np.sqrt(np.mean(self._losses ** 2, axis=1))
        total = w.sum()
        if not np.isfinite(total) or total <= 0:
            return np.full(self.T, 1.0 / self.T)
        p = w / total
        p = p * (1.0 - self.uniform_prob) + self.uniform_prob / self.T
        return p / p.sum()

    def sample(self, rng: np.random.Generator, batch_size: int | None = None):
        """(t, weight) with 1-based t; arrays when ``batch_size`` is given."""
        p = self.probabilities()
        n = 1 if batch_size is None else int(batch_size)
        idx = rng.choice(self.T, size=n, p=p)
        weights = 1.0 / (self.T * p[idx])
        if batch_size is None:
            return int(idx[0]) + 1, float(weights[0])
        return idx + 1, weights

    def update(self, t, loss):
        """Record ``loss`` for 1-based timestep(s) ``t``."""
        for ti, li in zip(np.atleast_1d(t), np.atleast_1d(loss)):
            k = int(ti) - 1
            if not 0 <= k < self.T:
                raise ValidationError(f"timestep {ti} outside 1..{self.T}")
            if self._counts[k] < self.history:
                self._losses[k, self._counts[k]] = li
                self._counts[k] += 1
            else:
                self._losses[k, :-1] = self._losses[k, 1:]
                self._losses[k, -1] = li

    def state_dict(self) -> dict:
        return {"losses": self._losses.copy(), "counts": self._counts.copy()}

    def load_state_dict(self, state: dict):
        self._losses[...] = state["losses"]
        self._counts[...] = state["counts"]


def resampler_sample(resampler: SecondMomentResampler, rng):
    return resampler.sample(rng)


def resampler_update(resampler: SecondMomentResampler, t, loss):
    resampler.update(t, loss)


# ---------------------------------------------------------------------------
# Training and sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance scale ``w`` and the training-time condition dropout probability.

    Dropout defaults to 0.10; 0.15 is the other value reported for this model.
    """

    w: float = 2.0
    dropout_p: float = 0.10

    def __post_init__(self):
        if not self.w >= 0:
            raise ConfigError(f"w must be >= 0, got {self.w}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


def scale_grid(values, truncation: float = TAU) -> np.ndarray:
    """SDF values to network units (divide by the truncation)."""
    return np.asarray(values, dtype=np.float64) / truncation


def _batch(samples):
    return [samples] if not isinstance(samples, (list, tuple)) else list(samples)


def _stack(grids) -> torch.Tensor:
    arr = np.stack([scale_grid(g.values) for g in grids])[:, None]
    return torch.as_tensor(arr, dtype=torch.float32)


def _null_like(x: torch.Tensor) -> torch.Tensor:
    return torch.ones_like(x)


def train_step(network, samples, schedule: NoiseSchedule, guidance: GuidanceConfig,
               resampler: SecondMomentResampler, rng: np.random.Generator,
               optimizer: torch.optim.Optimizer, hook: Callable[[dict], None] | None = None) -> float:
    """One importance-weighted epsilon-prediction step on a batch of samples.

    Draws one (t, weight) and one dropout decision per sample. Dropped
    samples get the null condition for both context and antagonist. Returns
    the unweighted batch-mean loss; raises ``NumericError`` on a non-finite
    loss without touching the parameters.
    """
    batch = _batch(samples)
    n = network.config.resolution
    for s in batch:
        if s.context.resolution != n:
            raise ValidationError(f"sample resolution {s.context.resolution} != network {n}")
    B = len(batch)
    t, weight = resampler.sample(rng, B)
    eps = rng.standard_normal((B, 1, n, n, n))
    drop = rng.random(B) < guidance.dropout_p

    x0 = _stack([s.ground_truth for s in batch])
    eps_t = torch.as_tensor(eps, dtype=torch.float32)
    x_t = q_sample(x0, t, eps_t, schedule)
    x_c = _stack([s.context for s in batch])
    keep = torch.as_tensor(~drop, dtype=torch.bool).view(-1, 1, 1, 1, 1)
    x_c = torch.where(keep, x_c, _null_like(x_c))
    x_a = None
    if network.config.antagonist_enabled:
        x_a = torch.stack([
            _stack([s.antagonist])[0] if s.antagonist is not None else torch.ones(1, n, n, n)
            for s in batch
        ])
        x_a = torch.where(keep, x_a, _null_like(x_a))
    if hook is not None:
        hook({"t": t, "weight": weight, "dropped": drop, "x_c": x_c, "x_a": x_a})

    network.train()
    pred = network(x_t, torch.as_tensor(schedule.model_timestep(t)), x_c, x_a)
    per_sample = ((pred - eps_t) ** 2).mean(dim=(1, 2, 3, 4))
    loss = (torch.as_tensor(weight, dtype=per_sample.dtype) * per_sample).mean()
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite training loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    losses = per_sample.detach().double().numpy()
    resampler.update(t, losses)
    return float(losses.mean())


@dataclass
class Trainer:
    """Owns the optimizer, resampler and RNG of a training run."""

    network: torch.nn.Module
    schedule: NoiseSchedule = field(default_factory=linear_schedule)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        self.optimizer = torch.optim.Adam(self.network.parameters(), lr=self.lr)
        self.resampler = SecondMomentResampler(self.schedule.T)
        self.rng = np.random.default_rng(self.seed)
        self.steps = 0

    def step(self, samples, hook=None) -> float:
        loss = train_step(self.network, samples, self.schedule, self.guidance,
                          self.resampler, self.rng, self.optimizer, hook)
        self.steps += 1
        return loss


@torch.no_grad()
def _eval_eps(network, x, t_model, x_c, x_a):
    return network(torch.as_tensor(x, dtype=torch.float32),
                   torch.full((x.shape[0],), int(t_model), dtype=torch.int64),
                   x_c, x_a).double().numpy()


def complete_batch(network, contexts: Sequence[SdfGrid], antagonists=None, steps: int = 100,
                   w: float = 2.0, seed: int = 0, schedule: NoiseSchedule | None = None,
                   hook: Callable[[dict], None] | None = None, clip_denoised: bool = True) -> list:
    """Reverse-diffuse a batch of contexts; see :func:`complete`."""
    schedule = linear_schedule() if schedule is None else schedule
    n = network.config.resolution
    for c in contexts:
        if c.resolution != n:
            raise ValidationError(f"context resolution {c.resolution} != network {n}")
    if not w >= 0:
        raise ConfigError(f"w must be >= 0, got {w}")
    B = len(contexts)
    antagonists = [None] * B if antagonists is None else list(antagonists)
    if len(antagonists) != B:
        raise ShapeMismatchError("one antagonist entry per context required")
    use_antag = network.config.antagonist_enabled and any(a is not None for a in antagonists)

    x_c = _stack(contexts)
    x_a = None
    if use_antag:
        x_a = torch.stack([_stack([a])[0] if a is not None else torch.ones(1, n, n, n)
                           for a in antagonists])
    null_c = _null_like(x_c)
    null_a = None if x_a is None else _null_like(x_a)

    rs = respace(schedule, steps)
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    x = rng.standard_normal((B, 1, n, n, n))
    network.eval()
    for j in range(rs.T, 0, -1):
        tm = int(rs.model_timestep(j))
        if w == 1.0:
            eps = _eval_eps(network, x, tm, x_c, x_a)
            calls = 1
        elif w == 0.0:
            eps = _eval_eps(network, x, tm, null_c, null_a)
            calls = 1
        else:
            eps = cfg_mix(_eval_eps(network, x, tm, null_c, null_a),
                          _eval_eps(network, x, tm, x_c, x_a), w)
            calls = 2
        if clip_denoised:
            # keep the implied clean sample inside the data range [-1, 1]
            eps = eps_from_x0(np.clip(predict_x0(eps, x, j, rs), -1.0, 1.0), x, j, rs)
        if hook is not None:
            hook({"step": j, "model_t": tm, "network_calls": calls})
        z = rng.standard_normal(x.shape) if j > 1 else None
        x = p_sample_step(eps, x, j, rs, z=z)
    like = contexts[0]
    return [like.with_values(np.clip(x[b, 0], -1.0, 1.0) * like.truncation) for b in range(B)]


def complete(network, context: SdfGrid, antagonist: SdfGrid | None = None, steps: int = 100,
             w: float = 2.0, seed: int = 0, schedule: NoiseSchedule | None = None,
             hook: Callable[[dict], None] | None = None, clip_denoised: bool = True) -> SdfGrid:
    """Complete ``context`` by running the respaced reverse chain from noise.

    ``w == 1`` costs one conditional network call per step, ``w == 0`` one
    unconditional call, any other ``w`` both. With ``clip_denoised`` the
    clean-sample estimate behind each step is clipped to [-1, 1] before the
    posterior mean is formed. The result is clamped to the truncation bound
    of ``context``.
    """
    return complete_batch(network, [context], [antagonist], steps, w, seed, schedule, hook,
                          clip_denoised)[0]
