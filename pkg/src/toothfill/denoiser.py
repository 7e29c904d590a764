"""Three-branch 3-D UNet predicting diffusion noise.

Branches:

* diffusion branch: ``theta_eps`` projects the noisy grid, encoder ``phi_eps``;
* context branch: ``F_c = [theta_eps(x), theta_c(x_c)]``, encoder ``phi_c``;
* antagonist branch: ``F_a = [theta_eps(x), theta_a(x_a)]``, encoder ``phi_a``
  (same architecture as ``phi_c``, separate weights).

At every level the decoder concatenates its running features with the SUM of
the branch encoder features at that resolution. Self-attention runs only in
the middle block. One sinusoidal time embedding, passed through a shared MLP,
is added inside every residual block.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeMismatchError, ValidationError


@dataclass(frozen=True)
class UNetConfig:
    resolution: int = 16
    base_channels: int = 16
    channel_mult: tuple = (1, 2, 4)
    num_res_blocks: int = 1
    time_embed_dim: int = 0  # 0 means 4 * base_channels
    projection_width: int = 0  # 0 means base_channels // 2
    attention_heads: int = 1
    antagonist_enabled: bool = True
    zero_init_head: bool = True

    def __post_init__(self):
        mult = tuple(int(m) for m in self.channel_mult)
        object.__setattr__(self, "channel_mult", mult)
        if not mult or any(m < 1 for m in mult):
            raise ConfigError(f"channel_mult must be positive integers, got {mult}")
        if self.base_channels < 4:
            raise ConfigError("base_channels must be >= 4")
        if self.resolution % (2 ** (len(mult) - 1)) != 0:
            raise ConfigError(f"resolution {self.resolution} not divisible by 2^{len(mult) - 1}")
        if self.num_res_blocks < 1:
            raise ConfigError("num_res_blocks must be >= 1")
        for c in self.channels:
            if c % self.attention_heads:
                raise ConfigError("attention_heads must divide every level's channel count")

    @property
    def levels(self) -> int:
        return len(self.channel_mult)

    @property
    def channels(self):
        return [self.base_channels * m for m in self.channel_mult]

    @property
    def embed_dim(self) -> int:
        return self.time_embed_dim or 4 * self.base_channels

    @property
    def proj_width(self) -> int:
        return self.projection_width or max(1, self.base_channels // 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def num_groups(channels: int, max_groups: int = 8) -> int:
    """Largest divisor of ``channels`` not exceeding ``max_groups``."""
    return max(g for g in range(1, max_groups + 1) if channels % g == 0)


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(num_groups(channels), channels)


def conv3d(cin: int, cout: int, kernel: int = 3, stride: int = 1) -> nn.Conv3d:
    return nn.Conv3d(cin, cout, kernel, stride=stride, padding=kernel // 2)


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding ``[cos(t w_k), sin(t w_k)]``, shape (B, dim)."""
    t = torch.as_tensor(t).reshape(-1).to(torch.float32)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = group_norm(cin)
        self.conv1 = conv3d(cin, cout)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = group_norm(cout)
        self.conv2 = conv3d(cout, cout)
        self.skip = nn.Identity() if cin == cout else conv3d(cin, cout, 1)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Full self-attention over all voxels, residual."""

    def __init__(self, channels: int, heads: int = 1):
        super().__init__()
        if channels % heads:
            raise ShapeMismatchError(f"{heads} heads do not divide {channels} channels")
        self.heads = heads
        self.norm = group_norm(channels)
        self.qkv = conv3d(channels, 3 * channels, 1)
        self.proj = conv3d(channels, channels, 1)

    def forward(self, x):
        b, c, *spatial = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, self.heads, c // self.heads, -1).unbind(1)
        scale = 1.0 / math.sqrt(c // self.heads)
        attn = torch.softmax(torch.einsum("bhcn,bhcm->bhnm", q * scale, k), dim=-1)
        out = torch.einsum("bhnm,bhcm->bhcn", attn, v).reshape(b, c, *spatial)
        return x + self.proj(out)


class Downsample(nn.Module):
    """Strided 3x3x3 convolution halving every spatial axis."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = conv3d(channels, channels, 3, stride=2)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    """Nearest-neighbour doubling followed by a 3x3x3 convolution."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = conv3d(cin, cout)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Projection(nn.Module):
    """Two 1x1x1 convolutions with a SiLU between them."""

    def __init__(self, cin: int, width: int):
        super().__init__()
        self.conv1 = conv3d(cin, width, 1)
        self.conv2 = conv3d(width, width, 1)

    def forward(self, x):
        return self.conv2(F.silu(self.conv1(x)))


class Encoder(nn.Module):
    """Stem, residual blocks per level and strided downsampling between levels."""

    def __init__(self, cin: int, config: UNetConfig):
        super().__init__()
        ch = config.channels
        self.stem = conv3d(cin, ch[0])
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.blocks.append(nn.ModuleList(
                [ResBlock(prev if r == 0 else c, c, config.embed_dim) for r in range(config.num_res_blocks)]
            ))
            prev = c
            if i < len(ch) - 1:
                self.downs.append(Downsample(c))

    def forward(self, x, emb):
        feats = []
        h = self.stem(x)
        for i, level in enumerate(self.blocks):
            for block in level:
                h = block(h, emb)
            feats.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        return feats


class DenoiserUNet(nn.Module):
    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        p = config.proj_width
        ch = config.channels
        e = config.embed_dim

        self.theta_eps = Projection(1, p)
        self.theta_c = Projection(1, p)
        self.phi_eps = Encoder(p, config)
        self.phi_c = Encoder(2 * p, config)
        if config.antagonist_enabled:
            self.theta_a = Projection(1, p)
            self.phi_a = Encoder(2 * p, config)

        self.time_mlp = nn.Sequential(nn.Linear(ch[0], e), nn.SiLU(), nn.Linear(e, e))

        self.mid1 = ResBlock(ch[-1], ch[-1], e)
        self.mid_attn = AttentionBlock(ch[-1], config.attention_heads)
        self.mid2 = ResBlock(ch[-1], ch[-1], e)

        self.dec_blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in reversed(range(config.levels)):
            self.dec_blocks.append(ResBlock(2 * ch[i], ch[i], e))
            if i > 0:
                self.ups.append(Upsample(ch[i], ch[i - 1]))

        self.out_norm = group_norm(ch[0])
        self.out_conv = conv3d(ch[0], 1)
        if config.zero_init_head:
            nn.init.zeros_(self.out_conv.weight)
            nn.init.zeros_(self.out_conv.bias)

    def _check(self, x, name):
        n = self.config.resolution
        if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != (n, n, n):
            raise ShapeMismatchError(f"{name} must have shape (B, 1, {n}, {n}, {n}), got {tuple(x.shape)}")

    def project_inputs(self, x_noisy, x_c, x_a=None):
        """(F_c, F_a) feature volumes; F_a is None without an antagonist."""
        if x_c.shape != x_noisy.shape or (x_a is not None and x_a.shape != x_noisy.shape):
            raise ShapeMismatchError("noisy, context and antagonist grids must share a shape")
        if x_a is not None and not self.config.antagonist_enabled:
            raise ValidationError("antagonist given but the antagonist branch is disabled")
        p_eps = self.theta_eps(x_noisy)
        f_c = torch.cat([p_eps, self.theta_c(x_c)], dim=1)
        f_a = None if x_a is None else torch.cat([p_eps, self.theta_a(x_a)], dim=1)
        return f_c, f_a

    def forward(self, x_noisy, t, x_c=None, x_a=None):
        """Predicted noise, same shape as ``x_noisy``.

        A missing ``x_c`` is the null condition (all +1). A missing ``x_a``
        skips the antagonist encoder entirely.
        """
        self._check(x_noisy, "x_noisy")
        if x_c is None:
            x_c = torch.ones_like(x_noisy)
        self._check(x_c, "x_c")
        if x_a is not None:
            self._check(x_a, "x_a")
        f_c, f_a = self.project_inputs(x_noisy, x_c, x_a)

        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x_noisy.shape[0])
        emb = self.time_mlp(timestep_embedding(t, self.config.channels[0]).to(x_noisy.dtype))

        # the first half of F_c is the projected noisy input
        skips = self.phi_eps(f_c[:, :self.config.proj_width], emb)
        skips = [a + b for a, b in zip(skips, self.phi_c(f_c, emb))]
        if f_a is not None:
            skips = [a + b for a, b in zip(skips, self.phi_a(f_a, emb))]

        h = self.mid2(self.mid_attn(self.mid1(skips[-1], emb)), emb)
        for j, block in enumerate(self.dec_blocks):
            i = self.config.levels - 1 - j
            h = block(torch.cat([h, skips[i]], dim=1), emb)
            if i > 0:
                h = self.ups[j](h)
        return self.out_conv(F.silu(self.out_norm(h)))

    def branch_parameter_count(self, name: str) -> int:
        return sum(p.numel() for p in getattr(self, name).parameters())


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_grad: float
    n_checked: int
    tolerance: float
    per_tensor: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def gradient_check(network: nn.Module, inputs, target, tolerance: float = 1e-3, h: float = 1e-4,
                   per_tensor: int = 200, seed: int = 0, abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd gradients of ``mean((network(*inputs) - target)^2)`` to central differences.

    Runs on a float64 copy. Up to ``per_tensor`` random entries of every
    parameter tensor are perturbed by ``±h``. The relative error of an entry
    is ``|g - g_fd| / max(|g|, |g_fd|, abs_floor)``.
    """
    net = copy.deepcopy(network).double()
    net.eval()
    args = [a.double() if torch.is_tensor(a) and a.is_floating_point() else a for a in inputs]
    target = target.double()

    def loss_fn():
        return ((net(*args) - target) ** 2).mean()

    net.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    worst, max_grad, n_checked, report = 0.0, 0.0, 0, {}
    with torch.no_grad():
        for name, param in net.named_parameters():
            grad = param.grad.detach().reshape(-1).clone() if param.grad is not None else torch.zeros(param.numel(), dtype=param.dtype)
            max_grad = max(max_grad, float(grad.abs().max()))
            flat = param.view(-1)
            k = min(per_tensor, flat.numel())
            idx = rng.choice(flat.numel(), size=k, replace=False)
            tensor_worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2 * h)
                g = grad[i].item()
                rel = abs(g - fd) / max(abs(g), abs(fd), abs_floor)
                tensor_worst = max(tensor_worst, rel)
            report[name] = tensor_worst
            worst = max(worst, tensor_worst)
            n_checked += k
    return GradCheckReport(worst, max_grad, n_checked, tolerance, report)
