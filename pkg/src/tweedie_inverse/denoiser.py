"""Blind denoisers: a bias-free CNN and an analytic Gaussian MMSE oracle.

A denoiser is any callable mapping a noisy image tensor ``(..., C, H, W)`` to
a clean estimate of the same shape.  Models that need the noise level (only
the analytic oracle) set ``needs_noise_level = True`` and accept it as a
second argument; the solver then feeds its running noise estimate.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BiasFreeCNNConfig:
    depth: int = 5
    channels: int = 32
    kernel_size: int = 3
    input_channels: int = 3
    init_seed: int = 0

    def validate(self):
        if self.depth < 2:
            raise ValueError(f"depth must be at least 2, got {self.depth}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.channels < 1 or self.input_channels < 1:
            raise ValueError("channel counts must be positive")


class BiasFreeCNN(nn.Module):
    """DnCNN-style residual denoiser with every additive bias removed.

    Convolutions carry no bias and the only nonlinearity is ReLU, so the
    network is positively homogeneous: ``net(a*y) == a*net(y)`` for a > 0 and
    ``net(0) == 0``.  The body predicts the noise; ``forward`` returns
    ``y - body(y)``.
    """

    needs_noise_level = False

    def __init__(self, config: BiasFreeCNNConfig = BiasFreeCNNConfig()):
        super().__init__()
        config.validate()
        self.config = config
        k, ch = config.kernel_size, config.channels
        layers: list[nn.Module] = [nn.Conv2d(config.input_channels, ch, k, padding=k // 2, bias=False),
                                   nn.ReLU()]
        for _ in range(config.depth - 2):
            layers += [nn.Conv2d(ch, ch, k, padding=k // 2, bias=False), nn.ReLU()]
        layers.append(nn.Conv2d(ch, config.input_channels, k, padding=k // 2, bias=False))
        self.body = nn.Sequential(*layers)
        self.reset_parameters(config.init_seed)

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        convs = [m for m in self.body if isinstance(m, nn.Conv2d)]
        for i, conv in enumerate(convs):
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            # He init for the rectified layers, a damped last layer so the
            # untrained net starts close to the identity map
            std = math.sqrt(2.0 / fan_in) if i < len(convs) - 1 else 0.1 / math.sqrt(fan_in)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.dim() < 3 or y.shape[-3] != self.config.input_channels:
            raise ValueError(f"expected {self.config.input_channels} channels, got shape {tuple(y.shape)}")
        lead = y.shape[:-3]
        flat = y.reshape(-1, *y.shape[-3:])
        return (flat - self.body(flat)).reshape(*lead, *y.shape[-3:])

    def architecture(self) -> dict:
        return asdict(self.config)


def init_bias_free_cnn(config: BiasFreeCNNConfig = BiasFreeCNNConfig()) -> BiasFreeCNN:
    return BiasFreeCNN(config)


def count_bias_parameters(model: nn.Module) -> int:
    seen = {}
    for name, p in model.named_parameters():
        if "bias" in name.rsplit(".", 1)[-1]:
            seen[id(p)] = p.numel()
    for m in model.modules():
        b = getattr(m, "bias", None)
        if isinstance(b, torch.Tensor):
            seen[id(b)] = b.numel()
    return sum(seen.values())


@dataclass
class GaussianPrior:
    """N(mean, covariance) over images; covariance is a scalar variance or a dense matrix."""

    mean: torch.Tensor
    variance: float | None = None
    covariance: torch.Tensor | None = None

    def __post_init__(self):
        if (self.variance is None) == (self.covariance is None):
            raise ValueError("give exactly one of variance or covariance")
        if self.variance is not None and not self.variance > 0:
            raise ValueError("variance must be positive")
        if self.covariance is not None:
            n = self.mean.numel()
            cov = self.covariance
            if cov.shape != (n, n):
                raise ValueError(f"covariance must be {n}x{n}")
            if n > 4096:
                raise ValueError("dense covariance is limited to 4096 pixels")
            if not torch.allclose(cov, cov.T, atol=1e-12, rtol=1e-10):
                raise ValueError("covariance is not symmetric")
            if torch.linalg.cholesky_ex(cov).info.item() != 0:
                raise ValueError("covariance is not positive definite")


def _as_noise_level(sigma, y: torch.Tensor) -> torch.Tensor:
    s = torch.as_tensor(sigma, dtype=y.dtype, device=y.device)
    if s.dim() > 0:
        s = s.reshape(*s.shape, *([1] * 3))
    return s


def mmse_denoise_gaussian(prior: GaussianPrior, y: torch.Tensor, sigma) -> torch.Tensor:
    """Posterior mean of x given y = x + sigma*z under the Gaussian prior.

    ``sigma`` may be a scalar or one value per leading batch element;
    sigma = 0 is the noiseless limit and returns y.
    """
    s = _as_noise_level(sigma, y)
    if torch.any(s < 0):
        raise ValueError("noise level must be non-negative")
    mu = prior.mean.to(y.dtype)
    var_noise = s * s
    if prior.variance is not None:
        return (prior.variance * y + var_noise * mu) / (prior.variance + var_noise)
    cov = prior.covariance.to(y.dtype)
    n = cov.shape[0]
    resid = (y - mu).reshape(*y.shape[:-3], n, 1)
    var_flat = var_noise.reshape(*var_noise.shape[:-3], 1, 1) if var_noise.dim() else var_noise
    system = cov + var_flat * torch.eye(n, dtype=y.dtype, device=y.device)
    gain = cov @ torch.linalg.solve(system, resid)
    return mu + gain.reshape(y.shape)


class GaussianMMSEDenoiser(nn.Module):
    """Exact MMSE denoiser for a Gaussian prior; the noise level is an explicit input."""

    needs_noise_level = True

    def __init__(self, prior: GaussianPrior, sigma: float | None = None):
        super().__init__()
        self.prior = prior
        self.sigma = sigma

    def forward(self, y, sigma=None):
        sigma = self.sigma if sigma is None else sigma
        if sigma is None:
            raise ValueError("Gaussian MMSE denoiser needs a noise level")
        return mmse_denoise_gaussian(self.prior, y, sigma)


def denoise(model, y: torch.Tensor, sigma=None) -> torch.Tensor:
    if getattr(model, "needs_noise_level", False):
        out = model(y, sigma)
    else:
        out = model(y)
    if out.shape != y.shape:
        raise ValueError(f"denoiser changed shape {tuple(y.shape)} -> {tuple(out.shape)}")
    return out


def prior_residual(model, y: torch.Tensor, sigma=None) -> torch.Tensor:
    """denoise(y) - y, i.e. sigma^2 times the score of the noisy density at y."""
    return denoise(model, y, sigma) - y


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    noise_range: tuple[float, float] = (0.0, 100.0)  # 0-255 scale
    seed: int = 0


def add_noise(x: torch.Tensor, sigma255, gen: torch.Generator) -> torch.Tensor:
    s = _as_noise_level(torch.as_tensor(sigma255, dtype=x.dtype) / 255.0, x)
    return x + s * torch.randn(x.shape, generator=gen, dtype=x.dtype)


def pretrain_denoiser(model: nn.Module, patches: torch.Tensor, config: PretrainConfig = PretrainConfig()):
    """Train ``model`` for blind AWGN denoising on a fixed patch tensor (N, C, H, W).

    Each sample gets its own sigma ~ U(noise_range) per step.  Returns the
    model and the list of per-epoch mean losses.
    """
    if patches.shape[0] == 0:
        raise ValueError("empty dataset")
    lo, hi = config.noise_range
    if not 0 <= lo <= hi <= 255:
        raise ValueError(f"noise range must lie in [0, 255], got {config.noise_range}")
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    history = []
    n = patches.shape[0]
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            x = patches[order[start:start + config.batch_size]]
            sig = torch.as_tensor(rng.uniform(lo, hi, size=x.shape[0]), dtype=x.dtype)
            y = add_noise(x, sig, gen)
            loss = torch.mean((model(y) - x) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * x.shape[0]
        history.append(total / n)
        log.info("pretrain epoch %d loss %.6f", epoch, history[-1])
    model.eval()
    return model, history
