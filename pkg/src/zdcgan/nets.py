"""Generator, discriminator and shower-center regressor networks.

The generator maps (latent, condition) to a 56x30 non-negative image: dense
projection to 7x5 feature maps, three stride-2 transposed-convolution blocks
(batch norm + ReLU) up to 56x40, a 3x3 output convolution with softplus, then
a fixed center crop of the width from 40 to 30 (columns 5..34). The
discriminator tiles a dense condition embedding into extra input planes and
applies three stride-2 convolutions; the regressor normalizes its input by the
pixel sum, applies three stride-2 convolutions and emits two sigmoid
coordinates scaled to the grid extent.

grad_check verifies any scalar loss against central finite differences; the
Toy* networks are small smooth dense models (double precision, 4x4 images)
used to exercise every differentiable loss path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import COND_DIM, HEIGHT, WIDTH

# Width of the pre-crop generator output (5 * 2**3) and the fixed crop window.
_GEN_WIDTH = 40
_CROP_LO = (_GEN_WIDTH - WIDTH) // 2
_CROP_HI = _CROP_LO + WIDTH

INIT_STD = 0.02
INIT_CLAMP = 0.5  # keeps |w| < 1 unconditionally


@dataclass(frozen=True)
class ArchitectureConfig:
    latent_dim: int = 10
    base_channels: int = 16
    conditioning_embed_dim: int = 8
    output_activation: str = "softplus"

    def validate(self) -> None:
        if self.latent_dim <= 0 or self.base_channels <= 0 or self.conditioning_embed_dim <= 0:
            raise ValueError("architecture dimensions must be positive")
        if self.output_activation not in ("softplus", "relu"):
            raise ValueError(f"unknown output_activation {self.output_activation!r}")


def _out_act(name: str) -> nn.Module:
    return nn.Softplus() if name == "softplus" else nn.ReLU()


class Generator(nn.Module):
    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        bc = config.base_channels
        self.fc = nn.Linear(config.latent_dim + COND_DIM, 7 * 5 * 4 * bc)
        # affine=False: normalization layers carry no trainable parameters, so
        # every parameter is a small-normal weight or a zero bias.
        self.bn0 = nn.BatchNorm2d(4 * bc, affine=False)
        self.up = nn.Sequential(
            nn.ConvTranspose2d(4 * bc, 2 * bc, 4, stride=2, padding=1),
            nn.BatchNorm2d(2 * bc, affine=False),
            nn.ReLU(),
            nn.ConvTranspose2d(2 * bc, bc, 4, stride=2, padding=1),
            nn.BatchNorm2d(bc, affine=False),
            nn.ReLU(),
            nn.ConvTranspose2d(bc, bc, 4, stride=2, padding=1),
            nn.BatchNorm2d(bc, affine=False),
            nn.ReLU(),
        )
        self.out_conv = nn.Conv2d(bc, 1, 3, padding=1)
        self.act = _out_act(config.output_activation)
        self._base_channels = bc

    def forward(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        h = self.fc(torch.cat([z, c], dim=1))
        h = h.view(-1, 4 * self._base_channels, 7, 5)
        h = torch.relu(self.bn0(h))
        h = self.up(h)                       # (B, bc, 56, 40)
        img = self.act(self.out_conv(h))     # non-negative by construction
        return img[:, 0, :, _CROP_LO:_CROP_HI]


class Discriminator(nn.Module):
    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        bc = config.base_channels
        e = config.conditioning_embed_dim
        self.cond_embed = nn.Linear(COND_DIM, e)
        self.conv = nn.Sequential(
            nn.Conv2d(1 + e, bc, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(bc, 2 * bc, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * bc, 4 * bc, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.fc = nn.Linear(4 * bc * 7 * 3, 1)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        planes = self.cond_embed(c)[:, :, None, None].expand(-1, -1, HEIGHT, WIDTH)
        h = self.conv(torch.cat([x.unsqueeze(1), planes], dim=1))
        return torch.sigmoid(self.fc(h.flatten(1)))[:, 0]


class CenterRegressor(nn.Module):
    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        bc = config.base_channels
        self.conv = nn.Sequential(
            nn.Conv2d(1, bc, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(bc, 2 * bc, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * bc, 4 * bc, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.fc = nn.Linear(4 * bc * 7 * 3, 2)
        self.register_buffer("scale", torch.tensor([float(HEIGHT), float(WIDTH)]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # Sum-normalized input keeps the regression scale-invariant across the
        # wide range of response intensities.
        xn = x / (x.sum(dim=(1, 2), keepdim=True) + 1e-6)
        h = self.conv(xn.unsqueeze(1))
        return torch.sigmoid(self.fc(h.flatten(1))) * self.scale


@dataclass
class Networks:
    generator: nn.Module
    discriminator: nn.Module
    regressor: nn.Module
    config: ArchitectureConfig | None = None

    def modules_by_name(self) -> dict[str, nn.Module]:
        return {
            "generator": self.generator,
            "discriminator": self.discriminator,
            "regressor": self.regressor,
        }

    def train_mode(self) -> None:
        for m in self.modules_by_name().values():
            m.train()

    def eval_mode(self) -> None:
        for m in self.modules_by_name().values():
            m.eval()


def _seeded_init(module: nn.Module, gen: torch.Generator) -> None:
    """Weights ~ N(0, 0.02^2) clamped to +-0.5, biases zero."""
    for _, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if p.dim() > 1:
                p.copy_(
                    (torch.randn(p.shape, generator=gen, dtype=p.dtype) * INIT_STD).clamp_(
                        -INIT_CLAMP, INIT_CLAMP
                    )
                )
            else:
                p.zero_()


def init_networks(config: ArchitectureConfig | None = None, seed: int = 0) -> Networks:
    """Build the three networks with a deterministic seeded initialization."""
    config = config if config is not None else ArchitectureConfig()
    config.validate()
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    nets = Networks(
        generator=Generator(config),
        discriminator=Discriminator(config),
        regressor=CenterRegressor(config),
        config=config,
    )
    for name in ("generator", "discriminator", "regressor"):
        _seeded_init(nets.modules_by_name()[name], gen)
    return nets


@torch.no_grad()
def generate_responses(
    nets: Networks,
    conditions: np.ndarray,
    z: np.ndarray | torch.Tensor,
    batch_size: int = 256,
) -> np.ndarray:
    """Eval-mode batched sampling; returns (n, 56, 30) float32."""
    nets.generator.eval()
    c = torch.as_tensor(np.asarray(conditions), dtype=torch.float32)
    zt = torch.as_tensor(np.asarray(z), dtype=torch.float32)
    out = []
    for i in range(0, c.shape[0], batch_size):
        out.append(nets.generator(zt[i : i + batch_size], c[i : i + batch_size]))
    return torch.cat(out).numpy().astype(np.float32)


def generator_forward(nets: Networks, condition: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Single-sample convenience wrapper: one (56, 30) response, pixels >= 0."""
    return generate_responses(nets, np.asarray(condition)[None, :], np.asarray(z)[None, :])[0]


@torch.no_grad()
def discriminator_forward(nets: Networks, response: np.ndarray, condition: np.ndarray) -> float:
    nets.discriminator.eval()
    x = torch.as_tensor(np.asarray(response), dtype=torch.float32).unsqueeze(0)
    c = torch.as_tensor(np.asarray(condition), dtype=torch.float32).unsqueeze(0)
    return float(nets.discriminator(x, c)[0])


@torch.no_grad()
def regressor_forward(nets: Networks, response: np.ndarray) -> tuple[float, float]:
    nets.regressor.eval()
    x = torch.as_tensor(np.asarray(response), dtype=torch.float32).unsqueeze(0)
    k, l = nets.regressor(x)[0]
    return (float(k), float(l))


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_probes: int
    tolerance: float
    passed: bool
    worst: str = ""


def grad_check(
    loss_fn,
    params: list[torch.Tensor],
    probe_count: int = 50,
    tolerance: float = 1e-3,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of a deterministic scalar loss_fn() against
    central finite differences at probe_count randomly chosen parameter
    entries. Run the networks in double precision; the relative error uses a
    1e-6 denominator floor so exact zero gradients compare cleanly.
    """
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ValueError("no differentiable parameters given")

    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise ValueError(f"non-finite loss at probe point: {float(loss)}")
    if loss.requires_grad:
        loss.backward()
    analytic = [
        (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for p in params
    ]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=min(probe_count, total), replace=False)

    max_rel = 0.0
    worst = ""
    with torch.no_grad():
        for flat in np.sort(chosen):
            pi, off = 0, int(flat)
            while off >= sizes[pi]:
                off -= sizes[pi]
                pi += 1
            p = params[pi].view(-1)
            orig = float(p[off])
            h = 1e-5 * max(1.0, abs(orig))
            p[off] = orig + h
            lp = float(loss_fn())
            p[off] = orig - h
            lm = float(loss_fn())
            p[off] = orig
            fd = (lp - lm) / (2 * h)
            a = float(analytic[pi].view(-1)[off])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            if rel > max_rel:
                max_rel = rel
                worst = f"param {pi} index {off}: analytic {a:.6g} vs fd {fd:.6g}"
    return GradCheckReport(
        max_rel_error=max_rel,
        n_probes=len(chosen),
        tolerance=tolerance,
        passed=max_rel <= tolerance,
        worst=worst,
    )


class ToyGenerator(nn.Module):
    """Dense smooth generator emitting small non-negative images."""

    def __init__(self, latent_dim=4, cond_dim=COND_DIM, shape=(4, 4), hidden=32):
        super().__init__()
        self.shape = shape
        self.net = nn.Sequential(
            nn.Linear(latent_dim + cond_dim, hidden),
            nn.Tanh(),
            nn.Linear(hidden, shape[0] * shape[1]),
            nn.Softplus(),
        )

    def forward(self, z, c):
        return self.net(torch.cat([z, c], dim=1)).view(-1, *self.shape)


class ToyDiscriminator(nn.Module):
    def __init__(self, cond_dim=COND_DIM, shape=(4, 4), hidden=32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(shape[0] * shape[1] + cond_dim, hidden),
            nn.Tanh(),
            nn.Linear(hidden, 1),
        )

    def forward(self, x, c):
        h = self.net(torch.cat([x.flatten(1), c], dim=1))
        return torch.sigmoid(h)[:, 0]


class ToyRegressor(nn.Module):
    def __init__(self, shape=(4, 4), hidden=32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(shape[0] * shape[1], hidden),
            nn.Tanh(),
            nn.Linear(hidden, 2),
        )
        self.register_buffer("scale", torch.tensor([float(shape[0]), float(shape[1])]))

    def forward(self, x):
        return torch.sigmoid(self.net(x.flatten(1))) * self.scale


def build_toy_networks(
    seed: int = 0,
    latent_dim: int = 4,
    shape: tuple[int, int] = (4, 4),
    dtype: torch.dtype = torch.float64,
) -> Networks:
    """Double-precision toy triplet for finite-difference gradient checks."""
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    nets = Networks(
        generator=ToyGenerator(latent_dim=latent_dim, shape=shape).to(dtype),
        discriminator=ToyDiscriminator(shape=shape).to(dtype),
        regressor=ToyRegressor(shape=shape).to(dtype),
        config=None,
    )
    for name in ("generator", "discriminator", "regressor"):
        _seeded_init(nets.modules_by_name()[name], gen)
    return nets


def parameters_of(nets: Networks) -> list[torch.Tensor]:
    out: list[torch.Tensor] = []
    for name in ("generator", "discriminator", "regressor"):
        out.extend(nets.modules_by_name()[name].parameters())
    return out
