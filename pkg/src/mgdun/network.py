"""The unfolded reconstruction network.

Each of the T stages refines two auxiliary estimates with a shared U-Net
denoiser and then takes one learned gradient step on the HR estimate:

    U <- DM(U + xi1 Z)
    V <- DM(V + xi2 Z)
    Z <- Z - delta3 * (Up(Down(Z) - X) + eta * P^-1(P(Z) - Y) + beta1 (Z - U) + beta2 (Z - V))

``P`` is an invertible coupling network acting on pixel-unshuffled images; its
closed-form inverse stands in for the transpose.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .degradation import bicubic_resize
from .tensor import Tensor

log = logging.getLogger(__name__)

EXP_CLAMP = 10.0
STAGE_INIT = {"delta3": 0.1, "eta": 0.1, "beta1": 0.5, "beta2": 0.5, "xi1": 0.1, "xi2": 0.1}


class Conv:
    """3x3 (or k x k) zero-padded convolution, shape preserving."""

    def __init__(self, rng: np.random.Generator, in_c: int, out_c: int, k: int = 3, gain: float = 1.0):
        self.weight = tn.parameter(gain * tn.he_uniform(rng, (out_c, in_c, k, k)))
        self.bias = tn.parameter(np.zeros(out_c))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.conv2d(x, self.weight, self.bias, padding=self.weight.shape[-1] // 2)

    def parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class Denoiser:
    """U-Net with ``depth`` two-conv encoder blocks, mirrored decoder and a residual skip."""

    def __init__(self, rng: np.random.Generator, channels: int = 1, width: int = 64, depth: int = 4,
                 tail_gain: float = 1.0):
        if depth < 1:
            raise ValueError(f"depth must be >= 1, got {depth}")
        self.channels, self.width, self.depth = channels, width, depth
        self.enc = [(Conv(rng, channels if k == 0 else width, width), Conv(rng, width, width))
                    for k in range(depth)]
        self.dec = [(Conv(rng, 2 * width, width),
                     Conv(rng, width, channels, gain=tail_gain) if k == 0 else Conv(rng, width, width))
                    for k in range(depth)]

    def effective_depth(self, h: int, w: int) -> int:
        d = self.depth
        while d > 0 and (h % 2 ** d or w % 2 ** d):
            d -= 1
        if d < self.depth:
            log.warning("denoiser depth reduced from %d to %d for %dx%d input", self.depth, d, h, w)
        return d

    def __call__(self, inp: Tensor) -> Tensor:
        if inp.shape[1] != self.channels:
            raise ValueError(f"denoiser expects {self.channels} channels, got input {inp.shape}")
        d = self.effective_depth(*inp.shape[2:])
        skips = []
        h = inp
        for k in range(d):
            c1, c2 = self.enc[k]
            h = tn.relu(c2(tn.relu(c1(h))))
            skips.append(h)
            h = tn.maxpool2(h)
        if d == 0:
            c1, c2 = self.enc[0]
            h = tn.relu(c2(tn.relu(c1(h))))
            skips.append(h)
        for k in reversed(range(max(d, 1))):
            h = tn.upsample_nearest2(h) if d else h
            c1, c2 = self.dec[k]
            h = tn.relu(c1(tn.concat([h, skips[k]])))
            h = c2(h)
            if k > 0:
                h = tn.relu(h)
        return tn.add(inp, h)

    def parameters(self, prefix: str = "denoiser"):
        for k, (c1, c2) in enumerate(self.enc):
            yield from c1.parameters(f"{prefix}.enc{k}.conv0")
            yield from c2.parameters(f"{prefix}.enc{k}.conv1")
        for k, (c1, c2) in enumerate(self.dec):
            yield from c1.parameters(f"{prefix}.dec{k}.conv0")
            yield from c2.parameters(f"{prefix}.dec{k}.conv1")


class Subnet:
    """conv -> ReLU -> conv; one of the arbitrary coupling functions."""

    def __init__(self, rng: np.random.Generator, channels: int, hidden: int, tail_gain: float = 1.0):
        self.c1 = Conv(rng, channels, hidden)
        self.c2 = Conv(rng, hidden, channels, gain=tail_gain)

    def __call__(self, x: Tensor) -> Tensor:
        return self.c2(tn.relu(self.c1(x)))

    def parameters(self, prefix: str):
        yield from self.c1.parameters(f"{prefix}.conv0")
        yield from self.c2.parameters(f"{prefix}.conv1")


class CouplingBlock:
    def __init__(self, rng: np.random.Generator, half: int, hidden: int, tail_gain: float = 1.0):
        self.phi = Subnet(rng, half, hidden, tail_gain)
        self.rho = Subnet(rng, half, hidden, tail_gain)
        self.tau = Subnet(rng, half, hidden, tail_gain)

    def log_scale(self, t1: Tensor) -> Tensor:
        return tn.clamp(self.rho(t1), -EXP_CLAMP, EXP_CLAMP)

    def forward(self, z1: Tensor, z2: Tensor) -> tuple[Tensor, Tensor]:
        t1 = z1 + self.phi(z2)
        t2 = z2 * tn.exp(self.log_scale(t1)) + self.tau(t1)
        return t1, t2

    def inverse(self, t1: Tensor, t2: Tensor) -> tuple[Tensor, Tensor]:
        z2 = (t2 - self.tau(t1)) * tn.exp(-self.log_scale(t1))
        z1 = t1 - self.phi(z2)
        return z1, z2

    def parameters(self, prefix: str):
        yield from self.phi.parameters(f"{prefix}.phi")
        yield from self.rho.parameters(f"{prefix}.rho")
        yield from self.tau.parameters(f"{prefix}.tau")


class CrossModalTransform:
    """Pixel-unshuffle, a stack of affine coupling blocks, pixel-shuffle."""

    def __init__(self, rng: np.random.Generator, channels: int = 1, num_blocks: int = 2, hidden: int = 32,
                 tail_gain: float = 1.0):
        self.channels = channels
        self.half = 2 * channels
        self.blocks = [CouplingBlock(rng, self.half, hidden, tail_gain) for _ in range(num_blocks)]

    def _split(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[1] != self.channels:
            raise ValueError(f"cross-modal transform expects {self.channels} channels, got {x.shape}")
        return tn.split_channels(tn.pixel_unshuffle2(x), self.half)

    def forward(self, z: Tensor) -> Tensor:
        a, b = self._split(z)
        for blk in self.blocks:
            a, b = blk.forward(a, b)
        return tn.pixel_shuffle2(tn.concat([a, b]))

    def inverse(self, t: Tensor) -> Tensor:
        a, b = self._split(t)
        for blk in reversed(self.blocks):
            a, b = blk.inverse(a, b)
        return tn.pixel_shuffle2(tn.concat([a, b]))

    def parameters(self, prefix: str = "inn"):
        for k, blk in enumerate(self.blocks):
            yield from blk.parameters(f"{prefix}.block{k}")


class DownBlock:
    """conv(C -> width), log2(scale) max-pools, conv(width -> width), conv(width -> C)."""

    def __init__(self, rng: np.random.Generator, channels: int, scale: int, width: int = 64,
                 tail_gain: float = 1.0):
        self.levels = int(round(math.log2(scale)))
        self.head = Conv(rng, channels, width)
        self.mid = Conv(rng, width, width)
        self.tail = Conv(rng, width, channels, gain=tail_gain)

    def __call__(self, z: Tensor) -> Tensor:
        h = self.head(z)
        for _ in range(self.levels):
            h = tn.maxpool2(h)
        return self.tail(self.mid(h))

    def parameters(self, prefix: str = "down"):
        yield from self.head.parameters(f"{prefix}.conv0")
        yield from self.mid.parameters(f"{prefix}.conv1")
        yield from self.tail.parameters(f"{prefix}.conv2")


class UpBlock(DownBlock):
    """conv(C -> width), log2(scale) nearest upsamplings, conv(width -> width), conv(width -> C)."""

    def __call__(self, x: Tensor) -> Tensor:
        h = self.head(x)
        for _ in range(self.levels):
            h = tn.upsample_nearest2(h)
        return self.tail(self.mid(h))

    def parameters(self, prefix: str = "up"):
        yield from super().parameters(prefix)


class StageParams:
    """Learnable per-stage scalars, each held as a (1, 1, 1, 1) tensor."""

    NAMES = ("xi1", "xi2", "delta3", "eta", "beta1", "beta2")

    def __init__(self, **values: float):
        for name in self.NAMES:
            setattr(self, name, tn.parameter(np.full((1, 1, 1, 1), values.get(name, STAGE_INIT[name]))))

    def parameters(self, prefix: str):
        for name in self.NAMES:
            yield f"{prefix}.{name}", getattr(self, name)

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name).item() for name in self.NAMES}


@dataclass(frozen=True)
class ModelConfig:
    T: int = 4
    scale: int = 2
    channels: int = 1
    width: int = 64
    depth: int = 4
    inn_blocks: int = 2
    inn_hidden: int = 32
    block_width: int = 64
    guide: bool = True
    tail_gain: float = 0.07
    seed: int = 0

    def __post_init__(self):
        if self.T < 0:
            raise ValueError(f"T must be >= 0, got {self.T}")
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if self.inn_blocks < 1:
            raise ValueError(f"inn_blocks must be >= 1, got {self.inn_blocks}")


class MgdunModel:
    """All learnable parameters plus the architecture settings needed to rebuild them."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        g = cfg.tail_gain
        self.denoiser = Denoiser(rng, cfg.channels, cfg.width, cfg.depth, g)
        self.inn = CrossModalTransform(rng, cfg.channels, cfg.inn_blocks, cfg.inn_hidden, g)
        self.down = DownBlock(rng, cfg.channels, cfg.scale, cfg.block_width, g)
        self.up = UpBlock(rng, cfg.channels, cfg.scale, cfg.block_width, g)
        self.stages = [StageParams() for _ in range(cfg.T)]
        if not cfg.guide:
            for st in self.stages:
                st.eta.data[...] = 0
                st.eta.requires_grad = False

    @property
    def T(self) -> int:
        return self.cfg.T

    @property
    def scale(self) -> int:
        return self.cfg.scale

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Every tensor in the parameter set, in a fixed order; the denoiser appears once."""
        out = list(self.denoiser.parameters("denoiser"))
        out += list(self.inn.parameters("inn"))
        out += list(self.down.parameters("down"))
        out += list(self.up.parameters("up"))
        for t, st in enumerate(self.stages):
            out += list(st.parameters(f"stage{t}"))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype) -> "MgdunModel":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


# ---------------------------------------------------------------------------
# stage operations
# ---------------------------------------------------------------------------

def denoise_module(prev: Tensor, z: Tensor, xi: Tensor | float, w: Denoiser) -> Tensor:
    """Refine an auxiliary variable: DM(prev + xi * z)."""
    if prev.shape != z.shape:
        raise ValueError(f"denoise_module: shape mismatch {prev.shape} vs {z.shape}")
    return w(prev + z * xi)


def inn_forward(z: Tensor, p: CrossModalTransform) -> Tensor:
    return p.forward(z)


def inn_backward(t: Tensor, p: CrossModalTransform) -> Tensor:
    return p.inverse(t)


def down_block(z: Tensor, w: DownBlock) -> Tensor:
    return w(z)


def up_block(x: Tensor, w: UpBlock) -> Tensor:
    return w(x)


def recon_step(z: Tensor, x: Tensor, y: Tensor, u: Tensor, v: Tensor,
               stage: StageParams, model: MgdunModel) -> Tensor:
    """One learned gradient step on the HR estimate."""
    if not (z.shape == y.shape == u.shape == v.shape):
        raise ValueError(f"recon_step: HR shapes differ: z {z.shape}, y {y.shape}, u {u.shape}, v {v.shape}")
    lr_res = model.down(z) - x
    step = model.up(lr_res)
    if model.cfg.guide:
        guide_res = model.inn.forward(z) - y
        step = step + model.inn.inverse(guide_res) * stage.eta
    step = step + (z - u) * stage.beta1 + (z - v) * stage.beta2
    return z - step * stage.delta3


def check_inputs(x: np.ndarray, y: np.ndarray, model: MgdunModel) -> None:
    s = model.scale
    n, c, h, w = x.shape
    if y.shape != (n, c, h * s, w * s):
        raise ValueError(f"guide {y.shape} does not match LR input {x.shape} at scale {s}")
    if c != model.cfg.channels:
        raise ValueError(f"model expects {model.cfg.channels} channels, got {c}")
    m = 2 ** model.cfg.depth
    if (h * s) % m or (w * s) % m:
        raise ValueError(f"HR dims {(h * s, w * s)} must be divisible by {m} (denoiser depth {model.cfg.depth})")


def mgdun_forward(x, y, model: MgdunModel) -> Tensor:
    """Run all T stages from the bicubic start; returns the final HR estimate."""
    x = np.asarray(getattr(x, "data", x))
    y = np.asarray(getattr(y, "data", y))
    check_inputs(x, y, model)
    dtype = model.denoiser.enc[0][0].weight.dtype
    x_t, y_t = Tensor(x.astype(dtype)), Tensor(y.astype(dtype))
    z0 = bicubic_resize(x.astype(dtype), model.scale, "up")
    z = u = v = Tensor(z0)
    for stage in model.stages:
        u = denoise_module(u, z, stage.xi1, model.denoiser)
        v = denoise_module(v, z, stage.xi2, model.denoiser)
        z = recon_step(z, x_t, y_t, u, v, stage, model)
    return z
