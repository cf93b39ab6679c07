"""Linear observation operators and synthetic paired-contrast data.

Arrays are NCHW numpy arrays. Every operator preserves the dtype of its input,
so the float64 oracles in the solver and the tests run through the same code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE


def gaussian_kernel3(sigma: float) -> np.ndarray:
    """Normalized 3x3 samples of an isotropic Gaussian."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    d = np.arange(-1, 2, dtype=np.float64)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def identity_kernel3() -> np.ndarray:
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    return k


# ---------------------------------------------------------------------------
# reflect-padded correlation and its exact adjoint
# ---------------------------------------------------------------------------

def _correlate(z: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    h, w = z.shape[-2:]
    zp = np.pad(z, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode="reflect")
    out = np.zeros_like(z)
    k = kernel.astype(z.dtype)
    for i in range(kh):
        for j in range(kw):
            out += k[i, j] * zp[:, :, i:i + h, j:j + w]
    return out


def _reflect_pad_adjoint(gp: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Fold a gradient on the padded grid back onto the original grid."""
    g = gp.copy()
    # padded row i < ph mirrors original row ph - i; same on the far side
    for i in range(ph):
        g[:, :, 2 * ph - i, :] += g[:, :, i, :]
        g[:, :, -(2 * ph - i) - 1, :] += g[:, :, -i - 1, :]
    g = g[:, :, ph:g.shape[2] - ph, :]
    for j in range(pw):
        g[:, :, :, 2 * pw - j] += g[:, :, :, j]
        g[:, :, :, -(2 * pw - j) - 1] += g[:, :, :, -j - 1]
    return np.ascontiguousarray(g[:, :, :, pw:g.shape[3] - pw])


def _correlate_adjoint(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    h, w = g.shape[-2:]
    gp = np.zeros(g.shape[:2] + (h + 2 * ph, w + 2 * pw), dtype=g.dtype)
    k = kernel.astype(g.dtype)
    for i in range(kh):
        for j in range(kw):
            gp[:, :, i:i + h, j:j + w] += k[i, j] * g
    return _reflect_pad_adjoint(gp, ph, pw)


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DegradationOp:
    """Blur ``K`` (3x3 Gaussian, reflect boundary) followed by decimation ``D``."""

    sigma: float = 1.0
    scale: int = 2
    noise_std: float = 0.0

    def __post_init__(self):
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        gaussian_kernel3(self.sigma)

    @property
    def kernel(self) -> np.ndarray:
        return gaussian_kernel3(self.sigma)


def blur(z: np.ndarray, op: DegradationOp) -> np.ndarray:
    return _correlate(z, op.kernel)


def blur_adjoint(g: np.ndarray, op: DegradationOp) -> np.ndarray:
    return _correlate_adjoint(g, op.kernel)


def decimate(b: np.ndarray, scale: int) -> np.ndarray:
    """Keep the top-left sample of every scale x scale block."""
    return np.ascontiguousarray(b[:, :, ::scale, ::scale])


def decimate_adjoint(x: np.ndarray, scale: int) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, c, h * scale, w * scale), dtype=x.dtype)
    out[:, :, ::scale, ::scale] = x
    return out


def apply_dk(z: np.ndarray, op: DegradationOp) -> np.ndarray:
    h, w = z.shape[-2:]
    if h % op.scale or w % op.scale:
        raise ValueError(f"HR dims {(h, w)} not divisible by scale {op.scale}")
    return decimate(blur(z, op), op.scale)


def apply_dk_adjoint(x: np.ndarray, op: DegradationOp) -> np.ndarray:
    return blur_adjoint(decimate_adjoint(x, op.scale), op)


@dataclass(frozen=True)
class LinearCrossModalOp:
    """Fixed linear target-to-guide map: ``gain * (kernel correlated with z)``."""

    kernel: np.ndarray = field(default_factory=identity_kernel3)
    gain: float = 1.0
    noise_std: float = 0.0

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
            raise ValueError(f"cross-modal kernel must be 2-D with odd dims, got {k.shape}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        object.__setattr__(self, "kernel", k)

    @classmethod
    def gaussian(cls, sigma: float, gain: float = 1.0, noise_std: float = 0.0):
        return cls(gaussian_kernel3(sigma), gain, noise_std)


def apply_p(z: np.ndarray, op: LinearCrossModalOp) -> np.ndarray:
    return _correlate(z, op.kernel) * z.dtype.type(op.gain)


def apply_p_adjoint(y: np.ndarray, op: LinearCrossModalOp) -> np.ndarray:
    return _correlate_adjoint(y, op.kernel) * y.dtype.type(op.gain)


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------

def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _resample_matrix(n_in: int, n_out: int, factor: int, up: bool) -> np.ndarray:
    # LR sample i sits on HR pixel factor*i, the phase kept by `decimate`
    out = np.arange(n_out, dtype=np.float64)
    if up:
        src = out / factor
        support, stretch = 2.0, 1.0
    else:
        # widened kernel acts as the anti-aliasing filter
        src = out * factor
        support, stretch = 2.0 * factor, float(factor)
    first = np.floor(src - support).astype(int) + 1
    taps = first[:, None] + np.arange(int(2 * support))[None, :]
    weights = _cubic((src[:, None] - taps) / stretch)
    weights /= weights.sum(axis=1, keepdims=True)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.repeat(out.astype(int), taps.shape[1]), np.clip(taps, 0, n_in - 1).ravel()),
              weights.ravel())
    return m


def bicubic_resize(x: np.ndarray, factor: int, direction: str = "up") -> np.ndarray:
    """Separable Catmull-Rom (a = -0.5) resampling with replicated borders.

    The LR grid is anchored at the top-left HR pixel of each block, matching
    the decimation phase of :func:`apply_dk`.
    """
    if factor not in (2, 4):
        raise ValueError(f"factor must be 2 or 4, got {factor}")
    if direction not in ("up", "down"):
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    h, w = x.shape[-2:]
    up = direction == "up"
    if up:
        ho, wo = h * factor, w * factor
    else:
        if h % factor or w % factor:
            raise ValueError(f"dims {(h, w)} not divisible by {factor}")
        ho, wo = h // factor, w // factor
    mh = _resample_matrix(h, ho, factor, up).astype(x.dtype)
    mw = _resample_matrix(w, wo, factor, up).astype(x.dtype)
    return np.einsum("ij,ncjk,lk->ncil", mh, x, mw, optimize=True)


# ---------------------------------------------------------------------------
# synthetic problems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReconProblem:
    """LR target ``x`` on the h x w grid, HR guide ``y`` and optional HR truth ``z``."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray | None = None
    scale: int = 2

    def __post_init__(self):
        if self.x.ndim != 4 or self.y.ndim != 4:
            raise ValueError(f"x and y must be NCHW, got {self.x.shape} and {self.y.shape}")
        n, c, h, w = self.x.shape
        if self.y.shape != (n, c, h * self.scale, w * self.scale):
            raise ValueError(f"guide {self.y.shape} does not match LR {self.x.shape} at scale {self.scale}")
        if self.z is not None and self.z.shape != self.y.shape:
            raise ValueError(f"ground truth {self.z.shape} does not match guide {self.y.shape}")

    @property
    def hr_shape(self) -> tuple[int, ...]:
        return self.y.shape


@dataclass(frozen=True)
class PhantomSpec:
    """Random-ellipse tissue phantom rendered in two contrasts.

    Each contrast is an affine map of the integer tissue label, so the two
    renderings share their geometry exactly.
    """

    seed: int = 0
    size: tuple[int, int] = (32, 32)
    ellipses: int = 6
    labels: int = 5
    target_map: tuple[float, float] = (0.85, 0.05)
    guide_map: tuple[float, float] = (-0.75, 0.85)


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    # geometry and noise draw from independent streams so noise settings never move edges
    geo, noise = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(geo), np.random.default_rng(noise)


def phantom_labels(spec: PhantomSpec) -> np.ndarray:
    rng, _ = _streams(spec.seed)
    h, w = spec.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = (yy + 0.5) / h * 2 - 1
    xx = (xx + 0.5) / w * 2 - 1
    lab = np.zeros((h, w), dtype=np.int64)
    # head outline first so every phantom has a foreground body
    head = (xx / 0.85) ** 2 + (yy / 0.95) ** 2 <= 1.0
    lab[head] = 1
    for _ in range(spec.ellipses):
        cy, cx = rng.uniform(-0.5, 0.5, size=2)
        ay, ax = rng.uniform(0.1, 0.45, size=2)
        th = rng.uniform(0, np.pi)
        c, s = np.cos(th), np.sin(th)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        inside = ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0) & head
        lab[inside] = rng.integers(2, spec.labels)
    return lab


def render_contrast(labels: np.ndarray, n_labels: int, mapping: tuple[float, float]) -> np.ndarray:
    slope, intercept = mapping
    return np.clip(slope * labels / (n_labels - 1) + intercept, 0.0, 1.0)


def make_phantom(spec: PhantomSpec):
    """Return (target, guide) contrast images as (1, 1, H, W) float32 arrays."""
    lab = phantom_labels(spec)
    t = render_contrast(lab, spec.labels, spec.target_map)
    g = render_contrast(lab, spec.labels, spec.guide_map)
    return t[None, None].astype(DTYPE), g[None, None].astype(DTYPE)


def synth_problem(spec: PhantomSpec, op: DegradationOp, cross: LinearCrossModalOp) -> ReconProblem:
    z, _ = make_phantom(spec)
    _, noise = _streams(spec.seed)
    y = apply_p(z, cross)
    x = apply_dk(z, op)
    if cross.noise_std > 0:
        y = y + noise.normal(0.0, cross.noise_std, y.shape).astype(DTYPE)
    if op.noise_std > 0:
        x = x + noise.normal(0.0, op.noise_std, x.shape).astype(DTYPE)
    return ReconProblem(x=np.clip(x, 0, 1).astype(DTYPE), y=np.clip(y, 0, 1).astype(DTYPE),
                        z=z, scale=op.scale)
