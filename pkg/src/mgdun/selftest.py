"""Fast invariant suite behind ``mgdun selftest``.

Each check returns (passed, detail). ``run`` prints one line per property and
reports whether every property held. A named fault can be injected to prove
the suite catches it.
"""

from __future__ import annotations

import contextlib
import math
import time
from typing import Callable, Iterator

import numpy as np

from . import classical as cl
from . import degradation as deg
from . import gradcheck
from . import metrics
from . import tensor as tn
from .network import CrossModalTransform, MgdunModel, ModelConfig, mgdun_forward
from .tensor import Tensor

FAULTS = ("blur_adjoint",)


def adjoint_gap(forward: Callable, adjoint: Callable, in_shape, out_shape, rng) -> float:
    """Normalized dot-product test |<A u, w> - <u, A^T w>| / (|A u| |w|)."""
    u = rng.standard_normal(in_shape)
    w = rng.standard_normal(out_shape)
    au = forward(u)
    lhs = float(np.vdot(au, w))
    rhs = float(np.vdot(u, adjoint(w)))
    return abs(lhs - rhs) / max(np.linalg.norm(au) * np.linalg.norm(w), 1e-300)


def random_size(rng, lo: int = 16, hi: int = 64, multiple: int = 4) -> int:
    return int(rng.integers(lo // multiple, hi // multiple + 1)) * multiple


def check_adjoint_dk(pairs: int = 100, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        scale = int(rng.choice([2, 4]))
        op = deg.DegradationOp(sigma=float(rng.uniform(0.3, 2.0)), scale=scale)
        h, w = random_size(rng), random_size(rng)
        worst = max(worst, adjoint_gap(lambda z: deg.apply_dk(z, op), lambda x: deg.apply_dk_adjoint(x, op),
                                       (1, 1, h, w), (1, 1, h // scale, w // scale), rng))
    return worst < 1e-5, f"max normalized gap {worst:.2e} over {pairs} pairs"


def check_adjoint_p(pairs: int = 100, seed: int = 1) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        op = deg.LinearCrossModalOp.gaussian(float(rng.uniform(0.3, 2.0)), float(rng.uniform(0.2, 2.0)))
        h, w = random_size(rng), random_size(rng)
        worst = max(worst, adjoint_gap(lambda z: deg.apply_p(z, op), lambda y: deg.apply_p_adjoint(y, op),
                                       (1, 1, h, w), (1, 1, h, w), rng))
    return worst < 1e-5, f"max normalized gap {worst:.2e} over {pairs} pairs"


def random_inn(rng: np.random.Generator) -> CrossModalTransform:
    """A randomly sized transform whose subnet output scale is drawn from [0.05, 0.5]."""
    return CrossModalTransform(rng, channels=1, num_blocks=int(rng.integers(1, 4)),
                               hidden=int(rng.choice([8, 16, 32])), tail_gain=float(rng.uniform(0.05, 0.5)))


def inn_roundtrip_error(draws: int, seed: int = 0, dtype=np.float32) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    with tn.no_grad():
        for _ in range(draws):
            inn = random_inn(rng)
            if dtype != np.float32:
                for _, p in inn.parameters():
                    p.data = p.data.astype(dtype)
            size = 2 * int(rng.integers(1, 33))
            z = Tensor(rng.uniform(0, 1, (1, 1, size, size)).astype(dtype))
            back = inn.inverse(inn.forward(z))
            worst = max(worst, float(np.abs(back.data - z.data).max()))
    return worst


def check_inn_roundtrip(draws: int = 1000) -> tuple[bool, str]:
    err = inn_roundtrip_error(draws)
    return err < 1e-4, f"max |P^-1(P(z)) - z| = {err:.2e} over {draws} draws"


def layer_grad_errors(seed: int = 0) -> dict[str, float]:
    """Autodiff vs central differences for every op, in float64."""
    rng = np.random.default_rng(seed)

    def t(*shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)

    x, wgt, b = t(2, 3, 6, 6), t(4, 3, 3, 3), t(4)
    a, c = t(1, 2, 4, 4), t(1, 2, 4, 4)
    pos = t(1, 2, 4, 4, lo=0.2, hi=1.0)

    def weighted(out: Tensor) -> Tensor:
        # a fixed random projection so every output element carries a distinct weight
        r = np.random.default_rng(99).standard_normal(out.shape)
        return tn.total(out * Tensor(r))

    cases = {
        "conv2d": (lambda: weighted(tn.conv2d(x, wgt, b, padding=1)), [x, wgt, b]),
        "add_sub": (lambda: weighted(tn.sub(tn.add(a, c), tn.scalar_mul(c, 0.5))), [a, c]),
        "hadamard": (lambda: weighted(tn.hadamard(a, c)), [a, c]),
        "exp": (lambda: weighted(tn.exp(a)), [a]),
        "relu": (lambda: weighted(tn.relu(a)), [a]),
        "clamp": (lambda: weighted(tn.clamp(a, -0.5, 0.5)), [a]),
        "negate": (lambda: weighted(tn.negate(a)), [a]),
        "mean_abs": (lambda: tn.mean_abs(a), [a]),
        "concat_slice": (lambda: weighted(tn.channel_slice(tn.concat([a, pos]), 1, 3)), [a, pos]),
        "maxpool2": (lambda: weighted(tn.maxpool2(a)), [a]),
        "upsample": (lambda: weighted(tn.upsample_nearest2(a)), [a]),
        "pixel_shuffle": (lambda: weighted(tn.pixel_shuffle2(tn.concat([a, c]))), [a, c]),
        "pixel_unshuffle": (lambda: weighted(tn.pixel_unshuffle2(a)), [a]),
    }
    return {name: gradcheck.check(fn, params, rng, samples=4) for name, (fn, params) in cases.items()}


def check_layer_grads() -> tuple[bool, str]:
    errs = layer_grad_errors()
    worst = max(errs, key=errs.get)
    return all(e < 1e-3 for e in errs.values()), f"worst {worst} rel err {errs[worst]:.2e}"


def tiny_model(T: int = 1, seed: int = 0, tail_gain: float = 0.5) -> MgdunModel:
    return MgdunModel(ModelConfig(T=T, scale=2, width=4, depth=2, inn_blocks=1, inn_hidden=4,
                                  block_width=4, tail_gain=tail_gain, seed=seed)).to_dtype(np.float64)


def end_to_end_grad_error(n_params: int = 20, seed: int = 0) -> float:
    """T = 1 on 16 x 16 in float64; ``n_params`` random scalar entries of the parameter set."""
    rng = np.random.default_rng(seed)
    model = tiny_model()
    prob = deg.synth_problem(deg.PhantomSpec(seed=seed, size=(16, 16)), deg.DegradationOp(scale=2),
                             deg.LinearCrossModalOp.gaussian(0.5, 0.8))
    x, y, z = (a.astype(np.float64) for a in (prob.x, prob.y, prob.z))
    # a smooth loss keeps the probe away from the kinks of |.|
    target = Tensor(z)

    def loss() -> Tensor:
        d = mgdun_forward(x, y, model) - target
        return tn.total(d * d)

    named = model.named_parameters()
    model.zero_grad()
    loss().backward()
    worst = 0.0
    for k in rng.choice(len(named), size=n_params, replace=n_params > len(named)):
        _, p = named[int(k)]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        num = gradcheck.numeric_partial(lambda: loss().item(), p, idx)
        worst = max(worst, gradcheck.rel_err(float(p.grad[idx]), num))
    return worst


def check_end_to_end_grad() -> tuple[bool, str]:
    err = end_to_end_grad_error()
    return err < 1e-2, f"max rel err {err:.2e} over 20 parameters (T=1, 16x16)"


def pgd_problem(scale: int, seed: int = 0, size: int = 32):
    dk = deg.DegradationOp(sigma=1.0, scale=scale, noise_std=0.01)
    p = deg.LinearCrossModalOp.gaussian(0.5, 0.8, 0.01)
    prob = deg.synth_problem(deg.PhantomSpec(seed=seed, size=(size, size)), dk, p)
    prob = deg.ReconProblem(x=prob.x.astype(np.float64), y=prob.y.astype(np.float64),
                            z=prob.z.astype(np.float64), scale=scale)
    return prob, cl.Operators(dk, p)


def pgd_oracle_gap(scale: int, iters: int = 300) -> tuple[float, float]:
    """(relative gap to the CG oracle, largest objective increase) at lambda = 0."""
    prob, ops = pgd_problem(scale)
    params = cl.SolverParams(eta=1.0, beta1=1.0, beta2=1.0, iters=iters)
    res = cl.solve(prob, ops, params)
    ref = cl.cg_quadratic_oracle(prob, ops, params)
    gap = float(np.linalg.norm(res.z - ref) / np.linalg.norm(ref))
    objs = [o for _, o, _ in res.trace]
    rise = max(b - a for a, b in zip(objs, objs[1:]))
    return gap, rise


def check_pgd_oracle() -> tuple[bool, str]:
    out = []
    ok = True
    for s in (2, 4):
        gap, rise = pgd_oracle_gap(s)
        ok &= gap < 1e-3 and rise <= 1e-8
        out.append(f"x{s}: gap {gap:.2e}, max rise {rise:.1e}")
    return ok, "; ".join(out)


def check_metric_identities() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 1, (1, 1, 24, 24))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    checks = {
        "psnr(a,a)=inf": metrics.psnr(a, a) == math.inf,
        "ssim(a,a)=1": metrics.ssim(a, a) == 1.0,
        "rmse255(a,a)=0": metrics.rmse255(a, a) == 0.0,
        "psnr symmetric": metrics.psnr(a, b) == metrics.psnr(b, a),
        "ssim symmetric": metrics.ssim(a, b) == metrics.ssim(b, a),
        "psnr<->rmse255": abs(metrics.psnr(a, b) - 20 * math.log10(255.0 / metrics.rmse255(a, b))) < 1e-6,
    }
    bad = [k for k, v in checks.items() if not v]
    return not bad, "all hold" if not bad else f"failed: {', '.join(bad)}"


def check_checkpoint_roundtrip() -> tuple[bool, str]:
    from . import checkpoint

    model = tiny_model(T=2).to_dtype(np.float32)
    blob = checkpoint.to_bytes(model)
    again, _ = checkpoint.from_bytes(blob)
    same = checkpoint.to_bytes(again) == blob
    return same, "save -> load -> save byte-identical" if same else "bytes differ after round trip"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "adjoint_dk": check_adjoint_dk,
    "adjoint_p": check_adjoint_p,
    "inn_roundtrip": check_inn_roundtrip,
    "layer_gradients": check_layer_grads,
    "end_to_end_gradient": check_end_to_end_grad,
    "pgd_vs_cg": check_pgd_oracle,
    "metric_identities": check_metric_identities,
    "checkpoint_roundtrip": check_checkpoint_roundtrip,
}


def _broken_reflect_pad_adjoint(gp: np.ndarray, ph: int, pw: int) -> np.ndarray:
    # drops the folded border instead of adding it back
    return gp[..., ph:gp.shape[-2] - ph, pw:gp.shape[-1] - pw].copy()


@contextlib.contextmanager
def injected(fault: str | None) -> Iterator[None]:
    if fault is None:
        yield
        return
    if fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; known: {', '.join(FAULTS)}")
    saved = deg._reflect_pad_adjoint
    deg._reflect_pad_adjoint = _broken_reflect_pad_adjoint
    try:
        yield
    finally:
        deg._reflect_pad_adjoint = saved


def run(fault: str | None = None, only: list[str] | None = None, echo=print) -> bool:
    names = only or list(CHECKS)
    passed = True
    with injected(fault):
        for name in names:
            t0 = time.perf_counter()
            try:
                ok, detail = CHECKS[name]()
            except Exception as exc:  # a crash is a failed property, not a crashed suite
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            passed &= ok
            echo(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
    return passed
