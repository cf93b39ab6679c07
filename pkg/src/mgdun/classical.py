"""Half-quadratic splitting solved with proximal gradient steps.

Minimizes, over (Z, U, V),

    1/2 |X - DK Z|^2 + eta/2 |Y - P Z|^2 + beta1/2 |U - Z|^2 + beta2/2 |V - Z|^2
        + lambda1 |U|_1 + lambda2 |V|_1

by alternating one proximal-gradient step on U, one on V and one gradient
step on Z. ``cg_quadratic_oracle`` solves the regularizer-free case directly
through the normal equations and serves as an independent reference.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import degradation as deg
from .degradation import DegradationOp, LinearCrossModalOp, ReconProblem
from .metrics import psnr


class DivergenceError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Operators:
    """The two linear forward models and their adjoints."""

    dk: DegradationOp
    p: LinearCrossModalOp

    def apply_dk(self, z):
        return deg.apply_dk(z, self.dk)

    def apply_dk_t(self, x):
        return deg.apply_dk_adjoint(x, self.dk)

    def apply_p(self, z):
        return deg.apply_p(z, self.p)

    def apply_p_t(self, y):
        return deg.apply_p_adjoint(y, self.p)


@dataclass(frozen=True)
class SolverParams:
    """Weights and step sizes. ``None`` step sizes are filled by :func:`resolve_steps`."""

    eta: float = 1.0
    lambda1: float = 0.0
    lambda2: float = 0.0
    beta1: float = 1.0
    beta2: float = 1.0
    delta1: float | None = None
    delta2: float | None = None
    delta3: float | None = None
    iters: int = 50

    def __post_init__(self):
        for name in ("eta", "lambda1", "lambda2", "beta1", "beta2"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("delta1", "delta2", "delta3"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ValueError(f"{name} must be >= 0, got {v}")
        if self.iters < 0:
            raise ValueError(f"iters must be >= 0, got {self.iters}")


@dataclass
class HqsState:
    z: np.ndarray
    u: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class SolveResult:
    z: np.ndarray
    state: HqsState
    params: SolverParams
    trace: list[tuple[int, float, float]] = field(default_factory=list)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["iteration", "objective", "psnr"])
        for it, obj, p in self.trace:
            wr.writerow([it, repr(obj), "" if math.isnan(p) else repr(p)])
        return buf.getvalue()


def prox_l1(v: np.ndarray, threshold: float) -> np.ndarray:
    """Soft-thresholding, the proximal map of ``threshold * |.|_1``."""
    if threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    t = v.dtype.type(threshold)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0)


def update_u(state: HqsState, params: SolverParams) -> np.ndarray:
    d, b = state.u.dtype.type(params.delta1), state.u.dtype.type(params.beta1)
    return prox_l1(state.u - d * (b * (state.u - state.z)), params.delta1 * params.lambda1)


def update_v(state: HqsState, params: SolverParams) -> np.ndarray:
    d, b = state.v.dtype.type(params.delta2), state.v.dtype.type(params.beta2)
    return prox_l1(state.v - d * (b * (state.v - state.z)), params.delta2 * params.lambda2)


def grad_z(state: HqsState, problem: ReconProblem, ops: Operators, params: SolverParams) -> np.ndarray:
    z = state.z
    f = z.dtype.type
    x, y = problem.x.astype(z.dtype), problem.y.astype(z.dtype)
    g = ops.apply_dk_t(ops.apply_dk(z) - x)
    g = g + f(params.eta) * ops.apply_p_t(ops.apply_p(z) - y)
    g = g + f(params.beta1) * (z - state.u) + f(params.beta2) * (z - state.v)
    return g


def update_z(state: HqsState, problem: ReconProblem, ops: Operators, params: SolverParams) -> np.ndarray:
    return state.z - state.z.dtype.type(params.delta3) * grad_z(state, problem, ops, params)


def objective(state: HqsState, problem: ReconProblem, ops: Operators, params: SolverParams) -> float:
    """Splitting objective with l1 regularizers, accumulated in float64."""
    z = state.z.astype(np.float64)
    u = state.u.astype(np.float64)
    v = state.v.astype(np.float64)
    rx = problem.x.astype(np.float64) - ops.apply_dk(z)
    ry = problem.y.astype(np.float64) - ops.apply_p(z)
    val = 0.5 * np.sum(rx * rx) + 0.5 * params.eta * np.sum(ry * ry)
    val += 0.5 * params.beta1 * np.sum((u - z) ** 2) + 0.5 * params.beta2 * np.sum((v - z) ** 2)
    val += params.lambda1 * np.abs(u).sum() + params.lambda2 * np.abs(v).sum()
    return float(val)


def hessian_apply(z: np.ndarray, ops: Operators, params: SolverParams, with_splitting: bool = True):
    """Apply the Z-Hessian of the smooth part: (DK)^T DK + eta P^T P [+ (beta1 + beta2) I]."""
    out = ops.apply_dk_t(ops.apply_dk(z)) + params.eta * ops.apply_p_t(ops.apply_p(z))
    if with_splitting:
        out = out + (params.beta1 + params.beta2) * z
    return out


def lipschitz_bound(shape: tuple[int, ...], ops: Operators, params: SolverParams,
                    iters: int = 100, seed: int = 0) -> float:
    """Largest Hessian eigenvalue by power iteration (float64)."""
    v = np.random.default_rng(seed).standard_normal(shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = hessian_apply(v, ops, params)
        lam = float(np.vdot(v, w))
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
    return lam


def resolve_steps(problem: ReconProblem, ops: Operators, params: SolverParams) -> SolverParams:
    """Fill unset step sizes: delta1 = 1/beta1, delta2 = 1/beta2, delta3 = 0.9/L."""
    upd = {}
    if params.delta1 is None:
        upd["delta1"] = 1.0 / params.beta1 if params.beta1 > 0 else 0.0
    if params.delta2 is None:
        upd["delta2"] = 1.0 / params.beta2 if params.beta2 > 0 else 0.0
    if params.delta3 is None:
        lip = lipschitz_bound(problem.hr_shape, ops, params)
        upd["delta3"] = 0.9 / lip if lip > 0 else 0.0
    return replace(params, **upd) if upd else params


def initial_state(problem: ReconProblem) -> HqsState:
    z0 = deg.bicubic_resize(problem.x, problem.scale, "up")
    return HqsState(z=z0, u=z0.copy(), v=z0.copy(), t=0)


def solve(problem: ReconProblem, ops: Operators, params: SolverParams,
          init: HqsState | None = None) -> SolveResult:
    """Run ``params.iters`` rounds of (U, V, Z) updates from the bicubic start.

    The trace holds (iteration, objective, PSNR vs ground truth or NaN), with
    the objective evaluated after every Z update.
    """
    params = resolve_steps(problem, ops, params)
    state = initial_state(problem) if init is None else init

    def record():
        q = psnr(state.z, problem.z) if problem.z is not None else math.nan
        trace.append((state.t, objective(state, problem, ops, params), q))

    trace: list[tuple[int, float, float]] = []
    record()
    limit = 1e6 * max(trace[0][1], 1e-12)
    for _ in range(params.iters):
        state.u = update_u(state, params)
        state.v = update_v(state, params)
        state.z = update_z(state, problem, ops, params)
        state.t += 1
        record()
        obj = trace[-1][1]
        if not math.isfinite(obj) or obj > limit:
            raise DivergenceError(
                f"objective {obj:.3e} at iteration {state.t} exceeds 1e6 x initial "
                f"{trace[0][1]:.3e}; reduce delta3 (now {params.delta3:.3e})")
    return SolveResult(z=state.z, state=state, params=params, trace=trace)


def cg_solve(apply_a, b: np.ndarray, x0: np.ndarray | None = None,
             tol: float = 1e-8, maxiter: int | None = None) -> tuple[np.ndarray, float, int]:
    """Conjugate gradients for a symmetric positive definite operator.

    Stops when the residual norm drops below ``tol``; returns (x, residual, iterations).
    """
    x = np.zeros_like(b) if x0 is None else x0.copy()
    maxiter = 10 * b.size if maxiter is None else maxiter
    r = b - apply_a(x)
    p = r.copy()
    rr = float(np.vdot(r, r))
    for k in range(maxiter):
        if math.sqrt(rr) < tol:
            return x, math.sqrt(rr), k
        ap = apply_a(p)
        alpha = rr / float(np.vdot(p, ap))
        x += alpha * p
        r -= alpha * ap
        rr_new = float(np.vdot(r, r))
        p = r + (rr_new / rr) * p
        rr = rr_new
    res = float(np.linalg.norm(b - apply_a(x)))
    if res < tol:
        return x, res, maxiter
    raise ConvergenceError(f"CG did not reach residual {tol:g} in {maxiter} iterations (residual {res:.3e})")


def cg_quadratic_oracle(problem: ReconProblem, ops: Operators, params: SolverParams,
                        u: np.ndarray | None = None, v: np.ndarray | None = None,
                        tol: float = 1e-8) -> np.ndarray:
    """Direct float64 solution of the lambda = 0 quadratic via the normal equations.

    With ``u`` and ``v`` given, solves
    ((DK)^T DK + eta P^T P + (beta1 + beta2) I) Z = (DK)^T X + eta P^T Y + beta1 U + beta2 V.
    Without them it solves the joint minimizer over (Z, U, V), where U = V = Z
    and the splitting terms drop out.
    """
    if params.lambda1 != 0 or params.lambda2 != 0:
        raise ValueError("the quadratic oracle needs lambda1 = lambda2 = 0")
    x = problem.x.astype(np.float64)
    y = problem.y.astype(np.float64)
    split = u is not None or v is not None
    b = ops.apply_dk_t(x) + params.eta * ops.apply_p_t(y)
    if split:
        u = np.zeros_like(b) if u is None else u.astype(np.float64)
        v = np.zeros_like(b) if v is None else v.astype(np.float64)
        b = b + params.beta1 * u + params.beta2 * v
    x0 = deg.bicubic_resize(x, problem.scale, "up")
    z, _, _ = cg_solve(lambda q: hessian_apply(q, ops, params, with_splitting=split), b, x0, tol)
    return z
