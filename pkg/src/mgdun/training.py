"""End-to-end training: L1 loss, Adam and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as tn
from .degradation import bicubic_resize
from .metrics import psnr
from .network import MgdunModel, mgdun_forward
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 1
    seed: int = 0
    val_every: int = 50

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.val_every < 1:
            raise ValueError(f"val_every must be >= 1, got {self.val_every}")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class PairSet:
    """Stacked training triples: LR inputs, HR guides and HR targets, all NCHW."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        if not (len(self.x) == len(self.y) == len(self.z)):
            raise ValueError(f"pair counts differ: {len(self.x)}, {len(self.y)}, {len(self.z)}")
        if self.y.shape != self.z.shape:
            raise ValueError(f"guide {self.y.shape} and target {self.z.shape} differ in shape")

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "PairSet":
        return PairSet(self.x[idx], self.y[idx], self.z[idx])

    @classmethod
    def from_problems(cls, problems) -> "PairSet":
        return cls(np.concatenate([p.x for p in problems]),
                   np.concatenate([p.y for p in problems]),
                   np.concatenate([p.z for p in problems]))


@dataclass
class TrainResult:
    trace: list[tuple[int, float, float]]
    initial_loss: float
    final_loss: float
    best_val_psnr: float
    best_iter: int
    seconds: float

    def trace_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["iter", "loss", "val_psnr"])
        for it, loss, vp in self.trace:
            wr.writerow([it, repr(loss), "" if math.isnan(vp) else repr(vp)])
        return buf.getvalue()

    def summary_text(self) -> str:
        """Whole-set losses and best validation, one key=value per line (no timings, so it is reproducible)."""
        return (f"iterations={len(self.trace)}\ninitial_loss={self.initial_loss!r}\n"
                f"final_loss={self.final_loss!r}\nbest_val_psnr={self.best_val_psnr!r}\n"
                f"best_iter={self.best_iter}\n")


def l1_loss(pred: Tensor, gt) -> Tensor:
    """Mean absolute error over all elements."""
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.dtype))
    if pred.shape != gt.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {gt.shape}")
    return tn.mean_abs(pred - gt)


def adam_step(params: list[tuple[str, Tensor]], state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update in place; parameters without a gradient are skipped."""
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDivergence(f"non-finite gradient in {name} at Adam step {state.step + 1}")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params:
        if p.grad is None:
            continue
        g = p.grad
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient {g.shape} does not match parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data = (p.data - upd).astype(p.dtype)


def predict(model: MgdunModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    with tn.no_grad():
        return mgdun_forward(x, y, model).numpy()


def dataset_loss(model: MgdunModel, data: PairSet, batch_size: int = 4) -> float:
    """Mean L1 over the whole set, evaluated batch by batch."""
    total = 0.0
    for k in range(0, len(data), batch_size):
        b = data.subset(slice(k, k + batch_size))
        pred = predict(model, b.x, b.y)
        total += float(np.abs(pred.astype(np.float64) - b.z).sum())
    return total / data.z.size


def bicubic_psnr(data: PairSet, scale: int) -> float:
    return float(np.mean([psnr(bicubic_resize(data.x[i:i + 1], scale, "up"), data.z[i:i + 1])
                          for i in range(len(data))]))


def model_psnr(model: MgdunModel, data: PairSet) -> float:
    return float(np.mean([psnr(predict(model, data.x[i:i + 1], data.y[i:i + 1]), data.z[i:i + 1])
                          for i in range(len(data))]))


def _snapshot(model: MgdunModel) -> list[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def _restore(model: MgdunModel, snap: list[np.ndarray]) -> None:
    for p, arr in zip(model.parameters(), snap):
        p.data = arr.copy()


def train(cfg: TrainConfig, model: MgdunModel, data: PairSet, val: PairSet | None = None,
          out_dir: str | Path | None = None, adam: AdamState | None = None) -> TrainResult:
    """Train ``model`` in place for ``cfg.epochs`` passes over ``data``.

    Each epoch visits the pairs in a seeded random order, in batches of
    ``cfg.batch_size`` (the last batch may be short). The loss trace records
    the batch loss of every iteration and the validation PSNR every
    ``cfg.val_every`` iterations and at the end. On return the model holds the
    final weights; ``best.ckpt`` holds the weights with the best validation
    PSNR. A non-finite loss restores the last good weights, writes them to
    ``last_good.ckpt`` and raises :class:`TrainingDivergence`.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    adam = AdamState() if adam is None else adam
    params = model.trainable()
    rng = np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()

    initial_loss = dataset_loss(model, data, cfg.batch_size)
    trace: list[tuple[int, float, float]] = []
    best = (-math.inf, 0, _snapshot(model))

    def validate(it: int) -> float:
        nonlocal best
        if val is None:
            return math.nan
        vp = model_psnr(model, val)
        if vp > best[0]:
            best = (vp, it, _snapshot(model))
        return vp

    if val is not None:
        validate(0)
    per_epoch = math.ceil(len(data) / cfg.batch_size)
    total_iters = cfg.epochs * per_epoch
    it = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        for k in range(per_epoch):
            batch = data.subset(order[k * cfg.batch_size:(k + 1) * cfg.batch_size])
            good = _snapshot(model)
            model.zero_grad()
            loss = l1_loss(mgdun_forward(batch.x, batch.y, model), batch.z)
            lv = loss.item()
            if not math.isfinite(lv):
                _restore(model, good)
                if out is not None:
                    checkpoint.save(out / "last_good.ckpt", model, adam)
                raise TrainingDivergence(f"loss became {lv} at iteration {it + 1}; last good weights restored")
            loss.backward()
            adam_step(params, adam, cfg)
            it += 1
            vp = validate(it) if (it % cfg.val_every == 0 or it == total_iters) else math.nan
            trace.append((it, lv, vp))
            if it % cfg.val_every == 0:
                log.info("iter %d loss %.6f val_psnr %.4f", it, lv, vp)

    final_loss = dataset_loss(model, data, cfg.batch_size)
    if out is not None:
        checkpoint.save(out / "final.ckpt", model, adam)
        final = _snapshot(model)
        _restore(model, best[2])
        checkpoint.save(out / "best.ckpt", model)
        _restore(model, final)
    result = TrainResult(trace=trace, initial_loss=initial_loss, final_loss=final_loss,
                         best_val_psnr=best[0], best_iter=best[1], seconds=time.perf_counter() - t0)
    if out is not None:
        (out / "loss.csv").write_text(result.trace_csv())
        (out / "summary.txt").write_text(result.summary_text())
    return result
