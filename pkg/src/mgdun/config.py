"""Flat ``key=value`` run configuration.

One assignment per line; ``#`` starts a comment; blank lines are ignored.
Unknown keys are rejected so typos never pass silently.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class RunConfig:
    # evaluation mode: "model" runs a checkpoint, "bicubic" the interpolation baseline
    mode: str = "model"
    seed: int = 0
    # data synthesis
    count: int = 16
    val_count: int = 1
    size: int = 32
    scale: int = 2
    sigma: float = 1.0
    noise_lr: float = 0.01
    noise_guide: float = 0.01
    guide_sigma: float = 0.5
    guide_gain: float = 0.8
    # classical solver
    eta: float = 1.0
    lambda1: float = 0.0
    lambda2: float = 0.0
    beta1: float = 1.0
    beta2: float = 1.0
    delta3: float = 0.0
    iters: int = 300
    # network
    T: int = 4
    inn_blocks: int = 2
    width: int = 64
    depth: int = 4
    guide: bool = True
    tail_gain: float = 0.07
    # training
    lr: float = 1e-5
    batch_size: int = 4
    epochs: int = 1
    val_every: int = 50
    # paths
    data: str = ""
    checkpoint: str = ""
    # eval sweeps: comma-separated lists; empty means no sweep
    sweep_T: str = ""
    sweep_inn_blocks: str = ""

    def __post_init__(self):
        if self.mode not in ("model", "bicubic"):
            raise ValueError(f"mode must be 'model' or 'bicubic', got {self.mode!r}")
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if self.count < 1 or self.val_count < 0:
            raise ValueError("count must be >= 1 and val_count >= 0")
        if self.size % self.scale:
            raise ValueError(f"size {self.size} not divisible by scale {self.scale}")

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


HELP = {
    "mode": "eval mode: model | bicubic",
    "seed": "master seed for data, initialization and batching",
    "count": "training pairs to synthesize",
    "val_count": "held-out pairs to synthesize",
    "size": "HR image side in pixels",
    "scale": "downsampling factor, 2 or 4",
    "sigma": "3x3 Gaussian blur width of the LR observation",
    "noise_lr": "noise std on the LR observation",
    "noise_guide": "noise std on the guide",
    "guide_sigma": "blur width of the linear cross-modal map",
    "guide_gain": "gain of the linear cross-modal map",
    "eta": "guide fidelity weight (classical)",
    "lambda1": "l1 weight on U (classical)",
    "lambda2": "l1 weight on V (classical)",
    "beta1": "U coupling weight (classical)",
    "beta2": "V coupling weight (classical)",
    "delta3": "Z step size; 0 selects 0.9/L (classical)",
    "iters": "classical iterations",
    "T": "unfolded stages",
    "inn_blocks": "coupling blocks in the cross-modal transform",
    "width": "denoiser feature width",
    "depth": "denoiser U-Net depth",
    "guide": "use the guide term (false freezes eta at 0)",
    "tail_gain": "init scale of every output conv",
    "lr": "Adam learning rate",
    "batch_size": "pairs per Adam step",
    "epochs": "passes over the training set",
    "val_every": "iterations between validations",
    "data": "dataset directory written by synth",
    "checkpoint": "checkpoint file for eval",
    "sweep_T": "eval sweep over stage counts, e.g. 2,3,4",
    "sweep_inn_blocks": "eval sweep over coupling block counts, e.g. 1,2,3",
}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ValueError(f"config key {name!r}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None
    return raw


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    kinds = {f.name: f.type for f in fields(RunConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in kinds:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        updates[key] = _coerce(key, kinds[key], value)
    return replace(base or RunConfig(), **updates)


def load(path: str | Path | None, **overrides) -> RunConfig:
    cfg = parse(Path(path).read_text()) if path else RunConfig()
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def parse_int_list(raw: str) -> list[int]:
    return [int(tok) for tok in raw.split(",") if tok.strip()]


def help_text() -> str:
    d = RunConfig()
    return "\n".join(f"  {name}={_format(getattr(d, name))}  {HELP[name]}" for name in HELP)
