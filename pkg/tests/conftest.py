import time
from pathlib import Path

import pytest

from mgdun import checkpoint, cli, dataset
from mgdun.training import bicubic_psnr, model_psnr

# desk-scale training schedule shared by the smoke, ablation and determinism checks:
# 16 pairs at 32 x 32, scale 2, batch 4 for 50 epochs = 200 iterations at lr 1e-4
SMOKE = dict(seed=0, count=16, val_count=1, size=32, scale=2, lr=1e-4, batch_size=4, epochs=50,
             val_every=50)

ACCEPTANCE_LINES: list[str] = []


def record(line: str) -> None:
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def write_cfg(path: Path, **kv) -> str:
    path.write_text("".join(f"{k}={v}\n" for k, v in kv.items()))
    return str(path)


class SmokeRun:
    def __init__(self, out: Path, seconds: float):
        self.out = out
        self.seconds = seconds
        rows = [r.split(",") for r in (out / "loss.csv").read_text().splitlines()[1:]]
        self.losses = [float(r[1]) for r in rows]
        self.summary = dict(line.split("=", 1) for line in (out / "summary.txt").read_text().splitlines())
        self.initial_loss = float(self.summary["initial_loss"])
        self.final_loss = float(self.summary["final_loss"])
        self.model, _ = checkpoint.load(out / "final.ckpt")


@pytest.fixture(scope="session")
def smoke_root(tmp_path_factory):
    base = tmp_path_factory.mktemp("smoke")
    cfg = write_cfg(base / "synth.cfg", **SMOKE)
    assert cli.main(["synth", "--config", cfg, "--out", str(base / "data")]) == 0
    return base


@pytest.fixture(scope="session")
def smoke_data(smoke_root):
    return dataset.load(smoke_root / "data")


@pytest.fixture(scope="session")
def smoke_train(smoke_root):
    """Train once per distinct configuration and cache the run."""
    cache: dict[tuple, SmokeRun] = {}

    def run(tag: str = "", **overrides) -> SmokeRun:
        key = (tag,) + tuple(sorted(overrides.items()))
        if key not in cache:
            name = "_".join([tag or "run"] + [f"{k}{v}" for k, v in sorted(overrides.items())])
            kv = {**SMOKE, "data": smoke_root / "data", **overrides}
            cfg = write_cfg(smoke_root / f"{name}.cfg", **kv)
            t0 = time.perf_counter()
            assert cli.main(["train", "--config", cfg, "--out", str(smoke_root / name)]) == 0
            cache[key] = SmokeRun(smoke_root / name, time.perf_counter() - t0)
        return cache[key]

    return run


@pytest.fixture(scope="session")
def smoke_psnr(smoke_data):
    def held_out(run: SmokeRun) -> float:
        return model_psnr(run.model, smoke_data.val)
    held_out.bicubic = bicubic_psnr(smoke_data.val, smoke_data.scale)
    return held_out
