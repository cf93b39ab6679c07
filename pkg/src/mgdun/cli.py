"""Command-line entry point: ``mgdun {synth,classical,train,eval,selftest}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint, classical as cl, config, dataset, metrics, mgt, selftest
from .degradation import bicubic_resize
from .network import MgdunModel, ModelConfig
from .training import PairSet, TrainConfig, TrainingDivergence, predict, train

log = logging.getLogger("mgdun")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def prepare_out(out: Path, force: bool) -> Path:
    """Refuse to write into a non-empty directory unless ``force`` is set."""
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty; pass --force to reuse it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(cfg: config.RunConfig, out: Path, command: str) -> None:
    cfg.write(out / "config.txt")
    print(f"[{command}] seed={cfg.seed} effective config written to {out / 'config.txt'}")


def model_config(cfg: config.RunConfig, **over) -> ModelConfig:
    base = dict(T=cfg.T, scale=cfg.scale, inn_blocks=cfg.inn_blocks, width=cfg.width, depth=cfg.depth,
                guide=cfg.guide, tail_gain=cfg.tail_gain, seed=cfg.seed)
    base.update(over)
    return ModelConfig(**base)


def train_config(cfg: config.RunConfig) -> TrainConfig:
    return TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, epochs=cfg.epochs, seed=cfg.seed,
                       val_every=cfg.val_every)


def need_data(cfg: config.RunConfig) -> dataset.Dataset:
    if not cfg.data:
        raise UsageError("config key 'data' must point at a dataset directory written by 'mgdun synth'")
    ds = dataset.load(cfg.data)
    if ds.scale != cfg.scale:
        raise UsageError(f"dataset scale {ds.scale} differs from config scale {cfg.scale}")
    return ds


def held_out(ds: dataset.Dataset) -> PairSet:
    if len(ds.val) == 0:
        raise UsageError("dataset has no held-out pairs (val_count=0)")
    return ds.val


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: config.RunConfig, out: Path) -> int:
    manifest = dataset.write(cfg, out)
    print(f"[synth] {cfg.count} train + {cfg.val_count} val triples, HR {cfg.size}x{cfg.size}, "
          f"LR {cfg.size // cfg.scale}x{cfg.size // cfg.scale}, noiseless={str(manifest['noiseless']).lower()}")
    return EXIT_OK


def cmd_classical(cfg: config.RunConfig, out: Path) -> int:
    ds = need_data(cfg)
    dk, p = dataset.operators(cfg)
    ops = cl.Operators(dk, p)
    params = cl.SolverParams(eta=cfg.eta, lambda1=cfg.lambda1, lambda2=cfg.lambda2, beta1=cfg.beta1,
                             beta2=cfg.beta2, delta3=cfg.delta3 if cfg.delta3 > 0 else None, iters=cfg.iters)
    quadratic = cfg.lambda1 == 0 and cfg.lambda2 == 0
    rows = [["image", "psnr_db", "ssim", "rmse255", "bicubic_psnr_db", "oracle_gap"]]
    report, bic = metrics.MetricReport(), metrics.MetricReport()
    for split, pairs in (("train", ds.train), ("val", ds.val)):
        for i, prob in enumerate(dataset.problems(pairs, cfg.scale)):
            name = f"{split}_{i:04d}"
            prob64 = replace(prob, x=prob.x.astype(np.float64), y=prob.y.astype(np.float64),
                             z=prob.z.astype(np.float64))
            try:
                res = cl.solve(prob64, ops, params)
            except cl.DivergenceError as exc:
                print(f"[classical] {name}: diverged: {exc}", file=sys.stderr)
                return EXIT_FAIL
            mgt.save(out / f"{name}_zhat.mgt", res.z)
            mgt.write_pgm16(out / f"{name}_zhat.pgm", res.z)
            (out / f"{name}_trace.csv").write_text(res.trace_csv())
            report.add(name, res.z, prob64.z)
            bic.add(name, bicubic_resize(prob64.x, cfg.scale, "up"), prob64.z)
            gap = ""
            if quadratic:
                ref = cl.cg_quadratic_oracle(prob64, ops, res.params)
                gap = f"{np.linalg.norm(res.z - ref) / np.linalg.norm(ref):.6e}"
            rows.append([name, f"{report.psnr_db[-1]:.6f}", f"{report.ssim[-1]:.6f}",
                         f"{report.rmse255[-1]:.6f}", f"{bic.psnr_db[-1]:.6f}", gap])
    (out / "report.csv").write_text("".join(",".join(r) + "\n" for r in rows))
    print(report.table(f"classical solver, {cfg.iters} iterations"))
    print(f"bicubic mean PSNR {bic.mean_psnr:.4f} dB")
    if quadratic:
        print(f"max oracle gap {max(float(r[5]) for r in rows[1:]):.3e}")
    return EXIT_OK


def cmd_train(cfg: config.RunConfig, out: Path) -> int:
    ds = need_data(cfg)
    model = MgdunModel(model_config(cfg))
    val = ds.val if len(ds.val) else None
    try:
        res = train(train_config(cfg), model, ds.train, val, out_dir=out)
    except TrainingDivergence as exc:
        print(f"[train] diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"[train] {len(res.trace)} iterations in {res.seconds:.1f}s; "
          f"L1 {res.initial_loss:.6f} -> {res.final_loss:.6f}; best val PSNR {res.best_val_psnr:.4f} dB "
          f"at iteration {res.best_iter}")
    return EXIT_OK


def evaluate(pred_fn, pairs: PairSet, name: str) -> metrics.MetricReport:
    rep = metrics.MetricReport()
    for i in range(len(pairs)):
        rep.add(f"{name}_{i:04d}", pred_fn(pairs.x[i:i + 1], pairs.y[i:i + 1]), pairs.z[i:i + 1])
    return rep


def _summary_row(label: str, rep: metrics.MetricReport) -> str:
    return f"{label},{rep.mean_psnr:.6f},{rep.mean_ssim:.6f},{rep.mean_rmse255:.6f}\n"


def cmd_eval(cfg: config.RunConfig, out: Path) -> int:
    ds = need_data(cfg)
    val = held_out(ds)
    bicubic = lambda x, y: bicubic_resize(x, cfg.scale, "up")  # noqa: E731
    bic = evaluate(bicubic, val, "val")
    sweep_t = config.parse_int_list(cfg.sweep_T)
    sweep_b = config.parse_int_list(cfg.sweep_inn_blocks)
    lines = ["config,psnr_db,ssim,rmse255\n", _summary_row("bicubic", bic)]
    if sweep_t or sweep_b:
        for t in sweep_t or [cfg.T]:
            for b in sweep_b or [cfg.inn_blocks]:
                model = MgdunModel(model_config(cfg, T=t, inn_blocks=b))
                run_dir = out / f"T{t}_blocks{b}"
                train(train_config(cfg), model, ds.train, val, out_dir=run_dir)
                rep = evaluate(lambda x, y: predict(model, x, y), val, "val")
                lines.append(_summary_row(f"T={t} inn_blocks={b}", rep))
                print(f"[eval] T={t} inn_blocks={b}: PSNR {rep.mean_psnr:.4f} dB")
    elif cfg.mode == "model":
        if not cfg.checkpoint:
            raise UsageError("mode=model needs config key 'checkpoint'")
        model, _ = checkpoint.load(cfg.checkpoint)
        if model.scale != cfg.scale or model.T != cfg.T:
            raise UsageError(f"checkpoint has T={model.T}, scale={model.scale}; "
                             f"config asks for T={cfg.T}, scale={cfg.scale}")
        rep = evaluate(lambda x, y: predict(model, x, y), val, "val")
        (out / "per_image.csv").write_text(rep.to_csv())
        lines.append(_summary_row("model", rep))
        print(f"[eval] model PSNR {rep.mean_psnr:.4f} dB vs bicubic {bic.mean_psnr:.4f} dB "
              f"(delta {rep.mean_psnr - bic.mean_psnr:+.4f} dB)")
    (out / "eval.csv").write_text("".join(lines))
    print("".join(lines), end="")
    return EXIT_OK


def cmd_selftest(fault: str | None) -> int:
    ok = selftest.run(fault=fault)
    print("selftest: all properties hold" if ok else "selftest: FAILED")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (key=value per line, '#' comments) and defaults:\n" + config.help_text()
    epilog += "\n\nMGDUN_THREADS caps the BLAS thread count."
    parser = argparse.ArgumentParser(prog="mgdun", description=__doc__, epilog=epilog,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "synth": "write a seeded synthetic dataset of (X, Y, Z) triples",
        "classical": "run the PGD solver on a dataset",
        "train": "train the unfolded network",
        "eval": "score bicubic, a checkpoint, or a T / block sweep",
    }
    for name, text in commands.items():
        sp = sub.add_parser(name, help=text, description=text, epilog=epilog,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--force", action="store_true", help="reuse a non-empty output directory")
    st = sub.add_parser("selftest", help="run the invariant suite")
    st.add_argument("--inject-fault", choices=selftest.FAULTS, help="test hook: break a component on purpose")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


COMMANDS = {"synth": cmd_synth, "classical": cmd_classical, "train": cmd_train, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("MGDUN_THREADS")
    with threadpool_limits(limits=int(threads) if threads else None):
        if args.command == "selftest":
            return cmd_selftest(args.inject_fault)
        try:
            cfg = config.load(args.config, seed=args.seed)
            out = prepare_out(Path(args.out), args.force)
            echo_config(cfg, out, args.command)
            return COMMANDS[args.command](cfg, out)
        except (UsageError, ValueError, OSError) as exc:
            print(f"mgdun {args.command}: error: {exc}", file=sys.stderr)
            return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
