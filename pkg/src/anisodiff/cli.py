"""Command-line front end: ``anisodiff {synth,train,sample,eval,quantify,info}``.

Exit codes: 0 success, 1 invalid configuration or input, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("anisodiff")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2


def _set_threads() -> None:
    n = int(os.environ.get("ANISODIFF_THREADS", "0") or 0)
    if n > 0:
        import torch

        torch.set_num_threads(n)


def _out_dir(cfg: RunConfig) -> Path:
    p = Path(cfg.paths.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"file not found: {p}")


# -- commands ----------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> int:
    from .phantom import phantom_pair
    from .volume import write_avol

    n = cfg.synth.n if args.n is None else args.n
    if n < 0:
        raise ConfigError("--n must be >= 0")
    out = _out_dir(cfg)
    manifest = []
    for i in range(n):
        hr, lr, ef, meta = phantom_pair(cfg.phantom_spec(i))
        stem = out / f"phantom_{i:03d}"
        files = {
            "hr": f"{stem}_hr.avol",
            "lr": f"{stem}_lr.avol",
            "enface": f"{stem}_enface.avol",
            "meta": f"{stem}_meta.json",
        }
        write_avol(files["hr"], hr)
        write_avol(files["lr"], lr)
        write_avol(files["enface"], ef)
        Path(files["meta"]).write_text(json.dumps(meta, indent=1, sort_keys=True))
        manifest.append({"index": i, "W": hr.w, "H": hr.h, "D": hr.d, "D_lr": lr.d, "files": files})
    print(json.dumps({"phantoms": manifest}, indent=1))
    return EXIT_OK


def _load_dataset(data_dir: str):
    from .volume import read_avol, read_enface

    d = Path(data_dir)
    pairs = []
    for hr_path in sorted(d.glob("*_hr.avol")):
        ef_path = hr_path.with_name(hr_path.name.replace("_hr.avol", "_enface.avol"))
        _require(ef_path)
        pairs.append((read_avol(hr_path), read_enface(ef_path)))
    if not pairs:
        raise ConfigError(f"no *_hr.avol files under {data_dir}")
    return pairs


def cmd_train(cfg: RunConfig, args) -> int:
    from .denoiser import build_unet, load_checkpoint, save_checkpoint, TrainState, train

    data = _load_dataset(args.data)
    tc = cfg.train_config()
    out = _out_dir(cfg)
    if args.resume:
        _require(args.resume)
        d, s, state, _ = load_checkpoint(args.resume, tc)
    else:
        s = cfg.build_schedule()
        d = build_unet(cfg.unet_config(), cfg.training.seed)
        state = TrainState()
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ackpt"
    loss_csv = out / "loss.csv"

    def write_losses():
        with open(loss_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss"])
            for i, v in enumerate(state.loss_history):
                w.writerow([i, repr(v)])

    def on_epoch(epoch, loss):
        log.info("epoch %d loss %.6f", epoch, loss)

    from .denoiser import TrainingDiverged

    try:
        train(d, data, tc, cfg.cfg_config(), s, state=state, on_epoch=on_epoch)
    except TrainingDiverged as e:
        write_losses()
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(ckpt, d, s, state, extra={"seed": tc.seed})
    write_losses()
    print(json.dumps({"checkpoint": str(ckpt), "loss_csv": str(loss_csv), "epochs": state.epoch}))
    return EXIT_OK


def cmd_sample(cfg: RunConfig, args) -> int:
    from .sampler import SamplingDiverged, sample_volume
    from .volume import read_avol, read_enface, upsample_slices_linear, upsample_slices_tricubic, write_avol

    _require(args.lr)
    lr = read_avol(args.lr)
    output = Path(args.output) if args.output else _out_dir(cfg) / "sample_hr.avol"
    if args.baseline:
        fn = {"linear": upsample_slices_linear, "tricubic": upsample_slices_tricubic}[args.baseline]
        print(f"baseline={args.baseline}", file=sys.stderr)
        write_avol(output, fn(lr, 8, 4))
        return EXIT_OK

    _require(args.enface)
    ef = read_enface(args.enface)
    plan = cfg.sampling_plan()
    if args.oracle:
        from .denoiser import oracle_denoiser

        _require(args.oracle)
        s = cfg.build_schedule()
        d = oracle_denoiser(read_avol(args.oracle), s)
    elif args.checkpoint:
        from .denoiser import load_checkpoint

        _require(args.checkpoint)
        d, s, _, _ = load_checkpoint(args.checkpoint)
    else:
        raise ConfigError("sample needs --checkpoint, --oracle or --baseline")
    print(
        f"mode={cfg.sampling.mode} w={plan.guidance_scale:g} enface_active={plan.enface_active} "
        f"ddim_steps={plan.ddim_steps} seed={plan.seed}",
        file=sys.stderr,
    )

    def progress(i, n, t):
        log.debug("patch %d/%d t=%d", i + 1, n, t)

    try:
        out = sample_volume(lr, ef, d, s, plan, progress)
    except SamplingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    write_avol(output, out)
    print(json.dumps({"output": str(output), "registration_shifts": out.meta["registration_shifts"]}))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    from .metrics import evaluate, write_csv
    from .volume import read_avol

    _require(args.reference)
    cands = {}
    for item in args.candidates:
        name, _, path = item.rpartition("=")
        name = name or Path(path).stem
        _require(path)
        cands[name] = read_avol(path)
    reports = evaluate(read_avol(args.reference), cands)
    output = Path(args.output) if args.output else _out_dir(cfg) / "metrics.csv"
    write_csv(output, reports, per_volume=args.per_volume)
    print(output.read_text(), end="")
    return EXIT_OK


def cmd_quantify(cfg: RunConfig, args) -> int:
    from .phantom import spacing_sweep

    q = cfg.quantify
    table = spacing_sweep(cfg.lesion(), q.factors, q.reconstructor, q.dims, q.base_spacing_mm)
    output = Path(args.output) if args.output else _out_dir(cfg) / "sweep.csv"
    output.write_text(table.to_csv())
    print(table.to_csv(), end="")
    return EXIT_OK


def cmd_info(cfg: RunConfig, args) -> int:
    s = cfg.build_schedule()
    info = {
        "version": __version__,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.flat().items()},
        "schedule": {
            "T": s.T,
            "beta_1": float(s.beta[0]),
            "beta_T": float(s.beta[-1]),
            "alpha_bar_T": float(s.alpha_bar[-1]),
        },
        "mode": dict(zip(("enface_active", "w"), cfg.mode())),
    }
    print(json.dumps(info, indent=1))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "quantify": cmd_quantify,
    "info": cmd_info,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="seed for synth, training and sampling")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. sampling.w=3")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="anisodiff", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", parents=[common], help="write phantom (hr, lr, enface, meta) sets")
    sp.add_argument("--n", type=int)

    sp = sub.add_parser("train", parents=[common], help="train a denoiser on phantom sets")
    sp.add_argument("--data", required=True, help="directory holding *_hr.avol / *_enface.avol")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--checkpoint", help="output checkpoint path")

    sp = sub.add_parser("sample", parents=[common], help="8x slice upsampling of an LR volume")
    sp.add_argument("--lr", required=True)
    sp.add_argument("--enface")
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle", metavar="HR_AVOL", help="use the exact oracle denoiser for this reference")
    sp.add_argument("--baseline", choices=("linear", "tricubic"))
    sp.add_argument("--mode", choices=("ddim", "ddim-ef-nocfg", "ddim-ef"))
    sp.add_argument("--output")

    sp = sub.add_parser("eval", parents=[common], help="metrics CSV against a reference")
    sp.add_argument("--reference", required=True)
    sp.add_argument("candidates", nargs="+", metavar="[NAME=]PATH")
    sp.add_argument("--per-volume", action="store_true")
    sp.add_argument("--output")

    sp = sub.add_parser("quantify", parents=[common], help="lesion volume vs slice spacing sweep")
    sp.add_argument("--output")

    sub.add_parser("info", parents=[common], help="print resolved configuration")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg.sampling.seed = cfg.training.seed = cfg.synth.seed = args.seed
        if args.out:
            cfg.paths.out = args.out
        if getattr(args, "mode", None):
            cfg.sampling.mode = args.mode
            cfg.sampling.w = None
        cfg.validate()
        _set_threads()
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except FloatingPointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
