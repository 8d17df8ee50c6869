"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 error bound
unreachable (indicates a bug; the lossless fallback should make it impossible).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .codec import RDTrainConfig, TransformConfig, LatentCodec, train_stage1
from .container import accounting, read_container, write_container
from .diffusion import (Denoiser, DenoiserConfig, build_schedule, finetune_reduced_steps,
                        train_denoiser)
from .errors import BoundUnreachableError, ConfigError, DataError, LatentzipError
from .fields import compression_ratio, nrmse
from .checkpoints import (load_basis, load_codec, load_denoiser, save_basis, save_codec,
                          save_denoiser)
from .partition import Strategy
from .pipeline import (Models, PipelineConfig, compress, decompress, encode_all_latents,
                       eval_sweep, fit_residual_basis, latent_window_batch_fn, nrmse_per_frame,
                       sweep_to_csv)
from .rawio import read_raw, write_raw
from .synthetic import synth_data

DESK_T = 200
PAPER_T = 1000


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--strategy", choices=["prediction", "interpolation", "mixed"],
                   default="interpolation")
    p.add_argument("--interval", type=int, default=3)
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--tau", type=float, default=None,
                   help="NRMSE-equivalent error bound; omit to disable correction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tile", type=int, nargs=2, default=(32, 32), metavar=("H", "W"))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--paper-mode", action="store_true",
                   help="paper-scale defaults: 64 latent channels, 1000 diffusion steps")


def _pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(strategy=args.strategy, interval=args.interval, k=args.k,
                          window=args.window, steps=args.steps, tau=args.tau,
                          seed=args.seed, tile=tuple(args.tile), workers=args.workers)


def _models_dir(args) -> Path:
    d = Path(args.models)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_models(args, need_basis: bool) -> Models:
    d = Path(args.models)
    codec, codec_fp = load_codec(d / "transform.pt")
    denoiser, sched, den_fp = load_denoiser(d / "denoiser.pt")
    basis, basis_fp = (None, "")
    basis_path = d / "basis.npz"
    if basis_path.exists():
        basis, basis_fp = load_basis(basis_path)
    elif need_basis:
        raise DataError(f"missing {basis_path}; train with --fit-basis or drop --tau")
    return Models(codec=codec, denoiser=denoiser, sched=sched, basis=basis,
                  codec_fingerprint=codec_fp, denoiser_fingerprint=den_fp,
                  basis_fingerprint=basis_fp)


def cmd_synth_data(args) -> int:
    field = synth_data(args.kind, tuple(args.dims), seed=args.seed)
    n = write_raw(field, args.out)
    print(f"wrote {args.out} ({n} bytes, dims {field.shape})")
    return 0


def cmd_train_transform(args) -> int:
    field = read_raw(args.data)
    cfg = RDTrainConfig(total_iters=args.iters, lambda_init=args.lam,
                        lr_init=args.lr, patch=tuple(args.patch), batch=args.batch,
                        seed=args.seed)
    tcfg = TransformConfig.paper_mode() if args.paper_mode else TransformConfig()
    codec, history = train_stage1(field, cfg, codec=LatentCodec(tcfg))
    fp = save_codec(codec, _models_dir(args) / "transform.pt")
    print(f"trained transform: final loss {history['loss'][-1]:.5f}, fingerprint {fp[:12]}")
    return 0


def cmd_train_diffusion(args) -> int:
    field = read_raw(args.data)
    d = _models_dir(args)
    codec, codec_fp = load_codec(d / "transform.pt")
    num_steps = PAPER_T if args.paper_mode else DESK_T
    sched = build_schedule(num_steps)
    dcfg = DenoiserConfig.paper_mode() if args.paper_mode else \
        DenoiserConfig(latent_channels=codec.cfg.latent_channels)
    denoiser = Denoiser(dcfg)
    latents = encode_all_latents(codec, field)
    strategy = Strategy(kind=args.strategy, interval=args.interval, k=args.k)
    intervals = [int(x) for x in args.train_intervals.split(",")] if args.train_intervals else None
    batch_fn = latent_window_batch_fn(latents, args.batch, args.window, strategy,
                                      intervals=intervals, crop=args.crop or None)
    history = train_denoiser(denoiser, sched, batch_fn, args.iters, lr=args.lr,
                             seed=args.seed)
    fp = save_denoiser(denoiser, sched, d / "denoiser.pt")
    print(f"trained denoiser: final loss {history['loss'][-1]:.5f}, fingerprint {fp[:12]}")
    if args.fit_basis:
        models = Models(codec=codec, denoiser=denoiser, sched=sched,
                        codec_fingerprint=codec_fp, denoiser_fingerprint=fp)
        basis = fit_residual_basis(field, models, _pipeline_config(args),
                                   n_components=args.basis_components)
        bfp = save_basis(basis, d / "basis.npz")
        print(f"fitted residual basis ({basis.n_components} components), "
              f"fingerprint {bfp[:12]}")
    return 0


def cmd_finetune_steps(args) -> int:
    field = read_raw(args.data)
    d = _models_dir(args)
    codec, codec_fp = load_codec(d / "transform.pt")
    denoiser, sched, _ = load_denoiser(d / "denoiser.pt")
    latents = encode_all_latents(codec, field)
    strategy = Strategy(kind=args.strategy, interval=args.interval, k=args.k)
    intervals = [int(x) for x in args.train_intervals.split(",")] if args.train_intervals else None
    batch_fn = latent_window_batch_fn(latents, args.batch, args.window, strategy,
                                      intervals=intervals, crop=args.crop or None)
    history = finetune_reduced_steps(denoiser, sched, args.steps, batch_fn, args.iters,
                                     lr=args.lr, seed=args.seed)
    fp = save_denoiser(denoiser, sched, d / "denoiser.pt")
    print(f"fine-tuned for {args.steps} sampling steps: final loss "
          f"{history['loss'][-1]:.5f}, fingerprint {fp[:12]}")
    if args.fit_basis:
        basis = fit_residual_basis(field, Models(codec=codec, denoiser=denoiser, sched=sched,
                                                 codec_fingerprint=codec_fp,
                                                 denoiser_fingerprint=fp),
                                   _pipeline_config(args), n_components=args.basis_components)
        bfp = save_basis(basis, d / "basis.npz")
        print(f"refitted residual basis, fingerprint {bfp[:12]}")
    return 0


def cmd_compress(args) -> int:
    field = read_raw(args.data)
    models = _load_models(args, need_basis=args.tau is not None)
    container = compress(field, models, _pipeline_config(args))
    blob = write_container(container)
    Path(args.out).write_bytes(blob)
    size_l, size_g, ratio = accounting(container, field.nbytes)
    print(f"wrote {args.out}: {len(blob)} bytes "
          f"(L={size_l}, G={size_g}), ratio {ratio:.2f}")
    return 0


def cmd_decompress(args) -> int:
    container = read_container(Path(args.container).read_bytes())
    models = _load_models(args, need_basis=container.header.tau is not None)
    field = decompress(container, models, workers=args.workers)
    n = write_raw(field, args.out)
    print(f"wrote {args.out} ({n} bytes, dims {field.shape})")
    return 0


def cmd_eval(args) -> int:
    original = read_raw(args.data)
    models = _load_models(args, need_basis=args.tau is not None)
    cfg = _pipeline_config(args)
    container = compress(original, models, cfg)
    recon = decompress(container, models, workers=args.workers)
    size_l, size_g, ratio = accounting(container, original.nbytes)
    overall = nrmse(original, recon)
    print(f"nrmse {overall:.6f}  ratio {ratio:.2f}  L {size_l}  G {size_g}")
    if args.per_frame:
        per_frame = nrmse_per_frame(original, recon)
        with open(args.per_frame, "w") as fh:
            fh.write("var,frame,nrmse\n")
            for vi in range(per_frame.shape[0]):
                for ti in range(per_frame.shape[1]):
                    fh.write(f"{vi},{ti},{per_frame[vi, ti]:.8f}\n")
        print(f"per-frame NRMSE written to {args.per_frame}")
    return 0


def cmd_sweep(args) -> int:
    field = read_raw(args.data)
    base = _pipeline_config(args)
    taus = [float(x) for x in args.taus.split(",")] if args.taus else [base.tau]
    intervals = [int(x) for x in args.intervals.split(",")] if args.intervals else [base.interval]
    steps = [int(x) for x in args.step_counts.split(",")] if args.step_counts else [base.steps]
    strategies = args.strategies.split(",") if args.strategies else [base.strategy]
    grid = []
    for strat in strategies:
        for d in intervals:
            for s in steps:
                for tau in taus:
                    grid.append(PipelineConfig(
                        strategy=strat, interval=d, k=base.k, window=base.window,
                        steps=s, tau=tau, seed=base.seed, tile=base.tile,
                        workers=base.workers))
    need_basis = any(c.tau is not None for c in grid)
    models = _load_models(args, need_basis=need_basis)
    rows = eval_sweep(field, models, grid)
    sweep_to_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentzip",
                                     description="keyframe-latent diffusion compressor")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic raw tensor file")
    p.add_argument("--kind", choices=["advecting-blobs", "smooth-random-field"],
                   default="advecting-blobs")
    p.add_argument("--dims", type=int, nargs=4, required=True, metavar=("V", "T", "H", "W"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-transform", help="stage-1 rate-distortion training")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lam", type=float, default=1e-5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patch", type=int, nargs=2, default=(32, 32))
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paper-mode", action="store_true")
    p.set_defaults(func=cmd_train_transform)

    for name, fn in (("train-diffusion", cmd_train_diffusion),
                     ("finetune-steps", cmd_finetune_steps)):
        p = sub.add_parser(name, help=f"stage-2 {name.replace('-', ' ')}")
        p.add_argument("--data", required=True)
        p.add_argument("--models", required=True)
        p.add_argument("--iters", type=int, default=3000)
        p.add_argument("--lr", type=float, default=1e-4)
        p.add_argument("--batch", type=int, default=8)
        p.add_argument("--train-intervals", default="",
                       help="comma list; randomize the interpolation interval per batch")
        p.add_argument("--crop", type=int, default=0,
                       help="train on random spatial latent crops of this size")
        p.add_argument("--fit-basis", action="store_true", default=True)
        p.add_argument("--no-fit-basis", dest="fit_basis", action="store_false")
        p.add_argument("--basis-components", type=int, default=64)
        _add_common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("compress", help="compress a raw tensor file")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decompress a container")
    p.add_argument("--container", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="compress + decompress + report metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--per-frame", default="", help="optional per-frame NRMSE CSV path")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid evaluation to CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategies", default="")
    p.add_argument("--intervals", default="")
    p.add_argument("--step-counts", default="")
    p.add_argument("--taus", default="")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except BoundUnreachableError as exc:
        print(f"error bound unreachable (bug): {exc}", file=sys.stderr)
        return 4
    except (DataError, LatentzipError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
