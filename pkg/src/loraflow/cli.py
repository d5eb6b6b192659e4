"""Command-line entry point: ``loraflow <subcommand> ...``.

Every subcommand accepts ``--config FILE``: a flat ``key=value`` file whose
keys are flag names (``updates=200`` or ``--updates=200``). Flags given on
the command line win over the file. Relative paths are resolved against
``$LORAFLOW_DATA_DIR`` when it is set.

Exit status: 0 on success, 2 for usage errors, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import LoRaFlowError

HELP_WIDTH = 100


class UsageError(Exception):
    pass


def _formatter(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, width=HELP_WIDTH, max_help_position=36)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _path(p) -> Optional[Path]:
    if p is None:
        return None
    p = Path(p)
    base = os.environ.get("LORAFLOW_DATA_DIR")
    return p if p.is_absolute() or not base else Path(base) / p


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _float_list(text: str) -> tuple[float, ...]:
    """Comma list (``-14,-12``) or inclusive range ``start:stop:step``."""
    text = str(text)
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        return tuple(float(v) for v in np.arange(start, stop + step * 1e-6, step))
    return tuple(float(v) for v in text.split(",") if v.strip())


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--width", type=int, default=64, help="channel width")
    g.add_argument("--depth", type=int, default=4, help="transformer blocks")
    g.add_argument("--heads", type=int, default=4, help="attention heads")
    g.add_argument("--sf-max", type=int, default=7, help="largest SF the model accepts")
    g.add_argument("--fourier-dim", type=int, default=8, help="Fourier frequencies for t")
    g.add_argument("--frontend", choices=("matched", "raw"), default="matched",
                   help="network input basis")


def _model_config(args):
    from .model import ModelConfig
    return ModelConfig(width=args.width, depth=args.depth, heads=args.heads, sf_max=args.sf_max,
                       fourier_dim=args.fourier_dim, frontend=args.frontend, bw=args.bw)


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="loraflow", description="LoRa modem with a rectified-flow denoiser.",
                   formatter_class=_formatter)
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=_formatter)
        p.add_argument("--config", default=None, help="flat key=value file of flag defaults")
        return p

    p = add("init", "write a freshly initialized model checkpoint")
    p.add_argument("--out", default="model.ckpt", help="checkpoint path")
    p.add_argument("--seed", type=int, default=0, help="initialization seed")
    p.add_argument("--bw", type=float, default=125_000.0, help="bandwidth in Hz")
    _model_flags(p)

    p = add("gen-data", "write every clean symbol of one SF as an IQ dataset file")
    p.add_argument("--sf", type=int, default=7, help="spreading factor")
    p.add_argument("--bw", type=float, default=125_000.0, help="bandwidth in Hz")
    p.add_argument("--direction", choices=("up", "down"), default="up", help="chirp direction")
    p.add_argument("--out", default="synthetic.iq", help="payload path (sidecar gets .json appended)")
    p.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")

    p = add("one-shot", "pick one capture per class and write it with a manifest")
    p.add_argument("input", help="IQ dataset file of real captures")
    p.add_argument("--out", default="oneshot.iq", help="output IQ dataset file")
    p.add_argument("--manifest", default="oneshot.manifest.json", help="manifest path")
    p.add_argument("--seed", type=int, default=0, help="selection seed")

    p = add("train", "run the synthetic or fine-tuning phase")
    p.add_argument("--phase", choices=("synthetic", "finetune"), default="synthetic", help="training phase")
    p.add_argument("--sf", type=_int_list, default="7", help="comma-separated SFs to train on")
    p.add_argument("--directions", default="up,down", help="comma-separated chirp directions")
    p.add_argument("--updates", type=int, default=1000, help="optimizer steps")
    p.add_argument("--batch-size", type=int, default=None, help="override the per-SF batch size (None: desk-scale table)")
    p.add_argument("--lr", type=float, default=1e-4, help="peak learning rate")
    p.add_argument("--warmup", type=int, default=500, help="linear warmup steps")
    p.add_argument("--lambda1", type=float, default=0.1, help="FFT loss weight")
    p.add_argument("--lambda2", type=float, default=0.1, help="STFT loss weight")
    p.add_argument("--lambda3", type=float, default=0.05, help="classification loss weight")
    p.add_argument("--alpha", type=float, default=1e-4, help="logit z-loss weight")
    p.add_argument("--base-prob", type=float, default=0.15, help="augmentation probability")
    p.add_argument("--dropout-prob", type=float, default=0.10, help="condition dropout probability")
    p.add_argument("--p-real", type=float, default=0.95, help="real-sample probability when fine-tuning")
    p.add_argument("--real", default=None, help="IQ dataset of real captures (finetune)")
    p.add_argument("--init", default=None, help="checkpoint to resume or fine-tune from")
    p.add_argument("--seed", type=int, default=0, help="training seed")
    p.add_argument("--bw", type=float, default=125_000.0, help="bandwidth in Hz")
    p.add_argument("--checkpoint-every", type=int, default=0, help="save every N steps (0: end only)")
    p.add_argument("--out", default="model.ckpt", help="checkpoint path")
    p.add_argument("--log", default=None, help="JSON-lines training log")
    _model_flags(p)

    p = add("demod", "dechirp-demodulate every symbol in an IQ dataset file")
    p.add_argument("input", help="IQ dataset file")
    p.add_argument("--out", default=None, help="write labels here instead of stdout")
    p.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")

    p = add("denoise", "reconstruct IQ symbols with a trained model")
    p.add_argument("input", help="IQ dataset file of received symbols")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--snr", type=float, required=True, help="received SNR in dB")
    p.add_argument("--nfe", type=int, default=16, help="Euler steps")
    p.add_argument("--out", default="denoised.iq", help="output IQ dataset file")
    p.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")

    p = add("sweep", "baseline vs denoised accuracy over an SNR x NFE grid")
    p.add_argument("--checkpoint", default="none", help="model checkpoint, or 'none' with --oracle")
    p.add_argument("--oracle", action="store_true", help="use the exact straight-line field")
    p.add_argument("--snr", type=_float_list, default="-40:-10:2.5", help="SNRs in dB, list or start:stop:step (write --snr=-20,-10 for negatives)")
    p.add_argument("--nfe", type=_int_list, default="1,2,4,8,16,32", help="comma-separated NFE values")
    p.add_argument("--sf", type=_int_list, default="7", help="comma-separated SFs")
    p.add_argument("--trials", type=int, default=1000, help="symbols per grid point")
    p.add_argument("--bw", type=float, default=125_000.0, help="bandwidth in Hz")
    p.add_argument("--seed", type=int, default=0, help="sweep seed")
    p.add_argument("--workers", type=int, default=1, help="worker processes")
    p.add_argument("--format", choices=("csv", "json", "dat"), default="csv", help="report format")
    p.add_argument("--out", default="report.csv", help="report path")

    p = add("report", "convert a CSV/JSON report and print AUC per SF and NFE")
    p.add_argument("input", help="report written by sweep")
    p.add_argument("--format", choices=("csv", "json", "dat"), default="json", help="output format")
    p.add_argument("--out", default=None, help="output path (omit to only print AUC)")
    p.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    return root


def _read_config(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = value
    return values


def _apply_config(parser, argv):
    """Re-parse with config-file values as defaults for the chosen subcommand."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    overrides = {}
    for key, value in _read_config(_path(args.config)).items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            sub.error(f"unknown key {key!r} in config file")
        if isinstance(action, argparse._StoreTrueAction):
            overrides[key] = value.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                overrides[key] = action.type(value)
            except ValueError:
                sub.error(f"bad value {value!r} for {key!r} in config file")
        else:
            overrides[key] = value
    sub.set_defaults(**overrides)
    return parser.parse_args(argv)


def cmd_init(args):
    from .train import init_model, to_checkpoint
    model = init_model(_model_config(args), args.seed)
    to_checkpoint(model, None, 0, args.seed).save(_path(args.out))
    print(f"wrote {_path(args.out)}")


def cmd_gen_data(args):
    from .dataset import generate_synthetic, save_dataset
    records = generate_synthetic([args.sf], args.bw, (args.direction,))
    save_dataset(records, _path(args.out), args.bw)
    print(f"wrote {len(records)} symbols to {_path(args.out)}")


def cmd_one_shot(args):
    from .dataset import read_header, read_iq_file, save_dataset, select_one_shot, write_manifest
    src = _path(args.input)
    records = read_iq_file(src)
    chosen, idx = select_one_shot(records, args.seed)
    save_dataset(chosen, _path(args.out), read_header(src)["bw"])
    write_manifest(_path(args.manifest), chosen, idx, src)
    print(f"selected {len(chosen)} of {len(records)} captures")


def cmd_train(args):
    from .augment import AugmentConfig
    from .checkpoint import Checkpoint
    from .dataset import generate_synthetic, load_real
    from .train import LossWeights, TrainConfig, run_phase

    directions = tuple(d.strip() for d in args.directions.split(",") if d.strip())
    cfg = TrainConfig(
        sf_set=tuple(args.sf), directions=directions,
        batch_sizes={sf: args.batch_size for sf in args.sf} if args.batch_size else {},
        updates=args.updates, lr=args.lr, warmup=args.warmup, seed=args.seed, phase=args.phase,
        p_real=args.p_real, checkpoint_every=args.checkpoint_every, bw=args.bw,
        augment=AugmentConfig(base_prob=args.base_prob, dropout_prob=args.dropout_prob),
        weights=LossWeights(args.lambda1, args.lambda2, args.lambda3, args.alpha),
    )
    init = Checkpoint.load(_path(args.init)) if args.init else None
    real = synth = None
    if args.phase == "finetune":
        if not args.real:
            raise LoRaFlowError("finetune phase needs --real")
        real = load_real(_path(args.real))
        synth = generate_synthetic(args.sf, args.bw, directions)
    ckpt = run_phase(cfg, _model_config(args), synth=synth, real=real, init=init,
                     out_path=_path(args.out), log_path=_path(args.log))
    print(f"wrote {_path(args.out)} at step {ckpt.step}")


def cmd_demod(args):
    from .dataset import read_header, read_iq_file
    from .modem import LoRaParams, dechirp_demod
    src = _path(args.input)
    header = read_header(src)
    records = read_iq_file(src)
    params = LoRaParams(header["sf"], header["bw"], header["direction"])
    symbols, _ = dechirp_demod(params, np.stack([r.iq for r in records]))
    text = "\n".join(str(int(s)) for s in symbols) + "\n"
    if args.out:
        _path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_denoise(args):
    from .augment import null_condition
    from .checkpoint import Checkpoint
    from .dataset import SampleRecord, read_header, read_iq_file, save_dataset
    from .flow import euler_sample, insert_received
    from .train import from_checkpoint
    src = _path(args.input)
    header = read_header(src)
    records = read_iq_file(src)
    model, _ = from_checkpoint(Checkpoint.load(_path(args.checkpoint)))
    model.eval()
    received = np.stack([r.iq for r in records])
    start = insert_received(received, args.snr)
    out = euler_sample(model.velocity_field(header["direction"]), start, args.nfe,
                       null_condition(len(records)))
    denoised = [SampleRecord(x, r.label, r.sf, r.direction, r.source) for x, r in zip(out, records)]
    save_dataset(denoised, _path(args.out), header["bw"])
    print(f"wrote {len(denoised)} denoised symbols to {_path(args.out)}")


def cmd_sweep(args):
    from .evaluation import ModelFieldFactory, SweepGrid, emit_report, oracle_factory, run_denoised
    if args.oracle:
        factory = oracle_factory
    elif args.checkpoint.lower() == "none":
        raise UsageError("--checkpoint none requires --oracle")
    else:
        factory = ModelFieldFactory(checkpoint_path=_path(args.checkpoint))
    grid = SweepGrid(snr_db=tuple(args.snr), nfe=tuple(args.nfe), trials=args.trials,
                     sf=tuple(args.sf), seed=args.seed, bw=args.bw)
    report = run_denoised(factory, grid, workers=args.workers)
    emit_report(report, _path(args.out), args.format)
    print(f"wrote {len(report.rows)} rows to {_path(args.out)}")


def cmd_report(args):
    from .evaluation import emit_report, parse_report
    report = parse_report(_path(args.input))
    for sf, by_nfe in report.auc.items():
        for nfe, value in by_nfe.items():
            print(f"sf={sf} nfe={nfe} auc={value:.6f}")
    if args.out:
        emit_report(report, _path(args.out), args.format)


COMMANDS = {
    "init": cmd_init, "gen-data": cmd_gen_data, "one-shot": cmd_one_shot, "train": cmd_train,
    "demod": cmd_demod, "denoise": cmd_denoise, "sweep": cmd_sweep, "report": cmd_report,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, OSError) as exc:
        print(f"loraflow: error: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"loraflow {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (LoRaFlowError, OSError, ValueError) as exc:
        print(f"loraflow {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
