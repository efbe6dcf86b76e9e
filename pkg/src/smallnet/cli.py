"""Command line: train, evaluate, compare, emit-rom, simulate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import hwsim, quantizer, report, trainer
from .dataio import IdxError, LabeledImageSet


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _load(images, labels, limit=None) -> LabeledImageSet:
    data = LabeledImageSet.load(images, labels)
    return data.subset(0, limit) if limit else data


def _emit(payload: str, out: str | None) -> None:
    if out:
        quantizer.atomic_write(Path(out), payload + "\n")
    print(payload)


def cmd_train(args) -> int:
    data = _load(args.train_images, args.train_labels)
    config = trainer.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                                 learning_rate=args.lr, seed=args.seed, holdout=args.holdout)

    def progress(rec):
        print(f"epoch {rec.epoch}: loss {rec.loss:.4f} val_acc {rec.val_accuracy:.4f}", file=sys.stderr)

    params, history = trainer.train(data, config, progress)
    out = Path(args.out)
    history_path = Path(args.history) if args.history else out.with_suffix(".history.csv")
    quantizer.write_weight_file(params, quantizer.quantize_params(params), out)
    quantizer.atomic_write(history_path, report.history_csv(history))
    print(f"wrote {out} and {history_path}")
    return 0


def cmd_evaluate(args) -> int:
    params, qparams = quantizer.read_weight_file(args.weights)
    data = _load(args.test_images, args.test_labels, args.limit)
    result = report.evaluate_engine(args.engine, params, qparams, data)
    _emit(json.dumps(result, indent=2), args.out)
    return 0


def cmd_compare(args) -> int:
    params, qparams = quantizer.read_weight_file(args.weights)
    data = _load(args.test_images, args.test_labels, args.limit)
    rep = report.compare(params, qparams, data, args.clock_hz)
    _emit(rep.to_json(), args.out)
    return 0 if rep.agreement_rate == 1.0 else 3


def cmd_emit_rom(args) -> int:
    _, qparams = quantizer.read_weight_file(args.weights)
    counts = quantizer.emit_rom_hex(qparams, args.out)
    print(" ".join(str(counts[name]) for name in quantizer.ROM_FILES))
    if args.verify:
        back = quantizer.read_rom_hex(args.out)
        if not back.bit_equal(qparams):
            print("verify: ROM images do not match the weight file", file=sys.stderr)
            return 3
        print("verify: ok")
    return 0


def cmd_simulate(args) -> int:
    _, qparams = quantizer.read_weight_file(args.weights)
    data = _load(args.test_images, args.test_labels)
    if not 0 <= args.index < data.count:
        raise IndexError(f"image index {args.index} outside 0..{data.count - 1}")
    image = data.normalized()[args.index]
    res = hwsim.run_pipeline(image, qparams, trace_path=args.out)
    rep = res.report
    summary = {
        "index": args.index,
        "label": int(data.labels[args.index]),
        "class_code": res.class_code,
        "scores_hex": [f"{s & 0xFFFFFFFF:08X}" for s in res.scores],
        "cycles": {k: getattr(rep, k) for k in (
            "cycles_conv1", "cycles_pool1", "cycles_conv2", "cycles_pool2",
            "cycles_dense", "cycles_overhead", "cycles_total")},
        "fsm_legal": hwsim.trace_is_legal(res.trace),
    }
    if args.clock_hz:
        summary["clock_hz"] = args.clock_hz
        summary["latency_seconds"] = hwsim.latency_at(rep, args.clock_hz)
    print(json.dumps(summary, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smallnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train smallNet and write an SNW1 weight file")
    p.add_argument("--train-images", required=True)
    p.add_argument("--train-labels", required=True)
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--history", help="per-epoch CSV (default: <out>.history.csv)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=_positive_int, default=8)
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--holdout", type=int, default=5000,
                   help="trailing training images kept for validation")
    p.set_defaults(func=cmd_train)

    def test_args(p, labels=True):
        p.add_argument("--weights", required=True)
        p.add_argument("--test-images", required=True)
        p.add_argument("--test-labels", required=labels)

    p = sub.add_parser("evaluate", help="accuracy and confusion matrix for one engine")
    test_args(p)
    p.add_argument("--engine", choices=report.ENGINES, default="fixed")
    p.add_argument("--limit", type=_positive_int, default=10000)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="run all three engines on the same images")
    test_args(p)
    p.add_argument("--limit", type=_positive_int, default=10000)
    p.add_argument("--clock-hz", type=_positive_int)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("emit-rom", help="write ROM hex images for the quantized weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--verify", action="store_true", help="re-read the files and compare bit-exactly")
    p.set_defaults(func=cmd_emit_rom)

    p = sub.add_parser("simulate", help="cycle-simulate one test image, optionally dumping the trace")
    test_args(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--clock-hz", type=_positive_int)
    p.add_argument("--out", help="per-cycle trace CSV (cycle,state,stage)")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, IdxError, quantizer.WeightFileError, quantizer.HexFormatError,
            ValueError, IndexError) as exc:
        print(f"smallnet: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
