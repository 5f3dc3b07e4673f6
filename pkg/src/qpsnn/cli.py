"""Command-line interface: ``qpsnn {train,prune,finetune,run,analyze,report,inspect}``.

Exit codes: 0 success, 1 usage error, 2 configuration or parse error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from .errors import ConfigError, ParseError, QPSNNError, StageError
from .metrics import count_sops, model_size
from .network import accuracy, forward
from .pipeline import (
    RunConfig,
    build_from_config,
    load_data,
    prune_network,
    robustness,
    run_qp_pipeline,
    scoring_batch,
    utilization_report,
)
from .prune import CRITERIA, reports_to_json, reports_to_text
from .quantize import SUPPORTED_BITS
from .train import finetune, train_quantized

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="run configuration (JSON)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--bits", type=int, choices=SUPPORTED_BITS, help="override the weight bit-width")
    p.add_argument("--criterion", choices=CRITERIA, help="override the pruning criterion")
    p.add_argument("--out", help="output directory")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS so reductions run in a fixed order")


def build_parser():
    parser = _Parser(prog="qpsnn", description="Quantized and pruned spiking network toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="quantization-aware training from scratch")
    _common(p)
    p = sub.add_parser("prune", help="score channels and remove the least important")
    p.add_argument("checkpoint")
    _common(p)
    p = sub.add_parser("finetune", help="fine-tune a (pruned) checkpoint")
    p.add_argument("checkpoint")
    _common(p)
    p = sub.add_parser("run", help="full pipeline: train, prune, fine-tune, report")
    _common(p)
    p = sub.add_parser("analyze", help="importance scores, score robustness and bit-width utilization")
    p.add_argument("checkpoint")
    _common(p)
    p.add_argument("--batches", type=int, default=10, help="disjoint scoring batches for robustness")
    p = sub.add_parser("report", help="model size and (with --config) synaptic operations")
    p.add_argument("checkpoint")
    _common(p, config_required=False)
    p = sub.add_parser("inspect", help="print a checkpoint manifest summary")
    p.add_argument("checkpoint")
    return parser


def _config(args):
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = cfg.finetune.seed = args.seed
    if args.bits is not None and cfg.quantizer is not None:
        cfg.quantizer = dataclasses.replace(cfg.quantizer, bits=args.bits)
    if args.criterion is not None:
        cfg.criterion = args.criterion
    if args.out is not None:
        cfg.output_dir = args.out
    return cfg


def _metadata(cfg, args, **extra):
    return {"command": args.command, "seed": cfg.seed, "deterministic": bool(args.deterministic),
            "config": {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}, **extra}


def cmd_train(args):
    cfg = _config(args)
    train, test = load_data(cfg)
    net = build_from_config(cfg, train.image_shape)
    history = []
    train_quantized(net, train, cfg.train, history)
    acc = accuracy(net, test.samples, test.labels, cfg.time_steps)
    ckpt.save_checkpoint(net, cfg.output_dir, cfg.time_steps,
                         _metadata(cfg, args, history=history, accuracy=acc))
    print(f"test accuracy {acc:.4f}; checkpoint written to {cfg.output_dir}")


def cmd_prune(args):
    cfg = _config(args)
    net, _ = ckpt.load_checkpoint(args.checkpoint)
    train, test = load_data(cfg)
    reports, mask = prune_network(net, scoring_batch(train, cfg), cfg)
    acc = accuracy(net, test.samples, test.labels, cfg.time_steps)
    out = Path(cfg.output_dir)
    ckpt.save_checkpoint(net, out, cfg.time_steps,
                         _metadata(cfg, args, mask=mask.to_dict(), accuracy=acc))
    (out / "importance_report.txt").write_text(reports_to_text(reports))
    (out / "importance_report.json").write_text(reports_to_json(reports))
    kept = ", ".join(f"layer {i}: {len(k)}" for i, k in sorted(mask.keep.items()))
    print(f"kept channels ({kept}); test accuracy {acc:.4f}")


def cmd_finetune(args):
    cfg = _config(args)
    net, _ = ckpt.load_checkpoint(args.checkpoint)
    train, test = load_data(cfg)
    history = []
    finetune(net, train, cfg.finetune, history)
    acc = accuracy(net, test.samples, test.labels, cfg.time_steps)
    ckpt.save_checkpoint(net, cfg.output_dir, cfg.time_steps,
                         _metadata(cfg, args, history=history, accuracy=acc))
    print(f"test accuracy {acc:.4f}; checkpoint written to {cfg.output_dir}")


def cmd_run(args):
    cfg = _config(args)
    result = run_qp_pipeline(cfg, cfg.output_dir, deterministic=args.deterministic)
    ratio = result.size.total_bits / result.baseline_size.total_bits
    print(f"accuracy trained={result.accuracy['trained']:.4f} pruned={result.accuracy['pruned']:.4f} "
          f"final={result.accuracy['final']:.4f}")
    print(f"size {result.size.megabytes:.6f} MB ({ratio:.2%} of the full-precision baseline)")


def cmd_analyze(args):
    cfg = _config(args)
    net, manifest = ckpt.load_checkpoint(args.checkpoint)
    steps = manifest.get("time_steps") or cfg.time_steps
    train, _ = load_data(cfg)
    size = cfg.score_batch_size
    need = size * args.batches
    if need > len(train):
        raise ConfigError(f"{args.batches} batches of {size} need {need} samples; dataset has {len(train)}")
    cos, reports = robustness(net, train.samples[:need], steps, cfg.criterion, size, cfg.epsilon)
    util = utilization_report(net)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "importance_report.txt").write_text(reports_to_text(reports))
    (out / "importance_report.json").write_text(reports_to_json(reports))
    analysis = {"criterion": cfg.criterion, "avg_cos_similarity": {str(k): v for k, v in cos.items()},
                "utilization": [u.to_dict() for u in util]}
    (out / "analysis.json").write_text(json.dumps(analysis, indent=2, sort_keys=True))
    for k, v in sorted(cos.items()):
        print(f"layer {k}: AvgCosS={v:.6f} ({cfg.criterion})")
    for u in util:
        print(f"layer {u.layer}: {u.n_actual}/{u.n_total} levels used ({u.ratio:.2%})")


def cmd_report(args):
    net, manifest = ckpt.load_checkpoint(args.checkpoint)
    size = model_size(net)
    text = size.to_text()
    if args.config:
        cfg = _config(args)
        _, test = load_data(cfg)
        steps = manifest.get("time_steps") or cfg.time_steps
        text += count_sops(forward(net, test.samples[:64], steps), net).to_text()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "size_report.txt").write_text(size.to_text())
        (out / "size_report.json").write_text(json.dumps(size.to_dict(), indent=2, sort_keys=True))
    sys.stdout.write(text)


def cmd_inspect(args):
    manifest = ckpt.read_manifest(args.checkpoint)
    print(f"format {manifest['format']} v{manifest['version']}, input {manifest['input_shape']}, "
          f"T={manifest['time_steps']}, payload {manifest['payload_bytes']} bytes")
    for i, spec in enumerate(manifest["architecture"]):
        extra = {k: v for k, v in spec.items() if k != "kind" and v is not None}
        print(f"  [{i}] {spec['kind']} {json.dumps(extra, sort_keys=True) if extra else ''}".rstrip())
    for idx, q in sorted(manifest["quantization"].items(), key=lambda kv: int(kv[0])):
        print(f"  layer {idx}: {q['bits']}-bit {q['gamma_option']} gamma={q['gamma']:.6g}")
    for idx, kept in sorted(manifest["prune_masks"].items(), key=lambda kv: int(kv[0])):
        print(f"  layer {idx}: kept channels {kept}")


COMMANDS = {
    "train": cmd_train,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "run": cmd_run,
    "analyze": cmd_analyze,
    "report": cmd_report,
    "inspect": cmd_inspect,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limits = threadpool_limits(1) if getattr(args, "deterministic", False) else contextlib.nullcontext()
    try:
        with limits:
            COMMANDS[args.command](args)
    except (ConfigError, ParseError) as exc:
        print(f"qpsnn: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"qpsnn: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc.cause, (ConfigError, ParseError)) else EXIT_RUNTIME
    except (QPSNNError, OSError) as exc:
        print(f"qpsnn: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
