"""End-to-end compression workflow: quantized training, scoring and pruning, fine-tuning, reports."""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import load_csv, load_idx, synth_blobs
from .errors import ConfigError, InvalidArgumentError, QPSNNError, StageError
from .metrics import count_sops, model_size
from .network import Network, accuracy, build_network, forward
from .neuron import LifParams
from .prune import (
    CRITERIA,
    DEFAULT_EPSILON,
    apply_mask,
    avg_cos_similarity,
    build_mask,
    reports_to_json,
    reports_to_text,
    score_layers,
)
from .quantize import GAMMA_OPTIONS, SUPPORTED_BITS, QuantizerSpec, quantize, utilization
from .train import TrainConfig, finetune, train_quantized

log = logging.getLogger(__name__)

ORDERS = ("quantize_first", "prune_first")

DEFAULT_ARCHITECTURE = [
    {"kind": "conv", "out_channels": 16, "kernel_size": 3, "padding": 1},
    {"kind": "lif"},
    {"kind": "maxpool", "size": 2},
    {"kind": "conv", "out_channels": 32, "kernel_size": 3, "padding": 1},
    {"kind": "lif"},
    {"kind": "maxpool", "size": 2},
    {"kind": "maxpool", "size": 2},
    {"kind": "dense", "out_features": 4},
    {"kind": "lif"},
]


@dataclass
class RunConfig:
    architecture: list = field(default_factory=lambda: [dict(e) for e in DEFAULT_ARCHITECTURE])
    data: dict = field(default_factory=lambda: {"source": "synthetic"})
    neuron: LifParams = field(default_factory=LifParams)
    quantizer: QuantizerSpec | None = field(default_factory=lambda: QuantizerSpec(4, "l1_mean"))
    prune_ratio: float = 0.5
    criterion: str = "svs"
    epsilon: float = DEFAULT_EPSILON
    score_batch_size: int = 64
    order: str = "quantize_first"
    time_steps: int = 2
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, optimizer="sgd", lr=0.1))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=5, optimizer="adam", lr=1e-3))
    seed: int = 0
    output_dir: str = "qpsnn-run"

    @classmethod
    def from_dict(cls, d, base_dir="."):
        try:
            return cls._from_dict(dict(d), Path(base_dir))
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None

    @classmethod
    def _from_dict(cls, d, base_dir):
        known = {"architecture", "data", "neuron", "quantization", "pruning", "time_steps",
                 "train", "finetune", "seed", "output_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        cfg.seed = int(d.get("seed", 0))
        cfg.time_steps = int(d.get("time_steps", 2))
        if cfg.time_steps < 1:
            raise ConfigError("time_steps must be >= 1")
        if "architecture" in d:
            cfg.architecture = [dict(e) for e in d["architecture"]]
        cfg.neuron = LifParams(**d.get("neuron", {}))
        q = d.get("quantization", {"bits": 4, "gamma_option": "l1_mean"})
        if q is None or q.get("enabled", True) is False:
            cfg.quantizer = None
        else:
            if int(q.get("bits", 4)) not in SUPPORTED_BITS:
                raise ConfigError(f"quantization bits must be one of {SUPPORTED_BITS}")
            if q.get("gamma_option", "l1_mean") not in GAMMA_OPTIONS:
                raise ConfigError(f"gamma_option must be one of {GAMMA_OPTIONS}")
            cfg.quantizer = QuantizerSpec.from_dict(q)
        p = d.get("pruning", {})
        cfg.prune_ratio = float(p.get("ratio", 0.5))
        cfg.criterion = p.get("criterion", "svs")
        cfg.epsilon = float(p.get("epsilon", DEFAULT_EPSILON))
        cfg.score_batch_size = int(p.get("batch_size", 64))
        cfg.order = p.get("order", "quantize_first")
        if cfg.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}")
        if cfg.order not in ORDERS:
            raise ConfigError(f"order must be one of {ORDERS}")
        ratios = [cfg.prune_ratio] + [e["prune_ratio"] for e in cfg.architecture if "prune_ratio" in e]
        if any(not 0.0 <= r < 1.0 for r in ratios):
            raise ConfigError("prune ratios must lie in [0, 1)")
        phase_defaults = {"time_steps": cfg.time_steps, "seed": cfg.seed}
        cfg.train = TrainConfig.from_dict(d.get("train", {}), **{"epochs": 10, "optimizer": "sgd", "lr": 0.1,
                                                                 **phase_defaults})
        cfg.finetune = TrainConfig.from_dict(d.get("finetune", {}), **{"epochs": 5, "optimizer": "adam",
                                                                       "lr": 1e-3, **phase_defaults})
        cfg.data = dict(d.get("data", {"source": "synthetic"}))
        cfg._check_data(base_dir)
        cfg.output_dir = d.get("output_dir", cfg.output_dir)
        return cfg

    def _check_data(self, base_dir):
        source = self.data.get("source", "synthetic")
        if source == "synthetic":
            return
        keys = {"idx": ("train_images", "test_images"), "csv": ("train", "test")}.get(source)
        if keys is None:
            raise ConfigError(f"unknown data source {source!r}")
        for key in keys + ("train_labels", "test_labels"):
            if key not in self.data:
                if key in keys:
                    raise ConfigError(f"data.{key} is required for source {source!r}")
                continue
            path = Path(self.data[key])
            if not path.is_absolute():
                path = base_dir / path
            if not path.exists():
                raise ConfigError(f"data.{key}: {path} does not exist")
            self.data[key] = str(path)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self):
        return {
            "architecture": self.architecture,
            "data": self.data,
            "neuron": self.neuron.to_dict(),
            "quantization": self.quantizer.to_dict() if self.quantizer else None,
            "pruning": {"ratio": self.prune_ratio, "criterion": self.criterion, "epsilon": self.epsilon,
                        "batch_size": self.score_batch_size, "order": self.order},
            "time_steps": self.time_steps,
            "train": self.train.to_dict(),
            "finetune": self.finetune.to_dict(),
            "seed": self.seed,
            "output_dir": self.output_dir,
        }


def load_data(cfg: RunConfig):
    """Return ``(train, test)`` datasets for the configured source."""
    d = cfg.data
    source = d.get("source", "synthetic")
    if source == "synthetic":
        opts = {k: d[k] for k in ("jitter", "noise", "blob_width", "amplitude", "channels") if k in d}
        common = dict(n_classes=int(d.get("n_classes", 4)), image_size=int(d.get("image_size", 16)),
                      seed=int(d.get("seed", cfg.seed)), **opts)
        train = synth_blobs(n_per_class=int(d.get("n_per_class", 100)), split="train", **common)
        test = synth_blobs(n_per_class=int(d.get("test_per_class", 50)), split="test", **common)
        return train, test
    if source == "idx":
        train = load_idx(d["train_images"], d.get("train_labels"), d.get("n_classes"), "train")
        test = load_idx(d["test_images"], d.get("test_labels"), d.get("n_classes") or train.n_classes, "test")
        return train, test
    train = load_csv(d["train"], d.get("image_shape"), d.get("n_classes"), "train")
    test = load_csv(d["test"], d.get("image_shape"), d.get("n_classes") or train.n_classes, "test")
    return train, test


def build_from_config(cfg: RunConfig, image_shape):
    arch = [dict(e) for e in cfg.architecture]
    for e in arch:
        if e["kind"] == "conv":
            e.setdefault("prune_ratio", cfg.prune_ratio)
    return build_network(image_shape, arch, cfg.neuron, cfg.quantizer, cfg.seed)


def scoring_batch(train, cfg: RunConfig):
    """Fixed-seed mini-batch drawn from the training set."""
    rng = np.random.default_rng([cfg.seed, 1])
    n = min(cfg.score_batch_size, len(train))
    return train.samples[rng.choice(len(train), size=n, replace=False)]


def prune_network(net: Network, x, cfg: RunConfig, criterion=None):
    """Score prunable layers on ``x``, build the mask, apply it. Returns ``(reports, mask)``."""
    criterion = criterion or cfg.criterion
    reports = score_layers(net, x, cfg.time_steps, criterion, cfg.epsilon)
    ratios = {i: net.layers[i].prune_ratio for i in reports}
    mask = build_mask(reports, ratios, protected=max(net.prunable_indices()))
    apply_mask(net, mask)
    return reports, mask


def utilization_report(net: Network):
    entries = []
    for i in net.weighted_indices():
        layer = net.layers[i]
        if layer.quantizer is None:
            continue
        q = quantize(layer.weight, layer.quantizer)
        entries.append(utilization(q.codes, layer.quantizer.bits, layer.weight, layer=i))
    return entries


def robustness(net: Network, x, steps, criterion, batch_size, epsilon=DEFAULT_EPSILON, layers=None):
    """Per-layer AvgCosS over disjoint batches of ``x``."""
    reports = score_layers(net, x, steps, criterion, epsilon, layers=layers, batch_size=batch_size)
    return {i: avg_cos_similarity(r) for i, r in reports.items()}, reports


def _set_quantizers(net: Network, specs):
    for i, spec in specs.items():
        net.layers[i].quantizer = spec
    net.touch()


@dataclass
class PipelineResult:
    network: Network
    manifest: dict
    reports: dict
    accuracy: dict
    size: object
    baseline_size: object
    utilization: list
    history: list
    out_dir: Path


def _write_text(path, text):
    Path(path).write_text(text)


def write_reports(out, result_parts):
    out = Path(out)
    size, baseline = result_parts["size"], result_parts["baseline_size"]
    _write_text(out / "size_report.txt",
                size.to_text() + f"# full-precision unpruned baseline bits={baseline.total_bits} "
                                 f"ratio={size.total_bits / baseline.total_bits:.6f}\n")
    _write_text(out / "size_report.json", json.dumps(
        {"model": size.to_dict(), "baseline": baseline.to_dict(),
         "ratio": size.total_bits / baseline.total_bits}, indent=2, sort_keys=True))
    util = [u.to_dict() for u in result_parts["utilization"]]
    _write_text(out / "utilization_report.json", json.dumps(util, indent=2, sort_keys=True))
    _write_text(out / "utilization_report.txt", "".join(
        f"layer {u['layer']}: bits={u['bits']} used={u['n_actual']}/{u['n_total']} "
        f"ratio={u['ratio']:.4f} analytic={u['analytic']:.4f}\n" for u in util))
    if result_parts.get("reports"):
        _write_text(out / "importance_report.txt", reports_to_text(result_parts["reports"]))
        _write_text(out / "importance_report.json", reports_to_json(result_parts["reports"]))
    _write_text(out / "accuracy.json", json.dumps(result_parts["accuracy"], indent=2, sort_keys=True))


def run_qp_pipeline(cfg: RunConfig, out_dir=None, deterministic=False) -> PipelineResult:
    """Quantized training, one-shot scoring and pruning, fine-tuning, checkpoint and reports."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = {"stage": "data", "net": None, "reports": {}, "accuracy": {}, "history": []}
    try:
        train, test = load_data(cfg)
        state["stage"] = "build"
        net = build_from_config(cfg, train.image_shape)
        state["net"] = net
        baseline = model_size(net, full_precision=True)
        steps = cfg.time_steps
        quant_specs = {i: net.layers[i].quantizer for i in net.weighted_indices()
                       if net.layers[i].quantizer is not None}
        history = state["history"]

        if cfg.order == "quantize_first":
            state["stage"] = "train"
            train_quantized(net, train, cfg.train, history)
        else:
            state["stage"] = "train"
            _set_quantizers(net, {i: None for i in quant_specs})
            train_quantized(net, train, cfg.train, history)
        state["accuracy"]["trained"] = accuracy(net, test.samples, test.labels, steps)

        state["stage"] = "prune"
        reports, mask = prune_network(net, scoring_batch(train, cfg), cfg)
        state["reports"] = reports
        state["accuracy"]["pruned"] = accuracy(net, test.samples, test.labels, steps)

        state["stage"] = "finetune"
        if cfg.order == "prune_first":
            finetune(net, train, cfg.finetune, history)
            _set_quantizers(net, quant_specs)
        finetune(net, train, cfg.finetune, history)
        state["accuracy"]["final"] = accuracy(net, test.samples, test.labels, steps)

        state["stage"] = "report"
        size = model_size(net)
        util = utilization_report(net)
        sops = count_sops(forward(net, test.samples[:64], steps), net)
        metadata = {
            "seed": cfg.seed,
            "order": cfg.order,
            "criterion": cfg.criterion,
            "deterministic": bool(deterministic),
            "config": {k: v for k, v in cfg.to_dict().items() if k != "output_dir"},
            "history": history,
            "accuracy": state["accuracy"],
        }
        manifest = ckpt.save_checkpoint(net, out, steps, metadata)
        parts = {"size": size, "baseline_size": baseline, "utilization": util,
                 "reports": reports, "accuracy": state["accuracy"]}
        write_reports(out, parts)
        _write_text(out / "sop_report.txt", sops.to_text())
        return PipelineResult(net, manifest, reports, state["accuracy"], size, baseline, util, history, out)
    except QPSNNError as exc:
        _quarantine(out, state)
        raise StageError(state["stage"], exc) from exc


def _quarantine(out, state):
    q = Path(out) / "quarantine"
    if q.exists():
        shutil.rmtree(q)
    q.mkdir(parents=True)
    (q / "stage.txt").write_text(f"failed stage: {state['stage']}\n")
    (q / "history.json").write_text(json.dumps(state["history"], indent=2))
    if state["reports"]:
        (q / "importance_report.txt").write_text(reports_to_text(state["reports"]))
    net = state["net"]
    if net is not None:
        try:
            ckpt.save_checkpoint(net, q / "checkpoint", metadata={"partial": True, "stage": state["stage"]})
        except (QPSNNError, ValueError) as exc:
            log.warning("could not save partial checkpoint: %s", exc)
