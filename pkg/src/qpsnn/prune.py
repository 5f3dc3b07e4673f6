"""Kernel importance scoring (SCA and SVS), score robustness, and structured channel removal."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError, UnsupportedLayerError
from .network import Conv2D, Dense, Network, forward
from .numerics import as_tensor, batched_singular_values, round_half_away

DEFAULT_EPSILON = 1e-6
CRITERIA = ("sca", "svs")


@dataclass
class ImportanceReport:
    layer: int | None
    criterion: str
    scores: np.ndarray
    batch_size: int
    steps: int
    batch_scores: list = field(default_factory=list)

    @property
    def n_channels(self):
        return len(self.scores)

    @classmethod
    def merge(cls, reports):
        """Combine per-batch reports of one layer; scores become the batch average."""
        reports = list(reports)
        if not reports:
            raise InvalidArgumentError("nothing to merge")
        head = reports[0]
        batch_scores = [v for r in reports for v in r.batch_scores]
        return cls(head.layer, head.criterion, np.mean(batch_scores, axis=0),
                   sum(r.batch_size for r in reports), head.steps, batch_scores)

    def to_dict(self):
        return {
            "layer": self.layer,
            "criterion": self.criterion,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "scores": self.scores.tolist(),
            "batch_scores": [np.asarray(v).tolist() for v in self.batch_scores],
        }

    def to_lines(self):
        return [f"{self.layer}\t{f}\t{s:.6g}\t{self.criterion}" for f, s in enumerate(self.scores)]


def _history(arr, what):
    arr = as_tensor(arr, what)
    if arr.ndim < 3:
        raise InvalidArgumentError(f"{what} must be shaped [B, T, C, ...], got {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidArgumentError("empty scoring batch")
    if arr.shape[1] == 0:
        raise InvalidArgumentError("history has no time steps")
    return arr


def score_sca(u_pre_history, layer=None) -> ImportanceReport:
    """Mean L1 norm of each channel's pre-reset potential map over samples and steps.

    ``u_pre_history`` is ``[B, T, C, h, w]`` (or ``[B, T, C]`` for dense layers).
    No division by the map size.
    """
    u = _history(u_pre_history, "potential history")
    b, t = u.shape[:2]
    per_channel = np.abs(u).reshape(b, t, u.shape[2], -1).sum(axis=(0, 1, 3))
    scores = per_channel / (b * t)
    return ImportanceReport(layer, "sca", scores, b, t, [scores])


def score_svs(spike_history, epsilon=DEFAULT_EPSILON, layer=None) -> ImportanceReport:
    """Batch-mean count of singular values above ``epsilon`` of each time-averaged spike map.

    ``spike_history`` is ``[B, T, C, h, w]`` with binary entries.
    """
    s = _history(spike_history, "spike history")
    if s.ndim != 5:
        raise UnsupportedLayerError("singular-value scoring needs spatial [B, T, C, h, w] spike maps")
    if not epsilon > 0:
        raise InvalidArgumentError("epsilon must be positive")
    if not np.all((s == 0.0) | (s == 1.0)):
        raise InvalidArgumentError("spike history must be binary")
    b, t = s.shape[:2]
    avg = s.mean(axis=1)  # [B, C, h, w]
    sv = batched_singular_values(avg)  # [B, C, min(h, w)]
    counts = (sv > epsilon).sum(axis=-1)
    scores = counts.mean(axis=0).astype(np.float64)
    return ImportanceReport(layer, "svs", scores, b, t, [scores])


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero score vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def avg_cos_similarity(report: ImportanceReport) -> float:
    """Mean pairwise cosine similarity of a layer's per-batch score vectors."""
    vecs = report.batch_scores
    n = len(vecs)
    if n < 2:
        raise InvalidArgumentError("need at least two scoring batches")
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += cosine_similarity(vecs[i], vecs[j])
    return 2.0 * total / (n * (n - 1))


def pruned_count(ratio, n_channels):
    """Number of channels removed, ``round(ratio * n)``; at least one channel survives."""
    k = int(round_half_away(ratio * n_channels))
    return min(max(k, 0), n_channels - 1)


@dataclass
class PruneMask:
    keep: dict                     # layer idx -> sorted kept output-channel indices
    ratios: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "keep": {str(k): [int(i) for i in v] for k, v in self.keep.items()},
            "ratios": {str(k): float(v) for k, v in self.ratios.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls({int(k): np.asarray(v, dtype=np.int64) for k, v in d["keep"].items()},
                   {int(k): float(v) for k, v in d.get("ratios", {}).items()})


def build_mask(reports, ratios, protected=None) -> PruneMask:
    """Keep the highest-scoring ``1 - r`` fraction of each layer's channels.

    Ties rank the lower channel index as more important.  The ``protected``
    layer (default: the last scored layer) always keeps all channels.
    """
    if not reports:
        raise InvalidArgumentError("no importance reports")
    if protected is None:
        protected = max(reports)
    keep, used = {}, {}
    for idx, report in reports.items():
        r = float(ratios.get(idx, 0.0)) if idx != protected else 0.0
        if not 0.0 <= r < 1.0:
            raise InvalidArgumentError(f"layer {idx}: prune ratio must lie in [0, 1), got {r}")
        scores = np.asarray(report.scores, dtype=np.float64)
        n = scores.size
        order = np.lexsort((-np.arange(n), scores))  # ascending score, higher index first on ties
        drop = pruned_count(r, n)
        keep[idx] = np.sort(order[drop:])
        used[idx] = r
    return PruneMask(keep, used)


def _next_weighted(net: Network, idx):
    for j in range(idx + 1, len(net.layers)):
        if net.layers[j].weighted:
            return j
    raise InvalidArgumentError(f"layer {idx} has no downstream weighted layer")


def _check_mask(net: Network, mask: PruneMask):
    for idx, keep in mask.keep.items():
        if idx < 0 or idx >= len(net.layers) or not isinstance(net.layers[idx], Conv2D):
            raise InvalidArgumentError(f"mask refers to layer {idx}, which is not a conv layer")
        keep = np.asarray(keep)
        n = net.layers[idx].out_channels
        if keep.size == 0 or keep.min() < 0 or keep.max() >= n or np.unique(keep).size != keep.size:
            raise InvalidArgumentError(f"layer {idx}: keep-set invalid for {n} channels")


def apply_mask(net: Network, mask: PruneMask) -> Network:
    """Physically remove pruned output channels and the matching downstream inputs (in place)."""
    _check_mask(net, mask)
    for idx in sorted(mask.keep):
        keep = np.sort(np.asarray(mask.keep[idx], dtype=np.int64))
        layer = net.layers[idx]
        nxt_idx = _next_weighted(net, idx)
        nxt = net.layers[nxt_idx]
        in_shape = net.input_shape_of(nxt_idx)
        layer.weight = layer.weight[keep].copy()
        layer.scale = layer.scale[keep].copy()
        layer.bias = layer.bias[keep].copy()
        layer.out_channels = keep.size
        prior = getattr(layer, "kept_channels", None)
        layer.kept_channels = keep if prior is None else np.asarray(prior)[keep]
        if isinstance(nxt, Conv2D):
            nxt.weight = nxt.weight[:, keep].copy()
            nxt.in_channels = keep.size
        elif isinstance(nxt, Dense):
            c = in_shape[0]
            w = nxt.weight.reshape(nxt.out_features, c, -1)[:, keep]
            nxt.weight = w.reshape(nxt.out_features, -1).copy()
            nxt.in_features = nxt.weight.shape[1]
    net.validate()
    net.touch()
    return net


def zero_mask(net: Network, mask: PruneMask) -> Network:
    """Reference for ``apply_mask``: a copy with pruned channels silenced instead of removed."""
    _check_mask(net, mask)
    ref = net.clone()
    for idx, keep in mask.keep.items():
        layer = ref.layers[idx]
        drop = np.setdiff1d(np.arange(layer.out_channels), keep)
        layer.weight[drop] = 0.0
        layer.scale[drop] = 0.0
        layer.bias[drop] = 0.0
    ref.touch()
    return ref


def score_layers(net: Network, x, steps, criterion="svs", epsilon=DEFAULT_EPSILON,
                 layers=None, batch_size=None) -> dict:
    """Run inference on ``x`` and score every requested conv layer.

    With ``batch_size`` set, ``x`` is split into disjoint batches and each
    report keeps one score vector per batch.
    """
    if criterion not in CRITERIA:
        raise InvalidArgumentError(f"unknown criterion {criterion!r}")
    if layers is None:
        layers = net.prunable_indices()
    for idx in layers:
        if criterion == "svs" and not isinstance(net.layers[idx], Conv2D):
            raise UnsupportedLayerError(f"layer {idx}: singular-value scoring needs a conv layer")
    x = np.asarray(x, dtype=np.float64)
    size = batch_size or len(x)
    partial = {idx: [] for idx in layers}
    for start in range(0, len(x) - size + 1, size):
        trace = forward(net, x[start:start + size], steps)
        for idx in layers:
            state = trace.states[idx + 1]
            if criterion == "sca":
                hist = np.swapaxes(state.u_pre, 0, 1)
                partial[idx].append(score_sca(hist, layer=idx))
            else:
                hist = np.swapaxes(state.spikes, 0, 1)
                partial[idx].append(score_svs(hist, epsilon, layer=idx))
    if not any(partial.values()):
        raise InvalidArgumentError("not enough samples for one scoring batch")
    return {idx: ImportanceReport.merge(reps) for idx, reps in partial.items()}


def reports_to_text(reports):
    lines = ["# layer\tchannel\tscore\tcriterion"]
    for idx in sorted(reports):
        lines.extend(reports[idx].to_lines())
    return "\n".join(lines) + "\n"


def reports_to_json(reports):
    return json.dumps({str(k): r.to_dict() for k, r in sorted(reports.items())}, indent=2)
