"""Storage and synaptic-operation accounting.

Model size is ``sum(P_q * B_q) + sum(P_fp * B_fp)`` in bits; megabytes use a
2**20-byte basis.  Per-channel scale and bias parameters are full precision.

SOP convention (artifact-defined): every spike arriving at a weighted layer
costs one accumulate per outgoing connection it touches, summed over time
steps and samples.  The analog input to the first layer and pooling layers are
not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import Conv2D, Dense, ForwardTrace, Network

FP_BITS = 32
MB = 1 << 20
SIZE_HEADER = "# model size: bits = sum(P_q*B_q) + sum(P_fp*B_fp); MB = bytes / 2**20"
SOP_HEADER = "# SOPs: spikes into weighted layers x fan-out, summed over T; input layer and pooling excluded"


@dataclass(frozen=True)
class SizeEntry:
    name: str
    params: int
    bits: int

    @property
    def total_bits(self):
        return self.params * self.bits


@dataclass
class SizeReport:
    entries: list = field(default_factory=list)

    @classmethod
    def from_counts(cls, counts):
        """Build from ``(params, bits)`` pairs."""
        return cls([SizeEntry(f"group{i}", int(p), int(b)) for i, (p, b) in enumerate(counts)])

    @property
    def total_bits(self):
        return sum(e.total_bits for e in self.entries)

    @property
    def p_q(self):
        return sum(e.params for e in self.entries if e.bits != FP_BITS)

    @property
    def p_fp(self):
        return sum(e.params for e in self.entries if e.bits == FP_BITS)

    @property
    def bytes(self):
        return self.total_bits / 8

    @property
    def megabytes(self):
        return self.bytes / MB

    def to_dict(self):
        return {
            "entries": [{"name": e.name, "params": e.params, "bits": e.bits, "total_bits": e.total_bits}
                        for e in self.entries],
            "p_q": self.p_q,
            "p_fp": self.p_fp,
            "total_bits": self.total_bits,
            "bytes": self.bytes,
            "megabytes": self.megabytes,
        }

    def to_text(self):
        lines = [SIZE_HEADER, f"{'name':<16}{'params':>10}{'bits':>6}{'total_bits':>14}"]
        for e in self.entries:
            lines.append(f"{e.name:<16}{e.params:>10}{e.bits:>6}{e.total_bits:>14}")
        lines.append(f"P_q={self.p_q} P_fp={self.p_fp} bits={self.total_bits} "
                     f"bytes={self.bytes:g} MB={self.megabytes:.6f}")
        return "\n".join(lines) + "\n"


def model_size(net: Network, full_precision=False) -> SizeReport:
    """Exact bit accounting; ``full_precision=True`` prices every weight at 32 bits."""
    entries = []
    for i in net.weighted_indices():
        layer = net.layers[i]
        bits = FP_BITS if (full_precision or layer.quantizer is None) else layer.quantizer.bits
        entries.append(SizeEntry(f"{layer.kind}{i}.weight", int(layer.weight.size), bits))
        entries.append(SizeEntry(f"{layer.kind}{i}.affine", int(layer.scale.size + layer.bias.size), FP_BITS))
    return SizeReport(entries)


@dataclass
class SopReport:
    per_layer: dict = field(default_factory=dict)

    @property
    def total(self):
        return sum(self.per_layer.values())

    def to_dict(self):
        return {"per_layer": {str(k): v for k, v in self.per_layer.items()}, "total": self.total}

    def to_text(self):
        lines = [SOP_HEADER]
        lines += [f"layer {k}: {v}" for k, v in sorted(self.per_layer.items())]
        lines.append(f"total: {self.total}")
        return "\n".join(lines) + "\n"


def conv_fanout(layer: Conv2D, in_hw):
    """Connections leaving each input pixel of one channel: [H, W]."""
    h, w = in_hw
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    counts = np.zeros((h + 2 * p, w + 2 * p), dtype=np.int64)
    for i in range(k):
        for j in range(k):
            counts[i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += 1
    return counts[p:p + h, p:p + w] * layer.out_channels


def count_sops(trace: ForwardTrace, net: Network) -> SopReport:
    report = SopReport()
    weighted = net.weighted_indices()
    for i in weighted[1:]:
        layer = net.layers[i]
        spikes = trace.inputs[i]
        if isinstance(layer, Conv2D):
            fan = conv_fanout(layer, spikes.shape[-2:])
            events = spikes.sum(axis=(0, 1, 2))  # per pixel, summed over T, B, C
            report.per_layer[i] = int(round(float((events * fan).sum())))
        elif isinstance(layer, Dense):
            report.per_layer[i] = int(round(float(spikes.sum()))) * layer.out_features
    return report
