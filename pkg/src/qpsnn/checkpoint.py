"""Checkpoint directory: ``manifest.json`` + ``weights.bin`` + ``masters.bin``.

``weights.bin`` is the deployable payload.  Quantized weights are stored as
bit-packed integer codes (LSB-first, ``bits`` bits each, each tensor padded to
a whole byte); everything else is little-endian float32.  Its size therefore
matches the model-size accounting up to per-tensor byte padding.

``masters.bin`` holds every trainable tensor as little-endian float64 so a
loaded network reproduces the original forward pass bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ParseError
from .network import Network
from .neuron import LifParams
from .quantize import quantize

FORMAT = "qpsnn-checkpoint"
VERSION = "1"
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
MASTERS = "masters.bin"


def pack_codes(codes, bits):
    codes = np.asarray(codes, dtype=np.int64).ravel()
    if codes.size and (codes.min() < 0 or codes.max() >= 1 << bits):
        raise ValueError(f"codes do not fit in {bits} bits")
    planes = (codes[:, None] >> np.arange(bits)) & 1
    return np.packbits(planes.astype(np.uint8).ravel(), bitorder="little").tobytes()


def unpack_codes(buf, bits, count):
    raw = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[:count * bits]
    if raw.size != count * bits:
        raise ParseError("packed code buffer too short")
    return (raw.reshape(count, bits).astype(np.int64) << np.arange(bits)).sum(axis=1)


def _dump_manifest(manifest):
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"


def save_checkpoint(net: Network, out_dir, time_steps=None, metadata=None):
    """Write the checkpoint; returns the manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    weights, masters = bytearray(), bytearray()
    weight_layout, master_layout, quant, masks = [], [], {}, {}
    for idx, name, arr in net.parameters():
        layer = net.layers[idx]
        master_layout.append({"layer": idx, "param": name, "shape": list(arr.shape),
                              "offset": len(masters), "encoding": "f64le"})
        masters += np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entry = {"layer": idx, "param": name, "shape": list(arr.shape), "offset": len(weights)}
        if name == "weight" and layer.quantizer is not None:
            q = quantize(arr, layer.quantizer)
            blob = pack_codes(q.codes, layer.quantizer.bits)
            entry.update(encoding="packed", bits=layer.quantizer.bits)
            quant[str(idx)] = {**layer.quantizer.to_dict(), "gamma": q.gamma}
        else:
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entry.update(encoding="f32le", bits=32)
        entry["nbytes"] = len(blob)
        weights += blob
        weight_layout.append(entry)
    for idx in net.prunable_indices():
        kept = getattr(net.layers[idx], "kept_channels", None)
        if kept is not None:
            masks[str(idx)] = [int(i) for i in kept]
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "input_shape": list(net.input_shape),
        "lif": net.lif.to_dict(),
        "time_steps": time_steps,
        "architecture": net.architecture(),
        "quantization": quant,
        "prune_masks": masks,
        "payload": {WEIGHTS: weight_layout, MASTERS: master_layout},
        "payload_bytes": len(weights),
        "metadata": metadata or {},
    }
    (out / WEIGHTS).write_bytes(bytes(weights))
    (out / MASTERS).write_bytes(bytes(masters))
    (out / MANIFEST).write_text(_dump_manifest(manifest))
    return manifest


def read_manifest(ckpt_dir):
    path = Path(ckpt_dir) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise ParseError(f"no manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest is not valid JSON: {exc.msg}", exc.pos) from None
    if manifest.get("format") != FORMAT:
        raise ParseError(f"not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise ParseError(f"unsupported checkpoint version {manifest.get('version')!r}")
    return manifest


def _slice(buf, entry, itemsize):
    count = int(np.prod(entry["shape"]))
    start = entry["offset"]
    end = start + (entry["nbytes"] if "nbytes" in entry else count * itemsize)
    if end > len(buf):
        raise ParseError(f"payload truncated for layer {entry['layer']} {entry['param']}", len(buf))
    return buf[start:end], count


def load_checkpoint(ckpt_dir):
    """Rebuild the network; returns ``(network, manifest)``."""
    ckpt = Path(ckpt_dir)
    manifest = read_manifest(ckpt)
    net = Network.from_architecture(manifest["input_shape"], manifest["architecture"],
                                    LifParams(**manifest["lif"]))
    masters = (ckpt / MASTERS).read_bytes()
    for entry in manifest["payload"][MASTERS]:
        blob, count = _slice(masters, entry, 8)
        arr = np.frombuffer(blob, dtype="<f8", count=count).astype(np.float64).reshape(entry["shape"])
        setattr(net.layers[entry["layer"]], entry["param"], arr)
    weights = (ckpt / WEIGHTS).read_bytes()
    for entry in manifest["payload"][WEIGHTS]:
        layer = net.layers[entry["layer"]]
        master = getattr(layer, entry["param"])
        blob, count = _slice(weights, entry, 4)
        if entry["encoding"] == "packed":
            codes = unpack_codes(blob, entry["bits"], count)
            expected = quantize(master, layer.quantizer).codes.ravel()
            if not np.array_equal(codes, expected):
                raise ParseError(f"packed codes for layer {entry['layer']} disagree with the masters",
                                 entry["offset"])
        else:
            stored = np.frombuffer(blob, dtype="<f4", count=count)
            if not np.array_equal(stored, master.astype(np.float32).ravel()):
                raise ParseError(f"float32 payload for layer {entry['layer']} disagrees with the masters",
                                 entry["offset"])
    for idx, kept in manifest.get("prune_masks", {}).items():
        net.layers[int(idx)].kept_channels = np.asarray(kept, dtype=np.int64)
    net.validate()
    net.touch()
    return net, manifest
