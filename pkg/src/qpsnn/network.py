"""Feed-forward spiking network: layer definitions and the time-unrolled forward pass.

A network is a flat list of layers.  Every weighted layer (``Conv2D`` or
``Dense``) is immediately followed by a ``LifActivation``; ``MaxPool`` layers
may follow an activation.  Stateless layers process all time steps at once by
folding time into the batch axis; only the LIF layers loop over time.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError
from .neuron import LifLayerState, LifParams, run_lif
from .numerics import as_tensor
from .quantize import Quantized, QuantizerSpec, quantize


class Conv2D:
    kind = "conv"
    weighted = True

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 quantizer=None, prunable=True, prune_ratio=0.0):
        if min(in_channels, out_channels, kernel_size, stride) < 1 or padding < 0:
            raise InvalidArgumentError("conv dimensions must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.quantizer = quantizer
        self.prunable = prunable
        self.prune_ratio = prune_ratio
        self.weight = np.zeros((out_channels, in_channels, kernel_size, kernel_size))
        self.scale = np.ones(out_channels)
        self.bias = np.zeros(out_channels)

    @property
    def fan_in(self):
        return self.in_channels * self.kernel_size ** 2

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise InvalidArgumentError(f"conv expects {self.in_channels} input channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise InvalidArgumentError(f"conv kernel {k} does not fit a {h}x{w} input")
        return (self.out_channels, ho, wo)

    def _windows(self, x):
        p, s, k = self.padding, self.stride, self.kernel_size
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        # [N, Ho, Wo, C*k*k]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)

    def forward(self, x, w_eff):
        cols = self._windows(x)
        z = cols @ w_eff.reshape(self.out_channels, -1).T  # [N, Ho, Wo, F]
        out = z * self.scale + self.bias
        return out.transpose(0, 3, 1, 2), (x.shape, cols, z)

    def backward(self, grad_out, cache, w_eff, need_input_grad=True):
        x_shape, cols, z = cache
        g = grad_out.transpose(0, 2, 3, 1)  # [N, Ho, Wo, F]
        grad_scale = np.einsum("nhwf,nhwf->f", g, z)
        grad_bias = g.sum(axis=(0, 1, 2))
        gz = g * self.scale
        f = self.out_channels
        grad_w = (gz.reshape(-1, f).T @ cols.reshape(-1, cols.shape[-1])).reshape(w_eff.shape)
        grads = {"weight": grad_w, "scale": grad_scale, "bias": grad_bias}
        if not need_input_grad:
            return None, grads
        n, c, h, w = x_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = gz.shape[1:3]
        gcols = (gz @ w_eff.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gxp[:, :, p:p + h, p:p + w], grads

    def spec(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
            "quantizer": self.quantizer.to_dict() if self.quantizer else None,
            "prunable": self.prunable,
            "prune_ratio": self.prune_ratio,
        }


class Dense:
    kind = "dense"
    weighted = True
    prunable = False
    prune_ratio = 0.0

    def __init__(self, in_features, out_features, quantizer=None):
        if min(in_features, out_features) < 1:
            raise InvalidArgumentError("dense dimensions must be positive")
        self.in_features = in_features
        self.out_features = out_features
        self.quantizer = quantizer
        self.weight = np.zeros((out_features, in_features))
        self.scale = np.ones(out_features)
        self.bias = np.zeros(out_features)

    @property
    def out_channels(self):
        return self.out_features

    @property
    def fan_in(self):
        return self.in_features

    def output_shape(self, in_shape):
        n = int(np.prod(in_shape))
        if n != self.in_features:
            raise InvalidArgumentError(f"dense expects {self.in_features} inputs, got {n}")
        return (self.out_features,)

    def forward(self, x, w_eff):
        flat = x.reshape(x.shape[0], -1)
        z = flat @ w_eff.T
        return z * self.scale + self.bias, (x.shape, flat, z)

    def backward(self, grad_out, cache, w_eff, need_input_grad=True):
        x_shape, flat, z = cache
        grads = {
            "weight": (grad_out * self.scale).T @ flat,
            "scale": (grad_out * z).sum(axis=0),
            "bias": grad_out.sum(axis=0),
        }
        if not need_input_grad:
            return None, grads
        return ((grad_out * self.scale) @ w_eff).reshape(x_shape), grads

    def spec(self):
        return {
            "kind": self.kind,
            "in_features": self.in_features,
            "out_features": self.out_features,
            "quantizer": self.quantizer.to_dict() if self.quantizer else None,
        }


class MaxPool:
    """Non-overlapping max pooling; on binary spike maps the output stays binary."""

    kind = "maxpool"
    weighted = False

    def __init__(self, size=2):
        if size < 1:
            raise InvalidArgumentError("pool size must be positive")
        self.size = size

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise InvalidArgumentError(f"pool size {self.size} exceeds {h}x{w} map")
        return (c, h // self.size, w // self.size)

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.size
        ho, wo = h // k, w // k
        win = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
        # ties go to the first element in row-major window order
        arg = win.argmax(axis=-1)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], (x.shape, arg)

    def backward(self, grad_out, cache):
        (n, c, h, w), arg = cache
        k = self.size
        ho, wo = grad_out.shape[2:]
        g = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(g, arg[..., None], grad_out[..., None], axis=-1)
        g = g.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        out = np.zeros((n, c, h, w))
        out[:, :, :ho * k, :wo * k] = g
        return out

    def spec(self):
        return {"kind": self.kind, "size": self.size}


class LifActivation:
    kind = "lif"
    weighted = False

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def spec(self):
        return {"kind": self.kind}


@dataclass
class ForwardTrace:
    """Everything one forward pass leaves behind for training, scoring and accounting."""

    steps: int
    batch: int
    states: dict = field(default_factory=dict)      # lif layer idx -> LifLayerState
    inputs: dict = field(default_factory=dict)      # weighted layer idx -> input [T, B, ...]
    caches: dict = field(default_factory=dict)      # layer idx -> backward cache
    quantized: dict = field(default_factory=dict)   # weighted layer idx -> Quantized | None
    readout: np.ndarray | None = None
    network_id: int = 0
    version: int = 0

    def output_spikes(self):
        last = max(self.states)
        return self.states[last].spikes


class Network:
    def __init__(self, input_shape, layers, lif=None):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.layers = list(layers)
        self.lif = lif or LifParams()
        self.version = 0
        self.validate()

    def touch(self):
        """Mark parameters as changed; traces recorded earlier become stale."""
        self.version += 1

    def validate(self):
        if not self.layers:
            raise InvalidArgumentError("network has no layers")
        weighted = self.weighted_indices()
        if not weighted or weighted[0] != 0:
            raise InvalidArgumentError("first layer must be a weighted layer")
        for i, layer in enumerate(self.layers):
            if layer.weighted:
                nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
                if not isinstance(nxt, LifActivation):
                    raise InvalidArgumentError(f"layer {i}: weighted layer must be followed by a LIF activation")
        if not isinstance(self.layers[-1], LifActivation):
            raise InvalidArgumentError("last layer must be a LIF activation")
        if not isinstance(self.layers[weighted[-1]], Dense):
            raise InvalidArgumentError("last weighted layer must be dense (classifier)")
        for i in (weighted[0], weighted[-1]):
            if self.layers[i].quantizer is not None:
                raise InvalidArgumentError(f"layer {i}: first and last weighted layers stay full precision")
        self.shapes()

    def shapes(self):
        """Per-sample output shape of every layer."""
        out = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except InvalidArgumentError as exc:
                raise InvalidArgumentError(f"layer {i}: {exc}") from None
            out.append(shape)
        return out

    def input_shape_of(self, idx):
        return self.input_shape if idx == 0 else self.shapes()[idx - 1]

    def weighted_indices(self):
        return [i for i, layer in enumerate(self.layers) if layer.weighted]

    def lif_indices(self):
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, LifActivation)]

    def prunable_indices(self):
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv2D) and layer.prunable]

    @property
    def n_classes(self):
        return self.layers[self.weighted_indices()[-1]].out_features

    def parameters(self):
        """Yield ``(layer_idx, name, array)`` for every trainable tensor."""
        for i in self.weighted_indices():
            layer = self.layers[i]
            for name in ("weight", "scale", "bias"):
                yield i, name, getattr(layer, name)

    def effective_weight(self, idx) -> tuple[np.ndarray, Quantized | None]:
        layer = self.layers[idx]
        if layer.quantizer is None:
            return layer.weight, None
        q = quantize(layer.weight, layer.quantizer)
        return q.w_hat, q

    def clone(self):
        return copy.deepcopy(self)

    def architecture(self):
        return [layer.spec() for layer in self.layers]

    @classmethod
    def from_architecture(cls, input_shape, specs, lif=None):
        layers = [layer_from_spec(s) for s in specs]
        return cls(input_shape, layers, lif)


def layer_from_spec(spec):
    kind = spec["kind"]
    q = spec.get("quantizer")
    quant = QuantizerSpec.from_dict(q) if q else None
    if kind == "conv":
        return Conv2D(spec["in_channels"], spec["out_channels"], spec["kernel_size"],
                      spec.get("stride", 1), spec.get("padding", 0), quant,
                      spec.get("prunable", True), spec.get("prune_ratio", 0.0))
    if kind == "dense":
        return Dense(spec["in_features"], spec["out_features"], quant)
    if kind == "maxpool":
        return MaxPool(spec.get("size", 2))
    if kind == "lif":
        return LifActivation()
    raise InvalidArgumentError(f"unknown layer kind {kind!r}")


def build_network(input_shape, arch, lif=None, quantizer=None, seed=0):
    """Build and initialize a network from a compact layer list.

    ``arch`` entries need only the output sizes (``out_channels`` /
    ``out_features``); input sizes are inferred.  ``quantizer`` is attached to
    every weighted layer except the first and the last unless an entry carries
    its own ``quantizer`` key (``None`` disables it).
    """
    specs = []
    shape = tuple(input_shape)
    weighted_pos = [i for i, s in enumerate(arch) if s["kind"] in ("conv", "dense")]
    for i, entry in enumerate(arch):
        spec = dict(entry)
        kind = spec["kind"]
        if kind in ("conv", "dense"):
            if "quantizer" not in spec:
                inner = i not in (weighted_pos[0], weighted_pos[-1])
                spec["quantizer"] = quantizer.to_dict() if (quantizer and inner) else None
            elif isinstance(spec["quantizer"], QuantizerSpec):
                spec["quantizer"] = spec["quantizer"].to_dict()
        if kind == "conv":
            spec.setdefault("in_channels", shape[0])
        elif kind == "dense":
            spec.setdefault("in_features", int(np.prod(shape)))
        layer = layer_from_spec(spec)
        shape = layer.output_shape(shape)
        specs.append(layer.spec())
    net = Network.from_architecture(input_shape, specs, lif)
    init_weights(net, seed)
    return net


def init_weights(net: Network, seed=0):
    """Kaiming-normal weights (std = sqrt(2 / fan_in)); unit scale, zero bias."""
    rng = np.random.default_rng(seed)
    for i in net.weighted_indices():
        layer = net.layers[i]
        layer.weight = rng.normal(0.0, np.sqrt(2.0 / layer.fan_in), size=layer.weight.shape)
        layer.scale = np.ones_like(layer.scale)
        layer.bias = np.zeros_like(layer.bias)
    net.touch()
    return net


def forward(net: Network, x, steps) -> ForwardTrace:
    """Present the static input ``x`` ([B, C, H, W]) as input current for ``steps`` steps."""
    if steps < 1:
        raise InvalidArgumentError("time steps must be >= 1")
    x = as_tensor(x, "input")
    if x.ndim != len(net.input_shape) + 1 or tuple(x.shape[1:]) != net.input_shape:
        raise InvalidArgumentError(f"input shape {x.shape} does not match network input {net.input_shape}")
    batch = x.shape[0]
    trace = ForwardTrace(steps, batch, network_id=id(net), version=net.version)
    h = np.broadcast_to(x, (steps,) + x.shape)
    for i, layer in enumerate(net.layers):
        if layer.weighted:
            w_eff, q = net.effective_weight(i)
            trace.inputs[i] = h
            flat = h.reshape((steps * batch,) + h.shape[2:])
            try:
                out, cache = layer.forward(flat, w_eff)
            except ValueError as exc:
                raise InvalidArgumentError(f"layer {i}: {exc}") from None
            trace.caches[i] = cache
            trace.quantized[i] = q
            h = out.reshape((steps, batch) + out.shape[1:])
        elif isinstance(layer, MaxPool):
            flat = h.reshape((steps * batch,) + h.shape[2:])
            out, cache = layer.forward(flat)
            trace.caches[i] = cache
            h = out.reshape((steps, batch) + out.shape[1:])
        else:
            state = run_lif(net.lif, h)
            trace.states[i] = state
            h = state.spikes
    last = net.lif_indices()[-1]
    trace.readout = trace.states[last].u_pre.mean(axis=0)
    return trace


def predict(net: Network, x, steps, batch_size=256):
    """Class predictions by argmax of the mean output potential."""
    preds = []
    for start in range(0, len(x), batch_size):
        trace = forward(net, x[start:start + batch_size], steps)
        preds.append(trace.readout.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(net: Network, x, labels, steps, batch_size=256):
    return float(np.mean(predict(net, x, steps, batch_size) == np.asarray(labels)))
