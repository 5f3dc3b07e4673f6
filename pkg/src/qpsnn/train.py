"""Spatio-temporal backpropagation, cross-entropy on the mean output potential, optimizers.

The backward pass walks the layer list in reverse.  Because connections between
layers are instantaneous, each LIF layer receives the spatial adjoint of its
spikes for *all* time steps before it runs its own reverse-time recursion.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgumentError, InvalidStateError, TrainingFailure
from .network import ForwardTrace, LifActivation, MaxPool, Network, forward
from .neuron import LifParams, surrogate_grad
from .quantize import ste_backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Settings for one training phase (quantized training or fine-tuning)."""

    epochs: int = 10
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    seed: int = 0
    time_steps: int = 2
    detach_reset: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidArgumentError("epochs must be >= 0")
        if self.lr < 0:
            raise InvalidArgumentError("learning rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.time_steps < 1:
            raise InvalidArgumentError("batch size and time steps must be >= 1")
        self.betas = tuple(self.betas)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d, **defaults):
        merged = {**defaults, **d}
        known = set(cls.__dataclass_fields__)
        unknown = set(merged) - known
        if unknown:
            raise InvalidArgumentError(f"unknown training keys: {sorted(unknown)}")
        return cls(**merged)


@dataclass
class GradientSet:
    """Gradients keyed by weighted-layer index, then by parameter name."""

    layers: dict = field(default_factory=dict)

    def __getitem__(self, idx):
        return self.layers[idx]

    def items(self):
        for idx, grads in self.layers.items():
            for name, g in grads.items():
                yield idx, name, g

    def scaled(self, k):
        return GradientSet({i: {n: k * g for n, g in gs.items()} for i, gs in self.layers.items()})

    def all_finite(self):
        return all(np.all(np.isfinite(g)) for _, _, g in self.items())


def loss(trace_or_readout, labels):
    """Mean cross-entropy of softmax(readout) and its gradient w.r.t. the readout."""
    readout = trace_or_readout.readout if isinstance(trace_or_readout, ForwardTrace) else trace_or_readout
    readout = np.asarray(readout, dtype=np.float64)
    if readout.ndim != 2:
        raise InvalidArgumentError(f"readout must be [B, N], got {readout.shape}")
    b, n = readout.shape
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape != readout.shape:
            raise InvalidArgumentError("one-hot labels must match the readout shape")
        onehot = labels.astype(np.float64)
    else:
        labels = labels.astype(np.int64)
        if labels.shape != (b,) or labels.min() < 0 or labels.max() >= n:
            raise InvalidArgumentError(f"labels must be class indices in [0, {n})")
        onehot = np.zeros((b, n))
        onehot[np.arange(b), labels] = 1.0
    shifted = readout - readout.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    value = float(-(onehot * log_p).sum() / b)
    grad = (np.exp(log_p) - onehot) / b
    return value, grad


def lif_backward(params: LifParams, state, grad_spikes, grad_u_pre_direct=None, detach_reset=False):
    """Reverse-time adjoint of one LIF layer.

    ``grad_spikes[t]`` is dL/dS[t] through the layers above; ``grad_u_pre_direct``
    adds any loss term depending on the pre-reset potential directly.  Returns
    dL/dX[t] for the input current (equal to the adjoint of the pre-reset potential).
    """
    u_pre, spikes = state.u_pre, state.spikes
    grad_x = np.empty_like(u_pre)
    carry = np.zeros(u_pre.shape[1:])  # adjoint of the post-reset potential U[t]
    for t in range(u_pre.shape[0] - 1, -1, -1):
        sg = surrogate_grad(params, u_pre[t])
        g = grad_spikes[t] * sg + carry * (1.0 - spikes[t])
        if not detach_reset:
            g = g - carry * u_pre[t] * sg
        if grad_u_pre_direct is not None:
            g = g + grad_u_pre_direct[t]
        grad_x[t] = g
        carry = params.tau * g
    return grad_x


def backward(net: Network, trace: ForwardTrace, grad_readout, detach_reset=False) -> GradientSet:
    """Gradients of the loss w.r.t. every master parameter, via STBP and STE."""
    if trace.network_id != id(net) or trace.version != net.version:
        raise InvalidStateError("trace is stale: network parameters changed after the forward pass")
    steps, batch = trace.steps, trace.batch
    grad_readout = np.asarray(grad_readout, dtype=np.float64)
    last_lif = net.lif_indices()[-1]
    if grad_readout.shape != trace.readout.shape:
        raise InvalidArgumentError("readout gradient shape mismatch")
    grads = GradientSet()
    g = None  # adjoint of the current layer's output, [T, B, ...]
    first_weighted = net.weighted_indices()[0]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if isinstance(layer, LifActivation):
            state = trace.states[i]
            gs = g if g is not None else np.zeros_like(state.spikes)
            direct = None
            if i == last_lif:
                direct = np.broadcast_to(grad_readout / steps, state.u_pre.shape)
            g = lif_backward(net.lif, state, gs, direct, detach_reset)
        elif isinstance(layer, MaxPool):
            flat = g.reshape((steps * batch,) + g.shape[2:])
            gi = layer.backward(flat, trace.caches[i])
            g = gi.reshape((steps, batch) + gi.shape[1:])
        else:
            w_eff, q = net.effective_weight(i)
            flat = g.reshape((steps * batch,) + g.shape[2:])
            gi, layer_grads = layer.backward(flat, trace.caches[i], w_eff, need_input_grad=i != first_weighted)
            if q is not None:
                layer_grads["weight"] = ste_backward(layer_grads["weight"], layer.weight / q.gamma)
            grads.layers[i] = layer_grads
            g = None if gi is None else gi.reshape((steps, batch) + gi.shape[1:])
    return grads


def cosine_lr(lr0, epoch, total_epochs):
    """``lr0 * 0.5 * (1 + cos(pi * epoch / total_epochs))``."""
    if total_epochs <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


class SGD:
    def __init__(self, net, momentum=0.9):
        self.net = net
        self.momentum = momentum
        self.velocity = {}

    def step(self, grads: GradientSet, lr):
        for i, name, g in grads.items():
            layer = self.net.layers[i]
            v = self.velocity.get((i, name))
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[(i, name)] = v
            setattr(layer, name, getattr(layer, name) - lr * v)
        self.net.touch()


class Adam:
    def __init__(self, net, betas=(0.9, 0.999), eps=1e-8):
        self.net = net
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, grads: GradientSet, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, name, g in grads.items():
            key = (i, name)
            m = self.b1 * self.m.get(key, 0.0) + (1.0 - self.b1) * g
            v = self.b2 * self.v.get(key, 0.0) + (1.0 - self.b2) * g * g
            self.m[key], self.v[key] = m, v
            layer = self.net.layers[i]
            step = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            setattr(layer, name, getattr(layer, name) - step)
        self.net.touch()


def make_optimizer(net, config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(net, config.momentum)
    return Adam(net, config.betas, config.eps)


def _arrays(data):
    if hasattr(data, "samples"):
        return data.samples, data.labels
    x, y = data
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def fit(net: Network, data, config: TrainConfig, history=None, phase="train"):
    """Minibatch forward / backward / step loop with per-epoch cosine decay."""
    x, y = _arrays(data)
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(net, config)
    for epoch in range(config.epochs):
        lr = cosine_lr(config.lr, epoch, config.epochs)
        order = rng.permutation(len(x))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            trace = forward(net, x[idx], config.time_steps)
            value, g = loss(trace, y[idx])
            if not math.isfinite(value):
                raise TrainingFailure("non-finite loss", epoch)
            grads = backward(net, trace, g, config.detach_reset)
            if not grads.all_finite():
                raise TrainingFailure("non-finite gradient", epoch)
            optimizer.step(grads, lr)
            total_loss += value * len(idx)
            correct += int((trace.readout.argmax(axis=1) == y[idx]).sum())
        record = {
            "phase": phase,
            "epoch": epoch,
            "loss": total_loss / len(x),
            "accuracy": correct / len(x),
            "lr": lr,
        }
        log.info("phase=%s epoch=%d loss=%.6f accuracy=%.4f lr=%.6g",
                 phase, epoch, record["loss"], record["accuracy"], lr)
        if history is not None:
            history.append(record)
    return net


def train_quantized(net: Network, data, config: TrainConfig, history=None):
    """Quantization-aware training: fake-quantized forward, STE backward."""
    return fit(net, data, config, history, phase="train")


def finetune(net: Network, data, config: TrainConfig, history=None):
    """Recover accuracy after pruning; same loop, fine-tune phase settings."""
    return fit(net, data, config, history, phase="finetune")
