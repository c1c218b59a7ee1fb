"""Small CNNs: initialization, lowered-convolution forward, backprop, RMSProp.

Convolution layers run through the lowering path (patch gathering is the
kernels backend's ``im2col``, the product is one BLAS GEMM per layer per
batch).  Loss is softmax cross-entropy; updates are RMSProp-scaled SGD.
Pruning masks enter the forward pass as exact weight zeroing and the
backward pass as gradient zeroing, so masked weights stay exactly zero
through any number of update steps.

``weight_tf`` / ``act_tf`` are optional per-layer transforms applied to
weights before use and to activations after the nonlinearity; the
quantization module uses them for fixed-point forward passes while the
float master weights keep receiving the gradient updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .arch import Arch
from .errors import ShapeError, TrainingError
from .lowering import dense_cols
from .rng import Rng
from .tensor import DTYPE

__all__ = [
    "Network",
    "TrainConfig",
    "TrainReport",
    "EpochStats",
    "init_network",
    "forward",
    "backward",
    "softmax",
    "softmax_xent",
    "train",
    "evaluate_mcr",
]


@dataclass
class Network:
    """Parameter arrays laid out per the Arch.

    conv_kernels[i] has shape (out_maps, in_maps, k, k) for the i-th conv
    layer; fc_weights[j] has shape (fan_in, out) for the j-th fully
    connected layer.
    """

    arch: Arch
    conv_kernels: list[np.ndarray]
    conv_biases: list[np.ndarray]
    fc_weights: list[np.ndarray]
    fc_biases: list[np.ndarray]

    def param_count(self) -> int:
        return sum(
            a.size
            for a in (
                *self.conv_kernels,
                *self.conv_biases,
                *self.fc_weights,
                *self.fc_biases,
            )
        )

    def copy(self) -> "Network":
        return Network(
            self.arch,
            [a.copy() for a in self.conv_kernels],
            [a.copy() for a in self.conv_biases],
            [a.copy() for a in self.fc_weights],
            [a.copy() for a in self.fc_biases],
        )

    def astype(self, dtype) -> "Network":
        return Network(
            self.arch,
            [a.astype(dtype) for a in self.conv_kernels],
            [a.astype(dtype) for a in self.conv_biases],
            [a.astype(dtype) for a in self.fc_weights],
            [a.astype(dtype) for a in self.fc_biases],
        )

    def params(self):
        """Flat list of (group, index, array) over every parameter array."""
        out = []
        for name, arrs in (
            ("conv_w", self.conv_kernels),
            ("conv_b", self.conv_biases),
            ("fc_w", self.fc_weights),
            ("fc_b", self.fc_biases),
        ):
            out.extend((name, i, a) for i, a in enumerate(arrs))
        return out


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    seed: int = 0
    lr_stall_patience: int = 3  # halve lr after this many epochs w/o val improvement
    lr_decay: float = 0.5
    early_stop_patience: int = 0  # 0 disables; needs a validation set

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.rmsprop_decay < 1.0:
            raise ValueError("rmsprop_decay must lie in (0, 1)")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_mcr: float
    val_mcr: float  # nan when no validation set was given


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    final_lr: float = 0.0

    @property
    def final_train_mcr(self) -> float:
        return self.epochs[-1].train_mcr if self.epochs else math.nan

    @property
    def final_val_mcr(self) -> float:
        return self.epochs[-1].val_mcr if self.epochs else math.nan


def init_network(arch: Arch, rng: Rng) -> Network:
    """He-style init: zero-mean Gaussian, std sqrt(2 / fan_in); zero biases."""
    if arch.layers[-1].kind != "fc":
        raise ShapeError("trainable networks must end in a fully connected layer")
    conv_w, conv_b, fc_w, fc_b = [], [], [], []
    for l in arch.layers:
        if l.kind == "conv":
            std = math.sqrt(2.0 / (l.in_maps * l.kernel * l.kernel))
            w = rng.gen.standard_normal(
                (l.out_maps, l.in_maps, l.kernel, l.kernel), dtype=np.float32
            )
            conv_w.append((w * std).astype(DTYPE))
            conv_b.append(np.zeros(l.out_maps, dtype=DTYPE))
        elif l.kind == "fc":
            std = math.sqrt(2.0 / l.fc_in)
            w = rng.gen.standard_normal((l.fc_in, l.out_maps), dtype=np.float32)
            fc_w.append((w * std).astype(DTYPE))
            fc_b.append(np.zeros(l.out_maps, dtype=DTYPE))
    return Network(arch, conv_w, conv_b, fc_w, fc_b)


def _effective_weights(net, bits, weight_tf):
    """Per-layer weights as the forward pass will use them."""
    conv_eff, fc_eff = [], []
    for ci, w in enumerate(net.conv_kernels):
        if weight_tf is not None:
            w = weight_tf("conv", ci, w)
        if bits is not None:
            w = w * bits.conv[ci]
        conv_eff.append(w)
    for fi, w in enumerate(net.fc_weights):
        if weight_tf is not None:
            w = weight_tf("fc", fi, w)
        if bits is not None:
            w = w * bits.fc[fi]
        fc_eff.append(w)
    return conv_eff, fc_eff


def forward(
    net: Network,
    x: np.ndarray,
    mask=None,
    weight_tf=None,
    act_tf=None,
    want_cache: bool = False,
):
    """Run the network on a batch (n, c, h, w); returns (logits, cache).

    cache is None unless requested; it holds everything backward() needs,
    including the effective (masked / transformed) weights actually used.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch must be 4-D (n, c, h, w), got {x.shape}")
    if x.shape[1] != net.arch.layers[0].out_maps:
        raise ShapeError(
            f"batch has {x.shape[1]} channels, network expects "
            f"{net.arch.layers[0].out_maps}"
        )
    bits = mask.expand() if mask is not None else None
    conv_eff, fc_eff = _effective_weights(net, bits, weight_tf)

    n = x.shape[0]
    a = x
    cache = [] if want_cache else None
    ci = fi = 0
    flat_shape = None
    for li, l in enumerate(net.arch.layers):
        if l.kind == "input":
            continue
        if l.kind == "conv":
            k = l.kernel
            cols = dense_cols(l.in_maps, k)
            a = np.ascontiguousarray(a)
            feat = kernels.im2col(a, k, cols)  # (n*P, Q)
            kmat = conv_eff[ci].reshape(l.out_maps, -1).T
            z = feat @ kmat + net.conv_biases[ci].astype(feat.dtype)
            oh, ow = l.out_hw
            z = z.reshape(n, oh * ow, l.out_maps).transpose(0, 2, 1)
            z = z.reshape(n, l.out_maps, oh, ow)
            relu_mask = z > 0
            a = z * relu_mask
            if act_tf is not None:
                a = act_tf(li, a)
            if want_cache:
                cache.append(("conv", ci, feat, kmat, relu_mask, a.shape, k, cols))
            ci += 1
        elif l.kind == "pool":
            a = np.ascontiguousarray(a)
            a, argwin = kernels.maxpool2(a)
            if want_cache:
                cache.append(("pool", argwin))
        else:  # fc
            if a.ndim == 4:
                flat_shape = a.shape
                a = a.reshape(n, -1)
                if want_cache:
                    cache.append(("flatten", flat_shape))
            a_in = a
            z = a_in @ fc_eff[fi] + net.fc_biases[fi].astype(a.dtype)
            if l.activation == "relu":
                relu_mask = z > 0
                a = z * relu_mask
                if act_tf is not None:
                    a = act_tf(li, a)
            else:
                relu_mask = None
                a = z
            if want_cache:
                cache.append(("fc", fi, a_in, fc_eff[fi], relu_mask))
            fi += 1
    return a, cache


@dataclass
class Grads:
    conv_w: list[np.ndarray]
    conv_b: list[np.ndarray]
    fc_w: list[np.ndarray]
    fc_b: list[np.ndarray]


def backward(net: Network, cache, dlogits: np.ndarray, mask=None) -> Grads:
    """Backpropagate dlogits through the cached forward pass.

    Gradients at masked positions are zeroed, so masked weights are
    invariant under any optimizer step.
    """
    bits = mask.expand() if mask is not None else None
    g = Grads(
        [None] * len(net.conv_kernels),
        [None] * len(net.conv_biases),
        [None] * len(net.fc_weights),
        [None] * len(net.fc_biases),
    )
    da = dlogits
    for entry in reversed(cache):
        kind = entry[0]
        if kind == "fc":
            _, fi, a_in, w_eff, relu_mask = entry
            # output layer has no relu; dlogits already carries the softmax grad
            dz = da if relu_mask is None else da * relu_mask
            g.fc_w[fi] = a_in.T @ dz
            g.fc_b[fi] = dz.sum(axis=0)
            if bits is not None:
                g.fc_w[fi] *= bits.fc[fi]
            da = dz @ w_eff.T
        elif kind == "flatten":
            da = da.reshape(entry[1])
        elif kind == "pool":
            da = kernels.maxpool2_grad(np.ascontiguousarray(da), entry[1])
        else:  # conv
            _, ci, feat, kmat, relu_mask, out_shape, k, cols = entry
            n, m, oh, ow = out_shape
            dz = da * relu_mask
            dmat = dz.reshape(n, m, oh * ow).transpose(0, 2, 1).reshape(n * oh * ow, m)
            dw = (feat.T @ dmat).T.reshape(net.conv_kernels[ci].shape)
            if bits is not None:
                dw *= bits.conv[ci]
            g.conv_w[ci] = dw
            g.conv_b[ci] = dmat.sum(axis=0)
            dfeat = dmat @ kmat.T
            in_maps = net.conv_kernels[ci].shape[1]
            h, w = oh + k - 1, ow + k - 1
            da = kernels.col2im(
                np.ascontiguousarray(dfeat), cols, (n, in_maps, h, w), k
            )
    return g


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy loss and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    probs = softmax(logits.astype(np.float64))
    eps = 1e-12
    loss = -np.log(probs[np.arange(n), labels] + eps).mean()
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits.astype(logits.dtype)


class _RmsProp:
    def __init__(self, net: Network, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.v = {(name, i): np.zeros_like(a) for name, i, a in net.params()}

    def step(self, net: Network, grads: Grads):
        d, eps = self.cfg.rmsprop_decay, self.cfg.rmsprop_epsilon
        for (name, i, p), grad in zip(net.params(), _grads_in_param_order(grads)):
            v = self.v[(name, i)]
            v *= d
            v += (1.0 - d) * grad * grad
            p -= (self.lr * grad / (np.sqrt(v) + eps)).astype(p.dtype)


def _grads_in_param_order(g: Grads):
    return [*g.conv_w, *g.conv_b, *g.fc_w, *g.fc_b]


def _enforce_mask_zeros(net: Network, bits):
    for ci, w in enumerate(net.conv_kernels):
        w[~bits.conv[ci]] = 0
    for fi, w in enumerate(net.fc_weights):
        w[~bits.fc[fi]] = 0


def train(
    net: Network,
    data,
    cfg: TrainConfig,
    mask=None,
    val=None,
    weight_tf=None,
    act_tf=None,
    epoch_begin=None,
) -> TrainReport:
    """RMSProp training loop; mutates net in place and reports per-epoch MCR.

    epoch_begin(net, epoch), when given, may return a replacement
    (weight_tf, act_tf) pair before each epoch -- the hook the
    quantization module uses to re-fit step sizes.
    """
    if len(data.images) == 0:
        raise TrainingError("cannot train on an empty set")
    rng = Rng(cfg.seed)
    opt = _RmsProp(net, cfg)
    bits = mask.expand() if mask is not None else None
    if bits is not None:
        _enforce_mask_zeros(net, bits)
    report = TrainReport()
    best_val, stall, es_stall = math.inf, 0, 0
    for epoch in range(cfg.epochs):
        if epoch_begin is not None:
            tfs = epoch_begin(net, epoch)
            if tfs is not None:
                weight_tf, act_tf = tfs
        order = rng.gen.permutation(len(data.images))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = data.images[idx]
            yb = data.labels[idx]
            logits, cache = forward(
                net, xb, mask=mask, weight_tf=weight_tf, act_tf=act_tf, want_cache=True
            )
            loss, dlogits = softmax_xent(logits, yb)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            losses.append(loss)
            grads = backward(net, cache, dlogits, mask=mask)
            opt.step(net, grads)
            if bits is not None:
                _enforce_mask_zeros(net, bits)
        train_mcr = evaluate_mcr(
            net, data, mask=mask, weight_tf=weight_tf, act_tf=act_tf
        )
        val_mcr = (
            evaluate_mcr(net, val, mask=mask, weight_tf=weight_tf, act_tf=act_tf)
            if val is not None
            else math.nan
        )
        report.epochs.append(EpochStats(epoch, float(np.mean(losses)), train_mcr, val_mcr))
        if val is not None:
            if val_mcr < best_val - 1e-12:
                best_val, stall, es_stall = val_mcr, 0, 0
            else:
                stall += 1
                es_stall += 1
                if stall >= cfg.lr_stall_patience:
                    opt.lr *= cfg.lr_decay
                    stall = 0
                if cfg.early_stop_patience and es_stall >= cfg.early_stop_patience:
                    break
    report.final_lr = opt.lr
    return report


def evaluate_mcr(
    net: Network,
    data,
    mask=None,
    weight_tf=None,
    act_tf=None,
    batch_size: int = 512,
) -> float:
    """Misclassification rate; argmax ties resolve to the lowest class index."""
    n = len(data.images)
    if n == 0:
        raise ValueError("evaluate_mcr on an empty set")
    wrong = 0
    for start in range(0, n, batch_size):
        xb = data.images[start : start + batch_size]
        yb = data.labels[start : start + batch_size]
        logits, _ = forward(net, xb, mask=mask, weight_tf=weight_tf, act_tf=act_tf)
        wrong += int((logits.argmax(axis=1) != yb).sum())
    return wrong / n
