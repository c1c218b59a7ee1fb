"""Fixed-point optimization: L2-optimal uniform quantizers over weight groups.

A group (one conv kernel, or one whole fc layer) is quantized onto the
symmetric level set {i * delta : i = -(M-1)/2 .. (M-1)/2} with odd M, so
zero is always a level and pruned weights can never be resurrected.
``optimal_step`` picks delta minimizing the squared error of nearest-
level mapping (ties toward zero): a Lloyd-style alternation of
assignment and least-squares step update runs first, then a 1-D search
over the assignment breakpoints refines it -- for small groups the
breakpoint sweep is exhaustive, making the result a global minimum.

Retraining keeps dual weights: quantized values feed the forward pass
while gradients update the float master copy, and every group's delta is
re-fitted at each epoch.  Signal (activation) quantization calibrates
per-layer deltas on observed post-activation values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import Network, TrainConfig, evaluate_mcr, forward, train

_EXACT_SWEEP_BUDGET = 200_000  # max n*L event count for the exhaustive path


def _check_levels(m: int) -> int:
    if m < 3 or m % 2 == 0:
        raise ValueError(f"level count M must be odd and >= 3, got {m}")
    return (m - 1) // 2


def quantize_group(w: np.ndarray, delta: float, m: int) -> np.ndarray:
    """Map each value to its nearest level, ties toward zero, saturated at
    +/- (M-1)/2 * delta.  delta == 0 collapses the group to zero."""
    L = _check_levels(m)
    if delta < 0:
        raise ValueError(f"step size must be >= 0, got {delta}")
    w = np.asarray(w)
    if delta == 0:
        return np.zeros_like(w)
    a = np.abs(w).astype(np.float64)
    i = np.clip(np.ceil(a / delta - 0.5), 0, L)
    return (np.sign(w) * i * delta).astype(w.dtype)


def _l2_error(a: np.ndarray, delta: float, L: int) -> float:
    if delta <= 0:
        return float(a @ a)
    i = np.clip(np.ceil(a / delta - 0.5), 0, L)
    r = a - i * delta
    return float(r @ r)


def _lloyd(a: np.ndarray, L: int, delta0: float, max_iter: int = 80) -> float:
    delta = delta0
    for _ in range(max_iter):
        i = np.clip(np.ceil(a / delta - 0.5), 0, L)
        s2 = float(i @ i)
        if s2 == 0.0:
            break
        nxt = float(i @ a) / s2
        if nxt <= 0.0 or abs(nxt - delta) <= 1e-15 * delta0:
            delta = max(nxt, 0.0) or delta
            break
        delta = nxt
    return delta


def _sweep_exact(a: np.ndarray, L: int) -> tuple[float, float]:
    """Global minimum via a descending sweep over assignment breakpoints.

    The level of |w| flips from i-1 to i exactly at delta = |w|/(i-0.5);
    between consecutive breakpoints the error is a parabola in delta with
    closed-form minimum sum(i*a)/sum(i*i).
    """
    n = len(a)
    C = float(a @ a)
    lev = np.arange(1, L + 1, dtype=np.float64)
    e = (a[:, None] / (lev - 0.5)[None, :]).ravel()
    ds1 = np.broadcast_to(a[:, None], (n, L)).ravel()
    ds2 = np.broadcast_to(2.0 * lev - 1.0, (n, L)).ravel()
    order = np.argsort(-e, kind="stable")
    e, ds1, ds2 = e[order], ds1[order], ds2[order]
    s1, s2 = np.cumsum(ds1), np.cumsum(ds2)
    hi = e
    lo = np.concatenate([e[1:], [0.0]])
    cand = np.clip(s1 / s2, lo, hi)
    err = C - 2.0 * s1 * cand + s2 * cand * cand
    j = int(np.argmin(err))
    return float(cand[j]), float(err[j])


def optimal_step(weights, m: int) -> float:
    """L2-error-minimizing step size for the symmetric M-level quantizer."""
    L = _check_levels(m)
    a = np.abs(np.asarray(weights, dtype=np.float64)).ravel()
    if a.size == 0:
        raise ValueError("optimal_step on an empty weight group")
    a = a[a > 0]
    if a.size == 0:
        return 0.0
    delta0 = a.max() / L
    best = _lloyd(a, L, delta0)
    best_err = _l2_error(a, best, L)
    if a.size * L <= _EXACT_SWEEP_BUDGET:
        d, err = _sweep_exact(a, L)
        if err < best_err:
            best, best_err = d, err
    else:
        # large groups (signal calibration): multi-start Lloyd, then a
        # fine local grid around the best step found
        for frac in (0.75, 0.5, 0.35, 0.25, 0.15, 0.08):
            d = _lloyd(a, L, delta0 * frac)
            err = _l2_error(a, d, L)
            if err < best_err:
                best, best_err = d, err
        span = np.linspace(best * 0.9, best * 1.1, 513)
        for d in span:
            err = _l2_error(a, float(d), L)
            if err < best_err:
                best, best_err = float(d), err
    return float(best)


def quantize_kernels(w: np.ndarray, deltas: np.ndarray, m: int) -> np.ndarray:
    """Per-kernel quantization of a (out, in, k, k) stack with (out, in) deltas."""
    L = _check_levels(m)
    d = deltas[:, :, None, None]
    a = np.abs(w).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        i = np.clip(np.ceil(a / d - 0.5), 0, L)
    q = np.where(d > 0, np.sign(w) * i * d, 0.0)
    return q.astype(w.dtype)


@dataclass
class QuantScheme:
    """Per-layer level counts and fitted step sizes.

    conv entries are per conv layer in order (None = keep float); each
    conv delta array is (out_maps, in_maps) -- one step size per kernel.
    fc layers get a single step size each.  Signal quantization is keyed
    by arch layer index and applies right after the activation.
    """

    conv_levels: list = field(default_factory=list)
    conv_deltas: list = field(default_factory=list)
    fc_levels: list = field(default_factory=list)
    fc_deltas: list = field(default_factory=list)
    signal_levels: dict = field(default_factory=dict)
    signal_deltas: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, net: Network, conv_levels, fc_levels) -> "QuantScheme":
        scheme = cls(list(conv_levels), [], list(fc_levels), [])
        if len(scheme.conv_levels) != len(net.conv_kernels):
            raise ValueError(
                f"{len(scheme.conv_levels)} conv level entries for "
                f"{len(net.conv_kernels)} conv layers"
            )
        if len(scheme.fc_levels) != len(net.fc_weights):
            raise ValueError(
                f"{len(scheme.fc_levels)} fc level entries for "
                f"{len(net.fc_weights)} fc layers"
            )
        scheme.refit(net)
        return scheme

    @classmethod
    def from_table_row(cls, net: Network, row) -> "QuantScheme":
        """Row layout: one M per conv layer, then one M for all rear (fc) layers."""
        row = list(row)
        if len(row) != len(net.conv_kernels) + 1:
            raise ValueError(
                f"table row needs {len(net.conv_kernels)} conv entries + 1 rear entry"
            )
        return cls.fit(net, row[:-1], [row[-1]] * len(net.fc_weights))

    def refit(self, net: Network) -> None:
        """Re-estimate every group's step size from the current float weights."""
        self.conv_deltas = []
        for w, m in zip(net.conv_kernels, self.conv_levels):
            if m is None:
                self.conv_deltas.append(None)
                continue
            out, inn = w.shape[:2]
            d = np.zeros((out, inn), dtype=np.float64)
            for o in range(out):
                for i in range(inn):
                    d[o, i] = optimal_step(w[o, i], m)
            self.conv_deltas.append(d)
        self.fc_deltas = [
            None if m is None else optimal_step(w, m)
            for w, m in zip(net.fc_weights, self.fc_levels)
        ]

    def weight_tf(self):
        def tf(kind, idx, w):
            if kind == "conv":
                m = self.conv_levels[idx]
                if m is None:
                    return w
                return quantize_kernels(w, self.conv_deltas[idx], m)
            m = self.fc_levels[idx]
            if m is None:
                return w
            return quantize_group(w, self.fc_deltas[idx], m)

        return tf

    def act_tf(self):
        if not self.signal_levels:
            return None

        def tf(li, a):
            m = self.signal_levels.get(li)
            if m is None:
                return a
            d = self.signal_deltas.get(li, 0.0)
            if d == 0.0:
                return a
            return quantize_group(a, d, m)

        return tf


def retrain_quantized(
    net: Network,
    scheme: QuantScheme,
    data,
    cfg: TrainConfig,
    mask=None,
    val=None,
):
    """Quantized-forward / float-backward retraining.

    Step sizes are re-fitted from the float weights at the start of every
    epoch (the scheme is updated in place); masked weights stay zero.
    """

    def epoch_begin(n, epoch):
        scheme.refit(n)
        return scheme.weight_tf(), scheme.act_tf()

    report = train(net, data, cfg, mask=mask, val=val, epoch_begin=epoch_begin)
    scheme.refit(net)
    return net, report


@dataclass
class SensitivityRow:
    layer: str  # arch label, e.g. "C3"
    levels: int
    mcr: float


@dataclass
class SensitivityReport:
    rows: list[SensitivityRow] = field(default_factory=list)


def sensitivity_scan(net: Network, data, m_list, mask=None) -> SensitivityReport:
    """Direct quantization of one layer at a time, all others float."""
    arch = net.arch
    report = SensitivityReport()
    n_conv, n_fc = len(net.conv_kernels), len(net.fc_weights)
    sites = [("conv", ci, arch.label(li)) for ci, li in enumerate(arch.conv_indices())]
    sites += [("fc", fi, arch.label(li)) for fi, li in enumerate(arch.fc_indices())]
    for kind, idx, label in sites:
        for m in m_list:
            conv_levels = [m if (kind == "conv" and i == idx) else None for i in range(n_conv)]
            fc_levels = [m if (kind == "fc" and i == idx) else None for i in range(n_fc)]
            scheme = QuantScheme.fit(net, conv_levels, fc_levels)
            mcr = evaluate_mcr(net, data, mask=mask, weight_tf=scheme.weight_tf())
            report.rows.append(SensitivityRow(label, m, mcr))
    return report


def quantize_signals(
    net: Network,
    signal_levels: dict,
    calibration_set,
    scheme: QuantScheme | None = None,
    mask=None,
    sample_cap: int = 65536,
    batch_size: int = 256,
) -> QuantScheme:
    """Calibrate per-layer signal step sizes by L2 minimization over the
    post-activation values observed on the calibration set.

    signal_levels maps arch layer indices to level counts.  Returns the
    scheme (a float-weight one is created when none is given) with its
    signal entries filled in.
    """
    if len(calibration_set.images) == 0:
        raise ValueError("signal calibration needs a non-empty set")
    if scheme is None:
        scheme = QuantScheme(
            [None] * len(net.conv_kernels),
            [None] * len(net.conv_kernels),
            [None] * len(net.fc_weights),
            [None] * len(net.fc_weights),
        )
    collected = {li: [] for li in signal_levels}

    def collector(li, a):
        if li in collected:
            collected[li].append(np.abs(a).ravel())
        return a

    wtf = scheme.weight_tf()
    n = len(calibration_set.images)
    for start in range(0, n, batch_size):
        forward(
            net,
            calibration_set.images[start : start + batch_size],
            mask=mask,
            weight_tf=wtf,
            act_tf=collector,
        )
    for li, m in signal_levels.items():
        vals = np.concatenate(collected[li])
        if len(vals) > sample_cap:
            vals = vals[:: math.ceil(len(vals) / sample_cap)]
        scheme.signal_levels[li] = m
        scheme.signal_deltas[li] = optimal_step(vals, m) if vals.any() else 0.0
    return scheme
