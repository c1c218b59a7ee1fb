"""Convolution as one matrix product, dense and column-pruned.

A k x k convolution of m output maps over c input channels is rewritten
as ``feature @ kernel``:

* the feature matrix has one row per output position (P = out_h * out_w
  rows) and one column per kernel position (Q columns);
* the kernel matrix has the matching Q rows and one column per output
  map.

Kernel positions are flattened channel-major, then kernel row (dy), then
kernel column (dx): position (ch, dy, dx) sits at index ch*k*k + dy*k +
dx.  Offsets below index this flattened order within one channel.

Strided intra-kernel sparsity keeps, for source channel i, only the
flattened positions ``offset_i, offset_i + stride_i, ...`` of each of
its outgoing kernels.  Because all outgoing kernels of one source
channel share the same (stride, offset) pair, the pruned feature-matrix
columns and the matching kernel-matrix rows can be physically deleted
without changing the product -- the deleted kernel rows are all zero.
Both matrices stay dense, just smaller: Q shrinks from c*k*k to
sum_i ceil((k*k - offset_i) / stride_i).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import MaskError, ShapeError
from .tensor import gemm


def surviving_positions(k: int, stride: int, offset: int) -> np.ndarray:
    """Flattened in-kernel positions kept by (stride, offset); length ceil((k*k - offset)/stride)."""
    if stride < 1:
        raise MaskError(f"stride must be >= 1, got {stride}")
    if not 0 <= offset < stride:
        raise MaskError(f"offset must lie in [0, stride), got {offset} for stride {stride}")
    return np.arange(offset, k * k, stride, dtype=np.int64)


@dataclass(frozen=True)
class StridedPattern:
    """Per-source-channel (stride, offset) pairs for one conv layer.

    All outgoing kernels of source channel i share (strides[i],
    offsets[i]) -- the constraint that makes physical matrix shrinking
    possible.
    """

    strides: np.ndarray  # (in_maps,) uint8, each >= 1
    offsets: np.ndarray  # (in_maps,) uint8, offset < stride

    def __post_init__(self):
        s = np.asarray(self.strides, dtype=np.int64)
        o = np.asarray(self.offsets, dtype=np.int64)
        if s.shape != o.shape or s.ndim != 1:
            raise MaskError(f"stride/offset shape mismatch: {s.shape} vs {o.shape}")
        if (s < 1).any():
            raise MaskError("all strides must be >= 1")
        if (o < 0).any() or (o >= s).any():
            raise MaskError("offsets must lie in [0, stride)")
        object.__setattr__(self, "strides", s)
        object.__setattr__(self, "offsets", o)

    @classmethod
    def identity(cls, in_maps: int) -> "StridedPattern":
        return cls(np.ones(in_maps, dtype=np.int64), np.zeros(in_maps, dtype=np.int64))

    @property
    def in_maps(self) -> int:
        return len(self.strides)

    def is_identity(self) -> bool:
        return bool((self.strides == 1).all())

    def kept_per_channel(self, k: int) -> np.ndarray:
        return np.array(
            [len(surviving_positions(k, s, o)) for s, o in zip(self.strides, self.offsets)],
            dtype=np.int64,
        )

    def q(self, k: int) -> int:
        """Surviving column count Q = sum_i ceil((k*k - o_i) / s_i)."""
        return int(self.kept_per_channel(k).sum())

    def weight_keep(self, k: int) -> np.ndarray:
        """(in_maps, k, k) bool keep-map expanded from the pattern."""
        keep = np.zeros((self.in_maps, k * k), dtype=bool)
        for i, (s, o) in enumerate(zip(self.strides, self.offsets)):
            keep[i, surviving_positions(k, int(s), int(o))] = True
        return keep.reshape(self.in_maps, k, k)

    def copy(self) -> "StridedPattern":
        return StridedPattern(self.strides.copy(), self.offsets.copy())


def dense_cols(in_maps: int, k: int) -> np.ndarray:
    """All (channel, dy, dx) column triples in flattened order."""
    ch, dy, dx = np.unravel_index(np.arange(in_maps * k * k), (in_maps, k, k))
    return np.stack([ch, dy, dx], axis=1).astype(np.int64)


def strided_cols(pattern: StridedPattern, k: int) -> np.ndarray:
    """Surviving (channel, dy, dx) column triples under the pattern."""
    cols = []
    for i, (s, o) in enumerate(zip(pattern.strides, pattern.offsets)):
        pos = surviving_positions(k, int(s), int(o))
        cols.append(np.stack([np.full(len(pos), i), pos // k, pos % k], axis=1))
    return np.concatenate(cols, axis=0).astype(np.int64)


@dataclass(frozen=True)
class LoweredPair:
    """Feature matrix (P x Q), kernel matrix (Q x m), and column provenance."""

    feature: np.ndarray
    kernel: np.ndarray
    col_map: np.ndarray  # (Q, 3) int64 rows of (channel, dy, dx)
    out_hw: tuple[int, int]

    def __post_init__(self):
        P, Q = self.feature.shape
        if self.kernel.shape[0] != Q:
            raise ShapeError(
                f"feature has {Q} columns but kernel has {self.kernel.shape[0]} rows"
            )
        if len(self.col_map) != Q:
            raise ShapeError(f"col_map length {len(self.col_map)} != Q {Q}")
        if P != self.out_hw[0] * self.out_hw[1]:
            raise ShapeError(f"{P} rows inconsistent with output {self.out_hw}")


def kernel_matrix(kernels_4d: np.ndarray) -> np.ndarray:
    """(m, c, k, k) kernel stack -> (c*k*k, m) matrix in flattened-position order."""
    m = kernels_4d.shape[0]
    return np.ascontiguousarray(kernels_4d.reshape(m, -1).T)


def lower_dense(image: np.ndarray, conv_kernels: np.ndarray) -> LoweredPair:
    """Lower one image (c, h, w) and a kernel stack (m, c, k, k).

    Feature row r holds the receptive field of output position r
    (row-major over the output map); columns follow the flattened
    kernel-position order.
    """
    c, h, w = image.shape
    m, ck, k, _ = conv_kernels.shape
    if ck != c:
        raise ShapeError(f"kernel stack expects {ck} channels, image has {c}")
    if h < k or w < k:
        raise ShapeError(f"kernel {k} larger than input {h}x{w}")
    cols = dense_cols(c, k)
    feat = kernels.im2col(np.ascontiguousarray(image[None]), k, cols)
    return LoweredPair(feat, kernel_matrix(conv_kernels), cols, (h - k + 1, w - k + 1))


def lower_strided(
    image: np.ndarray, conv_kernels: np.ndarray, pattern: StridedPattern
) -> LoweredPair:
    """Lower with pruned columns/rows physically deleted.

    Columns of the dense feature matrix whose (channel, position) the
    pattern prunes are dropped, along with the matching kernel-matrix
    rows; surviving kernel values are carried over unchanged.
    """
    c, h, w = image.shape
    m, ck, k, _ = conv_kernels.shape
    if ck != c:
        raise ShapeError(f"kernel stack expects {ck} channels, image has {c}")
    if pattern.in_maps != c:
        raise MaskError(f"pattern covers {pattern.in_maps} channels, layer has {c}")
    cols = strided_cols(pattern, k)
    feat = kernels.im2col(np.ascontiguousarray(image[None]), k, cols)
    flat_idx = cols[:, 0] * k * k + cols[:, 1] * k + cols[:, 2]
    kmat = kernel_matrix(conv_kernels)[flat_idx]
    return LoweredPair(feat, np.ascontiguousarray(kmat), cols, (h - k + 1, w - k + 1))


def conv_via_gemm(pair: LoweredPair) -> np.ndarray:
    """Multiply the lowered pair and fold the product back to (m, out_h, out_w)."""
    out = gemm(pair.feature, pair.kernel)  # (P, m)
    oh, ow = pair.out_hw
    return np.ascontiguousarray(out.T.reshape(-1, oh, ow))


def mac_count(
    in_maps: int,
    out_maps: int,
    out_hw: tuple[int, int],
    k: int,
    pattern: StridedPattern | None = None,
) -> int:
    """Multiply-accumulate count of the lowered convolution GEMM.

    Dense: n * m * H * W * k * k.  With a strided pattern the inner
    dimension shrinks to Q, giving H * W * m * Q.
    """
    oh, ow = out_hw
    q = in_maps * k * k if pattern is None else pattern.q(k)
    return oh * ow * out_maps * q
