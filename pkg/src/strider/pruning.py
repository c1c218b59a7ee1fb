"""Pruning masks at three granularities, and the accounting they induce.

* channel: drop a whole feature map -- every incoming and outgoing
  kernel dies with it, and the architecture string itself shrinks once
  the network is compacted.
* kernel: drop one whole k x k convolution between a (source map,
  destination map) pair.
* strided: zero in-kernel weights at a regular stride from a per-source-
  channel offset (see :mod:`strider.lowering` for why the pattern is
  shared by all outgoing kernels of a source map).

A :class:`PruneMaskSet` carries all three; the effective weight-level
bitmap is their AND, so the channel => kernel => weight hierarchy holds
by construction.  Channel masks live on conv-layer outputs; the induced
removal of pool copies, next-layer incoming kernels, and fully connected
fan-in rows is computed, never stored.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .arch import Arch
from .errors import MaskError, ShapeError
from .lowering import StridedPattern
from .network import Network


@dataclass
class WeightBitmaps:
    """Weight-level keep bits: conv[i] is (out, in, k, k); fc[j] is (fan_in, out)."""

    conv: list[np.ndarray]
    fc: list[np.ndarray]


@dataclass(frozen=True)
class PruneMaskSet:
    """Composite mask over one architecture (1 = keep everywhere)."""

    arch: Arch
    channel: tuple[np.ndarray, ...]  # per arch layer, bool over its maps
    kernel: tuple[np.ndarray, ...]  # per conv layer, bool (in_maps, out_maps)
    strided: tuple[StridedPattern, ...]  # per conv layer

    def __post_init__(self):
        a = self.arch
        if len(self.channel) != len(a.layers):
            raise MaskError(
                f"{len(self.channel)} channel bitmaps for {len(a.layers)} layers"
            )
        conv_idx = a.conv_indices()
        if len(self.kernel) != len(conv_idx) or len(self.strided) != len(conv_idx):
            raise MaskError("kernel/strided entries must match conv layer count")
        for li, (l, bits) in enumerate(zip(a.layers, self.channel)):
            if bits.shape != (l.out_maps,) or bits.dtype != np.bool_:
                raise MaskError(f"channel bitmap of layer {li} must be bool ({l.out_maps},)")
            if not bits.any():
                raise MaskError(f"channel bitmap of layer {li} keeps nothing")
            if l.kind == "input" and not bits.all():
                raise MaskError("input layer bitmap must be all-ones")
            if l.kind == "fc" and not bits.all():
                raise MaskError(
                    f"fc layer {li} bitmap must be all-ones "
                    "(fc units are pruned only via the preceding feature layer)"
                )
            if l.kind == "pool" and not np.array_equal(bits, self.channel[li - 1]):
                raise MaskError(
                    f"pool layer {li} bitmap must mirror its source layer"
                )
        for ci, li in enumerate(conv_idx):
            l = a.layers[li]
            if self.kernel[ci].shape != (l.in_maps, l.out_maps):
                raise MaskError(
                    f"kernel bitmap of {a.label(li)} must be ({l.in_maps}, {l.out_maps})"
                )
            if self.strided[ci].in_maps != l.in_maps:
                raise MaskError(
                    f"strided pattern of {a.label(li)} must cover {l.in_maps} source maps"
                )

    # -- construction -------------------------------------------------

    @classmethod
    def build(cls, arch: Arch, channel=None, kernel=None, strided=None) -> "PruneMaskSet":
        """Assemble a mask from sparse parts.

        channel maps a conv layer's arch index to a keep vector over its
        output maps; pool mirrors and the all-ones input/fc bitmaps are
        filled in here.  kernel / strided map conv ordinals (0-based
        position among conv layers) to their entries.
        """
        channel = dict(channel or {})
        kernel = dict(kernel or {})
        strided = dict(strided or {})
        conv_set = set(arch.conv_indices())
        bad = set(channel) - conv_set
        if bad:
            raise MaskError(f"channel masks must key conv layers, got indices {sorted(bad)}")
        ch_bits: list[np.ndarray] = []
        for li, l in enumerate(arch.layers):
            if l.kind == "conv" and li in channel:
                bits = np.asarray(channel[li], dtype=bool)
            elif l.kind == "pool":
                bits = ch_bits[li - 1]
            else:
                bits = np.ones(l.out_maps, dtype=bool)
            ch_bits.append(bits)
        kern, strid = [], []
        for ci, li in enumerate(arch.conv_indices()):
            l = arch.layers[li]
            kern.append(
                np.asarray(kernel[ci], dtype=bool)
                if ci in kernel
                else np.ones((l.in_maps, l.out_maps), dtype=bool)
            )
            strid.append(strided.get(ci) or StridedPattern.identity(l.in_maps))
        return cls(arch, tuple(ch_bits), tuple(kern), tuple(strid))

    @classmethod
    def all_keep(cls, arch: Arch) -> "PruneMaskSet":
        return cls.build(arch)

    def copy(self) -> "PruneMaskSet":
        return PruneMaskSet(
            self.arch,
            tuple(b.copy() for b in self.channel),
            tuple(b.copy() for b in self.kernel),
            tuple(p.copy() for p in self.strided),
        )

    def is_all_keep(self) -> bool:
        return (
            all(b.all() for b in self.channel)
            and all(b.all() for b in self.kernel)
            and all(p.is_identity() for p in self.strided)
        )

    # -- derived bitmaps ----------------------------------------------

    def effective_kernel_keep(self, ci: int) -> np.ndarray:
        """(in, out) kernel keep bits with channel pruning folded in."""
        li = self.arch.conv_indices()[ci]
        in_keep = self.channel[li - 1]
        out_keep = self.channel[li]
        return self.kernel[ci] & in_keep[:, None] & out_keep[None, :]

    def expand(self) -> WeightBitmaps:
        """Weight-level keep bits: the AND of all three granularities.

        Fully connected fan-in bits derive from the channel mask of the
        last feature layer (rows of dropped channels die); deeper fc
        layers are never masked.
        """
        a = self.arch
        conv_bits = []
        for ci, li in enumerate(a.conv_indices()):
            l = a.layers[li]
            pair = self.effective_kernel_keep(ci)  # (in, out)
            strid = self.strided[ci].weight_keep(l.kernel)  # (in, k, k)
            bits = pair.T[:, :, None, None] & strid[None, :, :, :]
            conv_bits.append(bits)
        fc_bits = []
        feat_li = a.last_feature_index()
        first_fc = True
        for li in a.fc_indices():
            l = a.layers[li]
            if first_fc and a.layers[li - 1].kind != "fc":
                h, w = a.layers[feat_li].out_hw
                rows = np.repeat(self.channel[feat_li], h * w)
            else:
                rows = np.ones(l.fc_in, dtype=bool)
            first_fc = False
            fc_bits.append(np.broadcast_to(rows[:, None], (l.fc_in, l.out_maps)).copy())
        return WeightBitmaps(conv_bits, fc_bits)

    # -- accounting ----------------------------------------------------

    def connection_counts(self) -> dict[int, int]:
        """Surviving convolution connections per conv layer (arch index keyed)."""
        return {
            li: int(self.effective_kernel_keep(ci).sum())
            for ci, li in enumerate(self.arch.conv_indices())
        }

    def kept_param_count(self) -> int:
        """Parameters that survive the mask (weights by bitmap, biases by channel)."""
        bits = self.expand()
        total = sum(int(b.sum()) for b in bits.conv) + sum(int(b.sum()) for b in bits.fc)
        for li in self.arch.conv_indices():
            total += int(self.channel[li].sum())
        for li in self.arch.fc_indices():
            total += self.arch.layers[li].out_maps
        return total


def expand_mask(mask: PruneMaskSet, arch: Arch | None = None) -> WeightBitmaps:
    if arch is not None and arch is not mask.arch and arch != mask.arch:
        raise MaskError("mask was built for a different architecture")
    return mask.expand()


def apply_mask(net: Network, mask: PruneMaskSet) -> Network:
    """Zero masked weights; shapes stay untouched (non-compacting)."""
    _check_net(net, mask)
    bits = mask.expand()
    out = net.copy()
    for ci, w in enumerate(out.conv_kernels):
        w *= bits.conv[ci]
    for fi, w in enumerate(out.fc_weights):
        w *= bits.fc[fi]
    return out


def compact(net: Network, mask: PruneMaskSet) -> tuple[Network, PruneMaskSet]:
    """Physically remove channel-pruned maps.

    Returns the smaller network plus the remaining mask (kernel and
    strided parts re-indexed to the surviving channels; channel part
    becomes all-keep).  Outputs match the masked original.
    """
    _check_net(net, mask)
    a = net.arch
    keep = [np.flatnonzero(b) for b in mask.channel]
    counts = [len(k) for k in keep]
    new_arch = a.with_counts(counts)

    conv_w, conv_b, kern, strid = [], [], {}, {}
    for ci, li in enumerate(a.conv_indices()):
        out_idx, in_idx = keep[li], keep[li - 1]
        conv_w.append(np.ascontiguousarray(net.conv_kernels[ci][np.ix_(out_idx, in_idx)]))
        conv_b.append(net.conv_biases[ci][out_idx].copy())
        kern[ci] = mask.kernel[ci][np.ix_(in_idx, out_idx)]
        strid[ci] = StridedPattern(
            mask.strided[ci].strides[in_idx], mask.strided[ci].offsets[in_idx]
        )
    fc_w, fc_b = [], []
    feat_li = a.last_feature_index()
    first_fc = True
    for li in a.fc_indices():
        w = net.fc_weights[len(fc_w)]
        if first_fc and a.layers[li - 1].kind != "fc":
            h, wd = a.layers[feat_li].out_hw
            rows = np.repeat(mask.channel[feat_li], h * wd)
            w = w[rows]
        first_fc = False
        fc_w.append(w.copy())
        fc_b.append(net.fc_biases[len(fc_b)].copy())

    new_net = Network(new_arch, conv_w, conv_b, fc_w, fc_b)
    new_mask = PruneMaskSet.build(new_arch, kernel=kern, strided=strid)
    return new_net, new_mask


def _check_net(net: Network, mask: PruneMaskSet):
    if net.arch.counts() != mask.arch.counts() or net.arch.kinds != mask.arch.kinds:
        raise ShapeError(
            f"mask built for {mask.arch.source}, network is {net.arch.source}"
        )


def merge_masks(a: PruneMaskSet, b: PruneMaskSet) -> PruneMaskSet:
    """Intersect two masks over the same arch (AND of keep bits).

    Strided patterns do not compose: a layer may carry a non-identity
    pattern in at most one of the operands.
    """
    if a.arch.counts() != b.arch.counts() or a.arch.kinds != b.arch.kinds:
        raise MaskError("cannot merge masks built for different architectures")
    channel = {}
    for li in a.arch.conv_indices():
        channel[li] = a.channel[li] & b.channel[li]
    kernel, strided = {}, {}
    for ci in range(len(a.kernel)):
        kernel[ci] = a.kernel[ci] & b.kernel[ci]
        pa, pb = a.strided[ci], b.strided[ci]
        if not pa.is_identity() and not pb.is_identity():
            raise MaskError(
                f"both masks carry a strided pattern on conv layer {ci}; "
                "strided stages do not compose"
            )
        strided[ci] = (pb if pa.is_identity() else pa).copy()
    return PruneMaskSet.build(a.arch, channel=channel, kernel=kernel, strided=strided)


def total_macs(mask: PruneMaskSet) -> int:
    """Lowered-GEMM multiply-accumulates per image under the mask.

    Channel pruning shrinks both GEMM dimensions; strided patterns shrink
    the inner dimension Q.  Kernel-level zeros ride along inside the dense
    product, so they do not reduce this count.
    """
    a = mask.arch
    total = 0
    for ci, li in enumerate(a.conv_indices()):
        l = a.layers[li]
        oh, ow = l.out_hw
        out_kept = int(mask.channel[li].sum())
        in_keep = mask.channel[li - 1]
        p = mask.strided[ci]
        q = sum(
            len(np.arange(o, l.kernel * l.kernel, s))
            for keep, s, o in zip(in_keep, p.strides, p.offsets)
            if keep
        )
        total += oh * ow * out_kept * q
    return total


def count_connections(arch_or_net) -> dict[int, int]:
    """Dense convolution connection counts (in_maps * out_maps per conv layer)."""
    arch = arch_or_net.arch if isinstance(arch_or_net, Network) else arch_or_net
    return arch.connection_counts()


def random_strided_pattern(
    arch: Arch, stride_choices, rng, skip_conv=()
) -> dict[int, StridedPattern]:
    """Draw per-source-channel (stride, offset) pairs for every conv layer.

    Strides come uniformly from stride_choices; each offset is uniform in
    [0, stride).  Conv ordinals in skip_conv receive identity patterns.
    Returned dict is keyed by conv ordinal, ready for PruneMaskSet.build.
    """
    choices = list(stride_choices)
    if not choices:
        raise ValueError("stride_choices must be non-empty")
    if any(s < 1 for s in choices):
        raise MaskError(f"strides must be >= 1, got {choices}")
    out = {}
    for ci, li in enumerate(arch.conv_indices()):
        n_in = arch.layers[li].in_maps
        if ci in skip_conv:
            out[ci] = StridedPattern.identity(n_in)
            continue
        strides = np.array(
            [choices[rng.uniform_int(len(choices))] for _ in range(n_in)], dtype=np.int64
        )
        offsets = np.array([rng.uniform_int(int(s)) for s in strides], dtype=np.int64)
        out[ci] = StridedPattern(strides, offsets)
    return out


# -- serialization (embedded in checkpoints) ---------------------------
#
# Little-endian layout:
#   per arch layer:  u32 map count, channel bitmap bit-packed LSB-first
#   per conv layer:  u32 in_maps, u32 out_maps,
#                    kernel bitmap (row-major (in, out)) bit-packed LSB-first,
#                    then per source channel: u8 stride, u8 offset


def serialize_mask(mask: PruneMaskSet) -> bytes:
    out = bytearray()
    for bits in mask.channel:
        out += struct.pack("<I", len(bits))
        out += np.packbits(bits, bitorder="little").tobytes()
    for ci, li in enumerate(mask.arch.conv_indices()):
        kb = mask.kernel[ci]
        out += struct.pack("<II", kb.shape[0], kb.shape[1])
        out += np.packbits(kb.ravel(), bitorder="little").tobytes()
        p = mask.strided[ci]
        for s, o in zip(p.strides, p.offsets):
            out += struct.pack("<BB", int(s), int(o))
    return bytes(out)


def parse_mask(buf, arch: Arch) -> tuple[PruneMaskSet, int]:
    """Parse a serialized mask for a known arch; returns (mask, bytes consumed)."""
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise MaskError(f"mask section truncated while reading {what}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    channel = []
    for li, l in enumerate(arch.layers):
        (count,) = struct.unpack("<I", take(4, f"layer {li} map count"))
        if count != l.out_maps:
            raise MaskError(
                f"mask layer {li} has {count} maps, arch expects {l.out_maps}"
            )
        packed = np.frombuffer(take((count + 7) // 8, f"layer {li} bitmap"), np.uint8)
        channel.append(np.unpackbits(packed, count=count, bitorder="little").astype(bool))
    kernel, strided = [], []
    for ci, li in enumerate(arch.conv_indices()):
        l = arch.layers[li]
        n_in, n_out = struct.unpack("<II", take(8, f"conv {ci} kernel dims"))
        if (n_in, n_out) != (l.in_maps, l.out_maps):
            raise MaskError(
                f"conv {ci} kernel bitmap is {n_in}x{n_out}, arch expects "
                f"{l.in_maps}x{l.out_maps}"
            )
        packed = np.frombuffer(
            take((n_in * n_out + 7) // 8, f"conv {ci} kernel bitmap"), np.uint8
        )
        kernel.append(
            np.unpackbits(packed, count=n_in * n_out, bitorder="little")
            .astype(bool)
            .reshape(n_in, n_out)
        )
        so = np.frombuffer(take(2 * n_in, f"conv {ci} stride/offset pairs"), np.uint8)
        strided.append(
            StridedPattern(so[0::2].astype(np.int64), so[1::2].astype(np.int64))
        )
    mask = PruneMaskSet(arch, tuple(channel), tuple(kernel), tuple(strided))
    return mask, pos


# -- rendering ----------------------------------------------------------


def kernel_heatmap(mask: PruneMaskSet, ci: int) -> np.ndarray:
    """uint8 image of one conv layer's kernel matrix: rows = source maps,
    columns = destination maps, black (0) = pruned, white (255) = kept."""
    return np.where(mask.effective_kernel_keep(ci), 255, 0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Binary (P5) PGM, maxval 255."""
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())
