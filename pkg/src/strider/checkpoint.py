"""Binary checkpoint format (network weights plus optional pruning mask).

Little-endian throughout::

    "SPCN"                      magic, 4 bytes
    u32   version (= 1)
    u32   arch string length, then the UTF-8 arch string ("1-20-...-10")
    per layer, in architecture order:
        u8  kind        0 = input, 1 = conv, 2 = maxpool, 3 = fc
        conv:  u32 out_maps, in_maps, k, k
               f32 weights, row-major (out, in, k, k); f32 biases (out)
        fc:    u32 fan_in, out
               f32 weights, row-major (fan_in, out); f32 biases (out)
        input / maxpool: no payload
    u8    mask flag     0 = absent, 1 = present
    mask section (see strider.pruning) when the flag is 1

The layer-kind tags reconstruct the layer-kind list; the input spatial
size is recovered by walking the conv/pool geometry backward from the
first fully connected fan-in (inputs are square, as are all the
architectures this toolkit trains).
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .arch import Arch, parse_arch
from .errors import CheckpointError
from .network import Network
from .pruning import PruneMaskSet, parse_mask, serialize_mask

MAGIC = b"SPCN"
VERSION = 1
_KIND_TAG = {"input": 0, "conv": 1, "pool": 2, "fc": 3}
_TAG_KIND = {v: k for k, v in _KIND_TAG.items()}


def save_checkpoint(path, net: Network, mask: PruneMaskSet | None = None) -> None:
    a = net.arch
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    src = a.source.encode("utf-8")
    out += struct.pack("<I", len(src)) + src
    ci = fi = 0
    for l in a.layers:
        out += struct.pack("<B", _KIND_TAG[l.kind])
        if l.kind == "conv":
            w, b = net.conv_kernels[ci], net.conv_biases[ci]
            out += struct.pack("<IIII", *w.shape)
            out += np.ascontiguousarray(w, dtype="<f4").tobytes()
            out += np.ascontiguousarray(b, dtype="<f4").tobytes()
            ci += 1
        elif l.kind == "fc":
            w, b = net.fc_weights[fi], net.fc_biases[fi]
            out += struct.pack("<II", *w.shape)
            out += np.ascontiguousarray(w, dtype="<f4").tobytes()
            out += np.ascontiguousarray(b, dtype="<f4").tobytes()
            fi += 1
    if mask is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<B", 1)
        out += serialize_mask(mask)
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_checkpoint(path) -> tuple[Network, PruneMaskSet | None]:
    with open(path, "rb") as f:
        buf = f.read()
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}, expected {VERSION}")
    (srclen,) = struct.unpack("<I", take(4, "arch string length"))
    source = bytes(take(srclen, "arch string")).decode("utf-8")

    counts = source.split("-")
    kinds, payloads = [], []
    for li in range(len(counts)):
        (tag,) = struct.unpack("<B", take(1, f"layer {li} kind tag"))
        if tag not in _TAG_KIND:
            raise CheckpointError(f"unknown layer kind tag {tag} at layer {li}")
        kind = _TAG_KIND[tag]
        kinds.append(kind)
        if kind == "conv":
            dims = struct.unpack("<IIII", take(16, f"conv layer {li} dims"))
            o, i, k, k2 = dims
            w = np.frombuffer(
                take(4 * o * i * k * k2, f"conv layer {li} weights"), "<f4"
            ).reshape(dims)
            b = np.frombuffer(take(4 * o, f"conv layer {li} biases"), "<f4")
            payloads.append((w.copy(), b.copy(), k))
        elif kind == "fc":
            fan_in, o = struct.unpack("<II", take(8, f"fc layer {li} dims"))
            w = np.frombuffer(
                take(4 * fan_in * o, f"fc layer {li} weights"), "<f4"
            ).reshape(fan_in, o)
            b = np.frombuffer(take(4 * o, f"fc layer {li} biases"), "<f4")
            payloads.append((w.copy(), b.copy(), 0))
        else:
            payloads.append(None)

    arch = _rebuild_arch(source, kinds, payloads)
    conv_w = [p[0] for k, p in zip(kinds, payloads) if k == "conv"]
    conv_b = [p[1] for k, p in zip(kinds, payloads) if k == "conv"]
    fc_w = [p[0] for k, p in zip(kinds, payloads) if k == "fc"]
    fc_b = [p[1] for k, p in zip(kinds, payloads) if k == "fc"]
    net = Network(arch, conv_w, conv_b, fc_w, fc_b)
    _check_shapes(net)

    (mask_flag,) = struct.unpack("<B", take(1, "mask flag"))
    mask = None
    if mask_flag == 1:
        mask, used = parse_mask(view[pos:], arch)
        pos += used
    elif mask_flag != 0:
        raise CheckpointError(f"mask flag must be 0 or 1, got {mask_flag}")
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after checkpoint")
    return net, mask


def _rebuild_arch(source: str, kinds, payloads) -> Arch:
    """Recover the Arch: kernel sizes from conv payloads, input size by
    walking the geometry backward from the first fc fan-in."""
    kernels = [p[2] for k, p in zip(kinds, payloads) if k == "conv"]
    side = 1
    maps_before_fc = None
    for li in range(len(kinds) - 1, -1, -1):
        kind = kinds[li]
        if kind == "fc":
            continue
        if maps_before_fc is None:
            # first feature layer seen from the rear: derive its spatial side
            fc_i = next(i for i, kk in enumerate(kinds) if kk == "fc")
            fan_in = payloads[fc_i][0].shape[0]
            maps = int(source.split("-")[li])
            hw = fan_in // maps
            side = int(math.isqrt(hw))
            if side * side != hw or maps * hw != fan_in:
                raise CheckpointError(
                    f"cannot reconstruct square input: fc fan-in {fan_in} "
                    f"over {maps} maps"
                )
            maps_before_fc = maps
        if kind == "pool":
            side *= 2
        elif kind == "conv":
            k = payloads[li][2]
            side += k - 1
    try:
        return parse_arch(source, kinds, input_hw=(side, side), conv_kernel=kernels)
    except Exception as e:
        raise CheckpointError(f"checkpoint arch is inconsistent: {e}") from e


def _check_shapes(net: Network) -> None:
    ci = fi = 0
    for li, l in enumerate(net.arch.layers):
        if l.kind == "conv":
            want = (l.out_maps, l.in_maps, l.kernel, l.kernel)
            if net.conv_kernels[ci].shape != want:
                raise CheckpointError(
                    f"conv layer {li} weights are {net.conv_kernels[ci].shape}, "
                    f"arch implies {want}"
                )
            ci += 1
        elif l.kind == "fc":
            want = (l.fc_in, l.out_maps)
            if net.fc_weights[fi].shape != want:
                raise CheckpointError(
                    f"fc layer {li} weights are {net.fc_weights[fi].shape}, "
                    f"arch implies {want}"
                )
            fi += 1
