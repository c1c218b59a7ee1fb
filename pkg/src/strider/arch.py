"""Architecture handling: the dash-separated feature-map string.

A network is described by a string such as ``"1-20-20-50-50-500-10"``
together with a layer-kind list (``input, conv, pool, conv, pool, fc,
fc`` -- or the compact form ``"icpcpff"``).  Each number is the feature
map (or unit) count of that layer.  Convolutions are k x k, stride 1,
unpadded; pools are non-overlapping 2x2 max pools, so counts across a
pool layer must match.  All derived bookkeeping used by the reports --
parameter counts, convolution connection counts, spatial sizes -- is
computed here in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ArchError

_KIND_ALIASES = {
    "i": "input",
    "input": "input",
    "c": "conv",
    "conv": "conv",
    "p": "pool",
    "pool": "pool",
    "maxpool": "pool",
    "f": "fc",
    "fc": "fc",
    "fully-connected": "fc",
}

_LABEL_LETTER = {"input": "I", "conv": "C", "pool": "S", "fc": "F"}


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # input | conv | pool | fc
    in_maps: int
    out_maps: int
    kernel: int  # conv: k, pool: 2, otherwise 0
    activation: str  # relu | softmax | none
    out_hw: tuple[int, int]  # spatial size of this layer's output
    fc_in: int = 0  # fc only: fan-in (c*h*w at the flatten boundary)


@dataclass(frozen=True)
class Arch:
    source: str
    layers: tuple[LayerSpec, ...]
    input_hw: tuple[int, int]

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(l.kind for l in self.layers)

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_maps

    def conv_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "conv"]

    def fc_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "fc"]

    def feature_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in ("input", "conv", "pool")]

    def last_feature_index(self) -> int:
        return self.feature_indices()[-1]

    def counts(self) -> list[int]:
        return [self.layers[0].out_maps] + [l.out_maps for l in self.layers[1:]]

    def label(self, idx: int) -> str:
        return f"{_LABEL_LETTER[self.layers[idx].kind]}{idx}"

    def param_count(self) -> int:
        total = 0
        for l in self.layers:
            if l.kind == "conv":
                total += l.out_maps * l.in_maps * l.kernel * l.kernel + l.out_maps
            elif l.kind == "fc":
                total += l.fc_in * l.out_maps + l.out_maps
        return total

    def connection_counts(self) -> dict[int, int]:
        """Per conv layer: number of convolution connections (in_maps * out_maps)."""
        return {
            i: l.in_maps * l.out_maps
            for i, l in enumerate(self.layers)
            if l.kind == "conv"
        }

    def with_counts(self, counts: list[int]) -> "Arch":
        """Rebuild the same topology with new per-layer map counts."""
        kernels = [l.kernel for l in self.layers if l.kind == "conv"]
        return parse_arch(
            "-".join(str(c) for c in counts),
            [l.kind for l in self.layers],
            input_hw=self.input_hw,
            conv_kernel=kernels,
        )


def normalize_kinds(kinds) -> list[str]:
    if isinstance(kinds, str):
        kinds = list(kinds)
    out = []
    for i, k in enumerate(kinds):
        key = str(k).strip().lower()
        if key not in _KIND_ALIASES:
            raise ArchError(f"unknown layer kind {k!r} at position {i + 1}")
        out.append(_KIND_ALIASES[key])
    return out


def parse_arch(s: str, kinds, input_hw=(28, 28), conv_kernel=5) -> Arch:
    """Parse "a-b-c-..." map counts plus a layer-kind list into an Arch.

    conv_kernel is a single k applied to every conv layer or a list with
    one k per conv layer.
    """
    kinds = normalize_kinds(kinds)
    tokens = s.strip().split("-")
    if len(tokens) != len(kinds):
        raise ArchError(
            f"{len(tokens)} counts in {s!r} but {len(kinds)} layer kinds"
        )
    counts = []
    for pos, tok in enumerate(tokens, start=1):
        if not tok.isdigit() or int(tok) < 1:
            raise ArchError(f"bad feature-map count {tok!r} at token {pos} of {s!r}")
        counts.append(int(tok))
    if kinds[0] != "input":
        raise ArchError("first layer must be the input layer")
    if "input" in kinds[1:]:
        raise ArchError("input layer allowed only at position 1")

    n_conv = kinds.count("conv")
    if isinstance(conv_kernel, int):
        conv_kernels = [conv_kernel] * n_conv
    else:
        conv_kernels = list(conv_kernel)
        if len(conv_kernels) != n_conv:
            raise ArchError(
                f"{len(conv_kernels)} kernel sizes for {n_conv} conv layers"
            )

    h, w = input_hw
    layers = [LayerSpec("input", counts[0], counts[0], 0, "none", (h, w))]
    maps = counts[0]
    flat = None  # set once the first fc is reached
    conv_i = 0
    for pos in range(1, len(kinds)):
        kind, cnt = kinds[pos], counts[pos]
        if kind == "conv":
            if flat is not None:
                raise ArchError(f"conv after fc at token {pos + 1}")
            k = conv_kernels[conv_i]
            conv_i += 1
            if h < k or w < k:
                raise ArchError(
                    f"conv kernel {k} larger than {h}x{w} input at token {pos + 1}"
                )
            h, w = h - k + 1, w - k + 1
            layers.append(LayerSpec("conv", maps, cnt, k, "relu", (h, w)))
            maps = cnt
        elif kind == "pool":
            if flat is not None:
                raise ArchError(f"pool after fc at token {pos + 1}")
            if cnt != maps:
                raise ArchError(
                    f"pool layer must preserve map count ({maps}), "
                    f"got {cnt} at token {pos + 1}"
                )
            if h % 2 or w % 2:
                raise ArchError(
                    f"2x2 pool needs even spatial dims, got {h}x{w} at token {pos + 1}"
                )
            h, w = h // 2, w // 2
            layers.append(LayerSpec("pool", maps, maps, 2, "none", (h, w)))
        else:  # fc
            if flat is None:
                flat = maps * h * w
            act = "softmax" if pos == len(kinds) - 1 else "relu"
            layers.append(LayerSpec("fc", maps, cnt, 0, act, (1, 1), fc_in=flat))
            maps = cnt
            flat = cnt
    return Arch("-".join(tokens), tuple(layers), tuple(input_hw))
