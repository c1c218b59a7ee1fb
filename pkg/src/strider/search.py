"""Pruning-mask search: particle filter with SIR resampling, plus a GA hybrid.

Each particle carries a candidate mask ("genome") at one granularity --
channel keep-vectors, kernel keep-matrices, or per-channel strided
offsets.  A particle's importance weight is 1 - MCR on a small
evaluation subset; resampling is systematic (low-variance) over the
cumulative weight distribution, and the transition step perturbs masks
by swapping pruned and kept units within a layer, which preserves every
per-layer prune fraction and cap by construction.

In ``epf`` mode a genetic step runs before resampling: fitness-
proportional parent selection, single-point crossover at a layer
boundary (whole per-layer sub-genomes are exchanged), bit-swap mutation,
and a top-1 elite passed through unmodified.  Offspring inherit the mean
of their parents' raw weights until the next evaluation, so the
subsequent resampling stays defined.  Combined sparsity across
granularities comes from running the search in stages, one granularity
per run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .arch import Arch
from .errors import SearchError
from .lowering import StridedPattern
from .network import Network, evaluate_mcr
from .pruning import PruneMaskSet
from .rng import Rng

GRANULARITIES = ("channel", "kernel", "strided")


@dataclass
class SearchConfig:
    granularity: str = "channel"
    n_particles: int = 16
    generations: int = 10
    target: float = 0.5  # default per-layer prune fraction
    per_layer_targets: dict = field(default_factory=dict)  # conv ordinal -> fraction
    caps: dict = field(default_factory=dict)  # conv ordinal -> max prune fraction
    first_conv_cap: float = 0.0
    mutation_rate: float = 0.15
    crossover_rate: float = 0.7
    eval_set_size: int = 1000
    mode: str = "epf"  # pf | epf
    stride: int = 2  # strided granularity: stride applied to searched layers

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise SearchError(f"unknown granularity {self.granularity!r}")
        if self.mode not in ("pf", "epf"):
            raise SearchError(f"mode must be pf or epf, got {self.mode!r}")
        if self.n_particles < 2:
            raise SearchError("need at least 2 particles")
        for name in ("target", "mutation_rate", "crossover_rate", "first_conv_cap"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SearchError(f"{name} must lie in [0, 1], got {v}")
        if any(not 0.0 <= c <= 1.0 for c in self.caps.values()):
            raise SearchError("caps must lie in [0, 1]")


@dataclass
class _LayerPlan:
    ci: int  # conv ordinal
    li: int  # arch layer index
    n_units: int  # prunable units in this layer (maps, kernels, or channels)
    prune_count: int  # exact pruned-unit count (channel/kernel)
    stride: int  # strided granularity only


@dataclass
class Particle:
    genome: PruneMaskSet
    raw_weight: float = 0.0  # 1 - MCR from the last evaluation
    weight: float = 0.0  # normalized over the swarm
    mcr: float = math.nan

    def clone(self) -> "Particle":
        return Particle(self.genome.copy(), self.raw_weight, self.weight, self.mcr)


@dataclass
class Swarm:
    particles: list[Particle]
    generation: int
    rng: Rng
    plan: list[_LayerPlan]

    def __len__(self):
        return len(self.particles)


@dataclass
class HistoryRow:
    generation: int
    best_weight: float
    mean_weight: float
    ess: float


def _resolve_plan(cfg: SearchConfig, arch: Arch) -> list[_LayerPlan]:
    plan = []
    for ci, li in enumerate(arch.conv_indices()):
        cap = cfg.caps.get(ci, cfg.first_conv_cap if ci == 0 else 1.0)
        if ci in cfg.per_layer_targets:
            target = cfg.per_layer_targets[ci]
            if target > cap + 1e-12:
                raise SearchError(
                    f"target {target} exceeds cap {cap} on conv layer {ci}"
                )
        else:
            target = min(cfg.target, cap)
        if target <= 0.0:
            continue
        l = arch.layers[li]
        if cfg.granularity == "channel":
            n = l.out_maps
            count = int(round(target * n))
            if count >= n:
                raise SearchError(
                    f"channel target {target} would empty layer {arch.label(li)}"
                )
            if count == 0:
                continue
            plan.append(_LayerPlan(ci, li, n, count, 1))
        elif cfg.granularity == "kernel":
            n = l.in_maps * l.out_maps
            count = int(round(target * n))
            if count >= n:
                raise SearchError(
                    f"kernel target {target} would empty layer {arch.label(li)}"
                )
            if count == 0:
                continue
            plan.append(_LayerPlan(ci, li, n, count, 1))
        else:  # strided: the prune fraction is realized by the stride itself
            plan.append(_LayerPlan(ci, li, l.in_maps, 0, cfg.stride))
    return plan


def _random_genome(cfg: SearchConfig, arch: Arch, plan, rng: Rng) -> PruneMaskSet:
    channel, kernel, strided = {}, {}, {}
    for p in plan:
        l = arch.layers[p.li]
        if cfg.granularity == "channel":
            keep = np.ones(p.n_units, dtype=bool)
            keep[rng.gen.permutation(p.n_units)[: p.prune_count]] = False
            channel[p.li] = keep
        elif cfg.granularity == "kernel":
            keep = np.ones(p.n_units, dtype=bool)
            keep[rng.gen.permutation(p.n_units)[: p.prune_count]] = False
            kernel[p.ci] = keep.reshape(l.in_maps, l.out_maps)
        else:
            strides = np.full(p.n_units, p.stride, dtype=np.int64)
            offsets = np.array(
                [rng.uniform_int(p.stride) for _ in range(p.n_units)], dtype=np.int64
            )
            strided[p.ci] = StridedPattern(strides, offsets)
    return PruneMaskSet.build(arch, channel=channel, kernel=kernel, strided=strided)


def _genome_parts(genome: PruneMaskSet, cfg: SearchConfig, plan):
    """Mutable per-plan-layer gene arrays (copies) for crossover/mutation."""
    parts = []
    for p in plan:
        if cfg.granularity == "channel":
            parts.append(genome.channel[p.li].copy())
        elif cfg.granularity == "kernel":
            parts.append(genome.kernel[p.ci].copy())
        else:
            parts.append(genome.strided[p.ci].offsets.copy())
    return parts


def _genome_from_parts(cfg: SearchConfig, arch: Arch, plan, parts) -> PruneMaskSet:
    channel, kernel, strided = {}, {}, {}
    for p, part in zip(plan, parts):
        if cfg.granularity == "channel":
            channel[p.li] = part
        elif cfg.granularity == "kernel":
            kernel[p.ci] = part
        else:
            strided[p.ci] = StridedPattern(
                np.full(p.n_units, p.stride, dtype=np.int64), part
            )
    return PruneMaskSet.build(arch, channel=channel, kernel=kernel, strided=strided)


def _mutate_parts(parts, cfg: SearchConfig, plan, rng: Rng) -> None:
    """Swap pruned and kept units (or redraw offsets) in place; prune
    fractions are invariant under the move."""
    for p, part in zip(plan, parts):
        if cfg.granularity == "strided":
            for i in range(len(part)):
                if rng.gen.random() < cfg.mutation_rate:
                    part[i] = rng.uniform_int(p.stride)
            continue
        flat = part.reshape(-1)
        for pruned_at in np.flatnonzero(~flat):
            if rng.gen.random() < cfg.mutation_rate:
                kept = np.flatnonzero(flat)
                j = kept[rng.uniform_int(len(kept))]
                flat[pruned_at] = True
                flat[j] = False


def init_swarm(cfg: SearchConfig, arch: Arch, rng: Rng) -> Swarm:
    """N genomes at exactly the per-layer target fractions, uniform weights."""
    plan = _resolve_plan(cfg, arch)
    particles = [
        Particle(_random_genome(cfg, arch, plan, rng), weight=1.0 / cfg.n_particles)
        for _ in range(cfg.n_particles)
    ]
    return Swarm(particles, 0, rng, plan)


def weigh(swarm: Swarm, net: Network, eval_set, mcr_fn=None) -> Swarm:
    """Importance weight = 1 - MCR per particle, then normalized."""
    fn = mcr_fn if mcr_fn is not None else (
        lambda n, d, m: evaluate_mcr(n, d, mask=m)
    )
    for part in swarm.particles:
        part.mcr = float(fn(net, eval_set, part.genome))
        part.raw_weight = 1.0 - part.mcr
    total = sum(p.raw_weight for p in swarm.particles)
    for part in swarm.particles:
        part.weight = part.raw_weight / total if total > 0 else 0.0
    return swarm


def effective_sample_size(swarm: Swarm) -> float:
    s = sum(p.weight * p.weight for p in swarm.particles)
    return 1.0 / s if s > 0 else 0.0


def resample_sir(swarm: Swarm) -> Swarm:
    """Systematic resampling from the weight CDF; weights reset to 1/N.

    Copy counts land in [floor(N*w), ceil(N*w)] for every particle.
    """
    n = len(swarm)
    w = np.array([p.weight for p in swarm.particles], dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise SearchError("degenerate swarm: all importance weights are zero")
    cdf = np.cumsum(w / total)
    positions = (np.arange(n) + swarm.rng.gen.random()) / n
    idx = np.minimum(np.searchsorted(cdf, positions, side="right"), n - 1)
    swarm.particles = [swarm.particles[i].clone() for i in idx]
    for p in swarm.particles:
        p.weight = 1.0 / n
    return swarm


def perturb(swarm: Swarm, cfg: SearchConfig) -> Swarm:
    """Transition step: per-layer fraction-preserving swap mutation."""
    if cfg.mutation_rate == 0.0 or not swarm.plan:
        return swarm
    arch = swarm.particles[0].genome.arch if swarm.particles else None
    for part in swarm.particles:
        parts = _genome_parts(part.genome, cfg, swarm.plan)
        _mutate_parts(parts, cfg, swarm.plan, swarm.rng)
        part.genome = _genome_from_parts(cfg, arch, swarm.plan, parts)
    return swarm


def _roulette(cdf: np.ndarray, rng: Rng) -> int:
    return int(np.minimum(np.searchsorted(cdf, rng.gen.random(), side="right"), len(cdf) - 1))


def ga_step(swarm: Swarm, cfg: SearchConfig) -> Swarm:
    """Genetic refresh: roulette parents, layer-boundary crossover, swap
    mutation; the top-1 particle passes through unmodified.

    Children inherit the mean of their parents' raw weights so the
    following SIR step remains well defined before re-evaluation.
    """
    n = len(swarm)
    arch = swarm.particles[0].genome.arch
    w = np.array([p.weight for p in swarm.particles], dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise SearchError("degenerate swarm: all importance weights are zero")
    cdf = np.cumsum(w / total)
    elite = max(swarm.particles, key=lambda p: p.raw_weight).clone()
    children = [elite]
    for _ in range(n - 1):
        pa = swarm.particles[_roulette(cdf, swarm.rng)]
        pb = swarm.particles[_roulette(cdf, swarm.rng)]
        parts_a = _genome_parts(pa.genome, cfg, swarm.plan)
        if len(swarm.plan) >= 2 and swarm.rng.gen.random() < cfg.crossover_rate:
            parts_b = _genome_parts(pb.genome, cfg, swarm.plan)
            b = 1 + swarm.rng.uniform_int(len(swarm.plan) - 1)
            parts = parts_a[:b] + parts_b[b:]
        else:
            parts = parts_a
        _mutate_parts(parts, cfg, swarm.plan, swarm.rng)
        child = Particle(
            _genome_from_parts(cfg, arch, swarm.plan, parts),
            raw_weight=(pa.raw_weight + pb.raw_weight) / 2.0,
        )
        children.append(child)
    total_raw = sum(p.raw_weight for p in children)
    for p in children:
        p.weight = p.raw_weight / total_raw if total_raw > 0 else 1.0 / n
    swarm.particles = children
    return swarm


def run_search(
    net: Network,
    eval_source,
    cfg: SearchConfig,
    rng: Rng,
    mcr_fn=None,
) -> tuple[PruneMaskSet, list[HistoryRow]]:
    """Generation loop: weigh -> (epf? ga_step) -> resample -> perturb.

    The evaluation subset (cfg.eval_set_size samples of eval_source) is
    redrawn each generation from the swarm's stream.  Returns the genome
    with the highest raw weight ever observed, plus per-generation
    best/mean weight and effective sample size.
    """
    arch = net.arch
    swarm = init_swarm(cfg, arch, rng)
    history: list[HistoryRow] = []
    best_raw, best_genome = -math.inf, None

    def eval_subset():
        n = len(eval_source.images)
        take = min(cfg.eval_set_size, n)
        if take == n:
            return eval_source
        idx = swarm.rng.gen.choice(n, size=take, replace=False)
        return eval_source.take(np.sort(idx))

    def observe():
        nonlocal best_raw, best_genome
        weigh(swarm, net, eval_subset(), mcr_fn=mcr_fn)
        gen_best = max(swarm.particles, key=lambda p: p.raw_weight)
        if gen_best.raw_weight > best_raw:
            best_raw, best_genome = gen_best.raw_weight, gen_best.genome.copy()
        history.append(
            HistoryRow(
                swarm.generation,
                gen_best.raw_weight,
                float(np.mean([p.raw_weight for p in swarm.particles])),
                effective_sample_size(swarm),
            )
        )

    observe()
    for _ in range(cfg.generations):
        if cfg.mode == "epf":
            ga_step(swarm, cfg)
        resample_sir(swarm)
        perturb(swarm, cfg)
        swarm.generation += 1
        observe()
    return best_genome, history
