"""Pipeline commands: train to baseline, staged prune-retrain, fixed-point
quantization, lowering benchmarks, the pruned-vs-scratch comparison, and
mask reports.

Configuration is a flat key=value text file; command-line flags override
file values, and ``print-config`` dumps the effective result.  Two
profiles ship per dataset: ``paper`` uses the published architectures,
``desk`` uses reduced ones sized for minutes-scale runs (the published
count arithmetic is still checked on the paper architectures, which
needs no training).  The ``synthetic`` dataset generates seeded
MNIST- or CIFAR-shaped data so every command runs without data files.
"""

from __future__ import annotations

import dataclasses
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .arch import Arch, parse_arch
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import load_cifar10, load_mnist, load_synthetic
from .errors import ConfigError
from .lowering import StridedPattern, conv_via_gemm, lower_dense, lower_strided, mac_count
from .network import TrainConfig, evaluate_mcr, init_network, train
from .pruning import (
    PruneMaskSet,
    apply_mask,
    compact,
    kernel_heatmap,
    merge_masks,
    total_macs,
    write_pgm,
)
from .quantization import QuantScheme, retrain_quantized
from .rng import Rng
from .search import SearchConfig, run_search

DATA_DIR_ENV = "STRIDER_DATA_DIR"

_PROFILES = {
    ("mnist", "paper"): dict(arch="1-20-20-50-50-500-10", layer_kinds="icpcpff", input_size=28, epochs=30, train_subset=0),
    ("mnist", "desk"): dict(arch="1-8-8-16-16-128-10", layer_kinds="icpcpff", input_size=28, epochs=12, train_subset=10000),
    ("cifar10", "paper"): dict(arch="3-32-32-32-32-64-10", layer_kinds="icpcpcf", input_size=32, epochs=40, train_subset=0),
    ("cifar10", "desk"): dict(arch="3-16-16-16-16-32-10", layer_kinds="icpcpcf", input_size=32, epochs=15, train_subset=10000),
    ("synthetic", "paper"): dict(arch="1-20-20-50-50-500-10", layer_kinds="icpcpff", input_size=28, epochs=20, train_subset=0),
    ("synthetic", "desk"): dict(arch="1-8-8-16-16-128-10", layer_kinds="icpcpff", input_size=28, epochs=12, train_subset=10000),
}


@dataclass
class PipelineConfig:
    dataset: str = "synthetic"  # mnist | cifar10 | synthetic
    profile: str = "desk"  # desk | paper
    data_dir: str = ""  # defaults to $STRIDER_DATA_DIR
    out_dir: str = "out"
    seed: int = 7

    arch: str = ""  # filled from the profile when empty
    layer_kinds: str = ""
    input_size: int = 0
    conv_kernel: int = 5

    synth_kind: str = "mnist"  # shape of generated data
    synth_train: int = 12000
    synth_val: int = 2000
    synth_test: int = 5000

    train_subset: int = -1  # -1: profile default; 0: all
    val_subset: int = 0
    batch_size: int = 128
    learning_rate: float = 1e-3
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    epochs: int = -1  # -1: profile default
    retrain_epochs: int = 8
    early_stop_patience: int = 0

    stages: str = "channel:0.5"  # semicolon-separated granularity:value
    stage_mcr_budget: float = 0.01  # halt when test MCR rises more than this
    n_particles: int = 12
    generations: int = 6
    mutation_rate: float = 0.15
    crossover_rate: float = 0.7
    eval_set_size: int = 512
    search_mode: str = "epf"  # pf | epf
    first_conv_cap: float = 0.0

    quant_rows: str = ""  # per-row "M,M,...,rearM"; default fits the arch
    quant_epochs: int = 2
    signal_levels: int = 0  # 0 = off

    fig6_seeds: str = "1,2,3"
    fig6_epochs: int = -1  # -1: profile epochs
    fig6_target: float = 0.4

    bench_strides: str = "2,3"
    bench_reps: int = 50

    def resolve(self) -> "PipelineConfig":
        """Fill profile-dependent defaults; validates dataset/profile."""
        key = (self.dataset, self.profile)
        if key not in _PROFILES:
            raise ConfigError(f"unknown dataset/profile combination {key}")
        prof = _PROFILES[key]
        out = dataclasses.replace(self)
        if not out.arch:
            out.arch = prof["arch"]
            out.layer_kinds = prof["layer_kinds"]
        if not out.layer_kinds:
            raise ConfigError("layer_kinds must accompany an explicit arch")
        if out.input_size <= 0:
            out.input_size = prof["input_size"]
        if out.epochs < 0:
            out.epochs = prof["epochs"]
        if out.train_subset < 0:
            out.train_subset = prof["train_subset"]
        if out.fig6_epochs < 0:
            out.fig6_epochs = out.epochs
        if not out.data_dir:
            out.data_dir = os.environ.get(DATA_DIR_ENV, "")
        return out

    def parsed_arch(self) -> Arch:
        return parse_arch(
            self.arch,
            self.layer_kinds,
            input_hw=(self.input_size, self.input_size),
            conv_kernel=self.conv_kernel,
        )

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


def config_from_file(path) -> PipelineConfig:
    cfg = PipelineConfig()
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg = apply_setting(cfg, key, value, where=f"{path}:{lineno}")
    return cfg


def apply_setting(cfg: PipelineConfig, key: str, value: str, where="flag") -> PipelineConfig:
    by_name = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    if key not in by_name:
        raise ConfigError(f"{where}: unknown configuration key {key!r}")
    kind = by_name[key].type
    try:
        if kind in (int, "int"):
            parsed = int(value)
        elif kind in (float, "float"):
            parsed = float(value)
        else:
            parsed = value
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for {key}: {e}") from e
    return dataclasses.replace(cfg, **{key: parsed})


@dataclass
class StageSpec:
    granularity: str  # channel | kernel | strided
    target: float = 0.0  # channel/kernel prune fraction
    stride: int = 1  # strided stages

    @property
    def detail(self) -> str:
        if self.granularity == "strided":
            return f"s{self.stride}"
        return f"{self.target:g}"


def parse_stages(spec: str) -> list[StageSpec]:
    stages = []
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        if ":" not in part:
            raise ConfigError(f"stage {part!r} must look like granularity:value")
        gran, value = (x.strip() for x in part.split(":", 1))
        if gran == "strided":
            stages.append(StageSpec(gran, stride=int(value)))
        elif gran in ("channel", "kernel"):
            stages.append(StageSpec(gran, target=float(value)))
        else:
            raise ConfigError(f"unknown stage granularity {gran!r}")
    return stages


def load_data(cfg: PipelineConfig):
    if cfg.dataset == "synthetic":
        train_set, val_set, test_set = load_synthetic(
            cfg.synth_kind, cfg.synth_train, cfg.synth_val, cfg.synth_test, seed=cfg.seed
        )
    elif cfg.dataset == "mnist":
        train_set, val_set, test_set = load_mnist(cfg.data_dir or ".")
    elif cfg.dataset == "cifar10":
        train_set, val_set, test_set = load_cifar10(cfg.data_dir or ".")
    else:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    return train_set.head(cfg.train_subset), val_set.head(cfg.val_subset), test_set


def write_csv(path, header, rows) -> None:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6f}"
        return str(v)

    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(fmt(v) for v in row) + "\n")


def _train_config(cfg: PipelineConfig, epochs: int, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        rmsprop_decay=cfg.rmsprop_decay,
        rmsprop_epsilon=cfg.rmsprop_epsilon,
        seed=seed,
        early_stop_patience=cfg.early_stop_patience,
    )


def _phase_seed(root: Rng) -> int:
    return int(root.gen.integers(2**62))


# -- commands -------------------------------------------------------------


def cmd_train(cfg: PipelineConfig) -> dict:
    cfg = cfg.resolve()
    os.makedirs(cfg.out_dir, exist_ok=True)
    root = Rng(cfg.seed)
    train_set, val_set, test_set = load_data(cfg)
    net = init_network(cfg.parsed_arch(), root.child())
    report = train(
        net, train_set, _train_config(cfg, cfg.epochs, _phase_seed(root)), val=val_set
    )
    test_mcr = evaluate_mcr(net, test_set)
    ckpt = os.path.join(cfg.out_dir, "baseline.spcn")
    save_checkpoint(ckpt, net)
    write_csv(
        os.path.join(cfg.out_dir, "train_log.csv"),
        ["epoch", "loss", "train_mcr", "val_mcr"],
        [(e.epoch, e.loss, e.train_mcr, e.val_mcr) for e in report.epochs],
    )
    return {"checkpoint": ckpt, "report": report, "test_mcr": test_mcr}


@dataclass
class StageReport:
    stage: int
    granularity: str
    detail: str
    params_before: int
    params_after: int
    connections_before: int
    connections_after: int
    macs_before: int
    macs_after: int
    mcr_before: float
    mcr_after: float
    accepted: bool

    def row(self):
        return (
            self.stage,
            self.granularity,
            self.detail,
            self.params_before,
            self.params_after,
            self.connections_before,
            self.connections_after,
            self.macs_before,
            self.macs_after,
            self.mcr_before,
            self.mcr_after,
            int(self.accepted),
        )


STAGE_CSV_HEADER = [
    "stage",
    "granularity",
    "detail",
    "params_before",
    "params_after",
    "connections_before",
    "connections_after",
    "macs_before",
    "macs_after",
    "mcr_before",
    "mcr_after",
    "accepted",
]


def _search_config(cfg: PipelineConfig, spec: StageSpec) -> SearchConfig:
    return SearchConfig(
        granularity=spec.granularity,
        n_particles=cfg.n_particles,
        generations=cfg.generations,
        target=spec.target if spec.granularity != "strided" else 1.0,
        first_conv_cap=cfg.first_conv_cap,
        mutation_rate=cfg.mutation_rate,
        crossover_rate=cfg.crossover_rate,
        eval_set_size=cfg.eval_set_size,
        mode=cfg.search_mode,
        stride=spec.stride,
    )


def cmd_prune(cfg: PipelineConfig, checkpoint=None, retrain: bool = True) -> dict:
    """Staged prune-retrain loop.

    Each stage searches one granularity under the per-layer caps (first
    conv capped at cfg.first_conv_cap), applies the best mask, compacts
    after channel stages, retrains, and halts stage escalation when the
    test MCR would rise more than stage_mcr_budget over the baseline.
    """
    cfg = cfg.resolve()
    os.makedirs(cfg.out_dir, exist_ok=True)
    checkpoint = checkpoint or os.path.join(cfg.out_dir, "baseline.spcn")
    net, mask = load_checkpoint(checkpoint)
    if mask is None:
        mask = PruneMaskSet.all_keep(net.arch)
    root = Rng(cfg.seed + 1)
    train_set, val_set, test_set = load_data(cfg)
    baseline_mcr = evaluate_mcr(net, test_set, mask=mask)

    reports: list[StageReport] = []
    history_rows = []
    ckpt_path = checkpoint
    mcr_before = baseline_mcr
    for i, spec in enumerate(parse_stages(cfg.stages)):
        params_before = mask.kept_param_count()
        conn_before = sum(mask.connection_counts().values())
        macs_before = total_macs(mask)
        scfg = _search_config(cfg, spec)
        best, history = run_search(net, val_set, scfg, root.child())
        history_rows += [
            (i, h.generation, h.best_weight, h.mean_weight, h.ess) for h in history
        ]
        merged = merge_masks(mask, best)
        work = apply_mask(net, merged)
        if spec.granularity == "channel":
            work, work_mask = compact(work, merged)
        else:
            work_mask = merged
        if retrain and cfg.retrain_epochs > 0:
            tr = _train_config(cfg, cfg.retrain_epochs, _phase_seed(root))
            train(work, train_set, tr, mask=work_mask, val=val_set)
        mcr_after = evaluate_mcr(work, test_set, mask=work_mask)
        accepted = mcr_after <= baseline_mcr + cfg.stage_mcr_budget
        reports.append(
            StageReport(
                i,
                spec.granularity,
                spec.detail,
                params_before,
                work_mask.kept_param_count(),
                conn_before,
                sum(work_mask.connection_counts().values()),
                macs_before,
                total_macs(work_mask),
                mcr_before,
                mcr_after,
                accepted,
            )
        )
        if not accepted:
            break
        net, mask, mcr_before = work, work_mask, mcr_after
        ckpt_path = os.path.join(cfg.out_dir, f"pruned_stage{i}.spcn")
        save_checkpoint(ckpt_path, net, mask)

    final = os.path.join(cfg.out_dir, "pruned.spcn")
    save_checkpoint(final, net, mask)
    write_csv(
        os.path.join(cfg.out_dir, "stage_reports.csv"),
        STAGE_CSV_HEADER,
        [r.row() for r in reports],
    )
    write_csv(
        os.path.join(cfg.out_dir, "search_history.csv"),
        ["stage", "generation", "best_weight", "mean_weight", "ess"],
        history_rows,
    )
    return {
        "checkpoint": final,
        "stages": reports,
        "baseline_mcr": baseline_mcr,
        "final_mcr": mcr_before,
        "net": net,
        "mask": mask,
    }


def _default_quant_rows(arch: Arch) -> list[list[int]]:
    n_conv = len(arch.conv_indices())
    return [
        [3] * n_conv + [7],
        [7] * n_conv + [15],
        [15] * n_conv + [15],
        [31] * n_conv + [31],
    ]


def parse_quant_rows(spec: str) -> list[list[int]]:
    rows = []
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        rows.append([int(x) for x in part.split(",")])
    return rows


def quant_csv_header(arch: Arch) -> list[str]:
    cols = [f"{arch.label(li)}_M" for li in arch.conv_indices()]
    cols.append(f"{arch.label(arch.fc_indices()[0])}_M")
    return cols + ["test_MCR", "test_MCR_direct"]


def cmd_quantize(cfg: PipelineConfig, checkpoint=None) -> dict:
    """Fixed-point rows over the pruned checkpoint, Table-style CSV out.

    Each row lists one level count per conv layer plus one for the rear
    (fully connected) layers.  test_MCR_direct is direct quantization of
    the trained floats; test_MCR follows quantized-forward retraining
    (they coincide when quant_epochs is 0).
    """
    cfg = cfg.resolve()
    os.makedirs(cfg.out_dir, exist_ok=True)
    checkpoint = checkpoint or os.path.join(cfg.out_dir, "pruned.spcn")
    net, mask = load_checkpoint(checkpoint)
    root = Rng(cfg.seed + 2)
    train_set, val_set, test_set = load_data(cfg)
    float_mcr = evaluate_mcr(net, test_set, mask=mask)
    rows = parse_quant_rows(cfg.quant_rows) or _default_quant_rows(net.arch)

    out_rows, results = [], []
    for ri, row in enumerate(rows):
        work = net.copy()
        scheme = QuantScheme.from_table_row(work, row)
        direct = evaluate_mcr(work, test_set, mask=mask, weight_tf=scheme.weight_tf())
        if cfg.quant_epochs > 0:
            tr = _train_config(cfg, cfg.quant_epochs, _phase_seed(root))
            retrain_quantized(work, scheme, train_set, tr, mask=mask, val=val_set)
            retrained = evaluate_mcr(
                work, test_set, mask=mask, weight_tf=scheme.weight_tf()
            )
        else:
            retrained = direct
        baked = work.copy()
        wtf = scheme.weight_tf()
        baked.conv_kernels = [
            wtf("conv", ci, w) for ci, w in enumerate(baked.conv_kernels)
        ]
        baked.fc_weights = [wtf("fc", fi, w) for fi, w in enumerate(baked.fc_weights)]
        save_checkpoint(
            os.path.join(cfg.out_dir, f"quantized_row{ri}.spcn"), baked, mask
        )
        out_rows.append(tuple(row) + (retrained, direct))
        results.append({"row": row, "mcr": retrained, "mcr_direct": direct})

    csv_path = os.path.join(cfg.out_dir, "quantization.csv")
    write_csv(csv_path, quant_csv_header(net.arch), out_rows)
    return {"csv": csv_path, "rows": results, "float_mcr": float_mcr}


def cmd_lower_bench(cfg: PipelineConfig) -> dict:
    """Dense vs strided lowering sizes, MAC counts, and GEMM wall clock.

    Geometries: the 3-channel 5x5 / 3x3-kernel / 2-map reference, plus
    every conv layer of the configured architecture.
    """
    cfg = cfg.resolve()
    os.makedirs(cfg.out_dir, exist_ok=True)
    rng = Rng(cfg.seed + 3)
    arch = cfg.parsed_arch()
    geoms = [("fig3", 3, 5, 3, 2)]
    for li in arch.conv_indices():
        l = arch.layers[li]
        in_hw = arch.layers[li - 1].out_hw
        geoms.append((arch.label(li), l.in_maps, in_hw[0], l.kernel, l.out_maps))

    strides = [int(s) for s in cfg.bench_strides.split(",") if s.strip()]
    header = [
        "layer",
        "pattern",
        "rows_P",
        "out_maps",
        "dense_Q",
        "sparse_Q",
        "dense_macs",
        "sparse_macs",
        "mac_ratio",
        "wall_clock_dense_us",
        "wall_clock_sparse_us",
    ]
    rows = []
    for name, c, side, k, m in geoms:
        image = rng.gen.random((c, side, side), dtype=np.float32)
        kern = rng.gen.standard_normal((m, c, k, k), dtype=np.float32)
        dense = lower_dense(image, kern)
        t_dense = _time_gemm(dense, cfg.bench_reps)
        for s in strides:
            pattern = StridedPattern(
                np.full(c, s, dtype=np.int64), np.zeros(c, dtype=np.int64)
            )
            sparse = lower_strided(image, kern, pattern)
            t_sparse = _time_gemm(sparse, cfg.bench_reps)
            dense_q, sparse_q = dense.feature.shape[1], sparse.feature.shape[1]
            oh = side - k + 1
            rows.append(
                (
                    name,
                    f"s{s}_o0",
                    dense.feature.shape[0],
                    m,
                    dense_q,
                    sparse_q,
                    mac_count(c, m, (oh, oh), k),
                    mac_count(c, m, (oh, oh), k, pattern),
                    sparse_q / dense_q,
                    t_dense,
                    t_sparse,
                )
            )
    csv_path = os.path.join(cfg.out_dir, "lower_bench.csv")
    write_csv(csv_path, header, rows)
    return {"csv": csv_path, "rows": rows, "header": header}


def _time_gemm(pair, reps: int) -> float:
    conv_via_gemm(pair)  # warm up
    best = math.inf
    for _ in range(max(1, reps)):
        t0 = time.perf_counter()
        conv_via_gemm(pair)
        best = min(best, time.perf_counter() - t0)
    return best * 1e6


def cmd_fig6(cfg: PipelineConfig) -> dict:
    """Three runs per seed: big net, pruned-then-retrained small net, and
    the same small architecture trained from scratch."""
    cfg = cfg.resolve()
    os.makedirs(cfg.out_dir, exist_ok=True)
    seeds = [int(s) for s in cfg.fig6_seeds.split(",") if s.strip()]
    epochs = cfg.fig6_epochs
    curve_rows, summary = [], []
    for seed in seeds:
        run_cfg = dataclasses.replace(cfg, seed=seed)
        root = Rng(seed + 1000)
        train_set, val_set, test_set = load_data(run_cfg)
        arch = cfg.parsed_arch()

        nw1 = init_network(arch, root.child())
        rep1 = train(nw1, train_set, _train_config(cfg, epochs, _phase_seed(root)), val=val_set)
        mcr1 = evaluate_mcr(nw1, test_set)

        scfg = SearchConfig(
            granularity="channel",
            n_particles=cfg.n_particles,
            generations=cfg.generations,
            target=cfg.fig6_target,
            first_conv_cap=cfg.first_conv_cap,
            mutation_rate=cfg.mutation_rate,
            crossover_rate=cfg.crossover_rate,
            eval_set_size=cfg.eval_set_size,
            mode=cfg.search_mode,
        )
        best, _ = run_search(nw1, val_set, scfg, root.child())
        nw2, nw2_mask = compact(apply_mask(nw1, best), best)
        rep2 = train(
            nw2, train_set, _train_config(cfg, epochs, _phase_seed(root)),
            mask=nw2_mask, val=val_set,
        )
        mcr2 = evaluate_mcr(nw2, test_set, mask=nw2_mask)

        scratch = init_network(nw2.arch, root.child())
        rep3 = train(
            scratch, train_set, _train_config(cfg, epochs, _phase_seed(root)), val=val_set
        )
        mcr3 = evaluate_mcr(scratch, test_set)

        for run, rep in (("nw1", rep1), ("nw2_pruned", rep2), ("nw2_scratch", rep3)):
            for e in rep.epochs:
                curve_rows.append((seed, run, e.epoch, e.train_mcr, e.val_mcr))
        conn1 = sum(arch.connection_counts().values())
        conn2 = sum(nw2.arch.connection_counts().values())
        summary.append(
            {
                "seed": seed,
                "nw1_arch": arch.source,
                "nw2_arch": nw2.arch.source,
                "connections_nw1": conn1,
                "connections_nw2": conn2,
                "mcr_nw1": mcr1,
                "mcr_nw2_pruned": mcr2,
                "mcr_nw2_scratch": mcr3,
            }
        )
    write_csv(
        os.path.join(cfg.out_dir, "fig6_curves.csv"),
        ["seed", "run", "epoch", "train_mcr", "val_mcr"],
        curve_rows,
    )
    write_csv(
        os.path.join(cfg.out_dir, "fig6_summary.csv"),
        list(summary[0].keys()),
        [tuple(s.values()) for s in summary],
    )
    return {"summary": summary, "curves": curve_rows}


def cmd_report(cfg: PipelineConfig, checkpoint=None) -> dict:
    """Mask heatmaps (one PGM per conv layer) plus a text summary."""
    cfg = cfg.resolve()
    os.makedirs(cfg.out_dir, exist_ok=True)
    checkpoint = checkpoint or os.path.join(cfg.out_dir, "pruned.spcn")
    net, mask = load_checkpoint(checkpoint)
    lines = [
        f"checkpoint: {checkpoint}",
        f"arch: {net.arch.source}",
        f"parameters: {net.param_count()}",
    ]
    heatmaps = {}
    if mask is not None:
        lines.append(f"kept parameters: {mask.kept_param_count()}")
        for ci, li in enumerate(net.arch.conv_indices()):
            label = net.arch.label(li)
            img = kernel_heatmap(mask, ci)
            path = os.path.join(cfg.out_dir, f"mask_{label}.pgm")
            write_pgm(path, img)
            heatmaps[label] = path
            kept = int(mask.effective_kernel_keep(ci).sum())
            lines.append(
                f"{label}: connections {kept}/{img.size}, heatmap {path}"
            )
    else:
        lines.append("no mask present; summary only")
    text = "\n".join(lines)
    with open(os.path.join(cfg.out_dir, "report.txt"), "w") as f:
        f.write(text + "\n")
    return {"text": text, "heatmaps": heatmaps, "net": net, "mask": mask}
