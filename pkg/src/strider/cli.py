"""Command-line surface.

    strider train        train a baseline and write a checkpoint
    strider prune        staged prune-retrain over a baseline checkpoint
    strider quantize     fixed-point rows over a pruned checkpoint
    strider lower-bench  dense vs strided lowering sizes and GEMM timings
    strider fig6         pruned-vs-scratch comparison runs
    strider report       mask heatmaps and a text summary
    strider print-config effective configuration dump

Flags layer on top of an optional key=value config file; any field can
also be overridden with --set key=value.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .errors import StriderError


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="strider", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "prune", "quantize", "lower-bench", "fig6", "report", "print-config"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="key=value configuration file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--dataset", choices=("mnist", "cifar10", "synthetic"), default=None)
        sp.add_argument("--profile", choices=("paper", "desk"), default=None)
        sp.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override any configuration field",
        )
        if name in ("prune", "quantize", "report"):
            sp.add_argument("--checkpoint", default=None)
        if name == "prune":
            sp.add_argument("--stages", default=None)
        if name in ("train", "fig6"):
            sp.add_argument("--epochs", type=int, default=None)
    return p


def _config_from_args(args) -> pipeline.PipelineConfig:
    cfg = (
        pipeline.config_from_file(args.config)
        if args.config
        else pipeline.PipelineConfig()
    )
    direct = {
        "seed": args.seed,
        "out_dir": args.out,
        "dataset": args.dataset,
        "profile": args.profile,
        "stages": getattr(args, "stages", None),
        "epochs": getattr(args, "epochs", None),
    }
    for key, value in direct.items():
        if value is not None:
            cfg = pipeline.apply_setting(cfg, key, str(value))
    for item in args.set:
        if "=" not in item:
            raise StriderError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg = pipeline.apply_setting(cfg, key.strip(), value.strip())
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "print-config":
            print(cfg.resolve().to_text(), end="")
        elif args.command == "train":
            out = pipeline.cmd_train(cfg)
            rep = out["report"]
            print(f"checkpoint: {out['checkpoint']}")
            print(f"final val MCR: {rep.final_val_mcr:.4f}")
            print(f"test MCR: {out['test_mcr']:.4f}")
        elif args.command == "prune":
            out = pipeline.cmd_prune(cfg, checkpoint=args.checkpoint)
            print(f"checkpoint: {out['checkpoint']}")
            print(f"baseline test MCR: {out['baseline_mcr']:.4f}")
            for r in out["stages"]:
                verdict = "accepted" if r.accepted else "rejected (budget)"
                print(
                    f"stage {r.stage} {r.granularity}:{r.detail}  "
                    f"params {r.params_before}->{r.params_after}  "
                    f"connections {r.connections_before}->{r.connections_after}  "
                    f"MCR {r.mcr_before:.4f}->{r.mcr_after:.4f}  [{verdict}]"
                )
        elif args.command == "quantize":
            out = pipeline.cmd_quantize(cfg, checkpoint=args.checkpoint)
            print(f"csv: {out['csv']}")
            print(f"float test MCR: {out['float_mcr']:.4f}")
            for r in out["rows"]:
                levels = "/".join(str(m) for m in r["row"])
                print(
                    f"levels {levels}: MCR {r['mcr']:.4f} "
                    f"(direct {r['mcr_direct']:.4f})"
                )
        elif args.command == "lower-bench":
            out = pipeline.cmd_lower_bench(cfg)
            print(f"csv: {out['csv']}")
            for row in out["rows"]:
                print(
                    f"{row[0]} {row[1]}: Q {row[4]}->{row[5]}  MACs {row[6]}->{row[7]}"
                    f"  gemm {row[9]:.1f}us->{row[10]:.1f}us"
                )
        elif args.command == "fig6":
            out = pipeline.cmd_fig6(cfg)
            for s in out["summary"]:
                print(
                    f"seed {s['seed']}: {s['nw1_arch']} ({s['connections_nw1']} conn) "
                    f"MCR {s['mcr_nw1']:.4f} | pruned {s['nw2_arch']} "
                    f"({s['connections_nw2']} conn) MCR {s['mcr_nw2_pruned']:.4f} | "
                    f"scratch MCR {s['mcr_nw2_scratch']:.4f}"
                )
        elif args.command == "report":
            out = pipeline.cmd_report(cfg, checkpoint=args.checkpoint)
            print(out["text"])
    except StriderError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
