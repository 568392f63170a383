"""Command-line entry point: ssl-cr <subcommand> [options].

Examples:
    ssl-cr gen-data --profile synthetic --seed 0
    ssl-cr pretrain --method rsp
    ssl-cr finetune --alpha 0.10 --init rsp --profile kather
    ssl-cr consist --init runs/<run-id>/checkpoint.pt --alpha 0.10 --mu 7 --lambda 1 --tau 0.0 --pseudo hard
    ssl-cr matrix --methods random rsp --alphas 0.10 0.25
    ssl-cr ablate --axis mu
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.rule import Rule
from rich.table import Table

from ssl_cr.augment import describe_policies
from ssl_cr.configuration import ExperimentConfig, artifact_root, resolve_config
from ssl_cr.errors import ConfigurationError, SslCrError
from ssl_cr.harness.matrix import ABLATION_AXES, ExperimentMatrix, ablate, primary_metric, report_table, run_matrix
from ssl_cr.harness.plotting import plot_learning_curves
from ssl_cr.harness.runs import (
    resolve_finetune_init,
    run_consist,
    run_eval,
    run_finetune,
    run_gen_data,
    run_pretrain,
)
from ssl_cr.metrics import MetricReport
from ssl_cr.storage.manifest_store import ManifestStore, RunManifest

console = Console()
logger = logging.getLogger("ssl_cr")

# CLI flag -> dotted config key
FLAG_KEYS = {
    "seed": "seed",
    "method": "pretrain.method",
    "init": "pretrain.method",
    "alpha": "finetune.alpha",
    "mu": "consistency.mu",
    "lam": "consistency.lam",
    "tau": "consistency.tau_c",
    "pseudo": "consistency.pseudo_label",
}

PROFILES = ["synthetic", "breastpathq", "camelyon16", "kather"]


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    """Flags accepted both before and after the subcommand.

    The subcommand copy suppresses defaults so it only overrides what was given.
    """
    default = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", choices=PROFILES, help="Hyperparameter profile", **default)
    common.add_argument("--config", type=Path, help="Flat key = value config file", **default)
    common.add_argument("--set", dest="sub_overrides" if suppress else "overrides", action="append",
                        default=argparse.SUPPRESS if suppress else [], metavar="KEY=VALUE",
                        help="Override a dotted config key (repeatable)")
    common.add_argument("--seed", type=int, help="Master seed", **default)
    common.add_argument("--root", type=Path, help="Artifact root (default: $SSL_CR_ARTIFACT_ROOT)", **default)
    common.add_argument("--verbose", action="store_true", help="Debug logging", **default)
    common.add_argument("--no-progress", action="store_true", help="Hide progress bars", **default)
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssl-cr", description="Self-supervised pretraining and consistency training", parents=[_common_flags(False)]
    )
    parser.add_argument("--dump-policy", action="store_true", help="Print resolved augmentation ranges and exit")

    common = _common_flags(True)
    sub = parser.add_subparsers(dest="command")
    sub.add_parser("gen-data", parents=[common], help="Generate the synthetic pyramid corpus")

    p = sub.add_parser("pretrain", parents=[common], help="Pretrain an encoder")
    p.add_argument("--method", choices=["rsp", "moco", "vae", "random"])

    p = sub.add_parser("finetune", parents=[common], help="Fine-tune a pretrained encoder")
    p.add_argument("--alpha", type=float)
    p.add_argument("--init", choices=["rsp", "moco", "vae", "random"])
    p.add_argument("--pretrain-run", help="Reuse a pretraining run id, e.g. one from another profile")

    p = sub.add_parser("consist", parents=[common], help="Teacher-student consistency training")
    p.add_argument("--init", dest="finetune_init", metavar="CKPT",
                   help="Fine-tuned checkpoint path or finetune run id (default: run the pipeline)")
    p.add_argument("--method", choices=["rsp", "moco", "vae", "random"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--mu", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--pseudo", choices=["hard", "soft"])

    p = sub.add_parser("eval", parents=[common], help="Evaluate a fine-tune or consistency run")
    p.add_argument("--run", dest="run_id", required=True, help="Run id to evaluate")

    p = sub.add_parser("matrix", parents=[common], help="Run the method x phase x alpha x seed matrix")
    p.add_argument("--methods", nargs="+", default=["random", "vae", "moco", "rsp"])
    p.add_argument("--phases", nargs="+", choices=["ft", "cr"], default=["ft", "cr"])
    p.add_argument("--alphas", nargs="+", type=float, default=[0.10, 0.25, 0.50, 1.0])
    p.add_argument("--seeds", nargs="+", type=int, default=[0])

    p = sub.add_parser("ablate", parents=[common], help="Sweep mu or N_aug at alpha 0.10")
    p.add_argument("--axis", choices=sorted(ABLATION_AXES), required=True)
    p.add_argument("--values", nargs="+", type=int)

    p = sub.add_parser("plot", parents=[common], help="Plot learning curves of a run")
    p.add_argument("--run", dest="run_id", help="Run id whose metrics log to plot")
    p.add_argument("--log", type=Path, help="Metrics log path")
    p.add_argument("--out", type=Path)
    return parser


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def collect_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Dotted overrides from --set pairs and dedicated flags; flags win."""
    overrides: dict[str, Any] = {}
    for pair in [*args.overrides, *getattr(args, "sub_overrides", [])]:
        if "=" not in pair:
            raise ConfigurationError(f"--set expects KEY=VALUE, got '{pair}'")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if args.no_progress:
        overrides["progress"] = False
    return overrides


def print_report(report: MetricReport) -> None:
    table = Table(title=f"Run {report.run_id}")
    table.add_column("metric")
    table.add_column("value", justify="right")
    table.add_column("interval", justify="right")
    for name, value in sorted(report.metrics.items()):
        low_high = report.intervals.get(name)
        table.add_row(name, f"{value:.4f}", f"[{low_high[0]:.3f}, {low_high[1]:.3f}]" if low_high else "")
    console.print(table)
    for flag in report.flags:
        console.print(f"[yellow]flag:[/yellow] {flag}")


def _required(store: ManifestStore, run_id: str) -> RunManifest:
    manifest = store.read(run_id)
    if manifest is None:
        raise ConfigurationError(f"Unknown run id '{run_id}'")
    return manifest


def dispatch(args: argparse.Namespace, config: ExperimentConfig, store: ManifestStore) -> None:
    command = args.command
    console.print(Rule(f"[bold blue]{command}[/bold blue] profile={config.profile} seed={config.seed}"))
    data = run_gen_data(config, store).manifest
    if command == "gen-data":
        console.print(Panel(json.dumps(data.metrics, indent=2), title=data.run_id))
        return

    if command == "pretrain":
        result = run_pretrain(config, store, data)
        console.print(f"[green]pretrain[/green] {result.manifest.run_id} cached={result.cached}")
    elif command == "finetune":
        pretrained = _required(store, args.pretrain_run) if args.pretrain_run else run_pretrain(config, store, data).manifest
        result = run_finetune(config, store, data, pretrained)
        console.print(f"[green]finetune[/green] {result.manifest.run_id} cached={result.cached}")
        print_report(run_eval(config, store, data, result.manifest))
    elif command == "consist":
        if args.finetune_init:
            tuned = resolve_finetune_init(config, store, args.finetune_init)
        else:
            tuned = run_finetune(config, store, data, run_pretrain(config, store, data).manifest).manifest
        result = run_consist(config, store, data, tuned)
        console.print(f"[green]consist[/green] {result.manifest.run_id} cached={result.cached}")
        print_report(run_eval(config, store, data, result.manifest))
    elif command == "eval":
        print_report(run_eval(config, store, data, _required(store, args.run_id)))
    elif command == "matrix":
        matrix = ExperimentMatrix(methods=args.methods, phases=args.phases, alphas=args.alphas, seeds=args.seeds)
        results = run_matrix(matrix, config, store.root, out_dir=store.root / "reports")
        console.print(report_table(results, primary_metric(config)).to_string())
    elif command == "ablate":
        kwargs = {"values": args.values} if args.values else {}
        table = ablate(args.axis, config, store.root, out_dir=store.root / "reports", **kwargs)
        console.print(table.to_string(index=False))
    elif command == "plot":
        if args.log is None and args.run_id is None:
            raise ConfigurationError("plot needs --run or --log")
        log = args.log or store.run_dir(args.run_id) / "metrics.jsonl"
        console.print(f"[green]wrote[/green] {plot_learning_curves(log, args.out)}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run the subcommand and map failures to exit codes."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        config = resolve_config(profile=args.profile, config_file=args.config, overrides=collect_overrides(args))
        if args.dump_policy:
            console.print_json(json.dumps(describe_policies(config.augment)))
            return 0
        if args.command is None:
            parser.print_help()
            return 2
        dispatch(args, config, ManifestStore(args.root or artifact_root()))
    except SslCrError as e:
        console.print(f"[red]error ({e.category}):[/red] {e}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
