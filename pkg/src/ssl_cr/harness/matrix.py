"""Experiment matrix and ablation sweeps with pandas report tables."""

import itertools
import logging
from pathlib import Path
from typing import Iterator, Literal, Optional, Sequence

import pandas as pd
from pydantic import BaseModel, Field

from ssl_cr.configuration import ALPHAS, ExperimentConfig, TaskMode, config_diff, with_overrides
from ssl_cr.errors import ConfigurationError
from ssl_cr.harness.pipeline import run_cell

logger = logging.getLogger(__name__)

ABLATION_AXES = {"mu": "consistency.mu", "n_aug": "augment.strong_n_aug"}
ABLATION_VALUES = tuple(range(1, 8))
ABLATION_ALPHA = 0.10


class ExperimentMatrix(BaseModel):
    """Methods x phases x label fractions x seeds."""

    methods: list[Literal["random", "vae", "moco", "rsp"]] = Field(default_factory=lambda: ["random", "vae", "moco", "rsp"])
    phases: list[Literal["ft", "cr"]] = Field(default_factory=lambda: ["ft", "cr"])
    alphas: list[float] = Field(default_factory=lambda: list(ALPHAS))
    seeds: list[int] = Field(default_factory=lambda: [0])

    def cells(self) -> Iterator[tuple[str, str, float, int]]:
        yield from itertools.product(self.methods, self.phases, self.alphas, self.seeds)


def primary_metric(config: ExperimentConfig) -> str:
    """Headline column for the report: ICC, slide AUC or accuracy."""
    if config.data.task is TaskMode.REGRESSION:
        return "icc_truth"
    return "slide_auc" if config.data.slide_labels else "accuracy"


def cell_config(base: ExperimentConfig, method: str, alpha: float, seed: int) -> ExperimentConfig:
    return with_overrides(base, {"pretrain.method": method, "finetune.alpha": alpha, "seed": seed})


def report_table(results: pd.DataFrame, metric: str) -> pd.DataFrame:
    """Median over seeds, rows = method (+CR), columns = alpha."""
    if results.empty or metric not in results:
        return pd.DataFrame()
    results = results.assign(row=results["method"] + results["phase"].map({"ft": "", "cr": "+CR"}))
    return results.pivot_table(index="row", columns="alpha", values=metric, aggfunc="median")


def run_matrix(
    matrix: ExperimentMatrix, base: ExperimentConfig, root: Optional[Path] = None, out_dir: Optional[Path] = None
) -> pd.DataFrame:
    """Run every cell not already cached and return one row per cell.

    Args:
        matrix: Cells to run.
        base: Resolved profile config; method, alpha and seed are overridden per cell.
        root: Artifact root.
        out_dir: When given, the long table and the report pivot are written there as CSV.
    """
    rows = []
    for method, phase, alpha, seed in matrix.cells():
        config = cell_config(base, method, alpha, seed)
        state = run_cell(config, with_consistency=phase == "cr", root=root)
        rows.append({
            "method": method, "phase": phase, "alpha": alpha, "seed": seed,
            "run_id": state["evaluated_run"], "executed": len(state.get("executed", [])),
            **state["report"]["metrics"],
        })
    results = pd.DataFrame(rows)
    if out_dir is not None and not results.empty:
        out_dir.mkdir(parents=True, exist_ok=True)
        results.to_csv(out_dir / "matrix_cells.csv", index=False)
        report_table(results, primary_metric(base)).to_csv(out_dir / "matrix_report.csv")
    logger.info("[matrix] %d cells, %d executed", len(results), int(results["executed"].gt(0).sum()) if rows else 0)
    return results


def plan_ablation(
    axis: str, base: ExperimentConfig, values: Sequence[int] = ABLATION_VALUES
) -> list[tuple[int, ExperimentConfig]]:
    """One config per swept value; each differs from the base only on the swept key."""
    if axis not in ABLATION_AXES:
        raise ConfigurationError(f"Unknown ablation axis '{axis}'; choose from {sorted(ABLATION_AXES)}")
    if abs(base.finetune.alpha - ABLATION_ALPHA) > 1e-9:
        raise ConfigurationError(f"Ablations run at alpha = {ABLATION_ALPHA}, got {base.finetune.alpha}")
    bad = [v for v in values if v not in ABLATION_VALUES]
    if bad:
        raise ConfigurationError(f"Ablation values must lie in 1..7, got {bad}")
    key = ABLATION_AXES[axis]
    plans = []
    for value in values:
        config = with_overrides(base, {key: value})
        changed = set(config_diff(base, config)) - {key}
        if changed:
            raise ConfigurationError(f"Ablation on {key} also changed {sorted(changed)}")
        plans.append((value, config))
    return plans


def ablate(
    axis: str,
    base: ExperimentConfig,
    root: Optional[Path] = None,
    values: Sequence[int] = ABLATION_VALUES,
    out_dir: Optional[Path] = None,
) -> pd.DataFrame:
    """RSP + consistency runs at alpha 0.10, one per axis value."""
    base = with_overrides(base, {"pretrain.method": "rsp"})
    rows = []
    for value, config in plan_ablation(axis, base, values):
        state = run_cell(config, with_consistency=True, root=root)
        rows.append({axis: value, "run_id": state["evaluated_run"], **state["report"]["metrics"]})
    table = pd.DataFrame(rows)
    if out_dir is not None and not table.empty:
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / f"ablation_{axis}.csv", index=False)
    return table
