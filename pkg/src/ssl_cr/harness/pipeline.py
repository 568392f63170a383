"""One experiment cell as a LangGraph graph: data -> pretrain -> finetune -> [consist] -> evaluate."""

import logging
from pathlib import Path
from typing import Any, Literal, Optional

from langchain_core.runnables import RunnableConfig
from langgraph.graph import END, START, StateGraph
from langgraph.types import Command
from typing_extensions import TypedDict

from ssl_cr.configuration import ExperimentConfig, artifact_root, validate_config
from ssl_cr.harness.runs import run_consist, run_eval, run_finetune, run_gen_data, run_pretrain
from ssl_cr.storage.manifest_store import ManifestStore

logger = logging.getLogger(__name__)


###################
# State Definitions
###################
class CellInputState(TypedDict):
    """Flat config snapshot plus the phase to run."""

    config: dict[str, Any]
    with_consistency: bool
    artifact_root: Optional[str]


class CellState(CellInputState, total=False):
    data_run: str
    pretrain_run: str
    finetune_run: str
    consist_run: str
    evaluated_run: str
    executed: list[str]
    report: dict[str, Any]


def _context(state: CellState) -> tuple[ExperimentConfig, ManifestStore]:
    root = Path(state["artifact_root"]) if state.get("artifact_root") else artifact_root()
    return validate_config(state["config"]), ManifestStore(root)


def _executed(state: CellState, name: str, cached: bool) -> list[str]:
    return [*state.get("executed", []), *([] if cached else [name])]


###################
# Nodes
###################
def prepare_data(state: CellState, config: RunnableConfig) -> dict:
    """Generate or reuse the synthetic corpus."""
    experiment, store = _context(state)
    result = run_gen_data(experiment, store)
    return {"data_run": result.manifest.run_id, "executed": _executed(state, "gen-data", result.cached)}


def pretrain_node(state: CellState, config: RunnableConfig) -> dict:
    """Pretrain with the configured method."""
    experiment, store = _context(state)
    result = run_pretrain(experiment, store, store.read(state["data_run"]))
    return {"pretrain_run": result.manifest.run_id, "executed": _executed(state, "pretrain", result.cached)}


def finetune_node(state: CellState, config: RunnableConfig) -> Command[Literal["consist", "evaluate"]]:
    """Fine-tune, then route to consistency training or straight to evaluation."""
    experiment, store = _context(state)
    result = run_finetune(experiment, store, store.read(state["data_run"]), store.read(state["pretrain_run"]))
    update = {"finetune_run": result.manifest.run_id, "executed": _executed(state, "finetune", result.cached)}
    return Command(goto="consist" if state["with_consistency"] else "evaluate", update=update)


def consist_node(state: CellState, config: RunnableConfig) -> dict:
    """Teacher-student consistency training from the fine-tuned run."""
    experiment, store = _context(state)
    result = run_consist(experiment, store, store.read(state["data_run"]), store.read(state["finetune_run"]))
    return {"consist_run": result.manifest.run_id, "executed": _executed(state, "consist", result.cached)}


def evaluate_node(state: CellState, config: RunnableConfig) -> dict:
    """Score the final run of the cell on the test slides."""
    experiment, store = _context(state)
    run_id = state["consist_run"] if state["with_consistency"] else state["finetune_run"]
    report = run_eval(experiment, store, store.read(state["data_run"]), store.read(run_id))
    return {"evaluated_run": run_id, "report": report.model_dump(mode="json")}


###################
# Graph
###################
cell_builder = StateGraph(CellState, input=CellInputState)
cell_builder.add_node("prepare_data", prepare_data)
cell_builder.add_node("pretrain", pretrain_node)
cell_builder.add_node("finetune", finetune_node)
cell_builder.add_node("consist", consist_node)
cell_builder.add_node("evaluate", evaluate_node)

cell_builder.add_edge(START, "prepare_data")
cell_builder.add_edge("prepare_data", "pretrain")
cell_builder.add_edge("pretrain", "finetune")
cell_builder.add_edge("consist", "evaluate")
cell_builder.add_edge("evaluate", END)

experiment_cell = cell_builder.compile()


def run_cell(config: ExperimentConfig, with_consistency: bool, root: Optional[Path] = None) -> CellState:
    """Run one matrix cell to completion and return the final graph state."""
    state = experiment_cell.invoke(
        {"config": config.flat(), "with_consistency": with_consistency, "artifact_root": str(root) if root else None}
    )
    logger.info("[harness] cell done, executed=%s", state.get("executed", []))
    return state
