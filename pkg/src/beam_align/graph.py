"""Define the beam alignment pipeline graph.

generate -> train -> calibrate -> [attack] -> evaluate, each node reading the
run configuration from the ``configurable`` mapping of the RunnableConfig.
"""

import logging
from typing import Any, Dict, Literal

from dotenv import load_dotenv
from langchain_core.runnables import RunnableConfig
from langgraph.constants import END
from langgraph.graph import StateGraph

from beam_align.configuration import RunConfig
from beam_align.pipeline import run_attack, run_calibrate, run_eval, run_generate, run_train
from beam_align.state import InputState, PipelineState

load_dotenv()

logger = logging.getLogger(__name__)


def generate(state: PipelineState, config: RunnableConfig) -> Dict[str, Any]:
    """Synthesize the channel set and write the labeled dataset."""
    run_config = RunConfig.from_runnable_config(config)
    summary = run_generate(run_config, verify=state.verify_labels, export=state.export_channels)
    return {"dataset_path": summary["dataset"], "summaries": {"generate": summary}}


def train_model(state: PipelineState, config: RunnableConfig) -> Dict[str, Any]:
    """Fit the classifier on the train split."""
    summary = run_train(RunConfig.from_runnable_config(config), force=state.force)
    return {"checkpoint_path": summary["checkpoint"], "summaries": {"train": summary}}


def calibrate(state: PipelineState, config: RunnableConfig) -> Dict[str, Any]:
    """Build the neighbor index and the calibration scores."""
    summary = run_calibrate(RunConfig.from_runnable_config(config))
    return {
        "index_path": summary["index"],
        "calibration_path": summary["calibration"],
        "summaries": {"calibrate": summary},
    }


def attack(state: PipelineState, config: RunnableConfig) -> Dict[str, Any]:
    """Write the FGSM version of the attacked split."""
    summary = run_attack(RunConfig.from_runnable_config(config))
    return {
        "adversarial_paths": [item["path"] for item in summary["files"]],
        "summaries": {"attack": summary},
    }


def evaluate(state: PipelineState, config: RunnableConfig) -> Dict[str, Any]:
    """Score every method and write the report."""
    summary = run_eval(
        RunConfig.from_runnable_config(config),
        allow_lineage_mismatch=state.allow_lineage_mismatch,
    )
    return {"report_path": summary["report"], "summaries": {"evaluate": summary}}


def route_after_calibration(state: PipelineState, config: RunnableConfig) -> Literal["attack", "evaluate"]:
    """Skip the attack stage when it is disabled in the configuration."""
    if RunConfig.from_runnable_config(config).attack.enabled:
        return "attack"
    logger.info("Attack disabled; going straight to evaluation")
    return "evaluate"


builder = StateGraph(PipelineState, input_schema=InputState)

builder.add_node("generate", generate)
builder.add_node("train", train_model)
builder.add_node("calibrate", calibrate)
builder.add_node("attack", attack)
builder.add_node("evaluate", evaluate)

builder.set_entry_point("generate")
builder.add_edge("generate", "train")
builder.add_edge("train", "calibrate")
builder.add_conditional_edges("calibrate", route_after_calibration)
builder.add_edge("attack", "evaluate")
builder.add_edge("evaluate", END)

graph = builder.compile(
    name="Beam Alignment Pipeline",
)
