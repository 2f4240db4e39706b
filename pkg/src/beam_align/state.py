"""Define the state structures for the pipeline graph."""

from __future__ import annotations

import operator
from dataclasses import dataclass, field
from typing import Any, Optional

from typing_extensions import Annotated


@dataclass
class InputState:
    """Flags accepted when the whole pipeline is invoked."""

    force: bool = False
    """Overwrite an existing checkpoint instead of refusing."""

    verify_labels: bool = False
    """Recount every label with an independent exhaustive search after generation."""

    export_channels: bool = False
    """Also write the channel set and the narrow codebook as raw complex rows."""

    allow_lineage_mismatch: bool = False
    """Evaluate even when artifacts come from different data-generating configurations."""


@dataclass
class PipelineState(InputState):
    """Artifact paths and per-stage summaries accumulated while the graph runs."""

    dataset_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    index_path: Optional[str] = None
    calibration_path: Optional[str] = None
    adversarial_paths: list[str] = field(default_factory=list)
    report_path: Optional[str] = None

    summaries: Annotated[dict[str, Any], operator.or_] = field(default_factory=dict)
    """
    Stage name to the summary that stage returned.

    The `operator.or_` reducer merges each node's update into the existing mapping.
    """
