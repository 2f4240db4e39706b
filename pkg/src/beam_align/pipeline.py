"""Pipeline stages shared by the CLI subcommands and the graph nodes.

Every stage reads its inputs from the workspace, writes its artifacts there
and returns a JSON-ready summary.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Optional

from beam_align.attack import adversarial_dataset, attack_split, relative_perturbation
from beam_align.channel import export_channels, synthesize_channel_set
from beam_align.codebook import export_codebook, odft_codebook
from beam_align.configuration import DknnBackend, RunConfig
from beam_align.dknn import (
    build_index,
    calibrate,
    dknn_predict,
    load_calibration,
    load_index,
    lsh_recall,
    save_calibration,
    save_index,
)
from beam_align.errors import ConfigError, InvalidArgumentError, LineageMismatchError, NumericFailureError
from beam_align.evaluation import evaluate_all, write_figures, write_report
from beam_align.model import accuracy, load_checkpoint, save_checkpoint, train
from beam_align.sweep import SPLITS, build_dataset, check_disjoint, read_dataset, verify_labels, write_dataset
from beam_align.utils import to_builtin

logger = logging.getLogger(__name__)

_RECALL_QUERIES = 500


def run_generate(config: RunConfig, *, verify: bool = False, export: bool = False) -> dict[str, Any]:
    """Synthesize channels and write the labeled dataset."""
    channels = synthesize_channel_set(config.scenario, config.scenario_seed)
    dataset = build_dataset(config, channels)
    path = write_dataset(dataset, config.paths.resolve("dataset"))
    summary: dict[str, Any] = {
        "dataset": str(path),
        "counts": {name: len(dataset.split(name)) for name in SPLITS},
        "config_hash": dataset.meta["config_hash"],
    }
    if verify:
        mismatches = verify_labels(dataset, channels, odft_codebook(config.scenario.n_bs, config.sweep.oversampling))
        summary["label_mismatches"] = mismatches
        if mismatches:
            raise NumericFailureError(f"{mismatches} labels disagree with the exhaustive search")
        logger.info("All %d labels verified", sum(summary["counts"].values()))
    if export:
        channels_path = export_channels(config.paths.resolve("channels"), channels, config.scenario, config.scenario_seed)
        codebook_path = export_codebook(
            Path(config.paths.workspace) / "narrow_codebook.bin",
            odft_codebook(config.scenario.n_bs, config.sweep.oversampling),
        )
        summary["exports"] = [str(channels_path), str(codebook_path)]
    return summary


def _check_lineage(config: RunConfig, artifacts: dict[str, Optional[str]], allow: bool) -> None:
    expected = config.lineage_hash()
    stale = {name: value for name, value in artifacts.items() if value is not None and value != expected}
    if not stale:
        return
    message = f"artifacts {sorted(stale)} were produced from a different configuration (expected {expected[:12]})"
    if not allow:
        raise LineageMismatchError(message)
    logger.warning("%s; continuing because the mismatch is allowed", message)


def run_train(config: RunConfig, *, force: bool = False) -> dict[str, Any]:
    """Train the classifier and write the checkpoint and loss history."""
    checkpoint = config.paths.resolve("checkpoint")
    if checkpoint.exists() and not force:
        raise ConfigError(f"checkpoint {checkpoint} already exists; pass --force to overwrite it")
    dataset = read_dataset(config.paths.resolve("dataset"))
    if dataset.meta.get("adversarial"):
        raise InvalidArgumentError("refusing to train on an adversarial dataset")
    _check_lineage(config, {"dataset": dataset.meta.get("config_hash")}, allow=True)
    state = train(
        dataset,
        config.model,
        config.training,
        feature_scale=config.sweep.feature_scale,
        seed=config.training_seed,
    )
    save_checkpoint(state, checkpoint)
    history = config.paths.resolve("loss_history")
    meta = state.training_meta
    with history.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, loss in enumerate(meta["train_loss"]):
            val = meta["val_loss"][epoch] if epoch < len(meta["val_loss"]) else ""
            writer.writerow([epoch + 1, loss, val])
    train_acc = accuracy(dataset.train.rssi, dataset.train.labels, state)
    logger.info("Training done: %d epochs, train accuracy %.3f", meta["epochs_run"], train_acc)
    return {
        "checkpoint": str(checkpoint),
        "loss_history": str(history),
        "epochs_run": meta["epochs_run"],
        "final_train_loss": meta["final_train_loss"],
        "train_accuracy": train_acc,
    }


def run_calibrate(config: RunConfig) -> dict[str, Any]:
    """Index the training representations and score the calibration split."""
    dataset = read_dataset(config.paths.resolve("dataset"))
    state = load_checkpoint(config.paths.resolve("checkpoint"))
    check_disjoint(dataset.train, dataset.calibration)
    lineage = {"config_hash": dataset.meta.get("config_hash")}
    index = build_index(state, dataset.train, config.dknn, seed=config.seed, meta=lineage)
    scores = calibrate(index, state, dataset.calibration, meta=lineage)
    summary: dict[str, Any] = {
        "index": str(save_index(index, config.paths.resolve("index"))),
        "calibration": str(save_calibration(scores, config.paths.resolve("calibration"))),
        "n_calibration": len(scores),
        "backend": index.backend.value,
    }
    if index.backend == DknnBackend.LSH:
        exact = replace(index, backend=DknnBackend.EXACT)
        queries = dataset.test.rssi[:_RECALL_QUERIES]
        if len(queries):
            summary["lsh_recall"] = lsh_recall(index, exact, queries, state)
    return summary


def _attack_path(config: RunConfig, relative: Optional[float]) -> Path:
    base = config.paths.resolve("adversarial")
    if relative is None:
        return base
    return base.with_name(f"{base.stem}_rel{relative:g}{base.suffix}")


def run_attack(config: RunConfig, *, sweep: bool = False) -> dict[str, Any]:
    """Write FGSM versions of the configured split, optionally one file per relative epsilon."""
    dataset = read_dataset(config.paths.resolve("dataset"))
    state = load_checkpoint(config.paths.resolve("checkpoint"))
    source = dataset.split(config.attack.split)
    runs: list[tuple[Path, Any]] = [(_attack_path(config, None), config.attack)]
    if sweep:
        runs += [
            (_attack_path(config, rel), replace(config.attack, relative_epsilon=rel))
            for rel in config.attack.sweep_relative_epsilons
        ]
    clean_accuracy = accuracy(source.rssi, source.labels, state)
    files = []
    for path, attack_cfg in runs:
        adversarial, epsilon = attack_split(source, state, attack_cfg)
        write_dataset(adversarial_dataset(dataset, config.attack.split, adversarial, attack_cfg, epsilon), path)
        files.append(
            {
                "path": str(path),
                "epsilon": epsilon,
                "relative_epsilon": attack_cfg.relative_epsilon,
                "clean_accuracy": clean_accuracy,
                "adversarial_accuracy": accuracy(adversarial.rssi, adversarial.labels, state),
                "relative_perturbation": relative_perturbation(source.rssi, adversarial.rssi),
            }
        )
    return {"files": files}


def run_eval(config: RunConfig, *, allow_lineage_mismatch: bool = False) -> dict[str, Any]:
    """Evaluate every method and write the report and figure tables."""
    dataset = read_dataset(config.paths.resolve("dataset"))
    state = load_checkpoint(config.paths.resolve("checkpoint"))
    index = load_index(config.paths.resolve("index"))
    calibration = load_calibration(config.paths.resolve("calibration"))

    adversarial_path = config.paths.resolve("adversarial")
    adversarial = None
    attack_meta = None
    lineage = {
        "dataset": dataset.meta.get("config_hash"),
        "checkpoint": state.training_meta.get("config_hash"),
        "index": index.meta.get("config_hash"),
        "calibration": calibration.meta.get("config_hash"),
    }
    if config.attack.enabled and adversarial_path.exists():
        adversarial_set = read_dataset(adversarial_path)
        attack_meta = adversarial_set.meta.get("attack", {})
        adversarial = adversarial_set.split(attack_meta.get("source_split", "test"))
        lineage["adversarial"] = adversarial_set.meta.get("config_hash")
    _check_lineage(config, lineage, allow_lineage_mismatch)

    channels = synthesize_channel_set(config.scenario, config.scenario_seed)
    report = evaluate_all(state, index, calibration, dataset, channels, config, adversarial, attack_meta)
    report_path = write_report(report, config.paths.resolve("report"))
    figures = write_figures(report, report_path.parent)
    return {"report": str(report_path), "figures": [str(p) for p in figures]}


def explain_sample(config: RunConfig, ue_id: int) -> dict[str, Any]:
    """DkNN verdict and per-layer neighbor report of one sample, looked up by UE id."""
    dataset = read_dataset(config.paths.resolve("dataset"))
    state = load_checkpoint(config.paths.resolve("checkpoint"))
    index = load_index(config.paths.resolve("index"))
    calibration = load_calibration(config.paths.resolve("calibration"))
    name, sample = dataset.find(ue_id)
    verdict = dknn_predict(sample.rssi, index, calibration, state)
    return to_builtin(
        {
            "ue_id": sample.ue_id,
            "split": name,
            "label": sample.label,
            "snr_db": sample.snr_db,
            **verdict.to_dict(),
        }
    )
