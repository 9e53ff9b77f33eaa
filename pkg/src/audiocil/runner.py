"""Experiment orchestration, results bundles and accuracy-curve plots."""
from __future__ import annotations

import json
import logging
import time
from importlib import resources
from pathlib import Path

import torch

from . import __version__
from .audio_data import FeatureBank, load_dataset
from .config import ExperimentConfig, parse_config
from .evaluation import AccuracyMatrix, evaluate_stage
from .learners import build_learner
from .scenario import ScenarioSpec, build_schedule, sample_few_shot, task_data

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
TIMING_FIELDS = ("wall_clock_seconds",)


class StageError(RuntimeError):
    def __init__(self, stage: int, cause: BaseException):
        super().__init__(f"stage {stage}: {type(cause).__name__}: {cause}")
        self.stage = stage


def results_schema() -> dict:
    return json.loads(resources.files("audiocil").joinpath("results_schema.json").read_text())


def strip_timing(bundle: dict) -> dict:
    return {k: v for k, v in bundle.items() if k not in TIMING_FIELDS}


def _dump(bundle: dict) -> str:
    return json.dumps(bundle, indent=2, sort_keys=True)


def write_bundle(bundle: dict, output_dir) -> Path:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "results.json"
    path.write_text(_dump(bundle) + "\n")
    return path


def run_experiment(config, plot: bool = False) -> dict:
    """Run every task of the configured scenario and return the results bundle.

    The bundle is written to ``config.output_dir/results.json`` when an
    output directory is set; on failure the partial bundle is written first.
    """
    if not isinstance(config, ExperimentConfig):
        config = parse_config(config)
    torch.manual_seed(config.seed)

    options = dict(config.synthetic, seed=config.seed)
    train = load_dataset(config.dataset, config.manifest_path, "train", **options)
    test = load_dataset(config.dataset, config.manifest_path, "test", **options)
    bank = FeatureBank(config.feature_config).add(train).add(test)

    spec = ScenarioSpec(len(train.class_set), config.init_cls, config.increment, config.seed,
                        few_shot=config.isfew_shot,
                        n_way=config.increment if config.isfew_shot else None,
                        k_shot=config.kshot if config.isfew_shot else None)
    schedule = build_schedule(spec, train.class_set)
    learner = build_learner(
        config.model_name, convnet_type=config.convnet_type, feature_dim=config.feature_dim,
        memory_size=config.memory_size, epochs=config.epochs,
        learning_rate=config.learning_rate, batch_size=config.batch_size, seed=config.seed,
        hyperparameters=config.hyperparameters,
    )

    matrix = AccuracyMatrix()
    bundle = {
        "schema_version": SCHEMA_VERSION,
        "toolkit_version": __version__,
        "status": "running",
        "config": config.to_dict(),
        "class_order": list(schedule.class_order),
        "classes_seen": [],
        "accuracy_matrix": matrix.rows,
        "curve": matrix.per_stage,
        "average_accuracy": None,
        "wall_clock_seconds": [],
        "buffer_occupancy": [],
    }
    for i in range(schedule.num_tasks):
        start = time.perf_counter()
        try:
            task = task_data(schedule, i, train)
            if config.isfew_shot and i > 0:
                task = sample_few_shot(task, config.increment, config.kshot, config.seed + i)
            learner.run_task(task, schedule, bank)
            acc, row = evaluate_stage(learner.scores, schedule, i, test, bank)
        except Exception as exc:
            bundle.update(status="failed", failed_stage=i, error=f"{type(exc).__name__}: {exc}")
            if config.output_dir:
                write_bundle(bundle, config.output_dir)
            raise StageError(i, exc) from exc
        matrix.add(acc, row)
        bundle["classes_seen"].append(schedule.n_seen(i))
        bundle["wall_clock_seconds"].append(time.perf_counter() - start)
        bundle["buffer_occupancy"].append(0 if learner.buffer is None else len(learner.buffer))
        logger.info("%s stage %d: A=%.4f row=%s", config.model_name, i, acc, row)

    bundle["status"] = "complete"
    bundle["average_accuracy"] = matrix.average
    if config.output_dir:
        write_bundle(bundle, config.output_dir)
        if plot:
            emit_plot([bundle], Path(config.output_dir) / "curve.svg")
    return bundle


def emit_plot(bundles, out_path) -> Path:
    """One accuracy curve per bundle against the number of classes seen."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    bundles = list(bundles)
    if not bundles:
        raise ValueError("no results to plot")
    shape = bundles[0]["classes_seen"]
    for b in bundles[1:]:
        if b["classes_seen"] != shape:
            raise ValueError(
                f"mismatched schedules: {b['classes_seen']} vs {shape}"
            )
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for b in bundles:
        ax.plot(b["classes_seen"], [100 * a for a in b["curve"]], marker="o",
                label=b["config"]["model_name"])
    ax.set_xlabel("Number of classes")
    ax.set_ylabel("Top-1 accuracy (%)")
    ax.set_xticks(shape)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format=out_path.suffix.lstrip(".") or "svg")
    plt.close(fig)
    return out_path
