import json

import jsonschema
import pytest

from audiocil.config import ConfigError, ExperimentConfig, parse_config
from audiocil.runner import (StageError, emit_plot, results_schema, run_experiment,
                             strip_timing)

BASE = {
    "dataset": "synthetic", "model_name": "replay", "init_cls": 4, "increment": 2,
    "memory_size": 20, "feature_dim": 16, "epochs": 1, "batch_size": 16, "seed": 3,
    "synthetic": {"num_classes": 10, "train_per_class": 6, "test_per_class": 3},
}


def _cfg(**overrides):
    return dict(BASE, **overrides)


# ----------------------------------------------------------------- config


def test_minimal_config_fills_defaults():
    cfg = parse_config({"dataset": "synthetic", "model_name": "finetune",
                        "init_cls": 2, "increment": 2})
    assert cfg.seed == 1993 and cfg.memory_size == 2000 and cfg.convnet_type == "tiny-cnn"
    assert cfg.features["n_mels"] == 64 and cfg.synthetic["num_classes"] == 10


def test_unknown_key_suggests_spelling():
    with pytest.raises(ConfigError) as info:
        parse_config(_cfg(**{"memory-size": 10}))
    assert info.value.key == "memory-size" and "memory_size" in str(info.value)


@pytest.mark.parametrize("key,value", [("init_cls", "4"), ("increment", 2.0), ("isfew_shot", 1),
                                       ("epochs", True), ("learning_rate", "fast"),
                                       ("synthetic", [10])])
def test_bad_types(key, value):
    with pytest.raises(ConfigError) as info:
        parse_config(_cfg(**{key: value}))
    assert info.value.key == key


@pytest.mark.parametrize("key,value", [("init_cls", 0), ("batch_size", 0), ("memory_size", -1),
                                       ("learning_rate", 0.0)])
def test_out_of_range(key, value):
    with pytest.raises(ConfigError) as info:
        parse_config(_cfg(**{key: value}))
    assert info.value.key == key


def test_nested_and_registry_errors():
    with pytest.raises(ConfigError, match="n_mel"):
        parse_config(_cfg(features={"n_mel": 40}))
    with pytest.raises(ConfigError, match="kd_weight"):
        parse_config(_cfg(model_name="lwf", hyperparameters={"kd": 1.0}))
    with pytest.raises(ConfigError, match="not implemented"):
        parse_config(_cfg(model_name="coil"))
    with pytest.raises(ConfigError, match="synthetic"):
        parse_config(_cfg(dataset="esc-50"))
    with pytest.raises(ConfigError) as info:
        parse_config(_cfg(memory_size=0))
    assert info.value.key == "memory_size"
    with pytest.raises(ConfigError) as info:
        parse_config({"dataset": "synthetic", "model_name": "replay", "init_cls": 2})
    assert info.value.key == "increment"


def test_config_roundtrip(tmp_path):
    cfg = parse_config(_cfg(learning_rate=1))
    assert isinstance(cfg.learning_rate, float)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert parse_config(path) == cfg
    assert parse_config(json.dumps(cfg.to_dict())) == cfg
    assert isinstance(cfg, ExperimentConfig)


# ----------------------------------------------------------------- runs


@pytest.fixture(scope="module")
def bundle_pair():
    return run_experiment(_cfg()), run_experiment(_cfg())


def test_two_runs_identical_modulo_timing(bundle_pair):
    a, b = bundle_pair
    assert json.dumps(strip_timing(a), sort_keys=True) == json.dumps(strip_timing(b), sort_keys=True)


def test_bundle_validates_against_schema(bundle_pair):
    jsonschema.validate(bundle_pair[0], results_schema())


def test_bundle_shape(bundle_pair):
    bundle = bundle_pair[0]
    assert bundle["status"] == "complete"
    assert bundle["classes_seen"] == [4, 6, 8, 10]
    assert [len(r) for r in bundle["accuracy_matrix"]] == [1, 2, 3, 4]
    assert sum(len(r) for r in bundle["accuracy_matrix"]) == 10
    assert bundle["average_accuracy"] == pytest.approx(sum(bundle["curve"]) / 4)
    assert all(n <= 20 for n in bundle["buffer_occupancy"])
    assert sorted(bundle["class_order"]) == list(range(10))


def test_written_bundle_and_plot(tmp_path):
    bundle = run_experiment(_cfg(model_name="finetune", output_dir=str(tmp_path)), plot=True)
    on_disk = json.loads((tmp_path / "results.json").read_text())
    assert on_disk == json.loads(json.dumps(bundle))
    assert (tmp_path / "curve.svg").read_text().lstrip().startswith("<?xml")


def test_failure_flushes_partial_bundle(tmp_path):
    # 4 shots requested from classes holding 3 training clips: fails at stage 1
    cfg = _cfg(model_name="finetune", isfew_shot=True, kshot=4, output_dir=str(tmp_path),
               synthetic={"num_classes": 10, "train_per_class": 3, "test_per_class": 2})
    with pytest.raises(StageError) as info:
        run_experiment(cfg)
    assert info.value.stage == 1
    partial = json.loads((tmp_path / "results.json").read_text())
    assert partial["status"] == "failed" and partial["failed_stage"] == 1
    assert len(partial["accuracy_matrix"]) == 1
    jsonschema.validate(partial, results_schema())


def test_few_shot_run(tmp_path):
    bundle = run_experiment(_cfg(model_name="metasc", isfew_shot=True, kshot=5, memory_size=0))
    assert bundle["classes_seen"] == [4, 6, 8, 10]


# ----------------------------------------------------------------- plots


def _fake(name, seen=(4, 6, 8, 10)):
    return {"classes_seen": list(seen), "curve": [0.9, 0.7, 0.6, 0.5][: len(seen)],
            "config": {"model_name": name}}


def test_emit_plot_three_curves(tmp_path):
    import matplotlib.pyplot as plt
    from matplotlib import figure

    captured = {}
    original = figure.Figure.savefig

    def spy(self, *args, **kwargs):
        ax = self.axes[0]
        captured["x"] = [list(line.get_xdata()) for line in ax.get_lines()]
        captured["labels"] = [t.get_text() for t in ax.get_legend().get_texts()]
        return original(self, *args, **kwargs)

    figure.Figure.savefig = spy
    try:
        out = emit_plot([_fake("finetune"), _fake("replay"), _fake("icarl")], tmp_path / "p.svg")
    finally:
        figure.Figure.savefig = original
        plt.close("all")
    assert out.exists()
    assert captured["x"] == [[4, 6, 8, 10]] * 3
    assert captured["labels"] == ["finetune", "replay", "icarl"]


def test_emit_plot_rejects_mismatched_schedules(tmp_path):
    with pytest.raises(ValueError, match="mismatched"):
        emit_plot([_fake("a"), _fake("b", (5, 10))], tmp_path / "p.svg")
    with pytest.raises(ValueError):
        emit_plot([], tmp_path / "p.svg")
