import dataclasses

import numpy as np
import pytest

from evaluation.runner import top1_per_hierarchy
from geoloc.data import generate_synthetic, stratified_split, synthetic_taxonomy
from geoloc.errors import ConfigError, DegenerateInputError, DimensionError, InputError, TrainingAbortedError
from geoloc.model import ModelConfig, init_model, load_checkpoint
from geoloc.training import TrainConfig, bind_taxonomy, train, training_targets


@pytest.fixture
def head_config(toy_taxonomy):
    return ModelConfig(
        level_sizes=toy_taxonomy.sizes,
        feature_dim=16,
        scene_dim=4,
        text_dim=8,
        token_embed_dim=4,
        scene_depth=2,
        text_depth=2,
    )


def test_zero_epochs_returns_the_initialization(toy_records, toy_taxonomy, head_config):
    params, log = train(toy_records, toy_taxonomy, head_config, TrainConfig(epochs=0))
    assert log == []
    initial = init_model(head_config).arrays()
    for name, value in params.arrays().items():
        np.testing.assert_array_equal(value, initial[name])
    assert params.config.taxonomy_fingerprint == toy_taxonomy.fingerprint()


def test_training_is_deterministic(toy_records, toy_taxonomy, head_config):
    config = TrainConfig(epochs=2, seed=4)
    first, log_a = train(toy_records, toy_taxonomy, head_config, config)
    second, log_b = train(toy_records, toy_taxonomy, head_config, config)
    assert [e.to_dict() for e in log_a] == [e.to_dict() for e in log_b]
    b = second.arrays()
    for name, value in first.arrays().items():
        np.testing.assert_array_equal(value, b[name])


def test_loss_goes_down(toy_records, toy_taxonomy, head_config):
    _, log = train(toy_records, toy_taxonomy, head_config, TrainConfig(epochs=5, learning_rate=0.01))
    assert [e.epoch for e in log] == [0, 1, 2, 3, 4]
    assert log[-1].total < log[0].total
    assert log[-1].geo < log[0].geo
    for entry in log:
        assert entry.total == pytest.approx(entry.geo + entry.scene + entry.tla, abs=1e-9)
        assert 0.0 <= entry.train_top1_city <= 1.0


def test_loss_decreases_every_epoch_at_the_default_rate(toy_records, toy_taxonomy, head_config):
    config = TrainConfig(epochs=5)
    assert config.learning_rate == 0.001
    _, log = train(toy_records, toy_taxonomy, head_config, config)
    totals = [entry.total for entry in log]
    for earlier, later in zip(totals, totals[1:]):
        assert later < earlier


def test_zero_weights_freeze_the_auxiliary_branches(toy_records, toy_taxonomy, head_config):
    config = dataclasses.replace(head_config, loss_weights=(1.0, 0.0, 0.0))
    params, log = train(toy_records, toy_taxonomy, config, TrainConfig(epochs=2, learning_rate=0.01))
    initial = init_model(config).arrays()
    trained = params.arrays()
    for name, value in trained.items():
        if name.startswith(("scene_ffn", "text_ffn", "attention")):
            np.testing.assert_array_equal(value, initial[name])
    assert not np.array_equal(trained["classifier.0.weight"], initial["classifier.0.weight"])
    # frozen terms are still reported
    assert all(entry.scene > 0 for entry in log)
    assert all(entry.total == pytest.approx(entry.geo, abs=1e-12) for entry in log)


def test_checkpoint_is_written(tmp_path, toy_records, toy_taxonomy, head_config):
    path = tmp_path / "head.cgck"
    params, _ = train(toy_records, toy_taxonomy, head_config, TrainConfig(epochs=1), checkpoint_path=path)
    restored = load_checkpoint(path)
    assert restored.config == params.config
    expected = params.arrays()
    for name, value in restored.arrays().items():
        np.testing.assert_array_equal(value, expected[name])


@pytest.mark.parametrize("changes", [
    {"epochs": -1},
    {"batch_size": 0},
    {"learning_rate": 0.0},
    {"alignment": "country"},
    {"scene_mode": "hard"},
    {"eval_mode": "joint"},
])
def test_train_config_validation(changes):
    with pytest.raises(ConfigError):
        dataclasses.replace(TrainConfig(), **changes).validate()


def test_train_config_round_trip():
    config = TrainConfig(epochs=3, scene_mode="majority", alignment="city")
    assert TrainConfig.from_dict(config.to_dict()) == config
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"momentum": 0.9})


@pytest.mark.parametrize("data", [
    {"epochs": "5"},
    {"epochs": 2.5},
    {"batch_size": True},
    {"learning_rate": "fast"},
    {"scene_mode": 1},
    {"stub_fallback": "yes"},
    [1, 2],
])
def test_train_config_rejects_wrong_types(data):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(data)


def test_bind_taxonomy(toy_taxonomy, disjoint_taxonomy, head_config):
    bound = bind_taxonomy(head_config, toy_taxonomy)
    assert bound.taxonomy_fingerprint == toy_taxonomy.fingerprint()
    assert bind_taxonomy(bound, toy_taxonomy) == bound
    with pytest.raises(ConfigError):
        bind_taxonomy(head_config, disjoint_taxonomy)

    other = dataclasses.replace(bound, taxonomy_fingerprint="0" * 64)
    with pytest.raises(ConfigError, match="different taxonomy"):
        bind_taxonomy(other, toy_taxonomy)


def test_train_rejects_bad_inputs(toy_records, toy_taxonomy, head_config):
    with pytest.raises(InputError):
        train([], toy_taxonomy, head_config, TrainConfig(epochs=1))
    wide = dataclasses.replace(head_config, feature_dim=32)
    with pytest.raises(DimensionError):
        train(toy_records, toy_taxonomy, wide, TrainConfig(epochs=1))


def test_degenerate_loss_aborts_with_its_position(monkeypatch, toy_records, toy_taxonomy, head_config):
    def zero_text_vector(*args, **kwargs):
        raise DegenerateInputError("text alignment target has zero norm")

    monkeypatch.setattr("geoloc.training.total_loss", zero_text_vector)
    with pytest.raises(TrainingAbortedError, match="epoch 0, batch 0") as caught:
        train(toy_records, toy_taxonomy, head_config, TrainConfig(epochs=1))
    assert (caught.value.epoch, caught.value.batch_index) == (0, 0)
    assert isinstance(caught.value.__cause__, DegenerateInputError)
    assert caught.value.to_dict()["error"] == "TrainingAbortedError"


def test_training_targets(toy_records, toy_taxonomy, head_config):
    labels, scenes, texts = training_targets(toy_records, toy_taxonomy, head_config, TrainConfig())
    assert labels.shape == (80, 4)
    assert scenes.shape == (80, 4)
    np.testing.assert_allclose(scenes.sum(axis=1), 1.0)
    np.testing.assert_allclose(np.linalg.norm(texts, axis=1), 1.0)

    _, majority, _ = training_targets(
        toy_records, toy_taxonomy, head_config, TrainConfig(scene_mode="majority")
    )
    assert set(np.unique(majority)) <= {0.0, 1.0}
    np.testing.assert_array_equal(majority.sum(axis=1), 1.0)


@pytest.mark.slow
def test_head_learns_separable_clusters():
    taxonomy = synthetic_taxonomy(8, 4, 2, 2)
    records = generate_synthetic(taxonomy, 80, 0.1, seed=0)
    train_records, val_records = stratified_split(records, 0.8, seed=0)
    assert (len(train_records), len(val_records)) == (512, 128)

    config = ModelConfig(level_sizes=taxonomy.sizes)
    params, log = train(train_records, taxonomy, config, TrainConfig(epochs=50, learning_rate=0.001))

    assert log[-1].train_top1_city >= 0.95
    val = top1_per_hierarchy(params, val_records, taxonomy, "codependent")
    assert val["city"] >= 0.90
    for coarse in ("state", "country", "continent"):
        assert val[coarse] >= val["city"]
