import dataclasses

import numpy as np
import pytest

from evaluation import (
    ABLATION_GRID,
    AblationRow,
    AblationTrial,
    RunConfig,
    compare_datasets,
    dataset_statistics,
    evaluate,
    evaluate_all_modes,
    print_comparison,
    run_ablation,
    run_trial,
)
from evaluation.evaluate import ablation_gain, comparison_str
from geoloc.data import FeatureRecord, generate_synthetic, stratified_split, synthetic_taxonomy
from geoloc.errors import ConfigError, InputError
from geoloc.inference import EVAL_MODES
from geoloc.model import ModelConfig, init_model, save_checkpoint
from geoloc.taxonomy import HIERARCHIES
from geoloc.training import TrainConfig


def small_head(taxonomy, feature_dim):
    return ModelConfig(
        level_sizes=taxonomy.sizes,
        feature_dim=feature_dim,
        scene_dim=4,
        text_dim=8,
        token_embed_dim=4,
        scene_depth=2,
        text_depth=2,
    )


@pytest.fixture
def oracle_head(toy_taxonomy):
    """Classifiers that read the city off a one-hot feature and map it to every ancestor."""
    template = init_model(small_head(toy_taxonomy, toy_taxonomy.num_cities))
    arrays = template.arrays()
    for h, size in enumerate(toy_taxonomy.sizes):
        weight = np.zeros((toy_taxonomy.num_cities, size))
        weight[np.arange(toy_taxonomy.num_cities), toy_taxonomy.ancestor_map(0, h)] = 1.0
        arrays[f"classifier.{h}.weight"] = weight
        arrays[f"classifier.{h}.bias"] = np.zeros(size)
    return template.with_arrays(arrays)


@pytest.fixture
def one_hot_records(toy_taxonomy):
    eye = np.eye(toy_taxonomy.num_cities)
    return [
        FeatureRecord(f"v{city}-{i}", 10.0 * eye[city], toy_taxonomy.ancestors_of(city), frame_scenes=[0] * 15)
        for city in range(toy_taxonomy.num_cities)
        for i in range(3)
    ]


# =============================================================================
# Accuracy reports
# =============================================================================

@pytest.mark.parametrize("mode", EVAL_MODES)
def test_perfect_head_scores_one(oracle_head, one_hot_records, toy_taxonomy, mode):
    report = evaluate(oracle_head, one_hot_records, toy_taxonomy, mode, topk=(1, 5))
    assert report.num_samples == 24
    assert report.path_validity == 1.0
    for hierarchy in HIERARCHIES:
        assert report.top(hierarchy, 1) == 1.0
        assert report.top(hierarchy, 5) == 1.0
    assert report.checkpoint is None


def test_all_modes_from_a_saved_checkpoint(tmp_path, toy_records, toy_taxonomy):
    config = dataclasses.replace(small_head(toy_taxonomy, 16), taxonomy_fingerprint=toy_taxonomy.fingerprint())
    params = init_model(config)
    path = tmp_path / "head.cgck"
    save_checkpoint(params, path)

    reports = evaluate_all_modes(path, toy_records, toy_taxonomy, topk=(1, 3))
    assert set(reports) == set(EVAL_MODES)
    assert reports["codependent"].path_validity == 1.0
    for report in reports.values():
        assert report.checkpoint == str(path)
        for hierarchy in HIERARCHIES:
            assert 0.0 <= report.top(hierarchy, 1) <= report.top(hierarchy, 3) <= 1.0

    direct = evaluate(params, toy_records, toy_taxonomy, "codependent", topk=(1, 3))
    assert direct.accuracy == reports["codependent"].accuracy

    data = reports["none"].to_dict()
    assert data["accuracy"]["city"].keys() == {"top1", "top3"}
    assert "Evaluation Results: none" in reports["none"].summary_str()


def test_checkpoint_must_match_the_taxonomy(oracle_head, one_hot_records, toy_taxonomy, disjoint_taxonomy):
    with pytest.raises(ConfigError):
        evaluate(oracle_head, one_hot_records, disjoint_taxonomy)

    foreign = dataclasses.replace(
        oracle_head, config=dataclasses.replace(oracle_head.config, taxonomy_fingerprint="0" * 64)
    )
    with pytest.raises(ConfigError, match="different taxonomy"):
        evaluate(foreign, one_hot_records, toy_taxonomy)


def test_evaluate_rejects_bad_arguments(oracle_head, one_hot_records, toy_taxonomy):
    with pytest.raises(InputError):
        evaluate(oracle_head, one_hot_records, toy_taxonomy, "joint")
    with pytest.raises(InputError):
        evaluate(oracle_head, [], toy_taxonomy)


# =============================================================================
# Dataset statistics
# =============================================================================

def skewed_records(taxonomy):
    return [
        FeatureRecord(f"v{i}", np.zeros(2), taxonomy.ancestors_of(city), frame_scenes=[0])
        for i, city in enumerate([0, 3, 3, 3])
    ]


def test_dataset_statistics(toy_taxonomy):
    stats = dataset_statistics(skewed_records(toy_taxonomy), toy_taxonomy, name="skewed")
    city = stats.level("city")
    assert (city.num_classes, city.num_samples, city.minimum, city.maximum) == (8, 4, 0, 3)
    assert city.median == 0.0
    assert city.mean == 0.5
    assert city.counts == [1, 0, 0, 3, 0, 0, 0, 0]

    continent = stats.level("continent")
    assert continent.gini == pytest.approx(0.5, abs=1e-15)
    assert continent.hoover == pytest.approx(0.5, abs=1e-15)
    assert continent.lorenz == [(0.0, 0.0), (0.5, 0.0), (1.0, 1.0)]
    assert continent.counts == [4, 0]

    histogram = stats.to_dict(include_lorenz=False)["levels"][0]
    assert "lorenz" not in histogram
    assert histogram["counts"] == [1, 0, 0, 3, 0, 0, 0, 0]
    assert "Dataset Statistics: skewed" in stats.summary_str()
    with pytest.raises(KeyError):
        stats.level("planet")
    with pytest.raises(InputError):
        dataset_statistics([], toy_taxonomy)


def test_balanced_dataset_is_perfectly_equal(toy_records, toy_taxonomy):
    stats = dataset_statistics(toy_records, toy_taxonomy)
    for level in stats.levels:
        assert level.gini == pytest.approx(0.0, abs=1e-12)
        assert level.hoover == pytest.approx(0.0, abs=1e-12)


def test_compare_datasets(toy_records, toy_taxonomy):
    balanced = dataset_statistics(toy_records, toy_taxonomy, name="balanced")
    skewed = dataset_statistics(skewed_records(toy_taxonomy), toy_taxonomy, name="skewed")
    comparison = compare_datasets(skewed, balanced)
    assert comparison["datasets"] == ["skewed", "balanced"]
    assert list(comparison["hierarchies"]) == list(HIERARCHIES)
    assert comparison["hierarchies"]["continent"]["gini_difference"] == pytest.approx(0.5)
    assert "DATASET COMPARISON" in comparison_str(skewed, balanced)


# =============================================================================
# Ablation
# =============================================================================

def test_ablation_row_aggregates_successful_trials():
    row = AblationRow("soft scene", "soft", None, True)
    assert row.error is None and row.median_top1("city") is None
    row.add_trial(AblationTrial(0, top1=dict.fromkeys(HIERARCHIES, 0.5)))
    row.add_trial(AblationTrial(1, top1=dict.fromkeys(HIERARCHIES, 0.7)))
    row.add_trial(AblationTrial(2, error="boom"))
    assert row.median_top1("city") == pytest.approx(0.6)
    assert row.error is None
    assert row.to_dict()["successful_trials"] == 2

    failed = AblationRow("broken", None, None, True, trials=[AblationTrial(0, error="boom")])
    assert failed.error == "boom"
    assert failed.median_top1("city") is None
    assert failed.to_dict()["median_top1"] == dict.fromkeys(HIERARCHIES)


def test_rows_without_results_are_not_scored_as_zero(capsys):
    zero = AblationRow("blind", "soft", "all", True, trials=[AblationTrial(0, top1=dict.fromkeys(HIERARCHIES, 0.0))])
    empty = AblationRow("never run", "soft", "all", True)
    failed = AblationRow("broken", None, None, True, trials=[AblationTrial(0, error="boom")])

    assert zero.median_top1("city") == 0.0
    with pytest.raises(InputError, match="never run"):
        ablation_gain([zero, empty], "never run", "blind")
    with pytest.raises(InputError, match="broken"):
        ablation_gain([zero, failed], "blind", "broken")

    print_comparison([zero, empty, failed])
    lines = capsys.readouterr().out.splitlines()
    assert next(line for line in lines if line.startswith("blind")).split()[1:] == ["0.00"] * 4
    assert next(line for line in lines if line.startswith("never run")).split()[2:] == ["n/a"] * 4
    assert "failed: boom" in next(line for line in lines if line.startswith("broken"))


def test_variant_configs():
    model = ModelConfig(level_sizes=(2, 2, 2, 2))
    training = TrainConfig()
    by_name = {variant.name: variant for variant in ABLATION_GRID}

    m, t = by_name["geolocalization only"].configs(model, training)
    assert m.loss_weights == (1.0, 0.0, 0.0)
    m, t = by_name["majority scene"].configs(model, training)
    assert m.loss_weights == (1.0, 1.0, 0.0) and t.scene_mode == "majority"
    m, t = by_name["soft scene + TLA (city)"].configs(model, training)
    assert m.loss_weights == (1.0, 1.0, 1.0) and t.alignment == "city"
    m, _ = by_name["soft scene + TLA (all), no attention"].configs(model, training)
    assert not m.use_attention


def test_run_trial_records_failures(toy_records, toy_taxonomy):
    config = RunConfig(ABLATION_GRID[0], small_head(toy_taxonomy, 99), TrainConfig(epochs=1), seed=0)
    trial = run_trial(config, toy_records, toy_records, toy_taxonomy)
    assert trial.top1 == {}
    assert trial.error.startswith("DimensionError")


def test_run_ablation_grid(toy_records, toy_taxonomy, capsys):
    train_records, val_records = stratified_split(toy_records, 0.8, seed=0)
    rows = run_ablation(
        train_records, val_records, toy_taxonomy,
        small_head(toy_taxonomy, 16), TrainConfig(epochs=1),
        seeds=(0, 1), variants=ABLATION_GRID[:2],
    )
    assert [row.name for row in rows] == ["geolocalization only", "majority scene"]
    for row in rows:
        assert row.error is None
        assert [t.seed for t in row.trials] == [0, 1]
        for trial in row.trials:
            assert set(trial.top1) == set(HIERARCHIES)
            assert trial.final_loss is not None
    gain = ablation_gain(rows, "majority scene", "geolocalization only")
    assert gain == pytest.approx(rows[1].median_top1("city") - rows[0].median_top1("city"))

    print_comparison(rows)
    out = capsys.readouterr().out
    assert "ABLATION COMPARISON" in out
    assert "majority scene" in out
    assert "Seeds: [0, 1]" in out

    with pytest.raises(InputError):
        run_ablation(train_records, val_records, toy_taxonomy, small_head(toy_taxonomy, 16), TrainConfig(), seeds=())


@pytest.mark.slow
def test_auxiliary_branches_do_not_hurt_city_accuracy():
    taxonomy = synthetic_taxonomy(8, 4, 2, 2)
    records = generate_synthetic(taxonomy, 80, 0.1, seed=0)
    train_records, val_records = stratified_split(records, 0.8, seed=0)
    variants = [v for v in ABLATION_GRID if v.name in {"geolocalization only", "soft scene + TLA (all)"}]
    assert len(variants) == 2

    rows = run_ablation(
        train_records, val_records, taxonomy,
        ModelConfig(level_sizes=taxonomy.sizes), TrainConfig(epochs=50),
        seeds=(0, 1, 2), variants=variants,
    )
    for row in rows:
        assert len(row.successful_trials) == 3
    assert ablation_gain(rows, "soft scene + TLA (all)", "geolocalization only") >= 0.0
