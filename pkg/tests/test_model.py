import dataclasses
import math

import numpy as np
import pytest

from geoloc.errors import ConfigError, DegenerateInputError, DimensionError, FormatError, LabelIndexError
from geoloc.model import (
    ForwardOutput,
    ModelConfig,
    checkpoint_from_bytes,
    count_parameters,
    forward,
    geometric_widths,
    init_model,
    iter_batches,
    level_probabilities,
    load_checkpoint,
    loss_geo,
    loss_scene,
    loss_tla,
    model_gradient_check,
    save_checkpoint,
    total_loss,
)
from geoloc.numerics import Tensor
from geoloc.taxonomy import LabelPath

LN2 = math.log(2.0)


def fixed_output(level_logits, scene_logits=(0.0, 0.0), text_vector=(1.0, 0.0)):
    """A ForwardOutput built from given arrays; only the loss inputs matter."""
    logits = tuple(Tensor(np.asarray(l, dtype=float)) for l in level_logits)
    combined = Tensor(np.concatenate([l.data for l in logits], axis=-1))
    return ForwardOutput(logits, combined, combined, Tensor(scene_logits), Tensor(text_vector))


# =============================================================================
# Initialization and config
# =============================================================================

def test_toy_classifier_parameter_count(small_config):
    params = init_model(small_config)
    classifier = sum(t.size for name, t in params.named_tensors().items() if name.startswith("classifier."))
    assert classifier == 72


def test_init_is_deterministic(small_config):
    a, b = init_model(small_config).arrays(), init_model(small_config).arrays()
    assert a.keys() == b.keys()
    for name in a:
        assert a[name].tobytes() == b[name].tobytes()
    assert count_parameters(init_model(small_config)) == count_parameters(init_model(small_config))


def test_different_seeds_differ(small_config):
    a = init_model(small_config).arrays()
    b = init_model(dataclasses.replace(small_config, seed=1)).arrays()
    assert not np.array_equal(a["classifier.0.weight"], b["classifier.0.weight"])


def test_heads_must_divide_embedding():
    config = ModelConfig(level_sizes=(2, 2, 2, 2), token_embed_dim=6, num_heads=4)
    with pytest.raises(ConfigError):
        config.validate()
    with pytest.raises(ConfigError):
        init_model(config)


def test_config_validation_and_round_trip(small_config):
    with pytest.raises(ConfigError):
        ModelConfig(level_sizes=(2, 2, 2)).validate()
    with pytest.raises(ConfigError):
        ModelConfig(level_sizes=(2, 2, 2, 2), loss_weights=(1, -1, 1)).validate()
    assert ModelConfig.from_dict(small_config.to_dict()) == small_config
    with pytest.raises(ConfigError, match="dropout"):
        ModelConfig.from_dict({**small_config.to_dict(), "dropout": 0.1})


@pytest.mark.parametrize("changes", [
    {"feature_dim": "x"},
    {"num_heads": 2.0},
    {"use_attention": 1},
    {"level_sizes": [2, 2, "2", 2]},
    {"level_sizes": 8},
    {"loss_weights": [1.0, "1", 1.0]},
    {"seed": False},
])
def test_config_rejects_wrong_types(small_config, changes):
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**small_config.to_dict(), **changes})


def test_geometric_widths():
    widths = geometric_widths(166 + 157 + 91 + 6, 16, 6)
    assert len(widths) == 7
    assert widths[0] == 420 and widths[-1] == 16
    assert all(a >= b for a, b in zip(widths, widths[1:]))
    assert geometric_widths(8, 4, 3)[::3] == [8, 4]


def test_ffn_depths(small_config):
    params = init_model(small_config)
    assert len(params.scene_layers) == 6
    assert len(params.text_layers) == 3
    assert params.scene_layers[0][0].shape[0] == 8
    assert params.text_layers[-1][0].shape[1] == 4


def test_without_attention_has_no_attention_params(small_config):
    params = init_model(dataclasses.replace(small_config, use_attention=False))
    assert params.attention is None
    assert not any(name.startswith("attention.") for name in params.named_tensors())
    output = forward(np.ones(8), params)
    np.testing.assert_array_equal(output.attended.data, output.combined.data)


# =============================================================================
# Forward pass
# =============================================================================

def test_forward_dimensions(small_config):
    params = init_model(small_config)
    single = forward(np.random.default_rng(0).standard_normal(8), params)
    assert [t.shape for t in single.level_logits] == [(2,), (2,), (2,), (2,)]
    assert single.combined.shape == (8,)
    assert single.attended.shape == (8,)
    assert single.scene_logits.shape == (3,)
    assert single.text_vector.shape == (4,)
    assert not single.batched

    batch = forward(np.zeros((5, 8)), params)
    assert batch.batched
    assert batch.scene_logits.shape == (5, 3)
    assert batch.text_vector.shape == (5, 4)


def test_forward_rejects_wrong_feature_size(small_config):
    with pytest.raises(DimensionError):
        forward(np.zeros(7), init_model(small_config))


def test_zero_classifiers_make_outputs_constant(small_config):
    params = init_model(small_config)
    arrays = params.arrays()
    for name in arrays:
        if name.startswith("classifier."):
            arrays[name] = np.zeros_like(arrays[name])
    zeroed = params.with_arrays(arrays)
    rng = np.random.default_rng(4)
    a = forward(rng.standard_normal(8), zeroed)
    b = forward(rng.standard_normal(8) * 100, zeroed)
    assert not a.combined.data.any()
    np.testing.assert_array_equal(a.attended.data, b.attended.data)
    np.testing.assert_array_equal(a.scene_logits.data, b.scene_logits.data)
    np.testing.assert_array_equal(a.text_vector.data, b.text_vector.data)


def forward_oracle(features, params):
    """Forward pass written out one token and one layer at a time."""
    pv = np.concatenate([features @ w.data + b.data for w, b in params.classifiers])
    att = {name: t.data for name, t in params.attention.tensors().items()}
    heads, width = params.attention.num_heads, params.attention.head_dim

    embedded = [token * att["input_weight"][0] + att["input_bias"] for token in pv]
    q = [e @ att["query_weight"] + att["query_bias"] for e in embedded]
    k = [e @ att["key_weight"] + att["key_bias"] for e in embedded]
    v = [e @ att["value_weight"] + att["value_bias"] for e in embedded]
    attended = []
    for i in range(len(pv)):
        merged = []
        for h in range(heads):
            cols = slice(h * width, (h + 1) * width)
            scores = np.array([q[i][cols] @ k[j][cols] for j in range(len(pv))]) / math.sqrt(width)
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            merged.append(sum(weights[j] * v[j][cols] for j in range(len(pv))))
        mixed = np.concatenate(merged) @ att["output_weight"] + att["output_bias"]
        attended.append(mixed @ att["readout_weight"][:, 0] + att["readout_bias"][0])
    attended = np.array(attended)

    def run(layers):
        h = attended
        for w, b, activation in layers:
            h = h @ w.data + b.data
            if activation == "relu":
                h = np.maximum(h, 0.0)
        return h

    return pv, attended, run(params.scene_layers), run(params.text_layers)


def test_forward_matches_straight_line_oracle(small_config):
    params = init_model(small_config)
    # nonzero biases so every term is exercised
    rng = np.random.default_rng(8)
    arrays = {n: a + (0.3 * rng.standard_normal(a.shape) if n.endswith("bias") else 0.0)
              for n, a in params.arrays().items()}
    params = params.with_arrays(arrays)
    features = rng.standard_normal(8)
    output = forward(features, params)
    pv, attended, scene, text = forward_oracle(features, params)
    np.testing.assert_allclose(output.combined.data, pv, rtol=0, atol=1e-10)
    np.testing.assert_allclose(output.attended.data, attended, rtol=0, atol=1e-10)
    np.testing.assert_allclose(output.scene_logits.data, scene, rtol=0, atol=1e-10)
    np.testing.assert_allclose(output.text_vector.data, text, rtol=0, atol=1e-10)


def test_branches_see_features_only_through_logits(small_config):
    params = init_model(dataclasses.replace(small_config, feature_dim=12))
    stacked = np.concatenate([w.data for w, _ in params.classifiers], axis=1)
    # a direction every classifier ignores
    null = np.linalg.svd(stacked.T)[2][-1]
    x = np.random.default_rng(2).standard_normal(12)
    a, b = forward(x, params), forward(x + 5.0 * null, params)
    np.testing.assert_allclose(a.combined.data, b.combined.data, atol=1e-12)
    np.testing.assert_allclose(a.scene_logits.data, b.scene_logits.data, atol=1e-10)
    np.testing.assert_allclose(a.text_vector.data, b.text_vector.data, atol=1e-10)


def test_level_probabilities_are_on_the_simplex(small_config):
    params = init_model(small_config)
    probs = level_probabilities(params, np.random.default_rng(1).standard_normal((7, 8)), batch_size=3)
    assert [p.shape for p in probs] == [(7, 2)] * 4
    for p in probs:
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


# =============================================================================
# Losses
# =============================================================================

def test_loss_geo_uniform_logits():
    output = fixed_output([np.zeros(2)] * 4)
    assert loss_geo(output, LabelPath(0, 1, 0, 1)).item() == pytest.approx(4 * LN2, abs=1e-12)


def test_loss_geo_saturated_margin():
    labels = LabelPath(1, 0, 1, 0)
    logits = []
    for label in labels:
        row = np.zeros(2)
        row[label] = 30.0
        logits.append(row)
    assert loss_geo(fixed_output(logits), labels).item() < 1e-9


def test_loss_geo_matches_per_hierarchy_oracle():
    rng = np.random.default_rng(12)
    sizes = (5, 4, 3, 2)
    logits = [rng.standard_normal(d) for d in sizes]
    labels = LabelPath(4, 0, 2, 1)
    expected = 0.0
    for row, label in zip(logits, labels):
        expected -= row[label] - math.log(sum(math.exp(v) for v in row))
    assert loss_geo(fixed_output(logits), labels).item() == pytest.approx(expected, abs=1e-12)


def test_loss_geo_invalid_label():
    with pytest.raises(LabelIndexError):
        loss_geo(fixed_output([np.zeros(2)] * 4), LabelPath(0, 2, 0, 0))


def test_loss_scene_examples():
    assert loss_scene(Tensor([0.0, 0.0]), [0.7, 0.3]).item() == pytest.approx(LN2, abs=1e-12)
    assert loss_scene(Tensor([0.0, 30.0, 0.0]), [0.0, 1.0, 0.0]).item() < 1e-9
    with pytest.raises(DimensionError):
        loss_scene(Tensor([0.0, 0.0]), [0.5, 0.25, 0.25])


def test_loss_scene_is_at_least_the_label_entropy():
    rng = np.random.default_rng(3)
    for _ in range(50):
        soft = rng.dirichlet(np.ones(6))
        entropy = -sum(p * math.log(p) for p in soft if p > 0)
        assert loss_scene(Tensor(rng.standard_normal(6) * 3), soft).item() >= entropy - 1e-12


def test_loss_scene_minimum_is_the_target_distribution():
    target = np.array([0.5, 0.3, 0.2])
    logits = np.zeros(3)
    for _ in range(500):
        t = Tensor(logits, requires_grad=True)
        loss_scene(t, target).backward()
        logits = logits - 1.0 * t.grad
    np.testing.assert_allclose(np.exp(logits) / np.exp(logits).sum(), target, atol=1e-6)


def test_loss_tla_examples():
    f = np.array([0.6, 0.8, 0.0])
    assert loss_tla(Tensor(f), f).item() == pytest.approx(-1.0, abs=1e-12)
    assert loss_tla(Tensor([0.0, 0.0, 2.0]), f).item() == pytest.approx(0.0, abs=1e-12)
    assert loss_tla(Tensor(-f), f).item() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(DegenerateInputError):
        loss_tla(Tensor(np.zeros(3)), f)
    with pytest.raises(DegenerateInputError):
        loss_tla(Tensor(f), np.zeros(3))


def test_loss_tla_is_bounded():
    rng = np.random.default_rng(6)
    value = loss_tla(Tensor(rng.standard_normal((20, 5))), rng.standard_normal((20, 5))).item()
    assert -1.0 <= value <= 1.0


def test_total_loss_is_the_sum_of_components():
    output = fixed_output([np.zeros(2)] * 4, scene_logits=(0.0, 0.0), text_vector=(0.0, 2.0))
    loss = total_loss(output, LabelPath(0, 0, 0, 0), [0.7, 0.3], [0.0, 1.0])
    assert loss.geo == pytest.approx(4 * LN2, abs=1e-12)
    assert loss.scene == pytest.approx(LN2, abs=1e-12)
    assert loss.tla == pytest.approx(-1.0, abs=1e-12)
    assert loss.total.item() == pytest.approx(2.4657, abs=1e-4)
    assert loss.total.item() == pytest.approx(5 * LN2 - 1.0, abs=1e-12)


def test_zero_weight_terms_are_reported_but_not_optimized(small_config):
    params = init_model(small_config)
    rng = np.random.default_rng(0)
    output = forward(rng.standard_normal((3, 8)), params)
    labels = np.array([[0, 1, 0, 1], [1, 0, 1, 0], [0, 0, 0, 0]])
    soft = rng.dirichlet(np.ones(3), size=3)
    text = rng.standard_normal((3, 4))
    loss = total_loss(output, labels, soft, text, weights=(1.0, 0.0, 1.0))
    assert loss.total.item() == pytest.approx(loss.geo + loss.tla, abs=1e-12)
    assert loss.scene > 0
    loss.total.backward()
    assert all(w.grad is None for w, _, _ in params.scene_layers)
    assert params.text_layers[0][0].grad is not None


def test_batch_loss_is_the_mean_of_sample_losses(small_config):
    params = init_model(small_config)
    rng = np.random.default_rng(10)
    features = rng.standard_normal((3, 8))
    labels = np.array([[0, 1, 0, 1], [1, 0, 1, 0], [1, 1, 1, 1]])
    soft = rng.dirichlet(np.ones(3), size=3)
    text = rng.standard_normal((3, 4))
    batch = total_loss(forward(features, params), labels, soft, text).total.item()
    singles = [
        total_loss(forward(features[i], params), labels[i], soft[i], text[i]).total.item()
        for i in range(3)
    ]
    assert batch == pytest.approx(np.mean(singles), abs=1e-12)


def test_total_loss_gradients_pass_finite_difference_check(small_config):
    errors = model_gradient_check(small_config, points=20, eps=1e-5)
    assert len(errors) == 20
    assert max(errors) < 1e-4


def test_gradient_check_without_attention(small_config):
    config = dataclasses.replace(small_config, use_attention=False, loss_weights=(1.0, 0.5, 2.0))
    assert max(model_gradient_check(config, points=3)) < 1e-4


# =============================================================================
# Checkpoints
# =============================================================================

def test_checkpoint_round_trip_is_bit_identical(tmp_path, small_config):
    params = init_model(dataclasses.replace(small_config, taxonomy_fingerprint="abc123"))
    path = tmp_path / "model.cgck"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert loaded.config == params.config
    for name, value in params.arrays().items():
        assert loaded.arrays()[name].tobytes() == value.tobytes()

    features = np.random.default_rng(0).standard_normal((4, 8))
    for before, after in zip(level_probabilities(params, features), level_probabilities(loaded, features)):
        assert before.tobytes() == after.tobytes()


def test_checkpoint_format_errors(tmp_path, small_config):
    path = tmp_path / "model.cgck"
    save_checkpoint(init_model(small_config), path)
    blob = path.read_bytes()

    with pytest.raises(FormatError) as info:
        checkpoint_from_bytes(b"ABCD" + blob[4:])
    assert info.value.offset == 0
    with pytest.raises(FormatError):
        checkpoint_from_bytes(blob[:-5])
    with pytest.raises(FormatError, match="missing"):
        checkpoint_from_bytes(blob[:12 + int.from_bytes(blob[8:12], "little")])


def test_iter_batches_keeps_partial_batch():
    assert [len(b) for b in iter_batches(10, 4)] == [4, 4, 2]
    order = np.array([3, 1, 2, 0])
    assert [b.tolist() for b in iter_batches(4, 3, order)] == [[3, 1, 2], [0]]
