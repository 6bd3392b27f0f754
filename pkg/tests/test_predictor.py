import random

import numpy as np
import pytest

from branchsim.predictor import (DEFAULT_CONFUSION, MlpWeights,
                                 SyntheticPredictorConfig, WeightFormatError,
                                 calibrate_tau, load_activations, load_weights,
                                 mlp_forward, predict_difficulty,
                                 sample_confused_level, save_weights,
                                 synthetic_predict, validate_confusion)
from util import naive_mlp_forward, random_mlp


def zero_mlp(input_dim, layer_dims, head_dim, activation="relu", batchnorm=False):
    dims = [input_dim, *layer_dims, head_dim]
    return MlpWeights(
        input_dim=input_dim, layer_dims=list(layer_dims), head_dim=head_dim,
        activations=[activation] * len(layer_dims),
        weights=[np.zeros((dims[k + 1], dims[k])) for k in range(len(dims) - 1)],
        biases=[np.zeros(dims[k + 1]) for k in range(len(dims) - 1)],
        ln_gain=np.ones(input_dim), ln_bias=np.zeros(input_dim),
        bn_mean=[np.zeros(d) for d in layer_dims] if batchnorm else None,
        bn_var=[np.ones(d) for d in layer_dims] if batchnorm else None,
        bn_gain=[np.ones(d) for d in layer_dims] if batchnorm else None,
        bn_bias=[np.zeros(d) for d in layer_dims] if batchnorm else None,
    )


def test_zero_network_outputs_half():
    weights = zero_mlp(8, [4, 3], 1)
    _, probs = mlp_forward(weights, np.arange(8.0))
    assert probs[0] == pytest.approx(0.5)


def test_zero_complexity_head_is_uniform():
    weights = zero_mlp(8, [4, 4, 3], 5, activation="gelu", batchnorm=True)
    _, probs = mlp_forward(weights, np.arange(8.0))
    assert probs == pytest.approx([0.2] * 5)
    assert probs.sum() == pytest.approx(1.0, abs=1e-6)


def test_forward_matches_naive_oracle():
    rng = random.Random(42)
    for trial in range(10):
        batchnorm = trial % 2 == 1
        weights = random_mlp(rng, input_dim=12, layer_dims=[9, 6], head_dim=1,
                             activation="relu" if trial % 3 else "gelu",
                             batchnorm=batchnorm)
        activation = [rng.uniform(-2, 2) for _ in range(12)]
        logits, probs = mlp_forward(weights, activation)
        ref_logits, ref_probs = naive_mlp_forward(weights, activation)
        assert logits[0] == pytest.approx(ref_logits[0], abs=1e-5)
        assert probs[0] == pytest.approx(ref_probs[0], abs=1e-5)


def test_forward_deterministic():
    rng = random.Random(7)
    weights = random_mlp(rng, 16, [8, 4], 5, activation="gelu", batchnorm=True)
    activation = [rng.uniform(-1, 1) for _ in range(16)]
    a_logits, a_probs = mlp_forward(weights, activation)
    b_logits, b_probs = mlp_forward(weights, activation)
    assert np.array_equal(a_logits, b_logits)
    assert np.array_equal(a_probs, b_probs)


def test_forward_probability_bounds():
    rng = random.Random(8)
    for _ in range(20):
        weights = random_mlp(rng, 10, [6], 1, scale=5.0)
        _, probs = mlp_forward(weights, [rng.uniform(-3, 3) for _ in range(10)])
        assert 0.0 < probs[0] < 1.0
    for _ in range(10):
        weights = random_mlp(rng, 10, [6], 5, activation="gelu")
        _, probs = mlp_forward(weights, [rng.uniform(-3, 3) for _ in range(10)])
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)


def test_forward_rejects_dimension_mismatch():
    weights = zero_mlp(8, [4], 1)
    with pytest.raises(WeightFormatError, match=r"\(7,\).*\(8,\)"):
        mlp_forward(weights, np.zeros(7))


def test_weight_file_round_trip(tmp_path):
    rng = random.Random(3)
    original = random_mlp(rng, 12, [10, 7], 5, activation="gelu", batchnorm=True)
    manifest = tmp_path / "complexity.mlp"
    save_weights(original, manifest)
    loaded = load_weights(manifest)
    assert loaded.input_dim == 12
    assert loaded.layer_dims == [10, 7]
    assert loaded.activations == ["gelu", "gelu"]
    activation = [rng.uniform(-1, 1) for _ in range(12)]
    _, probs = mlp_forward(original, activation)
    _, probs_loaded = mlp_forward(loaded, activation)
    # float32 storage truncates, but well inside the forward-pass tolerance
    assert probs_loaded == pytest.approx(probs, abs=1e-5)
    # a second save/load is byte-stable
    manifest2 = tmp_path / "again.mlp"
    save_weights(loaded, manifest2)
    assert (tmp_path / "complexity.bin").read_bytes() == \
        (tmp_path / "again.bin").read_bytes()


def test_weight_blob_length_checked(tmp_path):
    rng = random.Random(4)
    weights = random_mlp(rng, 6, [4], 1)
    manifest = tmp_path / "probe.mlp"
    save_weights(weights, manifest)
    blob = tmp_path / "probe.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(WeightFormatError, match="too short"):
        load_weights(manifest)


def test_load_activations_text_and_binary(tmp_path):
    vectors = np.array([[0.5, -1.0, 2.0], [1.5, 0.0, -0.25]])
    text = tmp_path / "acts.txt"
    text.write_text("0.5 -1.0 2.0\n1.5, 0.0, -0.25\n")
    loaded = load_activations(text, 3)
    assert np.allclose(loaded, vectors)
    binary = tmp_path / "acts.bin"
    vectors.astype("<f4").tofile(binary)
    loaded = load_activations(binary, 3)
    assert np.allclose(loaded, vectors)
    with pytest.raises(WeightFormatError, match="not a multiple"):
        load_activations(binary, 4)


def test_synthetic_perfect_oracle():
    config = SyntheticPredictorConfig(rho=1.0)
    rng = random.Random(0)
    assert synthetic_predict(True, config, rng) == 1.0
    assert synthetic_predict(False, config, rng) == 0.0


def test_synthetic_pure_noise_mean():
    config = SyntheticPredictorConfig(rho=0.0)
    rng = random.Random(5)
    draws = [synthetic_predict(False, config, rng) for _ in range(100_000)]
    assert sum(draws) / len(draws) == pytest.approx(0.5, abs=0.01)


def test_synthetic_blend_mean_moves_linearly():
    rng = random.Random(6)
    for rho in (0.2, 0.5, 0.8):
        config = SyntheticPredictorConfig(rho=rho)
        draws = [synthetic_predict(True, config, rng) for _ in range(50_000)]
        assert sum(draws) / len(draws) == pytest.approx(rho + (1 - rho) / 2,
                                                        abs=0.01)


def test_synthetic_rejects_bad_rho():
    with pytest.raises(ValueError):
        SyntheticPredictorConfig(rho=1.5)


def test_calibrate_tau_nearest_rank():
    predictions = [0.1 * k for k in range(1, 11)]
    assert calibrate_tau(predictions, 70) == pytest.approx(0.7)
    assert calibrate_tau(predictions, 80) == pytest.approx(0.8)
    assert calibrate_tau([0.5] * 7, 33) == 0.5


def test_calibrate_tau_monotone_and_permutation_invariant():
    rng = random.Random(9)
    values = [rng.random() for _ in range(37)]
    taus = [calibrate_tau(values, p) for p in (10, 30, 50, 70, 90, 100)]
    assert taus == sorted(taus)
    shuffled = values[:]
    rng.shuffle(shuffled)
    assert calibrate_tau(shuffled, 70) == calibrate_tau(values, 70)
    with pytest.raises(ValueError):
        calibrate_tau([], 70)


def test_predict_difficulty_actual_passthrough():
    assert predict_difficulty("actual", actual_label=3) == 3
    with pytest.raises(ValueError):
        predict_difficulty("actual")


def test_predict_difficulty_identity_confusion():
    identity = tuple(tuple(1.0 if i == j else 0.0 for j in range(5))
                     for i in range(5))
    rng = random.Random(1)
    for level in range(1, 6):
        assert predict_difficulty("noisy-label", actual_label=level,
                                  confusion=identity, rng=rng) == level


def test_default_confusion_reproduces_marginals():
    validate_confusion(DEFAULT_CONFUSION)
    rng = random.Random(12)
    n = 100_000
    low = sum(sample_confused_level(1, DEFAULT_CONFUSION, rng) <= 3
              for _ in range(n))
    assert low / n == pytest.approx(0.81, abs=0.01)
    high = sum(sample_confused_level(5, DEFAULT_CONFUSION, rng) > 3
               for _ in range(n))
    assert high / n == pytest.approx(0.81, abs=0.01)
    diagonal = sum(DEFAULT_CONFUSION[i][i] for i in range(5)) / 5
    assert diagonal == pytest.approx(0.42, abs=0.005)


def test_predict_difficulty_mlp_argmax():
    weights = zero_mlp(6, [4], 5)
    # bias the head toward class 4
    weights.biases[-1] = np.array([0.0, 0.0, 0.0, 2.0, 0.0])
    assert predict_difficulty("mlp", activation=np.ones(6), weights=weights) == 4
    with pytest.raises(ValueError):
        predict_difficulty("mlp", activation=np.ones(6))


def test_predict_difficulty_unknown_mode():
    with pytest.raises(ValueError, match="unknown difficulty mode"):
        predict_difficulty("psychic", actual_label=1)
