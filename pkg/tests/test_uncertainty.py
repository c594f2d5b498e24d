"""MC-dropout sampling: determinism, dropout gating, variance arithmetic."""

import json

import numpy as np
import pytest
import torch

from hipgrade.grading import BackboneSpec, GradingModel, HeadSpec
from hipgrade.labels import GradeLabel
from hipgrade.uncertainty import (
    DEFAULT_MC_SAMPLES,
    MCSampleSet,
    load_prediction_records,
    make_prediction_record,
    mc_predict,
    mc_sample,
    mc_sample_batch,
    predictive_mean,
    scalar_uncertainty,
    variance,
    write_prediction_records,
)


def model_for(task="classification", scheme="combined", dropout=0.3):
    return GradingModel(BackboneSpec(name="small_cnn", dropout_rate=dropout),
                        HeadSpec(task=task, scheme=scheme))


def image(seed=0):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.normal(size=(3, 150, 150)).astype(np.float32))


def test_sample_count_and_shape():
    sample_set = mc_sample(model_for(), image(), t=12, seed=3)
    assert sample_set.t == 12
    assert sample_set.samples.shape == (12, 7)
    assert np.allclose(sample_set.samples.sum(axis=1), 1.0, atol=1e-5)


def test_default_sample_count():
    assert DEFAULT_MC_SAMPLES == 50


def test_same_seed_reproduces_samples():
    model = model_for()
    a = mc_sample(model, image(), t=8, seed=5)
    b = mc_sample(model, image(), t=8, seed=5)
    assert np.array_equal(a.samples, b.samples)


def test_different_seed_differs():
    model = model_for()
    a = mc_sample(model, image(), t=8, seed=5)
    b = mc_sample(model, image(), t=8, seed=6)
    assert not np.array_equal(a.samples, b.samples)


def test_zero_dropout_collapses_variance():
    model = model_for(dropout=0.0)
    sample_set = mc_sample(model, image(), t=10, seed=1)
    assert np.array_equal(sample_set.samples[0],
                          sample_set.samples[-1])
    var = variance(sample_set)
    assert np.all(var == 0.0)
    assert scalar_uncertainty(var) == 0.0


def test_positive_dropout_produces_spread():
    sample_set = mc_sample(model_for(dropout=0.3), image(), t=10, seed=2)
    assert scalar_uncertainty(variance(sample_set)) > 0.0


def test_model_modes_restored_after_sampling():
    model = model_for(dropout=0.3)
    model.train()
    mc_sample(model, image(), t=3, seed=0)
    assert model.training  # train mode restored
    model.eval()
    mc_sample(model, image(), t=3, seed=0)
    assert not model.training


def test_variance_matches_hand_recompute():
    sample_set = mc_sample(model_for(), image(), t=16, seed=7)
    got = variance(sample_set)
    s = sample_set.samples
    want = ((s - s.mean(axis=0)) ** 2).mean(axis=0)  # population variance
    assert np.allclose(got, want, atol=1e-12)


def test_predictive_mean_matches_hand_recompute():
    sample_set = mc_sample(model_for(), image(), t=16, seed=7)
    assert np.allclose(predictive_mean(sample_set),
                       sample_set.samples.mean(axis=0), atol=1e-12)


def test_invalid_t_rejected():
    with pytest.raises(ValueError):
        mc_sample(model_for(), image(), t=0, seed=0)


def test_scalar_uncertainty_classification_is_mean_class_variance():
    var = np.array([0.1, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0])
    assert scalar_uncertainty(var) == pytest.approx(var.mean())


def test_scalar_uncertainty_regression_is_variance():
    assert scalar_uncertainty(np.float64(0.42)) == pytest.approx(0.42)


def test_scalar_uncertainty_separated_is_mean_of_heads():
    crowe = np.array([0.1, 0.1, 0.0, 0.0])
    kl = np.array([0.3, 0.1, 0.0, 0.0])
    want = (crowe.mean() + kl.mean()) / 2.0
    assert scalar_uncertainty((crowe, kl)) == pytest.approx(want)


def test_separated_sampling_and_prediction():
    model = model_for(scheme="separated")
    sample_set = mc_sample(model, image(), t=6, seed=4)
    crowe, kl = sample_set.samples
    assert crowe.shape == (6, 4) and kl.shape == (6, 4)
    label = mc_predict(sample_set, model.head_spec)
    assert label.crowe in range(1, 5) and label.kl in range(1, 5)


def test_regression_sampling_and_prediction():
    model = model_for(task="regression")
    sample_set = mc_sample(model, image(), t=6, seed=4)
    assert sample_set.samples.shape == (6,)
    label = mc_predict(sample_set, model.head_spec)
    assert label.combined in range(1, 8)


def test_mc_predict_uses_sample_mean():
    model = model_for()
    sample_set = mc_sample(model, image(), t=10, seed=9)
    label = mc_predict(sample_set, model.head_spec)
    want = int(np.argmax(predictive_mean(sample_set))) + 1
    assert label.combined == want


def test_batch_sampling_shapes_and_determinism():
    model = model_for()
    images = torch.stack([image(0), image(1), image(2)])
    sets_a = mc_sample_batch(model, images, t=5, seed=11)
    sets_b = mc_sample_batch(model, images, t=5, seed=11)
    assert len(sets_a) == 3
    for a, b in zip(sets_a, sets_b):
        assert np.array_equal(a.samples, b.samples)
    # Distinct images get distinct substreams.
    assert not np.array_equal(sets_a[0].samples, sets_a[1].samples)


def test_sample_set_validation():
    good = np.full((3, 7), 1.0 / 7.0)
    MCSampleSet(samples=good, t=3, seed=0, task="classification",
                scheme="combined")
    with pytest.raises(ValueError):
        MCSampleSet(samples=good, t=4, seed=0, task="classification",
                    scheme="combined")
    bad = good.copy()
    bad[0, 0] = 0.9  # row no longer sums to 1
    with pytest.raises(ValueError):
        MCSampleSet(samples=bad, t=3, seed=0, task="classification",
                    scheme="combined")


def test_prediction_records_round_trip(tmp_path):
    model = model_for()
    sample_set = mc_sample(model, image(), t=5, seed=13)
    record = make_prediction_record("p01_right", sample_set, model.head_spec)
    assert record.image_id == "p01_right"
    assert record.setting == "classification/combined"
    assert record.predicted_class in range(1, 8)
    assert record.uncertainty >= 0.0
    path = tmp_path / "records.jsonl"
    write_prediction_records([record], path)
    loaded = load_prediction_records(path)
    assert len(loaded) == 1
    assert loaded[0].image_id == record.image_id
    assert loaded[0].predicted_class == record.predicted_class
    assert loaded[0].uncertainty == pytest.approx(record.uncertainty)
    raw = [json.loads(line) for line in path.read_text().splitlines()]
    assert raw[0]["image_id"] == "p01_right"
