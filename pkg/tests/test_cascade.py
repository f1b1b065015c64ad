from dataclasses import replace

import numpy as np
import pytest

from conftest import categorical_stage, gaussian_stage
from latent_cascade.cascade import (
    MODALITY_SEQUENCE,
    MODALITY_VECTOR,
    CascadeError,
    StageSpec,
    chain_latents,
    check_specs,
    extract_latents,
    latent_shift_report,
    sample_chain,
    train_cascade,
)
from latent_cascade.manifold import generate_sphere_data
from latent_cascade.numcore import Rng
from latent_cascade.vae import VaeModel, encode, train_stage


@pytest.fixture
def sphere_data(small_sphere):
    return generate_sphere_data(small_sphere)


@pytest.fixture
def two_stage(sphere_data):
    return train_cascade([gaussian_stage(), gaussian_stage()], sphere_data, Rng(0))


def test_check_specs_reports_dimension_mismatch():
    ok, reason = check_specs([gaussian_stage(latent_dim=3), gaussian_stage(latent_dim=2)], MODALITY_VECTOR)
    assert not ok
    assert reason.startswith("stage 2")


def test_check_specs_head_must_match_modality():
    assert not check_specs([gaussian_stage()], MODALITY_SEQUENCE)[0]
    assert not check_specs([categorical_stage()], MODALITY_VECTOR)[0]
    assert not check_specs([categorical_stage(), categorical_stage()], MODALITY_SEQUENCE)[0]
    assert check_specs([categorical_stage(), gaussian_stage(latent_dim=4)], MODALITY_SEQUENCE)[0]
    assert not check_specs([], MODALITY_VECTOR)[0]


def test_stage_spec_rejects_unknown_keys():
    with pytest.raises(CascadeError):
        StageSpec.from_dict({"latent_dim": 3, "layers": 2})


def test_incompatible_specs_fail_before_training(sphere_data):
    with pytest.raises(CascadeError) as info:
        train_cascade([gaussian_stage(latent_dim=3), gaussian_stage(latent_dim=2)], sphere_data, Rng(0))
    assert info.value.stage_index == 2


def test_empty_dataset_is_rejected():
    with pytest.raises(CascadeError):
        train_cascade([gaussian_stage()], np.zeros((0, 5)), Rng(0))


def test_cascade_structure(two_stage, sphere_data):
    assert two_stage.depth == 2
    assert two_stage.modality == MODALITY_VECTOR
    assert two_stage.data_dim == sphere_data.shape[1]
    assert [lat.shape for lat in two_stage.latents] == [(64, 3), (64, 3)]
    assert all(m.trained for m in two_stage.stages)
    assert [row["input_dim"] for row in two_stage.describe()] == [5, 3]
    assert len(two_stage.histories) == 2


def test_single_stage_cascade_matches_train_stage(sphere_data):
    spec = gaussian_stage(epochs=3)
    cascade = train_cascade([spec], sphere_data, Rng(4))
    # 与级联内部的阶段随机流保持一致
    model = VaeModel(5, 3, hidden=spec.hidden, rng=Rng(4).child(10))
    train_stage(model, sphere_data, spec.train_config(), Rng(4).child(11), stage_index=1)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(cascade.stages[0].parameters(), model.parameters()))


def test_extraction_is_reproducible(two_stage, sphere_data):
    model = two_stage.stages[0]
    a = extract_latents(model, sphere_data, Rng(3)).data
    b = extract_latents(model, sphere_data, Rng(3)).data
    assert np.array_equal(a, b)


def test_extraction_with_collapsed_variance_returns_mean(sphere_data):
    model = VaeModel(5, 2, hidden=[4], rng=Rng(0))
    model.trained = True
    last_w, last_b = model.encoder.weights[-1], model.encoder.biases[-1]
    last_w.data[:, 2:] = 0.0
    last_b.data[2:] = -5000.0
    latents = extract_latents(model, sphere_data, Rng(1)).data
    assert np.array_equal(latents, encode(model, sphere_data).mu.data)


def test_extraction_needs_trained_model(sphere_data):
    with pytest.raises(CascadeError):
        extract_latents(VaeModel(5, 2, hidden=[4], rng=Rng(0)), sphere_data, Rng(0))


def test_sample_chain_shapes_and_determinism(two_stage):
    a = sample_chain(two_stage, 10, Rng(5))
    b = sample_chain(two_stage, 10, Rng(5))
    assert a.shape == (10, 5)
    assert np.array_equal(a, b)
    assert sample_chain(two_stage, 0, Rng(5)).shape == (0, 5)


def test_depth_one_decodes_stage_one_prior(two_stage):
    rng = Rng(6)
    z = rng.child(0).normal((4, 3))
    expected = two_stage.stages[0].decode_mean(z)
    assert np.array_equal(sample_chain(two_stage, 4, Rng(6), depth=1), expected)


def test_depth_two_goes_through_stage_two(two_stage):
    z = Rng(6).child(0).normal((4, 3))
    expected = two_stage.stages[0].decode_mean(two_stage.stages[1].decode_mean(z))
    assert np.allclose(sample_chain(two_stage, 4, Rng(6), depth=2), expected)


def test_identity_stage_leaves_samples_unchanged(two_stage):
    identity = VaeModel(3, 3, hidden=[], rng=Rng(0))
    identity.decoder.weights[0].data = np.eye(3)
    identity.decoder.biases[0].data = np.zeros(3)
    cascade = replace(two_stage, stages=[two_stage.stages[0], identity])
    assert np.array_equal(sample_chain(cascade, 8, Rng(9), depth=2), sample_chain(cascade, 8, Rng(9), depth=1))


def test_invalid_depth_and_count(two_stage):
    with pytest.raises(CascadeError):
        sample_chain(two_stage, 3, Rng(0), depth=3)
    with pytest.raises(CascadeError):
        sample_chain(two_stage, -1, Rng(0))


def test_intermediate_noise_changes_latents(two_stage):
    clean = chain_latents(two_stage, 8, Rng(2), depth=2)
    noisy = chain_latents(two_stage, 8, Rng(2), depth=2, intermediate_noise=True)
    assert clean.shape == noisy.shape == (8, 3)
    assert not np.array_equal(clean, noisy)


def test_latent_shift_report(two_stage):
    shifts = latent_shift_report(two_stage, 50, Rng(0), depth=2)
    assert len(shifts) == 3
    assert all(s >= 0.0 for s in shifts)
    with pytest.raises(CascadeError):
        latent_shift_report(two_stage, 50, Rng(0), depth=1)


def test_resampled_latents_still_train(sphere_data):
    cascade = train_cascade([gaussian_stage(), gaussian_stage()], sphere_data, Rng(0),
                            training={"resample_latents": True})
    assert cascade.depth == 2


def test_sequence_cascade(small_corpus):
    cascade = train_cascade([categorical_stage(epochs=1), gaussian_stage(latent_dim=4, epochs=1)],
                            small_corpus, Rng(0))
    assert cascade.modality == MODALITY_SEQUENCE
    assert cascade.vocab is not None
    assert cascade.latents[0].shape == (len(small_corpus), 4)
    texts = sample_chain(cascade, 5, Rng(1), max_len=10)
    assert len(texts) == 5 and all(isinstance(t, str) for t in texts)
    assert sample_chain(cascade, 0, Rng(1)) == []
