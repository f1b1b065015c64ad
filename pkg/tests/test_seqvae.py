import math
import os

import numpy as np
import pytest

from latent_cascade.cascade import latent_shift_report, sample_chain, train_cascade
from latent_cascade.main import LatentCascadeApp
from latent_cascade.metrics import sample_quality
from latent_cascade.numcore import Rng, ShapeError, Tape, Tensor, backward, numerical_gradient, parameter
from latent_cascade.seqvae import (
    BOS,
    EOS_INDEX,
    PAD,
    PAD_INDEX,
    SPECIALS,
    GruCell,
    SeqVaeError,
    SeqVaeModel,
    Vocab,
    decode_sequence_train,
    encode_sequence,
    gru_step,
    mean_position_entropy,
    sample_sequence,
    sample_sequences,
    seq_elbo_loss,
    split_symbols,
    teacher_forced_nll,
    train_seq_stage,
)
from latent_cascade.utils import load_corpora
from latent_cascade.vae import TrainConfig

SMILES_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "configs", "smiles.yaml")


@pytest.fixture
def vocab(small_corpus):
    return Vocab.from_corpus(small_corpus)


@pytest.fixture
def model(vocab):
    return SeqVaeModel(vocab, latent_dim=4, hidden_size=10, embed_dim=6, max_len=12, rng=Rng(0))


def test_gru_with_zero_parameters_halves_state():
    cell = GruCell(3, 4, Rng(0))
    for p in cell.parameters():
        p.data = np.zeros_like(p.data)
    h = np.array([0.2, -0.4, 1.0, 3.0])
    out = gru_step(cell, Tensor(np.ones(3)), Tensor(h))
    assert np.allclose(out.data, 0.5 * h)


def test_gru_is_deterministic():
    cell = GruCell(3, 4, Rng(1))
    x, h = Rng(2).normal(3), Rng(3).normal(4)
    assert np.array_equal(gru_step(cell, x, h).data, gru_step(cell, x, h).data)


def test_gru_step_gradients_match_finite_differences():
    cell = GruCell(3, 4, Rng(6))
    x = parameter(Rng(7).normal((2, 3)), name="x")
    h = parameter(Rng(8).normal((2, 4)) * 0.5, name="h")
    weights = Tensor(Rng(9).normal((2, 4)))

    def fn():
        return (gru_step(cell, x, h) * weights).sum()

    with Tape() as tape:
        loss = fn()
    params = cell.parameters() + [x, h]
    grads = backward(tape, loss, params)
    for p in params:
        assert np.allclose(grads[p], numerical_gradient(fn, p), rtol=1e-4, atol=1e-8), p.name


def test_gru_rejects_wrong_sizes():
    cell = GruCell(3, 4, Rng(1))
    with pytest.raises(ShapeError):
        gru_step(cell, np.zeros(2), np.zeros(4))


def test_vocab_starts_with_specials(vocab):
    assert tuple(vocab.tokens[:3]) == SPECIALS
    assert vocab.index("C") > 2


def test_vocab_encode_decode(vocab):
    ids = vocab.encode("c1ccccc1O")
    assert ids[-1] == EOS_INDEX
    assert vocab.decode(ids) == "c1ccccc1O"
    assert vocab.decode([vocab.index("C"), PAD_INDEX, vocab.index("O"), EOS_INDEX, vocab.index("N")]) == "CO"


def test_vocab_unknown_symbol(vocab):
    with pytest.raises(SeqVaeError):
        vocab.encode("CBr")


def test_split_symbols_keeps_two_letter_atoms():
    assert split_symbols("CCl[NH4+]") == ["C", "Cl", "[NH4+]"]
    assert split_symbols("C$") == ["C", "$"]


def test_pad_batch_truncates_with_eos(vocab):
    batch = vocab.pad_batch(["CCCC", "C"], max_len=3)
    assert batch.shape == (2, 3)
    assert batch[0, -1] == EOS_INDEX
    assert batch[1].tolist() == [vocab.index("C"), EOS_INDEX, PAD_INDEX]


def test_padding_does_not_change_posterior(model, vocab):
    ids = np.array(vocab.encode("CC(=O)O"))
    padded = np.concatenate([ids, np.zeros(5, dtype=np.int64)])
    a, b = encode_sequence(model, ids), encode_sequence(model, padded)
    assert np.array_equal(a.mu.data, b.mu.data)
    assert np.array_equal(a.logvar.data, b.logvar.data)


def test_token_order_matters(model, vocab):
    a = encode_sequence(model, np.array(vocab.encode("CCO")))
    b = encode_sequence(model, np.array(vocab.encode("COC")))
    assert not np.allclose(a.mu.data, b.mu.data)


def test_encode_rejects_out_of_range_tokens(model):
    with pytest.raises(SeqVaeError):
        encode_sequence(model, np.array([3, 999]))


def test_teacher_forced_logits_depend_on_latent(model, vocab):
    target = np.array(vocab.encode("CCO"))
    head_a = decode_sequence_train(model, np.zeros(4), target)
    head_b = decode_sequence_train(model, np.full(4, 2.0), target)
    assert head_a.logits.shape == (len(target), model.vocab_size)
    assert not np.allclose(head_a.logits.data, head_b.logits.data)


def test_empty_target_is_rejected(model):
    with pytest.raises(SeqVaeError):
        decode_sequence_train(model, np.zeros(4), np.array([EOS_INDEX, PAD_INDEX]))


def test_samples_respect_length_and_specials(model):
    z = Rng(0).normal((20, 4))
    texts = sample_sequences(model, z, Rng(1), max_len=6)
    assert len(texts) == 20
    for text in texts:
        assert PAD not in text and BOS not in text
        assert len(split_symbols(text)) <= 6


def test_sampling_is_reproducible(model):
    z = Rng(0).normal((5, 4))
    assert sample_sequences(model, z, Rng(7)) == sample_sequences(model, z, Rng(7))
    assert sample_sequences(model, z, Rng(1), mode="argmax") == sample_sequences(model, z, Rng(2), mode="argmax")


def test_sampling_validates_arguments(model):
    with pytest.raises(SeqVaeError):
        sample_sequences(model, np.zeros((1, 4)), Rng(0), mode="beam")
    with pytest.raises(SeqVaeError):
        sample_sequences(model, np.zeros((1, 4)), Rng(0), temperature=0.0)
    assert sample_sequences(model, np.zeros((0, 4)), Rng(0)) == []
    assert isinstance(sample_sequence(model, np.zeros(4), Rng(0)), str)


def test_untrained_entropy_is_bounded(model, vocab):
    tokens = vocab.pad_batch(["CCO", "c1ccccc1"], model.max_len)
    entropy = mean_position_entropy(model, tokens)
    assert 0.0 < entropy <= math.log(model.vocab_size) + 1e-9


def test_training_records_entropy(model, small_corpus):
    config = TrainConfig(epochs=5, batch_size=8, lr=5e-3, beta=0.1, kl_anneal_fraction=0.5)
    tokens = model.vocab.pad_batch(small_corpus, model.max_len)
    before = teacher_forced_nll(model, tokens)
    result = train_seq_stage(model, small_corpus, config, Rng(3))
    assert len(result.history) == 5
    assert all(r.entropy is not None and np.isfinite(r.entropy) for r in result.history)
    assert result.history[0].beta < 0.1
    assert teacher_forced_nll(model, tokens) < before
    assert model.trained


def test_training_needs_a_corpus(model):
    with pytest.raises(SeqVaeError):
        train_seq_stage(model, [], TrainConfig(epochs=1), Rng(0))


def test_sequence_elbo_gradients_match_finite_differences(vocab):
    model = SeqVaeModel(vocab, latent_dim=2, hidden_size=3, embed_dim=2, max_len=6, rng=Rng(4))
    tokens = vocab.pad_batch(["CCO", "c1ccccc1"], model.max_len)

    def fn():
        return seq_elbo_loss(model, tokens, Rng(5), beta=0.5).loss

    with Tape() as tape:
        loss = fn()
    grads = backward(tape, loss, model.parameters())
    for p in model.parameters():
        assert np.allclose(grads[p], numerical_gradient(fn, p), rtol=1e-4, atol=1e-7), p.name


def test_training_lowers_position_entropy(model, small_corpus):
    held_out = model.vocab.pad_batch(["CCCO", "CC(=O)N", "OCC#N"], model.max_len)
    before = mean_position_entropy(model, held_out)
    train_seq_stage(model, small_corpus, TrainConfig(epochs=20, batch_size=8, lr=1e-2, beta=0.1), Rng(4))
    assert mean_position_entropy(model, held_out) < before


@pytest.mark.slow
def test_shipped_config_samples_valid_molecules_at_both_depths():
    run = LatentCascadeApp().run_config(SMILES_CONFIG)
    train, _ = load_corpora(run.train_corpus, run.reference_corpus, run.test_fraction, run.split_seed)
    cascade = train_cascade(run.stages, train, Rng(0).child(1), training=run.training)
    for depth in (1, 2):
        samples = sample_chain(cascade, 500, Rng(0).child(2), depth=depth,
                               decode_mode=run.sampling["decode_mode"],
                               temperature=float(run.sampling["temperature"]),
                               max_len=run.sampling["max_len"])
        assert len(samples) == 500
        assert sample_quality(samples, train, k=500).valid_fraction >= 0.3, depth
    shifts = latent_shift_report(cascade, 500, Rng(0).child(3), depth=2)
    assert len(shifts) == run.stages[0].latent_dim
    assert all(s > 0.0 for s in shifts)
