import math

import numpy as np
import pytest

from flowcast.bpe import FLOW_END_ID, PAD_ID, train_bpe, encode
from flowcast.errors import ConfigError, SequenceTooLong
from flowcast.generator import (
    GenerationPolicy, GeneratorConfig, NextPacketModel, build_windows,
    evaluate_generator, load_generator, pad_batch, predict_next_packet,
    save_generator, train_generator,
)

TINY = GeneratorConfig(vocab_size=300, layers=2, width=32, heads=2,
                       max_positions=64, dropout=0.0, lr=3e-3,
                       batch_size=8, max_epochs=60, patience=5, seed=7)


@pytest.fixture(scope="module")
def corpus_setup():
    # three tiny repeating flows over a toy alphabet
    flows = [
        ["a=1 b=2", "a=2 b=3", "a=3 b=4"],
        ["a=5 b=6", "a=6 b=7", "a=7 b=8"],
        ["a=1 b=9", "a=2 b=8", "a=3 b=7"],
    ]
    text = "\n".join("\n".join(f) for f in flows) + "\n"
    vocab = train_bpe(text, vocab_size=300)
    windows = build_windows(flows, vocab, TINY.max_positions)
    return flows, vocab, windows


@pytest.fixture(scope="module")
def trained(corpus_setup):
    flows, vocab, windows = corpus_setup
    model, history = train_generator(windows, TINY, val_windows=windows)
    return flows, vocab, model, history


def test_untrained_loss_is_log_vocab(corpus_setup):
    _, _, windows = corpus_setup
    model = NextPacketModel(TINY)
    loss = model.loss(pad_batch(windows)).item()
    assert abs(loss - math.log(TINY.vocab_size)) < 0.2


def test_windows_cover_pairs_and_terminal(corpus_setup):
    flows, vocab, windows = corpus_setup
    assert len(windows) == sum(len(f) for f in flows)
    n_terminal = sum(w[-2:] == [FLOW_END_ID, FLOW_END_ID] for w in windows)
    assert n_terminal == len(flows)
    first = windows[0]
    assert first == encode(flows[0][0] + "\n" + flows[0][1] + "\n", vocab).ids


def test_window_too_long_raises(corpus_setup):
    flows, vocab, _ = corpus_setup
    with pytest.raises(SequenceTooLong):
        build_windows(flows, vocab, 3)


def test_pad_batch_shape_and_fill():
    out = pad_batch([[9, 8], [7, 6, 5, 4]])
    assert out.shape == (2, 4)
    assert out[0, 2] == PAD_ID and out[0, 3] == PAD_ID
    assert list(out[1]) == [7, 6, 5, 4]


def test_next_distribution_is_a_probability_law(corpus_setup):
    _, vocab, windows = corpus_setup
    model = NextPacketModel(TINY)
    probs = model.next_distribution(windows[0])
    assert probs.shape == (TINY.vocab_size,)
    assert abs(probs.sum() - 1.0) < 1e-9
    assert np.all(probs >= 0)


def test_training_memorizes_tiny_corpus(trained):
    _, _, _, history = trained
    assert history["val_loss"][-1] < history["val_loss"][0]
    # the loss floor is not 0: lines sharing a prefix ("a=1 b=2"/"a=1 b=9")
    # are ambiguous while the model is still inside line_i, so some window
    # positions carry irreducible entropy; next-line accuracy is what must
    # saturate, and the companion test pins it at 1.0
    assert history["best_val_loss"] < 0.5


def test_trained_model_predicts_next_lines(trained):
    flows, vocab, model, _ = trained
    metrics = evaluate_generator(model, vocab, flows)
    assert metrics["next_line_accuracy"] == 1.0
    assert metrics["flow_end_accuracy"] == 1.0
    assert metrics["next_event_accuracy"] == 1.0


def test_greedy_prediction_is_deterministic(trained):
    flows, vocab, model, _ = trained
    a = predict_next_packet(model, vocab, flows[0][0])
    b = predict_next_packet(model, vocab, flows[0][0])
    assert a.kind == b.kind == "line"
    assert a.line == b.line
    assert a.tokens == b.tokens


def test_temperature_sampling_is_seed_stable(trained):
    flows, vocab, model, _ = trained
    pol = GenerationPolicy(mode="temperature", temperature=0.5, seed=3)
    a = predict_next_packet(model, vocab, flows[0][0], pol)
    b = predict_next_packet(model, vocab, flows[0][0], pol)
    assert (a.kind, a.line, a.tokens) == (b.kind, b.line, b.tokens)


def test_token_budget_rejection(trained):
    flows, vocab, model, _ = trained
    pol = GenerationPolicy(max_tokens=1)
    pred = predict_next_packet(model, vocab, flows[0][0], pol)
    assert pred.kind == "rejected"
    assert "budget" in pred.reason


def test_position_overflow_rejection(corpus_setup):
    flows, vocab, _ = corpus_setup
    model = NextPacketModel(TINY)
    long_line = "a=1 b=2 " * 40
    pred = predict_next_packet(model, vocab, long_line.strip())
    assert pred.kind == "rejected"
    assert "position" in pred.reason


def test_bad_policy_mode_rejected(trained):
    flows, vocab, model, _ = trained
    with pytest.raises(ConfigError):
        predict_next_packet(model, vocab, flows[0][0],
                            GenerationPolicy(mode="beam"))


def test_checkpoint_roundtrip_bit_identical(trained, tmp_path):
    flows, vocab, model, _ = trained
    path = tmp_path / "gen.ckpt"
    save_generator(path, model)
    clone = load_generator(path)
    ids = pad_batch([encode(flows[0][0] + "\n", vocab).ids])
    a = model.forward(ids).data
    b = clone.forward(ids).data
    assert np.array_equal(a, b)
    pa = predict_next_packet(model, vocab, flows[0][0])
    pb = predict_next_packet(clone, vocab, flows[0][0])
    assert (pa.kind, pa.line) == (pb.kind, pb.line)


def test_checkpoint_config_guard(trained, tmp_path):
    _, _, model, _ = trained
    path = tmp_path / "gen.ckpt"
    save_generator(path, model)
    from flowcast.errors import ConfigHashMismatch
    with pytest.raises(ConfigHashMismatch):
        load_generator(path, expected_config=GeneratorConfig(vocab_size=301))


def test_loss_ignores_padding(corpus_setup):
    _, _, windows = corpus_setup
    model = NextPacketModel(TINY)
    w = windows[0]
    bare = model.loss(np.array([w])).item()
    padded = model.loss(pad_batch([w, w + [PAD_ID] * 7])).item()
    assert padded == pytest.approx(bare, abs=1e-9)
