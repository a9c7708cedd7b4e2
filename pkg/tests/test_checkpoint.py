import math
import struct

import numpy as np
import numpy.testing as npt
import pytest

import mmlm.checkpoint as C
import mmlm.data as D
from mmlm.errors import FormatError
from mmlm.model import ModelConfig, build_model
from mmlm.train import TrainConfig, TrainState


def small_setup(fusion="outer", decoder_bias=True):
    vocab = D.Vocabulary(["dog", "cat", "runs", "sleeps"], min_count=2)
    cfg = ModelConfig(arch="delta-rnn", hidden=5, vocab=len(vocab),
                      context_dim=3, fusion=fusion, unroll=6,
                      decoder_bias=decoder_bias)
    model = build_model(cfg, seed=11)
    tc = TrainConfig(lr=1.0, clip=2.0, batch_size=4, unroll=6, max_epochs=3, seed=11)
    state = TrainState(epoch=2, lr=0.5, best_valid_ppl=8.25, best_epoch=1,
                       increase_count=1, prev_valid_ppl=8.5,
                       curve=[(1, 2.0, 2.1, math.exp(2.1), 1.0),
                              (2, 1.9, 2.2, math.exp(2.2), 1.0)])
    return model, vocab, tc, state


def fixed_batch(vocab_size, ctx_dim=3, seed=3):
    rng = np.random.default_rng(seed)
    seqs = [list(rng.integers(4, vocab_size, size=3)) for _ in range(2)]
    ctx = rng.uniform(-1, 1, (2, ctx_dim))
    return D.encode_sequences(seqs, 6, contexts=ctx)


def test_round_trip_is_bit_exact(tmp_path):
    model, vocab, tc, state = small_setup()
    path = tmp_path / "m.mmlm"
    C.save_checkpoint(path, model, vocab, tc, state)
    ckpt = C.load_checkpoint(path)
    assert ckpt.version == C.CHECKPOINT_VERSION
    assert ckpt.model_config == model.config
    assert ckpt.train_config == tc
    assert ckpt.vocab.id_to_token == vocab.id_to_token
    assert ckpt.vocab.min_count == 2
    for name, tensor in model.named_parameters().items():
        npt.assert_array_equal(ckpt.tensors[name], tensor.data)
    loaded = C.model_from_checkpoint(ckpt)
    batch = fixed_batch(len(vocab))
    a, na = model.sequence_nll(batch)
    b, nb = loaded.sequence_nll(batch)
    assert na == nb
    assert a.item() == b.item()  # bit-exact


def test_state_round_trip_including_inf(tmp_path):
    model, vocab, tc, _ = small_setup()
    state = TrainState()  # fresh: inf sentinels, empty curve
    path = tmp_path / "m.mmlm"
    C.save_checkpoint(path, model, vocab, tc, state)
    st = C.load_checkpoint(path).state
    assert st.epoch == 0 and st.curve == []
    assert math.isinf(st.best_valid_ppl) and math.isinf(st.prev_valid_ppl)


def test_curve_floats_survive_exactly(tmp_path):
    model, vocab, tc, state = small_setup()
    state.curve.append((3, 1.0 / 3.0, 2.0 / 7.0, math.exp(2.0 / 7.0), 0.125))
    path = tmp_path / "m.mmlm"
    C.save_checkpoint(path, model, vocab, tc, state)
    got = C.load_checkpoint(path).state.curve
    assert got == state.curve  # repr round-trip, no precision loss


def test_config_hash_ignores_max_epochs_only():
    _, _, tc, _ = small_setup()
    mc = ModelConfig(arch="gru", hidden=4, vocab=8, context_dim=2, unroll=6)
    base = C.compute_config_hash(mc, tc)
    import dataclasses
    assert C.compute_config_hash(mc, dataclasses.replace(tc, max_epochs=99)) == base
    assert C.compute_config_hash(mc, dataclasses.replace(tc, lr=0.5)) != base
    assert C.compute_config_hash(mc, dataclasses.replace(tc, seed=12)) != base
    assert C.compute_config_hash(dataclasses.replace(mc, hidden=5), tc) != base


def test_saved_hash_matches_recomputation(tmp_path):
    model, vocab, tc, state = small_setup()
    path = tmp_path / "m.mmlm"
    C.save_checkpoint(path, model, vocab, tc, state)
    ckpt = C.load_checkpoint(path)
    assert ckpt.config_hash == C.compute_config_hash(ckpt.model_config, ckpt.train_config)


def test_bias_free_decoder_round_trips(tmp_path):
    model, vocab, tc, state = small_setup(fusion="none", decoder_bias=False)
    path = tmp_path / "m.mmlm"
    C.save_checkpoint(path, model, vocab, tc, state)
    ckpt = C.load_checkpoint(path)
    assert "decoder.b_U" not in ckpt.tensors
    assert "fusion.M" not in ckpt.tensors
    loaded = C.model_from_checkpoint(ckpt)
    assert loaded.decoder.b_U is None


def test_lstm_checkpoint_round_trips(tmp_path):
    vocab = D.Vocabulary(["a", "b"])
    cfg = ModelConfig(arch="lstm", hidden=4, vocab=len(vocab), context_dim=2,
                      fusion="outer", unroll=5)
    model = build_model(cfg, seed=2)
    path = tmp_path / "m.mmlm"
    C.save_checkpoint(path, model, vocab, TrainConfig(unroll=5), TrainState())
    loaded = C.model_from_checkpoint(C.load_checkpoint(path))
    batch = fixed_batch(len(vocab), ctx_dim=2)
    assert model.sequence_nll(batch)[0].item() == loaded.sequence_nll(batch)[0].item()


def test_truncated_and_corrupt_files(tmp_path):
    model, vocab, tc, state = small_setup()
    path = tmp_path / "m.mmlm"
    C.save_checkpoint(path, model, vocab, tc, state)
    blob = path.read_bytes()

    bad = tmp_path / "bad.mmlm"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        C.load_checkpoint(bad)

    bad.write_bytes(blob[:4] + struct.pack("<H", 9) + blob[6:])
    with pytest.raises(FormatError, match="version"):
        C.load_checkpoint(bad)

    bad.write_bytes(blob[:-3])
    with pytest.raises(FormatError, match="truncated"):
        C.load_checkpoint(bad)

    bad.write_bytes(blob + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        C.load_checkpoint(bad)


def test_tensor_mismatch_is_refused(tmp_path):
    model, vocab, tc, state = small_setup()
    path = tmp_path / "m.mmlm"
    C.save_checkpoint(path, model, vocab, tc, state)
    ckpt = C.load_checkpoint(path)
    del ckpt.tensors["decoder.U"]
    with pytest.raises(FormatError, match="missing"):
        C.model_from_checkpoint(ckpt)
    ckpt = C.load_checkpoint(path)
    ckpt.tensors["decoder.U"] = ckpt.tensors["decoder.U"][:, :-1]
    with pytest.raises(FormatError, match="shape"):
        C.model_from_checkpoint(ckpt)


def test_manifest_lists_every_tensor(tmp_path):
    model, vocab, tc, state = small_setup()
    path = tmp_path / "m.mmlm"
    C.save_checkpoint(path, model, vocab, tc, state)
    ckpt = C.load_checkpoint(path)
    text = C.render_manifest(ckpt)
    assert text.startswith("checkpoint version 1")
    for name, tensor in model.named_parameters().items():
        rows, cols = tensor.shape
        assert f"{name}  {rows} x {cols}" in text
    assert "4 words" in text
    assert "epoch 2" in text and "8.250" in text
