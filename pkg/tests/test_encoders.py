import numpy as np
import pytest

from mgaclap import encoders as enc
from mgaclap import model as mdl
from mgaclap.errors import LengthError, VocabularyError


def _block(rng, d=8):
    return enc.block_params(enc.init_block(rng, "b", d), "b")


def test_single_frame_attention_is_trivial(rng):
    bp = _block(rng)
    u = rng.standard_normal((1, 8))
    out, cache = enc.block_forward(u, bp)
    np.testing.assert_array_equal(cache[6], [[1.0]])
    np.testing.assert_allclose(out, enc.locality_block(u, bp), atol=1e-14)


def test_duplicate_frames_give_equal_rows(rng):
    bp = _block(rng)
    u = np.tile(rng.standard_normal(8), (5, 1))
    out = enc.vanilla_block(u, bp)
    np.testing.assert_allclose(out, np.tile(out[0], (5, 1)), atol=1e-13)


@pytest.mark.parametrize("block", [enc.vanilla_block, enc.locality_block])
def test_blocks_permutation_equivariant(rng, block):
    bp = _block(rng)
    u = rng.standard_normal((6, 8))
    perm = rng.permutation(6)
    np.testing.assert_allclose(block(u[perm], bp), block(u, bp)[perm], atol=1e-13)


def test_locality_block_is_positionwise(rng):
    bp = _block(rng)
    u = rng.standard_normal((7, 8))
    base = enc.locality_block(u, bp)
    for other in range(1, 7):
        v = u.copy()
        v[other] += rng.standard_normal(8)
        np.testing.assert_array_equal(enc.locality_block(v, bp)[0], base[0])


def test_locality_gives_zero_grads_to_unused_projections(rng):
    bp = _block(rng)
    _, cache = enc.block_forward(rng.standard_normal((2, 4, 8)), bp, locality=True)
    _, grads = enc.block_backward(cache, rng.standard_normal((2, 4, 8)), bp)
    assert not grads["wq"].any() and not grads["wk"].any()


def test_swapping_last_block_keeps_parameter_set():
    a = mdl.init_params(mdl.ModelConfig(locality_last=True), 20, 16, 32, 8, seed=0)
    b = mdl.init_params(mdl.ModelConfig(locality_last=False), 20, 16, 32, 8, seed=0)
    assert sorted(a) == sorted(b)
    assert all(a[k].shape == b[k].shape for k in a)


def _params(rng, locality=False, zero_pos=False):
    shape = enc.EncoderShape(2, d=8, D=6, max_len=10, n_in=5)
    p = enc.init_encoder(rng, "audio", shape, "audio")
    p.update(enc.init_encoder(rng, "text", shape, "text"))
    if zero_pos:
        p["audio.pos"][:] = 0
    return p


def test_zero_clip_with_zero_positions_gives_identical_rows(rng):
    p = _params(rng, zero_pos=True)
    # nonzero biases, else the zero input maps to an exactly zero (unnormalizable) output
    for k in p:
        if k.startswith("audio.") and k.endswith((".b", ".b1", ".b2")):
            p[k] = rng.standard_normal(p[k].shape)
    P = enc.encode_audio(np.zeros((6, 5)), p, locality_last=True)
    np.testing.assert_allclose(P, np.tile(P[0], (6, 1)), atol=1e-13)


def test_encoder_outputs_unit_rows(rng):
    p = _params(rng)
    P = enc.encode_audio(rng.standard_normal((7, 5)), p, True)
    Q = enc.encode_text([1, 3, 2], p)
    np.testing.assert_allclose(np.linalg.norm(P, axis=1), 1, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(Q, axis=1), 1, atol=1e-6)
    assert P.shape[1] == Q.shape[1] == 6
    assert enc.encode_text([4], p).shape == (1, 6)


def test_text_determinism_and_order_sensitivity(rng):
    p = _params(rng)
    np.testing.assert_array_equal(enc.encode_text([1, 2, 3], p), enc.encode_text([1, 2, 3], p))
    assert not np.allclose(enc.encode_text([1, 2, 3], p)[0], enc.encode_text([2, 1, 3], p)[0])


def test_last_block_locality_by_perturbing_its_input(rng):
    p = _params(rng)
    # feed the isolated last block: row 0 must ignore changes to other rows
    bp = enc.block_params(p, "audio.block1")
    h = rng.standard_normal((6, 8))
    h2 = h.copy()
    h2[3] += rng.standard_normal(8)  # a constant shift would vanish in layernorm
    assert np.array_equal(enc.locality_block(h, bp)[0], enc.locality_block(h2, bp)[0])
    assert not np.array_equal(enc.vanilla_block(h, bp)[0], enc.vanilla_block(h2, bp)[0])


def test_length_and_vocabulary_errors(rng):
    p = _params(rng)
    with pytest.raises(LengthError):
        enc.encode_audio(np.zeros((11, 5)), p, False)
    with pytest.raises(LengthError):
        enc.encode_text([], p)
    with pytest.raises(VocabularyError):
        enc.encode_text([0, 5], p)


def test_float32_stays_float32(rng):
    p = {k: v.astype(np.float32) for k, v in _params(rng).items()}
    out, cache = enc.audio_forward(rng.standard_normal((2, 6, 5)).astype(np.float32), p, False)
    assert out.dtype == np.float32
    grads = enc.audio_backward(cache, np.ones_like(out), p)
    assert all(g.dtype == np.float32 for g in grads.values())
