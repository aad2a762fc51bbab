import numpy as np
import pytest

import tensor_core as tc
from conftest import check_grads, check_grads_sampled
from encoders import VGGFrame, VisualEncoder, broadcast_audio, length_ladder
from utils import ShapeError, rng_for


def small_visual(C=8, crop=16):
    return VisualEncoder(C, rng_for(0, "v"), widths=(4, 4, 4), crop=crop, tcn_blocks=2)


@pytest.mark.parametrize("T", [1, 4, 9, 32])
def test_visual_output_has_t_rows(T, rng):
    enc = small_visual()
    out = enc.encode_visual(rng.uniform(size=(T, 16, 16, 1)))
    assert out.shape == (T, 8)


def test_visual_constant_input_gives_constant_rows():
    out = small_visual().encode_visual(np.zeros((6, 16, 16, 1))).data
    assert np.all(out == out[0])


def test_visual_rejects_wrong_crop(rng):
    with pytest.raises(ShapeError):
        small_visual().encode_visual(rng.uniform(size=(4, 12, 12, 1)))


def test_visual_speakers_are_independent(rng):
    enc = small_visual()
    V = rng.uniform(size=(3, 5, 16, 16, 1))
    stacked = enc.encode(V).data
    for i in range(3):
        np.testing.assert_array_equal(stacked[i], enc.encode_visual(V[i]).data)
    V2 = V.copy()
    V2[2] += 0.5
    np.testing.assert_array_equal(enc.encode(V2).data[:2], stacked[:2])


def test_visual_gradient():
    enc = VisualEncoder(16, rng_for(1, "v"), widths=(4, 4, 8), crop=16, tcn_blocks=1)
    track = tc.Tensor(np.random.default_rng(2).uniform(size=(4, 16, 16, 1)), requires_grad=True)
    m = tc.Tensor(np.random.default_rng(3).normal(size=(4, 16)))
    params = [track, enc.front.weight, enc.stages[-1].conv2.weight, enc.tcn[0].dw]
    check_grads_sampled(lambda: tc.tsum(enc.encode_visual(track) * m), params, tol=1e-4)


@pytest.mark.parametrize("T", [4, 5, 20, 31, 64])
def test_vggframe_output_rows(T, rng):
    enc = VGGFrame(40, 8, rng_for(0, "a"), widths=(2, 2, 4, 4))
    assert enc(rng.normal(size=(4 * T, 40))).shape == (T, 8)


def test_vggframe_ladder_matches_trace(rng):
    T = 20
    enc = VGGFrame(40, 8, rng_for(0, "a"), widths=(2, 2, 4, 4))
    trace = []
    enc.encode_audio_vggframe(rng.normal(size=(4 * T, 40)), trace=trace)
    assert trace == length_ladder(T)
    lengths = dict(trace)
    assert lengths["input"] == 80 and lengths["pool1"] == 40 and lengths["block3"] == T
    assert lengths["pool3"] == T // 2 and lengths["deconv"] == T and lengths["tap"] == T


def test_vggframe_rejects_misaligned_rows(rng):
    enc = VGGFrame(40, 8, rng_for(0, "a"), widths=(2, 2, 4, 4))
    with pytest.raises(ShapeError):
        enc(rng.normal(size=(30, 40)))
    with pytest.raises(ShapeError):
        enc(rng.normal(size=(32, 20)))


def test_vggframe_gradient():
    enc = VGGFrame(40, 16, rng_for(4, "a"), widths=(2, 2, 4, 4))
    A = tc.Tensor(np.random.default_rng(5).normal(size=(32, 40)), requires_grad=True)
    m = tc.Tensor(np.random.default_rng(6).normal(size=(8, 16)))
    params = [A, enc.blocks[0].weight, enc.blocks[3].weight, enc.deconv, enc.proj.weight]
    check_grads_sampled(lambda: tc.tsum(enc(A) * m), params, tol=1e-4)


def test_broadcast_audio(rng):
    f = tc.Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    np.testing.assert_array_equal(broadcast_audio(f, 1).data[0], f.data)
    out = broadcast_audio(f, 3).data
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])
    m = tc.Tensor(rng.normal(size=(6, 4)))
    check_grads(lambda: tc.tsum(broadcast_audio(f, 3) * m), [f], tol=1e-6)
    with tc.Graph() as g:
        loss = tc.tsum(broadcast_audio(f, 3) * m)
    tc.zero_grad([f])
    g.backward(loss)
    np.testing.assert_allclose(f.grad, 3 * m.data)
