import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segmote import decoder as DEC
from segmote import tensor as T
from segmote.nn import Attention, Init, bilinear_matrix, multi_head_attention
from segmote.tensor import Tensor

D, HEADS, GRID = 16, 2, (4, 4)


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


@pytest.fixture
def setup():
    init = Init(0, np.float64)
    dec = DEC.Decoder(init, dim=D, heads=HEADS, mlp_dim=32, n_experts=4)
    # a non-zero hypernetwork so logits carry signal
    dec.head.mlp.layers[-1].w.data[...] = np.random.default_rng(1).standard_normal((D, D)) * 0.3
    rng = np.random.default_rng(2)
    image = rand(rng, 2, 16, D)
    seq = DEC.assemble_tokens(dec.output_tokens, rand(rng, 2, 2, D), None, rand(rng, 4, D))
    pe = dec.positional(GRID, np.float64)
    return dec, seq, image, pe


# -- token assembly -------------------------------------------------------------

def test_assemble_lengths_and_spans():
    rng = np.random.default_rng(0)
    out, exp = rand(rng, 4, D), rand(rng, 4, D)
    seq = DEC.assemble_tokens(out, rand(rng, 3, 2, D), None, exp)
    assert len(seq) == 10 and seq.tokens.shape == (3, 10, D)
    seq = DEC.assemble_tokens(out, None, rand(rng, 3, 2, D), exp)
    assert len(seq) == 10 and seq.span("feature") == (4, 6) and seq.span("prompt") == (4, 4)
    np.testing.assert_array_equal(seq.segment("expert").data[1], exp.data)


def test_assemble_dim_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="dim"):
        DEC.assemble_tokens(rand(rng, 4, D), rand(rng, 1, 2, D + 1), None, rand(rng, 4, D))


def test_replace_keeps_other_segments():
    rng = np.random.default_rng(1)
    seq = DEC.assemble_tokens(rand(rng, 4, D), rand(rng, 2, 1, D), None, rand(rng, 4, D))
    new = seq.replace("expert", Tensor(np.zeros((2, 4, D))))
    np.testing.assert_array_equal(new.tokens.data[:, :5], seq.tokens.data[:, :5])
    assert not new.segment("expert").data.any()
    with pytest.raises(ValueError):
        seq.replace("expert", Tensor(np.zeros((2, 3, D))))


# -- attention ------------------------------------------------------------------

def test_single_key_returns_value_row():
    att = Attention(Init(3, np.float64), D, HEADS)
    rng = np.random.default_rng(4)
    q, kv = rand(rng, 1, 3, D), rand(rng, 1, 1, D)
    out = multi_head_attention(q, kv, att).data
    expected = att.out_proj(att.v_proj(kv)).data
    for i in range(3):
        np.testing.assert_allclose(out[0, i], expected[0, 0], rtol=1e-12)


def test_duplicate_keys_average_identically():
    att = Attention(Init(5, np.float64), D, HEADS)
    rng = np.random.default_rng(6)
    q, kv = rand(rng, 1, 2, D), rand(rng, 1, 2, D)
    doubled = Tensor(np.concatenate([kv.data, kv.data], axis=1))
    np.testing.assert_allclose(multi_head_attention(q, doubled, att).data,
                               multi_head_attention(q, kv, att).data, rtol=1e-12)


def test_one_head_direct_formula():
    d = 4
    att = Attention(Init(7, np.float64), d, 1)
    rng = np.random.default_rng(8)
    q, kv = rng.standard_normal((1, 1, d)), rng.standard_normal((1, 2, d))
    Q = q[0] @ att.q_proj.w.data + att.q_proj.b.data
    K = kv[0] @ att.k_proj.w.data
    V = kv[0] @ att.v_proj.w.data + att.v_proj.b.data
    s = Q @ K.T / np.sqrt(d)
    p = np.exp(s - s.max())
    p /= p.sum()
    expected = (p @ V) @ att.out_proj.w.data + att.out_proj.b.data
    got = multi_head_attention(Tensor(q), Tensor(kv), att).data[0]
    np.testing.assert_allclose(got, expected, atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_attention_rows_sum_to_one(seed):
    att = Attention(Init(seed, np.float64), D, HEADS, downsample=2)
    rng = np.random.default_rng(seed)
    w = att.weights(rand(rng, 2, 3, D) * 5.0, rand(rng, 2, 7, D) * 5.0).data
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
    assert (w >= 0).all()


def test_heads_must_divide_dim():
    with pytest.raises(ValueError):
        Attention(Init(0), 10, 3)


# -- decoder layer ----------------------------------------------------------------

def test_layer_is_deterministic_in_eval(setup):
    dec, seq, image, pe = setup
    a = DEC.decoder_layer(seq, image, pe, dec.layers[0])
    b = DEC.decoder_layer(seq, image, pe, dec.layers[0])
    assert a[0].tokens.data.tobytes() == b[0].tokens.data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()


def test_mote_only_touches_expert_span(setup):
    dec, seq, image, pe = setup
    layer = dec.layers[0]
    before = DEC.decoder_layer(seq, image, pe, layer)[0].tokens.data
    rng = np.random.default_rng(3)
    for br in layer.mote.branches:
        # a non-constant offset; a uniform one would vanish in the following LayerNorm
        br.mlp.layers[-1].b.data += rng.standard_normal(br.mlp.layers[-1].b.shape)
    after = DEC.decoder_layer(seq, image, pe, layer)[0].tokens.data
    lo, hi = seq.span("expert")
    np.testing.assert_array_equal(before[:, :lo], after[:, :lo])
    assert not np.allclose(before[:, lo:hi], after[:, lo:hi])


def test_layer_gradient(setup):
    dec, seq, image, pe = setup
    layer = dec.layers[0]
    wt = Tensor(np.random.default_rng(9).standard_normal(seq.tokens.shape))
    wi = Tensor(np.random.default_rng(10).standard_normal(image.shape))

    def f():
        s, im, _, _ = DEC.decoder_layer(seq, image, pe, layer)
        return T.tsum(s.tokens * wt) + T.tsum(im * wi)

    groups = [layer.self_attn.parameters(), layer.t2i.parameters(), layer.mlp.parameters(),
              layer.mote.parameters(), layer.i2t.parameters(), layer.norm5.parameters()]
    for params in groups:
        assert T.grad_check_directional(f, params, 1e-5, np.random.default_rng(11), 2) < 1e-5


# -- mask head ----------------------------------------------------------------------

def predict(dec, seq, image, pe, winner):
    return DEC.predict_mask(seq, image, winner, dec.head, pe, GRID, (16, 16))


def test_head_uses_only_the_winner(setup):
    dec, seq, image, pe = setup
    winner = np.array([2, 0])
    ref = predict(dec, seq, image, pe, winner).logits.data
    toks = seq.tokens.data.copy()
    lo, _ = seq.span("expert")
    for b, w in enumerate(winner):
        for t in range(4):
            if t != w:
                toks[b, lo + t] = 0.0
    zeroed = DEC.TokenSequence(Tensor(toks), seq.spans)
    assert predict(dec, zeroed, image, pe, winner).logits.data.tobytes() == ref.tobytes()


def test_zero_weights_give_half_probability(setup):
    dec, seq, image, pe = setup
    dec.head.mlp.layers[-1].w.data[...] = 0
    dec.head.mlp.layers[-1].b.data[...] = 0
    pred = predict(dec, seq, image, pe, np.array([0, 1]))
    assert not pred.logits.data.any()
    np.testing.assert_array_equal(pred.probabilities, 0.5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_readout_is_bilinear(seed):
    rng = np.random.default_rng(seed)
    w, image = rand(rng, 2, 1, D), rand(rng, 2, 16, D)
    one, _ = DEC.mask_logits(w, image, GRID, (16, 16))
    two, _ = DEC.mask_logits(w, image * 2.0, GRID, (16, 16))
    np.testing.assert_allclose(two.data, 2 * one.data, rtol=1e-12, atol=1e-12)
    two, _ = DEC.mask_logits(w * 2.0, image, GRID, (16, 16))
    np.testing.assert_allclose(two.data, 2 * one.data, rtol=1e-12, atol=1e-12)


def test_readout_grid_values():
    w = Tensor(np.ones((1, 1, 4)))
    image = Tensor(np.arange(16.0).reshape(1, 4, 4))
    _, g = DEC.mask_logits(w, image, (2, 2), (2, 2))
    np.testing.assert_allclose(g.data.reshape(-1), image.data[0].sum(-1) / 2.0)


def test_missing_or_invalid_winner(setup):
    dec, seq, image, pe = setup
    with pytest.raises(ValueError, match="winning"):
        predict(dec, seq, image, pe, None)
    with pytest.raises(ValueError):
        predict(dec, seq, image, pe, np.array([0, 4]))


def test_bilinear_matrix_rows():
    m = bilinear_matrix(64, 8)
    np.testing.assert_allclose(m.sum(1), 1.0)
    assert (m >= 0).all()
    np.testing.assert_allclose(bilinear_matrix(8, 8), np.eye(8))
    x = np.linspace(0, 1, 8)
    # linear ramps stay linear away from the clamped borders
    y = bilinear_matrix(64, 8) @ x
    assert (np.diff(y) >= -1e-12).all()


def test_attention_maps_are_distributions(setup):
    dec, seq, image, pe = setup
    maps = DEC.token_attention_maps(seq, image, dec.head, pe, GRID)
    assert maps.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(maps.sum((-1, -2)), 1.0, atol=1e-6)
    assert (maps >= 0).all()


def test_untrained_maps_are_near_uniform():
    from segmote.config import TrainConfig
    from segmote.data import in_memory_corpus
    from segmote.model import SegMoTE, make_batch
    from segmote.train import load_split

    model = SegMoTE(TrainConfig())
    split = load_split(model, in_memory_corpus(4, 3, 7, split_ratio=0.5), "test")
    batch = make_batch(model, split.samples, split.embeddings, "point", np.random.default_rng(0))
    with T.no_grad():
        maps = model.attention_maps(model.forward(batch))
    assert (maps.max((-1, -2)) / maps.min((-1, -2))).max() < 10


def test_prompt_encoder_shapes():
    pe = DEC.PromptEncoder(Init(0), D)
    assert pe.points(np.array([[3, 4], [0, 0]]), (16, 16)).shape == (2, 1, D)
    assert pe.boxes(np.array([[1, 2, 5, 6]]), (16, 16)).shape == (1, 2, D)
