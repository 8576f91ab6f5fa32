import numpy as np
import pytest

from indexgan import autodiff as ad
from indexgan.autodiff import Tensor
from indexgan.networks import (
    AttentionParams,
    CriticParams,
    GeneratorParams,
    GeneratorSpec,
    GruParams,
    NewsBlockParams,
    attention,
    attention_weights,
    critic_forward,
    decoder,
    encoder,
    generator_forward,
    gru_cell,
    news_blocks,
    sample_noise,
)

import oracles


def _zero_gru(x_dim, h_dim):
    p = GruParams.init(x_dim, h_dim, np.random.default_rng(0), "g")
    for t in p.tensors():
        t.data[...] = 0.0
    return p


def test_gru_zero_params_halves_state():
    p = _zero_gru(3, 4)
    h0 = np.array([[1.0, -2.0, 0.5, 4.0]])
    out = gru_cell(Tensor(np.ones((1, 3))), Tensor(h0), p)
    np.testing.assert_array_equal(out.data, 0.5 * h0)


def test_gru_fixed_point():
    p = GruParams.init(3, 4, np.random.default_rng(1), "g")
    for b in (p.b_r, p.b_u, p.b_h):
        b.data[...] = 0.0
    out = gru_cell(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), p)
    assert not out.data.any()


def test_gru_matches_loop_oracle():
    rng = np.random.default_rng(2)
    p = GruParams.init(3, 5, rng, "g")
    x, h = rng.standard_normal(3), rng.standard_normal(5)
    P = {n: getattr(p, n).data.tolist() for n in ("W_r", "U_r", "b_r", "W_u", "U_u", "b_u", "W_h", "U_h", "b_h")}
    out = gru_cell(Tensor(x[None]), Tensor(h[None]), p).data[0]
    np.testing.assert_allclose(out, oracles.gru_step_loop(x.tolist(), h.tolist(), P), rtol=0, atol=1e-14)


def test_gru_gradients():
    rng = np.random.default_rng(3)
    p = GruParams.init(3, 4, rng, "g")
    x = Tensor(rng.standard_normal((2, 3)))
    h = Tensor(rng.standard_normal((2, 4)))
    readout = rng.standard_normal((2, 4))
    err = ad.grad_check(lambda: ad.sum(ad.mul(gru_cell(x, h, p), readout)), list(p.tensors()))
    assert err < 1e-4


def test_gru_shape_error():
    p = GruParams.init(3, 4, np.random.default_rng(0), "g")
    with pytest.raises(ad.DimensionError):
        gru_cell(Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 4))), p)


def test_encoder_single_step():
    p = GruParams.init(3, 4, np.random.default_rng(4), "g")
    x = Tensor(np.random.default_rng(5).standard_normal((2, 3)))
    states = encoder([x], p)
    assert len(states) == 1
    np.testing.assert_array_equal(states[0].data, gru_cell(x, Tensor(np.zeros((2, 4))), p).data)


def test_attention_single_step():
    p = AttentionParams.init(4, np.random.default_rng(6))
    h = Tensor(np.random.default_rng(7).standard_normal((3, 4)))
    assert np.all(attention_weights([h], p).data == 1.0)
    np.testing.assert_array_equal(attention([h], p).data, h.data)


def test_attention_identical_states():
    p = AttentionParams.init(4, np.random.default_rng(8))
    h = np.random.default_rng(9).standard_normal((2, 4))
    states = [Tensor(h) for _ in range(5)]
    np.testing.assert_allclose(attention_weights(states, p).data, 0.2, rtol=0, atol=1e-15)
    np.testing.assert_allclose(attention(states, p).data, h, rtol=0, atol=1e-14)


def _spec(**kw):
    base = dict(market_dim=4, news_dim=6, latent_news=2, noise_dim=2, encoder_hidden=5,
                decoder_hidden=4, horizon=3, block_widths=(5,))
    base.update(kw)
    return GeneratorSpec(**base)


def test_decoder_one_step():
    rng = np.random.default_rng(10)
    gp = GeneratorParams.init(_spec(), rng)
    ctx = Tensor(rng.standard_normal((2, 5)))
    last = Tensor(rng.standard_normal((2, 5)))
    out = decoder(ctx, last, gp, horizon=1)
    h = ad.tanh(last @ gp.W_d + gp.b_d)
    h = gru_cell(ctx, h, gp.decoder)
    np.testing.assert_array_equal(out.data, (h @ gp.W_o + gp.b_o).data)


def test_news_blocks_zero_input():
    rng = np.random.default_rng(11)
    p = NewsBlockParams.init([8, 5, 3], rng)
    p.blocks[-1].bias.data[...] = 0.0
    out = news_blocks(np.zeros((4, 2, 3, 4)), p, train=True)
    assert out.shape == (4, 3)
    assert not out.data.any()


def test_news_blocks_range_and_grads():
    rng = np.random.default_rng(12)
    p = NewsBlockParams.init([8, 5, 3], rng)
    emb = rng.standard_normal((6, 2, 3, 4)) * 3
    out = news_blocks(emb, p, train=True)
    assert out.shape == (6, 3) and np.all(np.abs(out.data) < 1)
    readout = rng.standard_normal((6, 3))
    err = ad.grad_check(lambda: ad.sum(ad.mul(news_blocks(emb, p, train=True), readout)), list(p.tensors()))
    assert err < 1e-4


def _inputs(rng, b=3, w=4, spec=None):
    spec = spec or _spec()
    market = rng.standard_normal((b, w, spec.market_dim))
    news = rng.standard_normal((b, w, spec.news_dim))
    return market, news


def test_generator_is_deterministic():
    rng = np.random.default_rng(13)
    gp = GeneratorParams.init(_spec(), rng)
    market, news = _inputs(rng)
    z = sample_noise(rng, 3, 2)
    a = generator_forward(market, news, z, gp).data
    b = generator_forward(market, news, z, gp).data
    assert a.shape == (3, 3)
    np.testing.assert_array_equal(a, b)


def test_generator_depends_on_noise():
    rng = np.random.default_rng(14)
    gp = GeneratorParams.init(_spec(), rng)
    market, news = _inputs(rng)
    a = generator_forward(market, news, sample_noise(rng, 3, 2), gp).data
    b = generator_forward(market, news, sample_noise(rng, 3, 2), gp).data
    assert np.all(a != b)


def test_generator_per_step_noise_and_variants():
    rng = np.random.default_rng(15)
    for spec in (_spec(), _spec(use_news=False), _spec(use_attention=False)):
        gp = GeneratorParams.init(spec, rng)
        market, news = _inputs(rng, spec=spec)
        out = generator_forward(market, news if spec.use_news else None, sample_noise(rng, 3, 2, steps=4), gp)
        assert out.shape == (3, 3)


def test_generator_rejects_bad_shapes():
    rng = np.random.default_rng(16)
    gp = GeneratorParams.init(_spec(), rng)
    market, news = _inputs(rng)
    with pytest.raises(ad.DimensionError):
        generator_forward(market[:, :, :3], news, np.zeros((3, 2)), gp)
    with pytest.raises(ad.DimensionError):
        generator_forward(market, news, np.zeros((3, 5)), gp)


def test_critic_examples():
    rng = np.random.default_rng(17)
    cp = CriticParams.init(4, rng)
    seq = rng.standard_normal((2, 5))
    a = critic_forward(seq, cp).data
    np.testing.assert_array_equal(a, critic_forward(seq.copy(), cp).data)
    assert a.shape == (2,)
    assert critic_forward(seq[0], cp).shape == ()
    for t in cp.tensors():
        t.data[...] = 0.0
    assert not critic_forward(seq, cp).data.any()


def test_critic_matches_loop_oracle():
    rng = np.random.default_rng(18)
    cp = CriticParams.init(3, rng)
    seq = rng.standard_normal(4)
    P, W_v, b_v = oracles.critic_weights(cp)
    assert critic_forward(seq, cp).item() == pytest.approx(oracles.critic_score_loop(seq.tolist(), P, W_v, b_v),
                                                          abs=1e-14)


def test_critic_horizon_check():
    cp = CriticParams.init(3, np.random.default_rng(0))
    with pytest.raises(ad.DimensionError):
        critic_forward(np.zeros((2, 4)), cp, horizon=5)


def test_full_generator_gradients():
    rng = np.random.default_rng(19)
    gp = GeneratorParams.init(_spec(), rng)
    market, news = _inputs(rng)
    z = sample_noise(rng, 3, 2)
    readout = rng.standard_normal((3, 3))
    err = ad.grad_check(lambda: ad.sum(ad.mul(generator_forward(market, news, z, gp, train=True), readout)),
                        gp.tensors())
    assert err < 1e-4
