"""Generator and critic networks built on :mod:`indexgan.autodiff`.

All functions operate on batches: a sequence step is a ``(batch, width)``
tensor and the generator returns ``(batch, q)`` predicted returns.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, DimensionError, Tensor


def _uniform(rng: np.random.Generator, shape, bound: float, name: str) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class GruParams:
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_u: Tensor
    U_u: Tensor
    b_u: Tensor
    W_h: Tensor
    U_h: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator, prefix: str):
        bound = 1.0 / np.sqrt(hidden_dim)
        kw = {}
        for gate in ("r", "u", "h"):
            kw[f"W_{gate}"] = _uniform(rng, (input_dim, hidden_dim), bound, f"{prefix}.W_{gate}")
            kw[f"U_{gate}"] = _uniform(rng, (hidden_dim, hidden_dim), bound, f"{prefix}.U_{gate}")
            kw[f"b_{gate}"] = _uniform(rng, (hidden_dim,), bound, f"{prefix}.b_{gate}")
        return cls(**kw)

    @property
    def input_dim(self) -> int:
        return self.W_r.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.U_r.shape[0]

    def tensors(self) -> Iterator[Tensor]:
        for f in fields(self):
            yield getattr(self, f.name)


@dataclass
class NewsBlock:
    """Dense layer, followed by batchnorm on every block but the last.

    Batchnormed blocks carry no dense bias: train-mode normalisation subtracts
    the batch mean, so such a bias has an identically zero gradient and the
    batchnorm shift already provides the offset.
    """

    weight: Tensor
    bias: Tensor | None = None
    scale: Tensor | None = None
    shift: Tensor | None = None
    bn: BatchNormState | None = None

    def tensors(self) -> Iterator[Tensor]:
        yield self.weight
        if self.bias is not None:
            yield self.bias
        if self.scale is not None:
            yield self.scale
            yield self.shift


@dataclass
class NewsBlockParams:
    blocks: list[NewsBlock]

    @classmethod
    def init(cls, widths: list[int], rng: np.random.Generator, prefix: str = "news"):
        """``widths`` runs from the pooled input width down to ``g``."""
        blocks = []
        last = len(widths) - 2
        for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(w_in)
            blk = NewsBlock(weight=_uniform(rng, (w_in, w_out), bound, f"{prefix}.{i}.weight"))
            if i == last:
                blk.bias = _uniform(rng, (w_out,), bound, f"{prefix}.{i}.bias")
            else:
                blk.scale = Tensor(np.ones(w_out), requires_grad=True, name=f"{prefix}.{i}.scale")
                blk.shift = _zeros((w_out,), f"{prefix}.{i}.shift")
                blk.bn = BatchNormState(w_out)
            blocks.append(blk)
        return cls(blocks)

    @property
    def output_dim(self) -> int:
        return self.blocks[-1].weight.shape[1]

    def tensors(self) -> Iterator[Tensor]:
        for b in self.blocks:
            yield from b.tensors()


@dataclass
class AttentionParams:
    v: Tensor
    W_a: Tensor
    b_a: Tensor

    @classmethod
    def init(cls, hidden_dim: int, rng: np.random.Generator, prefix: str = "attn"):
        bound = 1.0 / np.sqrt(hidden_dim)
        return cls(
            v=_uniform(rng, (hidden_dim, 1), bound, f"{prefix}.v"),
            W_a=_uniform(rng, (hidden_dim, hidden_dim), bound, f"{prefix}.W_a"),
            b_a=_uniform(rng, (hidden_dim,), bound, f"{prefix}.b_a"),
        )

    def tensors(self) -> Iterator[Tensor]:
        yield from (self.v, self.W_a, self.b_a)


@dataclass
class GeneratorSpec:
    """Shape-level description of a generator."""

    market_dim: int = 14
    news_dim: int = 25 * 50
    latent_news: int = 6
    noise_dim: int = 8
    encoder_hidden: int = 100
    decoder_hidden: int = 50
    horizon: int = 5
    block_widths: tuple[int, ...] = (256, 64)
    use_news: bool = True
    use_attention: bool = True

    @property
    def encoder_input(self) -> int:
        return self.noise_dim + self.market_dim + (self.latent_news if self.use_news else 0)


@dataclass
class GeneratorParams:
    spec: GeneratorSpec
    news: NewsBlockParams | None
    encoder: GruParams
    attention: AttentionParams | None
    W_d: Tensor
    b_d: Tensor
    decoder: GruParams
    W_o: Tensor
    b_o: Tensor

    @classmethod
    def init(cls, spec: GeneratorSpec, rng: np.random.Generator) -> "GeneratorParams":
        news = None
        if spec.use_news:
            widths = [spec.news_dim, *spec.block_widths, spec.latent_news]
            news = NewsBlockParams.init(widths, rng)
        he, hd = spec.encoder_hidden, spec.decoder_hidden
        encoder = GruParams.init(spec.encoder_input, he, rng, "encoder")
        attention = AttentionParams.init(he, rng) if spec.use_attention else None
        bd = 1.0 / np.sqrt(he)
        W_d = _uniform(rng, (he, hd), bd, "bridge.W_d")
        b_d = _uniform(rng, (hd,), bd, "bridge.b_d")
        decoder = GruParams.init(he, hd, rng, "decoder")
        bo = 1.0 / np.sqrt(hd)
        W_o = _uniform(rng, (hd, 1), bo, "head.W_o")
        b_o = _uniform(rng, (1,), bo, "head.b_o")
        return cls(spec, news, encoder, attention, W_d, b_d, decoder, W_o, b_o)

    def tensors(self) -> list[Tensor]:
        out: list[Tensor] = []
        if self.news is not None:
            out.extend(self.news.tensors())
        out.extend(self.encoder.tensors())
        if self.attention is not None:
            out.extend(self.attention.tensors())
        out.extend([self.W_d, self.b_d])
        out.extend(self.decoder.tensors())
        out.extend([self.W_o, self.b_o])
        return out

    def batchnorm_states(self) -> dict[str, BatchNormState]:
        if self.news is None:
            return {}
        return {f"news.{i}": b.bn for i, b in enumerate(self.news.blocks) if b.bn is not None}


@dataclass
class CriticParams:
    gru: GruParams
    W_v: Tensor
    b_v: Tensor

    @classmethod
    def init(cls, hidden_dim: int, rng: np.random.Generator) -> "CriticParams":
        bound = 1.0 / np.sqrt(hidden_dim)
        return cls(
            gru=GruParams.init(1, hidden_dim, rng, "critic.gru"),
            W_v=_uniform(rng, (hidden_dim, 1), bound, "critic.W_v"),
            b_v=_uniform(rng, (1,), bound, "critic.b_v"),
        )

    def tensors(self) -> list[Tensor]:
        return [*self.gru.tensors(), self.W_v, self.b_v]


# ---------------------------------------------------------------------------
# building blocks


def pool_headlines(embedded) -> Tensor:
    """Mean over the word axis then flatten headlines: (N, k, l, m) -> (N, k*m)."""
    x = ad.as_tensor(embedded)
    if x.ndim != 4:
        raise DimensionError(f"pool_headlines: expected (N, k, l, m), got {x.shape}")
    n, k, _, m = x.shape
    return ad.reshape(ad.mean(x, axis=2), (n, k * m))


def dense_blocks(x: Tensor, params: NewsBlockParams, train: bool) -> Tensor:
    """Dense -> batchnorm -> leaky_relu per block, dense -> tanh on the last."""
    for blk in params.blocks[:-1]:
        x = ad.linear(x, blk.weight)
        x = ad.batchnorm(x, blk.scale, blk.shift, blk.bn, train)
        x = ad.leaky_relu(x)
    last = params.blocks[-1]
    return ad.tanh(ad.linear(x, last.weight, last.bias))


def news_blocks(embedded, params: NewsBlockParams, train: bool = False) -> Tensor:
    """Compress (N, k, l, m) word-embedding tensors to (N, g) latent news vectors."""
    pooled = pool_headlines(embedded)
    if pooled.shape[1] != params.blocks[0].weight.shape[0]:
        raise DimensionError(
            f"news_blocks: pooled width {pooled.shape[1]} != block input "
            f"{params.blocks[0].weight.shape[0]}"
        )
    return dense_blocks(pooled, params, train)


def gru_cell(x: Tensor, h: Tensor, p: GruParams) -> Tensor:
    if x.shape[-1] != p.input_dim or h.shape[-1] != p.hidden_dim:
        raise DimensionError(
            f"gru_cell: input {x.shape} / hidden {h.shape} do not match "
            f"({p.input_dim}, {p.hidden_dim})"
        )
    r = ad.sigmoid(x @ p.W_r + h @ p.U_r + p.b_r)
    u = ad.sigmoid(x @ p.W_u + h @ p.U_u + p.b_u)
    cand = ad.tanh(x @ p.W_h + (r * h) @ p.U_h + p.b_h)
    return (1.0 - u) * h + u * cand


def encoder(xs: list[Tensor], p: GruParams) -> list[Tensor]:
    if not xs:
        raise DimensionError("encoder: empty input sequence")
    widths = {x.shape for x in xs}
    if len(widths) != 1:
        raise DimensionError(f"encoder: inconsistent step shapes {sorted(widths)}")
    h = Tensor(np.zeros((xs[0].shape[0], p.hidden_dim)))
    states = []
    for x in xs:
        h = gru_cell(x, h, p)
        states.append(h)
    return states


def attention_weights(states: list[Tensor], p: AttentionParams) -> Tensor:
    scores = [ad.tanh(h @ p.W_a + p.b_a) @ p.v for h in states]
    return ad.softmax(ad.concat(scores, axis=1), axis=1)


def attention(states: list[Tensor], p: AttentionParams) -> Tensor:
    """Softmax-weighted sum of encoder states, (batch, hidden)."""
    weights = attention_weights(states, p)
    context = None
    for t, h in enumerate(states):
        term = weights[:, t:t + 1] * h
        context = term if context is None else context + term
    return context


def decoder(context: Tensor, last_state: Tensor, params: GeneratorParams, horizon: int) -> Tensor:
    h = ad.tanh(last_state @ params.W_d + params.b_d)
    outs = []
    for _ in range(horizon):
        h = gru_cell(context, h, params.decoder)
        outs.append(h @ params.W_o + params.b_o)
    return ad.concat(outs, axis=1)


def generator_forward(market, news, z, params: GeneratorParams, train: bool = False) -> Tensor:
    """Generate ``(batch, q)`` returns.

    ``market`` is (B, w, p); ``news`` is (B, w, k*m) pooled news or None when the
    news path is disabled; ``z`` is (B, d_z) shared across steps or (B, w, d_z).
    """
    spec = params.spec
    market = np.asarray(market, dtype=np.float64)
    if market.ndim != 3 or market.shape[2] != spec.market_dim:
        raise DimensionError(
            f"generator_forward: market features {market.shape}, expected (B, w, {spec.market_dim})"
        )
    b, w, _ = market.shape
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 2:
        z = np.broadcast_to(z[:, None, :], (b, w, z.shape[1]))
    if z.shape != (b, w, spec.noise_dim):
        raise DimensionError(f"generator_forward: noise {z.shape}, expected (B, [w,] {spec.noise_dim})")
    parts = [Tensor(z), Tensor(market)]
    if spec.use_news:
        news = np.asarray(news, dtype=np.float64)
        if news.shape[:2] != (b, w):
            raise DimensionError(f"generator_forward: news {news.shape} vs market {market.shape}")
        latent = dense_blocks(Tensor(news.reshape(b * w, -1)), params.news, train)
        parts.append(ad.reshape(latent, (b, w, spec.latent_news)))
    x = ad.concat(parts, axis=2)
    states = encoder([x[:, t, :] for t in range(w)], params.encoder)
    if spec.use_attention:
        context = attention(states, params.attention)
    else:
        context = states[-1]
    return decoder(context, states[-1], params, spec.horizon)


def critic_forward(seq, params: CriticParams, horizon: int | None = None) -> Tensor:
    """Score return sequences: (B, q) -> (B,), or (q,) -> scalar."""
    seq = ad.as_tensor(seq)
    if horizon is not None and seq.shape[-1] != horizon:
        raise DimensionError(f"critic_forward: sequence length {seq.shape[-1]} != q={horizon}")
    single = seq.ndim == 1
    if single:
        seq = ad.reshape(seq, (1, seq.shape[0]))
    if seq.ndim != 2:
        raise DimensionError(f"critic_forward: expected (B, q), got {seq.shape}")
    h = Tensor(np.zeros((seq.shape[0], params.gru.hidden_dim)))
    for t in range(seq.shape[1]):
        h = gru_cell(seq[:, t:t + 1], h, params.gru)
    v = h @ params.W_v + params.b_v
    return ad.reshape(v, ()) if single else ad.reshape(v, (seq.shape[0],))


def sample_noise(rng: np.random.Generator, batch: int, dim: int, steps: int | None = None) -> np.ndarray:
    """One standard-normal vector per window, or one per step when ``steps`` is given."""
    if steps is None:
        return rng.standard_normal((batch, dim))
    return rng.standard_normal((batch, steps, dim))
