"""WGAN training: losses, weight clipping, the alternating update loop and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import RMSprop, Tensor
from .networks import (
    CriticParams,
    GeneratorParams,
    GeneratorSpec,
    critic_forward,
    generator_forward,
    sample_noise,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr_generator: float = 1e-4
    lr_critic: float = 5e-5
    clip: float = 0.01
    lambda1: float = 0.8
    lambda2: float = 0.2
    gamma1: float = 10.0
    gamma2: float = 3.0
    n_critic: int = 5
    epochs: int = 80
    w: int = 35
    q: int = 5
    m: int = 50
    k: int = 25
    g: int = 6
    noise_dim: int = 8
    encoder_hidden: int = 100
    decoder_hidden: int = 50
    critic_hidden: int = 32
    block_widths: tuple[int, ...] = (256, 64)
    use_news: bool = True
    use_volatility: bool = True
    use_attention: bool = True
    noise_per_step: bool = False
    shuffle: bool = True
    tau: float = 0.02
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.block_widths = tuple(int(x) for x in self.block_widths)

    def validate(self) -> "TrainConfig":
        if not (0 < self.lambda2 < self.lambda1 < 1):
            raise ConfigError(f"need 0 < lambda2 < lambda1 < 1, got {self.lambda1}, {self.lambda2}")
        if abs(self.lambda1 + self.lambda2 - 1.0) > 1e-12:
            raise ConfigError("lambda1 + lambda2 must equal 1")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ConfigError("gamma1 and gamma2 must be non-negative")
        if self.clip <= 0:
            raise ConfigError("clip threshold must be positive")
        if self.n_critic < 1:
            raise ConfigError("n_critic must be at least 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        for name in ("batch_size", "epochs", "w", "q", "m", "k", "g", "noise_dim",
                     "encoder_hidden", "decoder_hidden", "critic_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batchnorm)")
        if self.lr_generator <= 0 or self.lr_critic <= 0:
            raise ConfigError("learning rates must be positive")
        return self

    @property
    def market_dim(self) -> int:
        return 14 if self.use_volatility else 13

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(
            market_dim=self.market_dim,
            news_dim=self.k * self.m,
            latent_news=self.g,
            noise_dim=self.noise_dim,
            encoder_hidden=self.encoder_hidden,
            decoder_hidden=self.decoder_hidden,
            horizon=self.q,
            block_widths=self.block_widths,
            use_news=self.use_news,
            use_attention=self.use_attention,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["block_widths"] = list(self.block_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
        return cls(**d)

    def override(self, values: dict[str, str]) -> "TrainConfig":
        """New config with string-valued fields parsed per field type."""
        types = {f.name: f.type for f in dataclasses.fields(self)}
        updates = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            updates[key] = _coerce(key, types[key], raw)
        return dataclasses.replace(self, **updates)


def _coerce(key: str, typ: str, raw: str):
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ.startswith("tuple"):
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key}") from None
    raise ConfigError(f"unsupported field type for {key}")


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


# ---------------------------------------------------------------------------
# losses


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def supervised_loss(real, fake) -> Tensor:
    """Mean absolute error over batch and horizon."""
    fake = ad.as_tensor(fake)
    real_arr = real.data if isinstance(real, Tensor) else np.asarray(real, dtype=np.float64)
    if real_arr.shape != fake.shape:
        raise ValueError(f"supervised_loss: shape mismatch {real_arr.shape} vs {fake.shape}")
    return ad.mean(ad.abs(ad.sub(real if isinstance(real, Tensor) else real_arr, fake)))


def weighted_loss_eval(y, y_hat, lambda1: float = 0.8, lambda2: float = 0.2) -> float:
    """Hard weighted error rate on movements in {-1, +1}."""
    y, y_hat = _as_2d(y), _as_2d(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"weighted_loss_eval: shape mismatch {y.shape} vs {y_hat.shape}")
    fp = ((y < 0) & (y_hat > 0)).sum(axis=1)
    fn = ((y > 0) & (y_hat < 0)).sum(axis=1)
    return float(np.mean((lambda1 * fp + lambda2 * fn) / y.shape[1]))


def weighted_loss_smooth(real, fake, lambda1: float = 0.8, lambda2: float = 0.2,
                         tau: float = 0.02) -> Tensor:
    """Sigmoid relaxation of :func:`weighted_loss_eval` that is differentiable in ``fake``.

    Zero real returns count as down moves.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    fake = ad.as_tensor(fake)
    real = real.data if isinstance(real, Tensor) else np.asarray(real, dtype=np.float64)
    if real.shape != fake.shape:
        raise ValueError(f"weighted_loss_smooth: shape mismatch {real.shape} vs {fake.shape}")
    down = (real <= 0).astype(np.float64)
    up = (real > 0).astype(np.float64)
    false_up = ad.mul(ad.sigmoid(ad.mul(fake, 1.0 / tau)), lambda1 * down)
    false_down = ad.mul(ad.sigmoid(ad.mul(fake, -1.0 / tau)), lambda2 * up)
    return ad.mean(ad.add(false_up, false_down))


def critic_loss(real, fake, critic: CriticParams) -> Tensor:
    real_score = ad.mean(critic_forward(_as_2d(real) if not isinstance(real, Tensor) else real, critic))
    fake_score = ad.mean(critic_forward(_as_2d(fake) if not isinstance(fake, Tensor) else fake, critic))
    return ad.sub(fake_score, real_score)


@dataclass
class GeneratorLoss:
    total: Tensor
    adversarial: float
    supervised: float
    weighted: float


def generator_loss(fake: Tensor, real, critic: CriticParams, gamma1: float = 10.0,
                   gamma2: float = 3.0, lambda1: float = 0.8, lambda2: float = 0.2,
                   tau: float = 0.02) -> GeneratorLoss:
    adv = ad.mul(ad.mean(critic_forward(fake, critic)), -1.0)
    ls = supervised_loss(real, fake)
    lw = weighted_loss_smooth(real, fake, lambda1, lambda2, tau)
    total = ad.add(adv, ad.add(ad.mul(ls, gamma1), ad.mul(lw, gamma2)))
    return GeneratorLoss(total, adv.item(), ls.item(), lw.item())


def clip_weights(params, alpha: float) -> None:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    for p in params:
        np.clip(p.data, -alpha, alpha, out=p.data)


# ---------------------------------------------------------------------------
# data


@dataclass
class WindowDataset:
    """Aligned daily rows plus the anchors of usable windows.

    ``market`` is (n, p), ``news`` (n, k*m) pooled embeddings or None,
    ``returns`` (n,) where ``returns[t]`` is the close return of row ``t``.
    """

    market: np.ndarray
    returns: np.ndarray
    anchors: np.ndarray
    w: int
    q: int
    news: np.ndarray | None = None

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.int64)
        n = len(self.market)
        if len(self.returns) != n or (self.news is not None and len(self.news) != n):
            raise ValueError("dataset arrays are not aligned")
        if self.anchors.size and (self.anchors.min() < self.w - 1 or self.anchors.max() + self.q >= n):
            raise ValueError("window anchor out of range")

    def __len__(self) -> int:
        return len(self.anchors)

    def history(self, ends) -> tuple[np.ndarray, np.ndarray | None]:
        ends = np.asarray(ends, dtype=np.int64)
        idx = ends[:, None] + np.arange(-self.w + 1, 1)[None, :]
        news = None if self.news is None else self.news[idx]
        return self.market[idx], news

    def targets(self, ends) -> np.ndarray:
        ends = np.asarray(ends, dtype=np.int64)
        return self.returns[ends[:, None] + np.arange(1, self.q + 1)[None, :]]

    def subset(self, anchors) -> "WindowDataset":
        return dataclasses.replace(self, anchors=np.asarray(anchors))


# ---------------------------------------------------------------------------
# model + loop


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class IndexGAN:
    config: TrainConfig
    generator: GeneratorParams
    critic: CriticParams
    opt_g: RMSprop
    opt_c: RMSprop
    rng: np.random.Generator
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: TrainConfig, meta: dict | None = None) -> "IndexGAN":
        config.validate()
        rng = np.random.default_rng(config.seed)
        gen = GeneratorParams.init(config.generator_spec(), rng)
        crit = CriticParams.init(config.critic_hidden, rng)
        opt_g = RMSprop(gen.tensors(), config.lr_generator, config.rmsprop_rho, config.rmsprop_eps)
        opt_c = RMSprop(crit.tensors(), config.lr_critic, config.rmsprop_rho, config.rmsprop_eps)
        return cls(config, gen, crit, opt_g, opt_c, rng, 0, dict(meta or {}))

    def noise(self, batch: int, rng: np.random.Generator | None = None) -> np.ndarray:
        steps = self.config.w if self.config.noise_per_step else None
        return sample_noise(rng or self.rng, batch, self.config.noise_dim, steps)

    def generate(self, market, news, z, train: bool = False) -> Tensor:
        return generator_forward(market, news, z, self.generator, train=train)

    def predict(self, market, news, z=None) -> np.ndarray:
        """Eval-mode generation; ``z`` defaults to zeros."""
        if z is None:
            z = np.zeros((len(market), self.config.noise_dim))
        with ad.no_grad():
            return self.generate(market, news, z, train=False).data.copy()


@dataclass
class LogRow:
    iteration: int
    epoch: int
    critic_loss: float
    generator_loss: float | None
    supervised_loss: float
    weighted_loss: float


LOG_HEADER = ("iteration", "epoch", "critic_loss", "generator_loss", "supervised_loss", "weighted_loss")


@dataclass
class TrainResult:
    model: IndexGAN
    log: list[LogRow]
    critic_updates: int = 0
    generator_updates: int = 0


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    out = [order[i:i + size] for i in range(0, len(order), size)]
    if out and len(out[-1]) < 2:
        out.pop()
    return out


def _check_finite(value: float, what: str, iteration: int) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite {what} ({value}) at iteration {iteration}")


def train(dataset: WindowDataset, config: TrainConfig, model: IndexGAN | None = None,
          on_critic_update: Callable[[int, CriticParams], None] | None = None,
          max_iterations: int | None = None) -> TrainResult:
    """Alternating WGAN updates: a critic step every batch, a generator step every ``n_critic``."""
    config.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset has no windows")
    if (dataset.news is None) == config.use_news:
        raise ValueError("dataset news presence does not match config.use_news")
    if dataset.market.shape[1] != config.market_dim:
        raise ValueError(f"dataset has {dataset.market.shape[1]} market features, config expects {config.market_dim}")
    if model is None:
        model = IndexGAN.create(config)
    result = TrainResult(model, [])
    cfg = model.config
    critic_params = model.critic.tensors()
    gen_params = model.generator.tensors()
    i = 0
    for _ in range(cfg.epochs):
        epoch = model.epoch + 1
        order = model.rng.permutation(dataset.anchors) if cfg.shuffle else dataset.anchors
        for ends in _batches(order, cfg.batch_size):
            market, news = dataset.history(ends)
            real = dataset.targets(ends)
            z = model.noise(len(ends))

            with ad.no_grad():
                fake = model.generate(market, news, z, train=True).data
            model.opt_c.zero_grad()
            loss_c = critic_loss(real, fake, model.critic)
            _check_finite(loss_c.item(), "critic loss", i + 1)
            ad.backward(loss_c)
            model.opt_c.step()
            clip_weights(critic_params, cfg.clip)
            result.critic_updates += 1
            i += 1
            if on_critic_update is not None:
                on_critic_update(i, model.critic)

            g_total = None
            if i % cfg.n_critic == 0:
                fake_t = model.generate(market, news, z, train=True)
                lg = generator_loss(fake_t, real, model.critic, cfg.gamma1, cfg.gamma2,
                                    cfg.lambda1, cfg.lambda2, cfg.tau)
                g_total = lg.total.item()
                _check_finite(g_total, "generator loss", i)
                ad.zero_grad(gen_params)
                ad.backward(lg.total)
                model.opt_g.step()
                result.generator_updates += 1
                fake = fake_t.data

            ls = float(np.mean(np.abs(real - fake)))
            lw = weighted_loss_eval(np.where(real > 0, 1, -1), np.where(fake > 0, 1, -1),
                                    cfg.lambda1, cfg.lambda2)
            result.log.append(LogRow(i, epoch, loss_c.item(), g_total, ls, lw))
            if max_iterations is not None and i >= max_iterations:
                model.epoch = epoch
                return result
        model.epoch = epoch
        log.debug("epoch %d done after %d iterations", epoch, i)
    return result


def write_loss_log(rows: list[LogRow], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOG_HEADER)
        for r in rows:
            wr.writerow([r.iteration, r.epoch, repr(r.critic_loss),
                         "" if r.generator_loss is None else repr(r.generator_loss),
                         repr(r.supervised_loss), repr(r.weighted_loss)])


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (all integers little-endian):
#   8 bytes   magic b"IGANCKPT"
#   4 bytes   uint32 format version
#   8 bytes   uint64 header length H
#   H bytes   UTF-8 JSON header
#   payload   float64 tensors, concatenated in header order
#   32 bytes  SHA-256 of header + payload

MAGIC = b"IGANCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _named_arrays(model: IndexGAN) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for t in model.generator.tensors():
        arrays[f"generator/{t.name}"] = t.data
    for t in model.critic.tensors():
        arrays[f"{t.name}"] = t.data
    for name, bn in model.generator.batchnorm_states().items():
        arrays[f"bn/{name}.running_mean"] = bn.running_mean
        arrays[f"bn/{name}.running_var"] = bn.running_var
    for t, v in zip(model.opt_g.params, model.opt_g.state):
        arrays[f"opt_g/{t.name}"] = v
    for t, v in zip(model.opt_c.params, model.opt_c.state):
        arrays[f"opt_c/{t.name}"] = v
    return arrays


def save_checkpoint(model: IndexGAN, path) -> None:
    """Write atomically via a temp file in the target directory."""
    arrays = _named_arrays(model)
    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps({
        "config": model.config.to_dict(),
        "epoch": model.epoch,
        "meta": model.meta,
        "rng_state": model.rng.bit_generator.state,
        "tensors": index,
    }).encode("utf-8")
    payload = b"".join(chunks)
    digest = hashlib.sha256(header + payload).digest()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
            fh.write(header)
            fh.write(payload)
            fh.write(digest)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, model: IndexGAN | None = None) -> IndexGAN:
    """Restore a model; when ``model`` is given its shapes must match the file."""
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CorruptCheckpointError(f"{path}: file too short")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic header")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(blob) < start + hlen + 32:
        raise CorruptCheckpointError(f"{path}: truncated")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptCheckpointError(f"{path}: unreadable header") from None
    payload = blob[start + hlen:-32]
    expected = sum(t["nbytes"] for t in header["tensors"])
    if len(payload) != expected:
        raise CorruptCheckpointError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if hashlib.sha256(blob[start:-32]).digest() != blob[-32:]:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")

    if model is None:
        model = IndexGAN.create(TrainConfig.from_dict(header["config"]), header.get("meta"))
    else:
        model.meta = dict(header.get("meta") or {})
    targets = _named_arrays(model)
    stored = {t["name"]: t for t in header["tensors"]}
    for name, dest in targets.items():
        if name not in stored:
            raise CheckpointShapeError(f"{path}: tensor {name!r} missing from checkpoint")
        entry = stored[name]
        if tuple(entry["shape"]) != dest.shape:
            raise CheckpointShapeError(
                f"{path}: tensor {name!r} has shape {tuple(entry['shape'])}, model expects {dest.shape}"
            )
        arr = np.frombuffer(payload, dtype="<f8", count=int(np.prod(dest.shape, dtype=np.int64)),
                            offset=entry["offset"])
        dest[...] = arr.reshape(dest.shape)
    extra = set(stored) - set(targets)
    if extra:
        raise CheckpointShapeError(f"{path}: unexpected tensor {sorted(extra)[0]!r}")
    model.epoch = int(header["epoch"])
    model.rng.bit_generator.state = header["rng_state"]
    return model
