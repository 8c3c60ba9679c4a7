"""Signal autoencoder.

Per-channel temporal features (shared dense map + batch norm + relu with a
residual path), a stack of cross-channel multi-head self-attention blocks,
and a factorized bottleneck that mixes channels into latent tokens and
projects features to the latent width.  The decoder mirrors the bottleneck
and ends in a shared per-channel linear head back to sample space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import BatchNorm, ConfigError, LayerNorm, Linear, assign_state, prefixed


@dataclass
class EncoderConfig:
    channels: int
    samples: int
    latent_tokens: int
    latent_dim: int
    temporal_dim: int = 128
    heads: int = 8
    depth: int = 2

    def validate(self) -> "EncoderConfig":
        for name in ("channels", "samples", "latent_tokens", "latent_dim", "temporal_dim"):
            if getattr(self, name) < 2:
                raise ConfigError(f"{name} must be >= 2, got {getattr(self, name)}")
        if self.heads < 1 or self.depth < 1:
            raise ConfigError("heads and depth must be >= 1")
        if self.temporal_dim % self.heads != 0:
            raise ConfigError(
                f"temporal_dim {self.temporal_dim} is not divisible by heads {self.heads}"
            )
        return self


class TemporalBlock:
    """Shared per-channel map samples -> temporal_dim with a residual path.

    Applies dense projection, batch norm over all (batch, channel) rows,
    relu, then adds a linear shortcut from the raw samples.
    """

    def __init__(self, rng: np.random.Generator, samples: int, temporal_dim: int):
        self.proj = Linear(rng, samples, temporal_dim)
        self.bn = BatchNorm(temporal_dim)
        self.shortcut = None if samples == temporal_dim else Linear(rng, samples, temporal_dim, bias=False)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(f"temporal block expects (batch, channels, samples), got {x.shape}")
        b, c, s = x.shape
        flat = x.reshape(b * c, s)
        h = ad.relu(self.bn(self.proj(flat), training))
        skip = flat if self.shortcut is None else self.shortcut(flat)
        return ad.add(h, skip).reshape(b, c, -1)

    def params(self) -> dict[str, Tensor]:
        out = prefixed("proj", self.proj.params()) | prefixed("bn", self.bn.params())
        if self.shortcut is not None:
            out |= prefixed("shortcut", self.shortcut.params())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return prefixed("bn", self.bn.buffers())


class SpatialBlock:
    """Multi-head self-attention across channels with post-norm residual."""

    def __init__(self, rng: np.random.Generator, width: int, heads: int):
        if width % heads != 0:
            raise ConfigError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = width // heads
        self.q = Linear(rng, width, width)
        self.k = Linear(rng, width, width)
        self.v = Linear(rng, width, width)
        self.out = Linear(rng, width, width)
        self.norm = LayerNorm(width)

    def _split(self, x: Tensor, b: int, c: int) -> Tensor:
        return x.reshape(b, c, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(f"spatial block expects (batch, channels, width), got {x.shape}")
        b, c, w = x.shape
        q = self._split(self.q(x), b, c)
        k = self._split(self.k(x), b, c)
        v = self._split(self.v(x), b, c)
        scores = ad.mul(ad.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / np.sqrt(self.head_dim))
        att = ad.matmul(ad.softmax(scores, axis=-1), v)
        merged = att.transpose(0, 2, 1, 3).reshape(b, c, w)
        return self.norm(ad.add(x, self.out(merged)))

    def params(self) -> dict[str, Tensor]:
        return (
            prefixed("q", self.q.params())
            | prefixed("k", self.k.params())
            | prefixed("v", self.v.params())
            | prefixed("out", self.out.params())
            | prefixed("norm", self.norm.params())
        )


class SignalAutoencoder:
    """Window (C, S) <-> latent sequence (T, D)."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        cfg = config.validate()
        self.config = cfg
        self.temporal = TemporalBlock(rng, cfg.samples, cfg.temporal_dim)
        self.spatial = [SpatialBlock(rng, cfg.temporal_dim, cfg.heads) for _ in range(cfg.depth)]
        self.enc_tokens = Linear(rng, cfg.channels, cfg.latent_tokens, bias=False)
        self.enc_feat = Linear(rng, cfg.temporal_dim, cfg.latent_dim)
        self.dec_feat = Linear(rng, cfg.latent_dim, cfg.temporal_dim)
        self.dec_tokens = Linear(rng, cfg.latent_tokens, cfg.channels, bias=False)
        self.dec_head = Linear(rng, cfg.temporal_dim, cfg.samples)

    # -- forward -----------------------------------------------------------

    def encode_batch(self, x, training: bool = False) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[1:] != (self.config.channels, self.config.samples):
            raise ShapeError(
                f"encode expects (batch, {self.config.channels}, {self.config.samples}), got {x.shape}"
            )
        h = self.temporal(x, training)
        for block in self.spatial:
            h = block(h)
        mixed = self.enc_tokens(h.transpose(0, 2, 1))  # (B, temporal_dim, T)
        return self.enc_feat(mixed.transpose(0, 2, 1))  # (B, T, D)

    def decode_batch(self, z) -> Tensor:
        z = ad.as_tensor(z)
        if z.ndim != 3 or z.shape[1:] != (self.config.latent_tokens, self.config.latent_dim):
            raise ShapeError(
                f"decode expects (batch, {self.config.latent_tokens}, {self.config.latent_dim}), got {z.shape}"
            )
        h = self.dec_feat(z)  # (B, T, temporal_dim)
        mixed = self.dec_tokens(h.transpose(0, 2, 1))  # (B, temporal_dim, C)
        return self.dec_head(mixed.transpose(0, 2, 1))  # (B, C, S)

    def encode(self, window) -> np.ndarray:
        """Latent sequence (T, D) for one window (C, S); eval mode."""
        values = getattr(window, "values", window)
        z = self.encode_batch(ad.as_tensor(values).reshape(1, *np.shape(values)))
        return z.data[0]

    def decode(self, latent) -> np.ndarray:
        """Window (C, S) for one latent sequence (T, D); eval mode."""
        latent = np.asarray(latent, dtype=np.float64)
        x = self.decode_batch(ad.Tensor(latent[None]))
        return x.data[0]

    # -- state -------------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out = prefixed("temporal", self.temporal.params())
        for i, block in enumerate(self.spatial):
            out |= prefixed(f"spatial{i}", block.params())
        out |= prefixed("enc_tokens", self.enc_tokens.params())
        out |= prefixed("enc_feat", self.enc_feat.params())
        out |= prefixed("dec_feat", self.dec_feat.params())
        out |= prefixed("dec_tokens", self.dec_tokens.params())
        out |= prefixed("dec_head", self.dec_head.params())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return prefixed("temporal", self.temporal.buffers())

    def state(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.params().items()}
        state |= {name: b.copy() for name, b in self.buffers().items()}
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        assign_state(self.params(), state)
        self.temporal.bn.load_buffers(
            {
                "running_mean": state["temporal.bn.running_mean"],
                "running_var": state["temporal.bn.running_var"],
            }
        )


def mean_pool_latent(latent) -> Tensor:
    """Mean over the token axis: (..., T, D) -> (..., D)."""
    latent = ad.as_tensor(latent)
    if latent.ndim < 2:
        raise ShapeError(f"mean_pool_latent expects at least (T, D), got {latent.shape}")
    return ad.mean(latent, axis=-2)
