"""Conditional latent diffusion with velocity prediction.

A variance-preserving schedule, a latent-token condition adapter, a small
two-level denoiser with per-level cross-attention, selective finetuning
(adapter + cross-attention key/value projections only), and a deterministic
guided sampler.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, as_tensor
from .losses import cfg_combine
from .nn import ConfigError, LayerNorm, Linear, assign_state, glorot_uniform, prefixed

ADAPTER_TOKENS = 4


# -- noise schedule ----------------------------------------------------------


@dataclass
class NoiseSchedule:
    """Variance-preserving schedule: alpha_t^2 + sigma_t^2 = 1."""

    alphas: np.ndarray
    sigmas: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.alphas)

    def snr(self, t: int) -> float:
        a, s = float(self.alphas[t]), float(self.sigmas[t])
        return a * a / (s * s)


def build_schedule(steps: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp; alphas strictly decrease, sigmas strictly increase."""
    if steps < 2:
        raise ConfigError(f"schedule needs at least 2 steps, got {steps}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"betas must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, steps)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(alphas=np.sqrt(alpha_bar), sigmas=np.sqrt(1.0 - alpha_bar))


# -- condition adapter -------------------------------------------------------


class ConditionAdapter:
    """Pooled latent (D,) -> 4 condition tokens (4, D).

    Dense expansion to 4 tokens, per-token layer norm, dense output map.
    Also owns the learned null condition used when conditioning is dropped:
    a (latent_tokens + 4, D) parameter spanning the full token sequence.
    """

    def __init__(self, rng: np.random.Generator, latent_dim: int, latent_tokens: int):
        if latent_dim < 2 or latent_tokens < 1:
            raise ConfigError("adapter needs latent_dim >= 2 and latent_tokens >= 1")
        self.latent_dim = latent_dim
        self.fc_in = Linear(rng, latent_dim, ADAPTER_TOKENS * latent_dim)
        self.norm = LayerNorm(latent_dim)
        self.fc_out = Linear(rng, latent_dim, latent_dim)
        self.null_cond = Tensor(
            0.02 * rng.standard_normal((latent_tokens + ADAPTER_TOKENS, latent_dim)),
            requires_grad=True,
        )

    def __call__(self, pooled) -> Tensor:
        pooled = as_tensor(pooled)
        single = pooled.ndim == 1
        if single:
            pooled = pooled.reshape(1, -1)
        if pooled.ndim != 2 or pooled.shape[1] != self.latent_dim:
            raise ShapeError(f"adapter expects (batch, {self.latent_dim}), got {pooled.shape}")
        b = pooled.shape[0]
        h = self.fc_in(pooled).reshape(b, ADAPTER_TOKENS, self.latent_dim)
        out = self.fc_out(self.norm(h))
        return out.reshape(ADAPTER_TOKENS, self.latent_dim) if single else out

    def params(self) -> dict[str, Tensor]:
        return (
            prefixed("fc_in", self.fc_in.params())
            | prefixed("norm", self.norm.params())
            | prefixed("fc_out", self.fc_out.params())
            | {"null_cond": self.null_cond}
        )


def adapt(adapter: ConditionAdapter, pooled) -> Tensor:
    return adapter(pooled)


def build_condition(latent, adapted) -> Tensor:
    """Concatenate latent tokens (.., T, D) with adapter tokens (.., 4, D)."""
    latent, adapted = as_tensor(latent), as_tensor(adapted)
    if (
        latent.ndim != adapted.ndim
        or latent.shape[-1] != adapted.shape[-1]
        or latent.shape[:-2] != adapted.shape[:-2]
    ):
        raise ShapeError(
            f"condition parts disagree: latent {latent.shape} vs adapted {adapted.shape}"
        )
    return ad.concat([latent, adapted], axis=-2)


# -- denoiser ----------------------------------------------------------------


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features (batch, dim) for integer timesteps."""
    if dim % 2 != 0:
        raise ConfigError("timestep embedding dim must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


class Conv3x3:
    """3x3 same-padding convolution as shifted-patch concat + one matmul."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int):
        self.c_in, self.c_out = c_in, c_out
        self.w = Tensor(glorot_uniform(rng, 9 * c_in, c_out, (9 * c_in, c_out)), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"conv expects (batch, {self.c_in}, H, W), got {x.shape}")
        b, _, h, w = x.shape
        padded = ad.pad_last2(x, 1)
        patches = [
            ad.crop_last2(padded, dy, dx, h, w) for dy in range(3) for dx in range(3)
        ]
        stacked = ad.concat(patches, axis=1)  # (B, 9*c_in, H, W)
        tokens = stacked.transpose(0, 2, 3, 1).reshape(b * h * w, 9 * self.c_in)
        y = ad.add(ad.matmul(tokens, self.w), self.b)
        return y.reshape(b, h, w, self.c_out).transpose(0, 3, 1, 2)

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


def avg_pool2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {x.shape}")
    return ad.mean(x.reshape(b, c, h // 2, 2, w // 2, 2), axis=(3, 5))


def upsample2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    tiled = ad.mul(x.reshape(b, c, h, 1, w, 1), Tensor(np.ones((1, 1, 1, 2, 1, 2))))
    return tiled.reshape(b, c, 2 * h, 2 * w)


class CrossAttention:
    """Attend from spatial positions to condition tokens; residual output."""

    def __init__(self, rng: np.random.Generator, channels: int, cond_dim: int, width: int, heads: int):
        if width % heads != 0:
            raise ConfigError(f"attention width {width} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = width // heads
        self.width = width
        self.norm = LayerNorm(channels)
        self.q = Linear(rng, channels, width, bias=False)
        self.k = Linear(rng, cond_dim, width, bias=False)
        self.v = Linear(rng, cond_dim, width, bias=False)
        self.out = Linear(rng, width, channels)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        b, c, h, w = x.shape
        tokens = x.transpose(0, 2, 3, 1).reshape(b, h * w, c)
        q = self._split(self.q(self.norm(tokens)))
        k = self._split(self.k(cond))
        v = self._split(self.v(cond))
        scores = ad.mul(ad.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / np.sqrt(self.head_dim))
        att = ad.matmul(ad.softmax(scores, axis=-1), v)
        merged = att.transpose(0, 2, 1, 3).reshape(b, h * w, self.width)
        y = ad.add(tokens, self.out(merged))
        return y.reshape(b, h, w, c).transpose(0, 3, 1, 2)

    def params(self) -> dict[str, Tensor]:
        return (
            prefixed("norm", self.norm.params())
            | prefixed("q", self.q.params())
            | prefixed("k", self.k.params())
            | prefixed("v", self.v.params())
            | prefixed("out", self.out.params())
        )


@dataclass
class DenoiserConfig:
    cond_dim: int
    grid: tuple[int, int, int] = (4, 8, 8)
    widths: tuple[int, int] = (32, 64)
    attn_width: int = 32
    attn_heads: int = 4
    time_dim: int = 64

    def validate(self) -> "DenoiserConfig":
        if len(self.grid) != 3 or any(d < 1 for d in self.grid):
            raise ConfigError(f"grid must be (channels, H, W), got {self.grid}")
        if self.grid[1] % 2 or self.grid[2] % 2:
            raise ConfigError(f"grid spatial dims must be even, got {self.grid}")
        if len(self.widths) != 2 or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be two positive ints, got {self.widths}")
        if self.time_dim % 2:
            raise ConfigError("time_dim must be even")
        if self.attn_width % self.attn_heads:
            raise ConfigError(f"attn_width {self.attn_width} not divisible by heads {self.attn_heads}")
        if self.cond_dim < 2:
            raise ConfigError("cond_dim must be >= 2")
        return self


class Denoiser:
    """Two-level convolutional velocity predictor with cross-attention."""

    def __init__(self, config: DenoiserConfig, rng: np.random.Generator):
        cfg = config.validate()
        self.config = cfg
        cin = cfg.grid[0]
        w1, w2 = cfg.widths
        self.time_fc1 = Linear(rng, cfg.time_dim, cfg.time_dim)
        self.time_fc2 = Linear(rng, cfg.time_dim, cfg.time_dim)
        self.time_proj1 = Linear(rng, cfg.time_dim, w1)
        self.time_proj2 = Linear(rng, cfg.time_dim, w2)
        self.conv_in = Conv3x3(rng, cin, w1)
        self.enc1 = Conv3x3(rng, w1, w1)
        self.xattn1 = CrossAttention(rng, w1, cfg.cond_dim, cfg.attn_width, cfg.attn_heads)
        self.down = Conv3x3(rng, w1, w2)
        self.mid = Conv3x3(rng, w2, w2)
        self.xattn2 = CrossAttention(rng, w2, cfg.cond_dim, cfg.attn_width, cfg.attn_heads)
        self.up = Conv3x3(rng, w2, w1)
        self.dec1 = Conv3x3(rng, w1, w1)
        self.conv_out = Conv3x3(rng, w1, cin)

    def __call__(self, x_t, t, cond) -> Tensor:
        x_t = as_tensor(x_t)
        if x_t.ndim != 4 or x_t.shape[1:] != self.config.grid:
            raise ShapeError(f"denoiser expects (batch, {self.config.grid}), got {x_t.shape}")
        cond = as_tensor(cond)
        b = x_t.shape[0]
        if cond.ndim == 2:
            cond = ad.mul(cond.reshape(1, *cond.shape), Tensor(np.ones((b, 1, 1))))
        if cond.shape[0] != b or cond.shape[-1] != self.config.cond_dim:
            raise ShapeError(f"condition shape {cond.shape} incompatible with batch {b}")

        emb = timestep_embedding(np.broadcast_to(np.asarray(t), (b,)), self.config.time_dim)
        tf = self.time_fc2(ad.relu(self.time_fc1(Tensor(emb))))
        w1, w2 = self.config.widths

        h = self.conv_in(x_t)
        h = ad.relu(ad.add(h, self.time_proj1(tf).reshape(b, w1, 1, 1)))
        h = ad.relu(self.enc1(h))
        h = self.xattn1(h, cond)
        skip = h
        d = avg_pool2(h)
        d = ad.relu(ad.add(self.down(d), self.time_proj2(tf).reshape(b, w2, 1, 1)))
        d = ad.relu(self.mid(d))
        d = self.xattn2(d, cond)
        u = self.up(upsample2(d))
        h = ad.relu(ad.add(skip, u))
        h = ad.relu(self.dec1(h))
        return self.conv_out(h)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out |= prefixed("time.fc1", self.time_fc1.params())
        out |= prefixed("time.fc2", self.time_fc2.params())
        out |= prefixed("time.proj1", self.time_proj1.params())
        out |= prefixed("time.proj2", self.time_proj2.params())
        out |= prefixed("in", self.conv_in.params())
        out |= prefixed("enc1", self.enc1.params())
        out |= prefixed("xattn1", self.xattn1.params())
        out |= prefixed("down", self.down.params())
        out |= prefixed("mid", self.mid.params())
        out |= prefixed("xattn2", self.xattn2.params())
        out |= prefixed("up", self.up.params())
        out |= prefixed("dec1", self.dec1.params())
        out |= prefixed("out", self.conv_out.params())
        return out


# -- stage-2 model, selective finetuning, training step ----------------------


@dataclass(frozen=True)
class TrainMask:
    """Names of the parameters allowed to update during stage 2."""

    names: tuple[str, ...]

    def __contains__(self, name: str) -> bool:
        return name in set(self.names)


class Stage2Model:
    """Denoiser plus condition adapter with a shared parameter namespace.

    The velocity head is preconditioned with fixed functions of the noise
    level: v_hat = sigma_t * (alpha_t * x_t - N(x_t, t, cond)) where N is the
    raw network.  The alpha*x skip is the optimal unconditional clean-signal
    estimate for a unit-variance latent prior, and the sigma output scale
    shrinks the conditional-vs-unconditional gap as t -> 0, which keeps
    guided sampling stable at large scales.  Both factors are analytic in t,
    so the trainable surface is unchanged.
    """

    def __init__(
        self,
        denoiser_config: DenoiserConfig,
        rng: np.random.Generator,
        latent_tokens: int,
        latent_dim: int,
        schedule: NoiseSchedule,
    ):
        if latent_dim != denoiser_config.cond_dim:
            raise ConfigError(
                f"latent_dim {latent_dim} must equal denoiser cond_dim {denoiser_config.cond_dim}"
            )
        self.latent_tokens = latent_tokens
        self.schedule = schedule
        self.adapter = ConditionAdapter(rng, latent_dim, latent_tokens)
        self.denoiser = Denoiser(denoiser_config, rng)

    def params(self) -> dict[str, Tensor]:
        return prefixed("adapter", self.adapter.params()) | prefixed("unet", self.denoiser.params())

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        assign_state(self.params(), state)

    def null_condition(self, batch: int) -> Tensor:
        null = self.adapter.null_cond
        return ad.mul(null.reshape(1, *null.shape), Tensor(np.ones((batch, 1, 1))))

    def denoise(self, x_t, t, condition=None) -> Tensor:
        x_t = as_tensor(x_t)
        cond = self.null_condition(x_t.shape[0]) if condition is None else condition
        raw = self.denoiser(x_t, t, cond)
        t = np.atleast_1d(np.asarray(t, dtype=int))
        shape = (len(t),) + (1,) * (x_t.ndim - 1)
        alpha = Tensor(self.schedule.alphas[t].reshape(shape))
        sigma = Tensor(self.schedule.sigmas[t].reshape(shape))
        return ad.mul(sigma, ad.sub(ad.mul(alpha, x_t), raw))


def denoise(model: Stage2Model, x_t, t, condition=None) -> Tensor:
    return model.denoise(x_t, t, condition)


def _check_schedule(model: Stage2Model, schedule: NoiseSchedule) -> None:
    own = model.schedule
    if not (np.array_equal(own.alphas, schedule.alphas) and np.array_equal(own.sigmas, schedule.sigmas)):
        raise ConfigError("schedule does not match the one the model was built with")


def selective_finetune_mask(model: Stage2Model) -> TrainMask:
    """Adapter parameters plus cross-attention key/value weights, only."""
    names = []
    for name in model.params():
        if name.startswith("adapter."):
            names.append(name)
        elif ".xattn" in name and name.endswith((".k.w", ".v.w")):
            names.append(name)
    return TrainMask(names=tuple(sorted(names)))


def apply_train_mask(model: Stage2Model, mask: TrainMask) -> dict[str, Tensor]:
    """Freeze everything outside the mask; returns the trainable subset."""
    params = model.params()
    unknown = [n for n in mask.names if n not in params]
    if unknown:
        raise ConfigError(f"mask names absent from model: {unknown}")
    trainable: dict[str, Tensor] = {}
    for name, p in params.items():
        p.requires_grad = name in set(mask.names)
        if p.requires_grad:
            trainable[name] = p
    return trainable


@contextmanager
def frozen(model):
    """Temporarily disable gradient tracking on all model parameters."""
    params = model.params()
    saved = {name: p.requires_grad for name, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        yield
    finally:
        for name, p in params.items():
            p.requires_grad = saved[name]


def class_target_latents(classes: int, grid: tuple[int, int, int], seed: int) -> np.ndarray:
    """Per-class unit-RMS target latents, reproducible from the seed.

    Targets are spatially smooth (a coarse random grid upsampled 4x per
    axis) so they occupy the low-frequency band a small convolutional
    decoder can actually reach.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 8]))
    c, h, w = grid
    bh, bw = max(1, h // 4), max(1, w // 4)
    coarse = rng.standard_normal((classes, c, bh, bw))
    lat = np.repeat(np.repeat(coarse, h // bh, axis=2), w // bw, axis=3)
    rms = np.sqrt((lat * lat).mean(axis=(1, 2, 3), keepdims=True))
    return lat / rms


def stage2_train_step(
    batch: dict,
    model: Stage2Model,
    schedule: NoiseSchedule,
    optimizer,
    rng: np.random.Generator,
    drop_prob: float = 0.1,
    gamma: float = 0.5,
) -> float:
    """One selective-finetuning step; returns the weighted velocity loss.

    ``batch`` carries plain arrays: ``x0`` (B, grid), ``cond`` latent tokens
    (B, T, D), ``pooled`` (B, D).  Per-sample timesteps, noise, and the
    condition-dropout mask all come from ``rng``.
    """
    _check_schedule(model, schedule)
    x0 = np.asarray(batch["x0"], dtype=np.float64)
    cond_lat = np.asarray(batch["cond"], dtype=np.float64)
    pooled = np.asarray(batch["pooled"], dtype=np.float64)
    b = x0.shape[0]

    t = rng.integers(0, schedule.steps, size=b)
    eps = rng.standard_normal(x0.shape)
    drop = rng.random(b) < drop_prob

    alpha = schedule.alphas[t].reshape(b, 1, 1, 1)
    sigma = schedule.sigmas[t].reshape(b, 1, 1, 1)
    x_t = Tensor(alpha * x0 + sigma * eps)
    v_tgt = Tensor(alpha * eps - sigma * x0)

    adapted = model.adapter(Tensor(pooled))
    cond = build_condition(Tensor(cond_lat), adapted)
    keep = Tensor((~drop).astype(np.float64).reshape(b, 1, 1))
    dropped = Tensor(drop.astype(np.float64).reshape(b, 1, 1))
    cond_used = ad.add(ad.mul(cond, keep), ad.mul(model.null_condition(b), dropped))

    pred = model.denoise(x_t, t, cond_used)
    snr = np.clip(alpha**2 / sigma**2, 1e-8, 1e8)
    weights = Tensor(snr ** (-gamma))
    diff = ad.sub(v_tgt, pred)
    loss = ad.mean(ad.mul(weights, ad.mul(diff, diff)))

    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.data)


def sample(
    model: Stage2Model,
    schedule: NoiseSchedule,
    cond_latents,
    scale: float,
    steps: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Deterministic guided sampling from pure noise.

    Runs the reverse process over an evenly spaced descending timestep
    subset, combining unconditional and conditional velocity predictions at
    ``scale``; scale 0 never evaluates the conditional branch, so its output
    is independent of the conditioning inputs.
    """
    _check_schedule(model, schedule)
    cond_latents = np.asarray(cond_latents, dtype=np.float64)
    if cond_latents.ndim != 3:
        raise ShapeError(f"cond_latents must be (batch, T, D), got {cond_latents.shape}")
    total = schedule.steps
    n = total if steps is None else int(steps)
    if not (1 <= n <= total):
        raise ConfigError(f"steps must be in [1, {total}], got {steps}")
    ts = np.round(np.linspace(0, total - 1, n)).astype(int)[::-1]

    b = cond_latents.shape[0]
    grid = model.denoiser.config.grid
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    x = rng.standard_normal((b,) + tuple(grid))

    with frozen(model):
        pooled = cond_latents.mean(axis=1)
        adapted = model.adapter(Tensor(pooled)).data
        cond = np.concatenate([cond_latents, adapted], axis=1)
        scale = float(scale)

        for i, t_cur in enumerate(ts):
            t_arr = np.full(b, t_cur)
            v_u = model.denoise(Tensor(x), t_arr, None).data
            if scale == 0.0:
                v = v_u
            else:
                v_c = model.denoise(Tensor(x), t_arr, Tensor(cond)).data
                v = cfg_combine(v_u, v_c, scale)
            a_cur = float(schedule.alphas[t_cur])
            s_cur = float(schedule.sigmas[t_cur])
            x0_hat = a_cur * x - s_cur * v
            eps_hat = s_cur * x + a_cur * v
            if i + 1 < len(ts):
                t_next = ts[i + 1]
                x = float(schedule.alphas[t_next]) * x0_hat + float(schedule.sigmas[t_next]) * eps_hat
            else:
                x = x0_hat
    return x
