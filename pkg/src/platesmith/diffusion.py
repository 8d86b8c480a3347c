"""Diffusion process mathematics and the training loop around it.

Forward corruption, the noise-prediction objective, ancestral sampling,
the warmup+cosine learning-rate schedule, and parameter EMA.  Defaults
follow the standard recipe: T=1000 with a linear beta ramp 1e-4 to 0.02
and sampling variance sigma_t = sqrt(beta_t), all configurable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DataError, NumericsError
from .nn.denoiser import NetConfig, ParamVector, Segment, UNetDenoiser
from .nn.optim import AdamWState, adamw_step

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step corruption variances and their running products."""

    beta: np.ndarray  # beta_1..beta_T at indices 0..T-1
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.beta)

    def at(self, t: int | np.ndarray):
        """Schedule entries for 1-based step index/indices."""
        idx = np.asarray(t) - 1
        if (np.asarray(t) < 1).any() or (np.asarray(t) > self.steps).any():
            raise DataError(f"step index out of range 1..{self.steps}")
        return self.beta[idx], self.alpha[idx], self.alpha_bar[idx], self.sigma[idx]


def make_schedule(
    steps: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linear beta schedule; sigma_t defaults to sqrt(beta_t)."""
    if steps < 1:
        raise DataError("schedule needs at least one step")
    if not (np.isfinite(beta_start) and np.isfinite(beta_end)):
        raise NumericsError("beta bounds must be finite")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DataError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, steps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=np.sqrt(beta))


@dataclass(frozen=True)
class DiffusionSample:
    """One corruption draw: clean data, step, noise, and the corrupted tensor."""

    x0: np.ndarray
    t: int
    eps: np.ndarray
    xt: np.ndarray

    def __post_init__(self):
        if not (self.x0.shape == self.eps.shape == self.xt.shape):
            raise DataError("x0/eps/xt must share one shape")


def forward_sample(
    x0: np.ndarray, t: int | np.ndarray, eps: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    """Closed-form forward marginal: sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    if x0.shape != eps.shape:
        raise DataError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    _, _, abar, _ = sched.at(t)
    abar = np.asarray(abar)
    if abar.ndim:  # per-element t: broadcast over trailing dims
        abar = abar.reshape(abar.shape + (1,) * (x0.ndim - 1))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def training_loss(
    denoiser: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x0: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
    sched: NoiseSchedule,
) -> float:
    """Mean squared error between true and predicted noise over the batch."""
    if len(x0) == 0:
        raise DataError("empty training batch")
    xt = forward_sample(x0, t, eps, sched)
    pred = denoiser(xt, t)
    loss = float(((eps - pred) ** 2).mean())
    if not np.isfinite(loss):
        raise NumericsError("non-finite training loss")
    return loss


def ancestral_step(
    xt: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    z: np.ndarray | float,
    sched: NoiseSchedule,
) -> np.ndarray:
    """One reverse step from x_t to x_{t-1} given predicted noise."""
    beta, alpha, abar, sigma = sched.at(t)
    if t == 1:
        z = 0.0
    mean = (xt - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    return mean + sigma * z


def sample_loop(
    denoiser: Callable[[np.ndarray, np.ndarray], np.ndarray],
    sched: NoiseSchedule,
    shape: tuple[int, ...],
    rng: np.random.Generator,
    clamp: bool = True,
) -> np.ndarray:
    """Full ancestral sampling chain from pure noise.

    For image data the result is clamped to [-1, 1] (pass through
    ``to_uint8`` for pixels); disable clamping for unbounded targets.
    """
    if any(s <= 0 for s in shape):
        raise DataError(f"invalid sample shape {shape}")
    x = rng.standard_normal(shape)
    batch = shape[0]
    for t in range(sched.steps, 0, -1):
        eps_hat = denoiser(x, np.full(batch, t))
        z = rng.standard_normal(shape) if t > 1 else 0.0
        x = ancestral_step(x, t, eps_hat, z, sched)
        if not np.isfinite(x).all():
            raise NumericsError(f"non-finite sample values at step {t}")
    return np.clip(x, -1.0, 1.0) if clamp else x


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Map [-1, 1] samples to 8-bit pixel values."""
    return np.clip(np.rint((x + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(data: np.ndarray) -> np.ndarray:
    """Map 8-bit pixels into the [-1, 1] range the diffusion operates on."""
    return data.astype(np.float64) / 127.5 - 1.0


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 1e-4
    warmup_steps: int = 5000
    total_steps: int = 100_000
    ema_decay: float = 0.9999
    dropout: float = 0.1
    epochs: int = 100
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.warmup_steps >= self.total_steps:
            raise DataError("warmup must be shorter than the total step budget")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise DataError("EMA decay must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError("dropout must lie in [0, 1)")


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to base LR, then cosine decay to zero at total_steps."""
    if step < 0 or step > cfg.total_steps:
        raise DataError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps if cfg.warmup_steps else cfg.base_lr
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def ema_update(ema: np.ndarray, current: np.ndarray, decay: float) -> np.ndarray:
    """Exponential moving average: decay keeps the old value."""
    if ema.shape != current.shape:
        raise DataError("EMA/parameter length mismatch")
    return decay * ema + (1.0 - decay) * current


@dataclass
class TrainResult:
    params: ParamVector
    ema_params: ParamVector
    losses: list[float] = field(default_factory=list)
    steps: int = 0


def train_denoiser(
    net,
    data: np.ndarray,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    seed: int = 0,
    log_every: int = 0,
    dtype=np.float64,
) -> TrainResult:
    """Train a noise predictor on normalized data, reproducibly from a seed.

    ``data`` holds training tensors along axis 0, already mapped to [-1, 1].
    One "step" consumes one batch sampled with replacement; EMA tracks the
    raw parameters throughout.  ``dtype`` selects the forward/backward
    compute precision; parameters and optimizer state stay float64.
    """
    from .nn.autograd import compute_dtype

    if len(data) == 0:
        raise DataError("no training data")
    rng = np.random.default_rng(seed)
    params = net.init_params(seed=seed)
    ema = params.copy()
    opt = AdamWState.zeros(len(params))
    result = TrainResult(params=params, ema_params=ema)
    for step in range(1, cfg.total_steps + 1):
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        x0 = data[idx]
        t = rng.integers(1, sched.steps + 1, size=cfg.batch_size)
        eps = rng.standard_normal(x0.shape)
        with compute_dtype(dtype):
            loss, grads = loss_and_grad(net, params, x0, t, eps, sched, rng)
        params.data = adamw_step(
            opt, params.data, grads.astype(np.float64), lr_at_step(step, cfg), cfg.weight_decay
        )
        ema.data = ema_update(ema.data, params.data, cfg.ema_decay)
        result.losses.append(loss)
        result.steps = step
        if log_every and step % log_every == 0:
            recent = np.mean(result.losses[-log_every:])
            print(f"step {step:6d}  loss {recent:.4f}  lr {lr_at_step(step, cfg):.2e}")
    return result


def loss_and_grad(
    net,
    params: ParamVector,
    x0: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray]:
    """Differentiable version of ``training_loss`` for one network batch."""
    from .nn.autograd import Tensor

    xt = forward_sample(x0, t, eps, sched)
    out = net.forward(params, xt, t, train=True, rng=rng)
    diff = Tensor(eps) - out
    loss = (diff * diff).mean()
    if not np.isfinite(loss.data):
        raise NumericsError("non-finite training loss")
    loss.backward()
    grads = net.collect_grads(params)
    if not np.isfinite(grads).all():
        raise NumericsError("non-finite gradient")
    return float(loss.data), grads


# --- checkpoint container ----------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    net_config: NetConfig,
    sched: NoiseSchedule,
    params: ParamVector,
    ema_params: ParamVector,
    step: int,
    rng_state: dict | None = None,
) -> None:
    """Versioned npz container with config, schedule, params, EMA, rng state."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "net_config": {
            "in_channels": net_config.in_channels,
            "base_size": list(net_config.base_size),
            "widths": list(net_config.widths),
            "blocks_per_level": net_config.blocks_per_level,
            "attn_resolutions": list(net_config.attn_resolutions),
            "temb_dim": net_config.temb_dim,
            "dropout": net_config.dropout,
            "norm_groups": net_config.norm_groups,
            "heads": net_config.heads,
        },
        "segments": [[s.name, s.offset, list(s.shape)] for s in params.segments],
        "step": step,
        "rng_state": rng_state,
    }
    np.savez(
        path,
        meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        beta=sched.beta,
        params=params.data,
        ema_params=ema_params.data,
    )


def load_checkpoint(path):
    """Returns (net_config, schedule, params, ema_params, step, rng_state)."""
    try:
        with np.load(path) as blob:
            meta = json.loads(bytes(blob["meta"]).decode())
            beta = blob["beta"]
            raw = blob["params"]
            ema = blob["ema_params"]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {meta.get('version')}")
    nc = meta["net_config"]
    net_config = NetConfig(
        in_channels=nc["in_channels"],
        base_size=tuple(nc["base_size"]),
        widths=tuple(nc["widths"]),
        blocks_per_level=nc["blocks_per_level"],
        attn_resolutions=tuple(nc["attn_resolutions"]),
        temb_dim=nc["temb_dim"],
        dropout=nc["dropout"],
        norm_groups=nc["norm_groups"],
        heads=nc["heads"],
    )
    alpha = 1.0 - beta
    sched = NoiseSchedule(
        beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha), sigma=np.sqrt(beta)
    )
    segments = [Segment(name, offset, tuple(shape)) for name, offset, shape in meta["segments"]]
    params = ParamVector(segments, raw)
    ema_params = ParamVector(segments, ema)
    return net_config, sched, params, ema_params, meta["step"], meta.get("rng_state")
