"""Noise-prediction networks: a configurable tiny U-Net and a vector MLP.

Parameters live in one flat float64 vector partitioned into named segments,
so optimizer steps, EMA, checkpointing, and finite-difference checks all
operate on plain arrays.  The final output layer of every network is
zero-initialized (so an untrained net predicts zero noise); all other
weights use scaled uniform init from a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError
from .autograd import Tensor, concat, conv2d, dropout, silu, softmax_last, upsample2x


@dataclass(frozen=True)
class NetConfig:
    """U-Net shape: one entry in ``widths`` per resolution level.

    Attention is inserted after the residual blocks of any level whose
    feature-map long side equals an entry of ``attn_resolutions``.
    """

    in_channels: int = 1
    base_size: tuple[int, int] = (8, 8)  # (height, width)
    widths: tuple[int, ...] = (4,)
    blocks_per_level: int = 1
    attn_resolutions: tuple[int, ...] = ()
    temb_dim: int = 8
    dropout: float = 0.0
    norm_groups: int = 8
    heads: int = 1

    def __post_init__(self):
        if len(self.widths) < 1:
            raise DataError("need at least one resolution level")
        if any(w < 1 for w in self.widths):
            raise DataError("channel widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError("dropout must be in [0, 1)")
        h, w = self.base_size
        factor = 2 ** (len(self.widths) - 1)
        if h % factor or w % factor:
            raise DataError(f"base size {self.base_size} not divisible by {factor}")


PROFILES: dict[str, NetConfig] = {
    # both gradcheck profiles stay under 500 parameters while covering every
    # layer type: conv, norm, time injection, down/up sampling, skip concat
    "gradcheck-tiny": NetConfig(
        in_channels=1, base_size=(4, 4), widths=(1, 1), blocks_per_level=1, temb_dim=4, norm_groups=1
    ),
    "gradcheck-tiny-attn": NetConfig(
        in_channels=1,
        base_size=(4, 4),
        widths=(1, 1),
        blocks_per_level=1,
        attn_resolutions=(2,),
        temb_dim=4,
        norm_groups=1,
    ),
    "ci-tiny": NetConfig(
        in_channels=1, base_size=(8, 8), widths=(8, 16), blocks_per_level=1, temb_dim=16
    ),
    "desk-32x16": NetConfig(
        in_channels=3,
        base_size=(16, 32),
        widths=(16, 32),
        blocks_per_level=1,
        attn_resolutions=(16,),
        temb_dim=32,
    ),
    "paper-64x64": NetConfig(
        in_channels=3,
        base_size=(64, 64),
        widths=(128, 128, 256, 256, 512),
        blocks_per_level=2,
        attn_resolutions=(16, 8),
        temb_dim=512,
        dropout=0.1,
        norm_groups=32,
    ),
}


@dataclass
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ParamVector:
    """Flat parameter storage with named, non-overlapping segments."""

    def __init__(self, segments: list[Segment], data: np.ndarray):
        self.segments = segments
        self.by_name = {s.name: s for s in segments}
        self.data = data

    def view(self, name: str) -> np.ndarray:
        seg = self.by_name[name]
        return self.data[seg.offset : seg.offset + seg.size].reshape(seg.shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.segments, self.data.copy())

    def __len__(self) -> int:
        return self.data.size


class _Builder:
    """Collects (name, shape, init) triples during network construction."""

    def __init__(self):
        self.specs: list[tuple[str, tuple[int, ...], str]] = []

    def add(self, name: str, shape: tuple[int, ...], init: str):
        self.specs.append((name, shape, init))

    def materialize(self, seed: int) -> ParamVector:
        rng = np.random.default_rng(seed)
        segments, chunks, offset = [], [], 0
        for name, shape, init in self.specs:
            size = int(np.prod(shape))
            if init == "zero":
                chunk = np.zeros(size)
            elif init == "one":
                chunk = np.ones(size)
            else:  # uniform scaled by fan-in (first dim is fan-out)
                fan_in = size // shape[0] if len(shape) > 1 else shape[0]
                bound = 1.0 / math.sqrt(max(fan_in, 1))
                chunk = rng.uniform(-bound, bound, size)
            segments.append(Segment(name, offset, shape))
            chunks.append(chunk)
            offset += size
        return ParamVector(segments, np.concatenate(chunks))


def _num_groups(channels: int, max_groups: int) -> int:
    g = min(max_groups, channels)
    while channels % g:
        g -= 1
    return g


class _Conv:
    def __init__(self, b: _Builder, name: str, cin: int, cout: int, k: int = 3,
                 stride: int = 1, zero: bool = False):
        self.name, self.stride, self.pad = name, stride, k // 2
        b.add(f"{name}.w", (cout, cin, k, k), "zero" if zero else "uniform")
        b.add(f"{name}.b", (cout,), "zero")

    def __call__(self, get, x: Tensor) -> Tensor:
        return conv2d(x, get(f"{self.name}.w"), get(f"{self.name}.b"), self.stride, self.pad)


class _Linear:
    def __init__(self, b: _Builder, name: str, cin: int, cout: int, zero: bool = False):
        self.name = name
        b.add(f"{name}.w", (cout, cin), "zero" if zero else "uniform")
        b.add(f"{name}.b", (cout,), "zero")

    def __call__(self, get, x: Tensor) -> Tensor:
        return x @ get(f"{self.name}.w").transpose(1, 0) + get(f"{self.name}.b")


class _GroupNorm:
    def __init__(self, b: _Builder, name: str, channels: int, max_groups: int):
        self.name, self.channels = name, channels
        self.groups = _num_groups(channels, max_groups)
        b.add(f"{name}.scale", (channels,), "one")
        b.add(f"{name}.shift", (channels,), "zero")

    def __call__(self, get, x: Tensor) -> Tensor:
        bsz, c, h, w = x.shape
        grouped = x.reshape(bsz, self.groups, (c // self.groups) * h * w)
        mu = grouped.mean(axis=2, keepdims=True)
        centered = grouped - mu
        var = (centered * centered).mean(axis=2, keepdims=True)
        normed = centered * (var + 1e-5) ** -0.5
        normed = normed.reshape(bsz, c, h, w)
        scale = get(f"{self.name}.scale").reshape(1, c, 1, 1)
        shift = get(f"{self.name}.shift").reshape(1, c, 1, 1)
        return normed * scale + shift


class _ResBlock:
    """norm-silu-conv, time injection, norm-silu-dropout-conv, residual."""

    def __init__(self, b: _Builder, name: str, cin: int, cout: int, temb_dim: int,
                 drop: float, max_groups: int):
        self.drop = drop
        self.norm1 = _GroupNorm(b, f"{name}.norm1", cin, max_groups)
        self.conv1 = _Conv(b, f"{name}.conv1", cin, cout)
        self.temb = _Linear(b, f"{name}.temb", temb_dim, cout)
        self.norm2 = _GroupNorm(b, f"{name}.norm2", cout, max_groups)
        self.conv2 = _Conv(b, f"{name}.conv2", cout, cout)
        self.skip = _Conv(b, f"{name}.skip", cin, cout, k=1) if cin != cout else None

    def __call__(self, get, x: Tensor, temb: Tensor, train: bool, rng) -> Tensor:
        h = self.conv1(get, silu(self.norm1(get, x)))
        bsz, cout = temb.shape[0], h.shape[1]
        h = h + self.temb(get, silu(temb)).reshape(bsz, cout, 1, 1)
        h = silu(self.norm2(get, h))
        if train and self.drop > 0.0:
            h = dropout(h, self.drop, rng)
        h = self.conv2(get, h)
        return h + (self.skip(get, x) if self.skip else x)


class _Attention:
    """Softmax self-attention over spatial positions."""

    def __init__(self, b: _Builder, name: str, channels: int, heads: int, max_groups: int):
        if channels % heads:
            raise DataError("attention heads must divide channels")
        self.heads = heads
        self.norm = _GroupNorm(b, f"{name}.norm", channels, max_groups)
        self.q = _Conv(b, f"{name}.q", channels, channels, k=1)
        self.k = _Conv(b, f"{name}.k", channels, channels, k=1)
        self.v = _Conv(b, f"{name}.v", channels, channels, k=1)
        self.proj = _Conv(b, f"{name}.proj", channels, channels, k=1)

    def __call__(self, get, x: Tensor) -> Tensor:
        bsz, c, h, w = x.shape
        hd = c // self.heads
        normed = self.norm(get, x)

        def heads_first(t: Tensor) -> Tensor:
            # (B, C, H, W) -> (B*heads, H*W, C/heads)
            return (
                t.reshape(bsz, self.heads, hd, h * w)
                .transpose(0, 1, 3, 2)
                .reshape(bsz * self.heads, h * w, hd)
            )

        q = heads_first(self.q(get, normed))
        k = heads_first(self.k(get, normed))
        v = heads_first(self.v(get, normed))
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(hd))
        attn = softmax_last(scores)
        out = attn @ v  # (B*heads, HW, hd)
        out = (
            out.reshape(bsz, self.heads, h * w, hd)
            .transpose(0, 1, 3, 2)
            .reshape(bsz, c, h, w)
        )
        return x + self.proj(get, out)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Classic sin/cos positional embedding of integer steps."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


class UNetDenoiser:
    """Config-driven U-Net predicting the corrupting noise of (B, C, H, W) input."""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        b = _Builder()
        g = cfg.norm_groups
        self.time1 = _Linear(b, "time.l1", cfg.temb_dim, cfg.temb_dim)
        self.time2 = _Linear(b, "time.l2", cfg.temb_dim, cfg.temb_dim)
        self.conv_in = _Conv(b, "in", cfg.in_channels, cfg.widths[0])

        sizes = [
            (cfg.base_size[0] >> i, cfg.base_size[1] >> i) for i in range(len(cfg.widths))
        ]
        self._attn_at = [max(s) in cfg.attn_resolutions for s in sizes]

        self.down: list[tuple[list[_ResBlock], _Attention | None, _Conv | None]] = []
        ch = cfg.widths[0]
        for i, width in enumerate(cfg.widths):
            blocks = []
            for j in range(cfg.blocks_per_level):
                blocks.append(
                    _ResBlock(b, f"down.{i}.{j}", ch, width, cfg.temb_dim, cfg.dropout, g)
                )
                ch = width
            attn = _Attention(b, f"down.{i}.attn", ch, cfg.heads, g) if self._attn_at[i] else None
            down = _Conv(b, f"down.{i}.down", ch, ch, stride=2) if i < len(cfg.widths) - 1 else None
            self.down.append((blocks, attn, down))

        self.mid1 = _ResBlock(b, "mid.b1", ch, ch, cfg.temb_dim, cfg.dropout, g)
        self.mid_attn = (
            _Attention(b, "mid.attn", ch, cfg.heads, g) if self._attn_at[-1] else None
        )
        self.mid2 = _ResBlock(b, "mid.b2", ch, ch, cfg.temb_dim, cfg.dropout, g)

        self.up: list[tuple[list[_ResBlock], _Attention | None, _Conv | None]] = []
        for i in reversed(range(len(cfg.widths))):
            width = cfg.widths[i]
            blocks = []
            cin = ch + width  # skip concatenation
            for j in range(cfg.blocks_per_level):
                blocks.append(_ResBlock(b, f"up.{i}.{j}", cin, width, cfg.temb_dim, cfg.dropout, g))
                cin = width
            ch = width
            attn = _Attention(b, f"up.{i}.attn", ch, cfg.heads, g) if self._attn_at[i] else None
            upc = _Conv(b, f"up.{i}.conv", ch, ch) if i > 0 else None
            self.up.append((blocks, attn, upc))

        self.out_norm = _GroupNorm(b, "out.norm", ch, g)
        self.conv_out = _Conv(b, "out.conv", ch, cfg.in_channels, zero=True)
        self._builder = b

    def init_params(self, seed: int = 0) -> ParamVector:
        return self._builder.materialize(seed)

    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape, _ in self._builder.specs)

    def forward(
        self,
        params: ParamVector,
        x: np.ndarray,
        t: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Differentiable forward pass; leaf gradients land on param segments."""
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise DataError(f"input shape {x.shape} does not match config")
        if x.shape[2:] != self.cfg.base_size:
            raise DataError(f"input spatial {x.shape[2:]} != config {self.cfg.base_size}")
        if train and self.cfg.dropout > 0.0 and rng is None:
            raise DataError("training with dropout requires an rng")
        leaves: dict[str, Tensor] = {}

        def get(name: str) -> Tensor:
            if name not in leaves:
                leaves[name] = Tensor(params.view(name))
            return leaves[name]

        self._leaves = leaves
        temb = Tensor(sinusoidal_embedding(t, self.cfg.temb_dim))
        temb = self.time2(get, silu(self.time1(get, temb)))

        h = self.conv_in(get, Tensor(x))
        skips = []
        for blocks, attn, down in self.down:
            for block in blocks:
                h = block(get, h, temb, train, rng)
            if attn:
                h = attn(get, h)
            skips.append(h)
            if down:
                h = down(get, h)
        h = self.mid1(get, h, temb, train, rng)
        if self.mid_attn:
            h = self.mid_attn(get, h)
        h = self.mid2(get, h, temb, train, rng)
        for (blocks, attn, upc), skip in zip(self.up, reversed(skips)):
            h = concat([h, skip], axis=1)
            for block in blocks:
                h = block(get, h, temb, train, rng)
            if attn:
                h = attn(get, h)
            if upc:
                h = upc(get, upsample2x(h))
        return self.conv_out(get, silu(self.out_norm(get, h)))

    def predict(self, params: ParamVector, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Deterministic eval-mode prediction as a plain array."""
        return self.forward(params, x, t, train=False).data

    def collect_grads(self, params: ParamVector) -> np.ndarray:
        """Flatten leaf gradients (post-backward) in segment order."""
        grad = np.zeros_like(params.data)
        for seg in params.segments:
            leaf = self._leaves.get(seg.name)
            if leaf is not None and leaf.grad is not None:
                grad[seg.offset : seg.offset + seg.size] = leaf.grad.ravel()
        return grad


@dataclass(frozen=True)
class VectorNetConfig:
    """MLP denoiser for flat feature vectors (used for low-dimensional targets)."""

    dim: int
    hidden: tuple[int, ...] = (64, 64)
    temb_dim: int = 16


class VectorDenoiser:
    def __init__(self, cfg: VectorNetConfig):
        self.cfg = cfg
        b = _Builder()
        self.time1 = _Linear(b, "time.l1", cfg.temb_dim, cfg.temb_dim)
        self.layers = []
        cin = cfg.dim + cfg.temb_dim
        for i, width in enumerate(cfg.hidden):
            self.layers.append(_Linear(b, f"h{i}", cin, width))
            cin = width
        self.out = _Linear(b, "out", cin, cfg.dim, zero=True)
        self._builder = b

    def init_params(self, seed: int = 0) -> ParamVector:
        return self._builder.materialize(seed)

    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape, _ in self._builder.specs)

    def forward(self, params, x, t, train=False, rng=None) -> Tensor:
        leaves: dict[str, Tensor] = {}

        def get(name: str) -> Tensor:
            if name not in leaves:
                leaves[name] = Tensor(params.view(name))
            return leaves[name]

        self._leaves = leaves
        temb = silu(self.time1(get, Tensor(sinusoidal_embedding(t, self.cfg.temb_dim))))
        h = concat([Tensor(np.asarray(x, dtype=np.float64)), temb], axis=1)
        for layer in self.layers:
            h = silu(layer(get, h))
        return self.out(get, h)

    def predict(self, params, x, t) -> np.ndarray:
        return self.forward(params, x, t).data

    collect_grads = UNetDenoiser.collect_grads
