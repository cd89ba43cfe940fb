"""The proposal-generation network: text encoder, multi-scale visual backbone,
text-conditional feature modulation, and the per-anchor prediction head.

Every feature map is mapped to a shared channel width ``D``; a phrase feature
of the same width is turned into per-channel scale/shift vectors that
modulate all spatial locations before the head emits five values per anchor
(four box offsets and a confidence logit).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InvalidInputError, ShapeError
from .tensor import Tensor


class Module:
    """Lightweight parameter container with dotted-name discovery.

    Tensor attributes requiring gradients are parameters; numpy-array
    attributes are non-trainable buffers (batch-norm statistics). Attribute
    insertion order fixes the checkpoint layout.
    """

    def __init__(self):
        self._training = True

    def _children(self):
        for name, value in self.__dict__.items():
            if isinstance(value, (Module, Tensor, np.ndarray)):
                yield name, value

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in self._children():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, value in self._children():
            key = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_buffers(f"{key}."))
        return out

    def train(self, mode: bool = True):
        self._training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self):
        return self.train(False)

    @property
    def training(self) -> bool:
        return self._training


class ModuleList(Module):
    def __init__(self, items):
        super().__init__()
        for i, item in enumerate(items):
            setattr(self, str(i), item)
        self._n = len(items)

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._n))

    def __getitem__(self, i):
        return getattr(self, str(int(i)))

    def __len__(self):
        return self._n


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = T.parameter(_uniform(rng, (in_dim, out_dim), in_dim))
        self.bias = T.parameter(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int, pad: int,
                 rng: np.random.Generator):
        super().__init__()
        self.weight = T.parameter(_uniform(rng, (k, k, c_in, c_out), c_in * k * k))
        self.bias = T.parameter(np.zeros(c_out))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class BatchNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = T.parameter(np.ones(channels))
        self.beta = T.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=T.default_dtype())
        self.running_var = np.ones(channels, dtype=T.default_dtype())

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self._training,
        )


class ConvBnRelu(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int, pad: int,
                 rng: np.random.Generator):
        super().__init__()
        self.conv = Conv(c_in, c_out, k, stride, pad, rng)
        self.bn = BatchNorm(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


@dataclass(frozen=True)
class ModelConfig:
    """Network dimensions; defaults are the desk-scale configuration."""

    image_size: int = 128
    scales: tuple[int, ...] = (4, 8, 16)  # grid sizes, coarse to fine
    channels: int = 64
    embed_dim: int = 32
    anchors_per_cell: int = 3

    def __post_init__(self):
        if self.channels < 1 or self.embed_dim < 1 or self.anchors_per_cell < 1:
            raise InvalidInputError(f"non-positive model dimensions: {self}")
        scales = self.scales
        if len(scales) < 1 or any(s < 1 for s in scales):
            raise InvalidInputError(f"bad grid sizes {scales}")
        if list(scales) != sorted(scales):
            raise InvalidInputError(f"grid sizes must be ascending, got {scales}")
        for a, b in zip(scales, scales[1:]):
            if b != 2 * a:
                raise InvalidInputError(
                    f"adjacent grids must double ({a} -> {b} in {scales})"
                )
        ratio = self.image_size / scales[-1]
        if ratio < 2 or 2 ** round(math.log2(ratio)) != ratio:
            raise InvalidInputError(
                f"image size {self.image_size} must be a power-of-two multiple "
                f"(>= 2x) of the finest grid {scales[-1]}"
            )

    @property
    def num_stem(self) -> int:
        return round(math.log2(self.image_size / self.scales[-1])) - 1


class TextEncoder(Module):
    """Token embedding, mean pooling, two fully connected layers."""

    def __init__(self, vocab_size: int, embed_dim: int, out_dim: int,
                 rng: np.random.Generator):
        super().__init__()
        self.embed = T.parameter(_uniform(rng, (vocab_size, embed_dim), embed_dim))
        self.fc1 = Linear(embed_dim, out_dim, rng)
        self.fc2 = Linear(out_dim, out_dim, rng)

    def __call__(self, token_ids: list[list[int]]) -> Tensor:
        pooled = T.embedding_bag(self.embed, token_ids)
        return self.fc2(T.relu(self.fc1(pooled)))


class FilmGenerator(Module):
    """Map a phrase feature to tanh-bounded per-channel scale and shift."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.scale_fc = Linear(dim, dim, rng)
        self.shift_fc = Linear(dim, dim, rng)

    def __call__(self, q: Tensor) -> tuple[Tensor, Tensor]:
        return T.tanh(self.scale_fc(q)), T.tanh(self.shift_fc(q))


class ConditioningBlock(Module):
    """Fuse phrase scale/shift into one feature map with a residual path.

    out = relu(bn(conv3x3( relu( in(conv1x1(v * p + q)) + v ) )))
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.f1 = Conv(dim, dim, 1, 1, 0, rng)
        self.f2 = Conv(dim, dim, 3, 1, 1, rng)
        self.f2_bn = BatchNorm(dim)

    def __call__(self, v: Tensor, p: Tensor, q: Tensor) -> Tensor:
        b, d = p.shape
        if v.shape[3] != d:
            raise ShapeError(
                f"feature channels {v.shape} do not match phrase vectors {p.shape}"
            )
        p4 = p.reshape(b, 1, 1, d)
        q4 = q.reshape(b, 1, 1, d)
        modulated = T.instance_norm(self.f1(v * p4 + q4))
        return T.relu(self.f2_bn(self.f2(T.relu(modulated + v))))


class Backbone(Module):
    """Stride-2 convolution chain emitting one map per grid scale.

    A short stem halves the image down to twice the finest grid, then one
    block per scale keeps halving; each map passes through a 1x1 projection
    to the shared channel width.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.channels
        widths = [3]
        for i in range(cfg.num_stem + len(cfg.scales)):
            widths.append(min(d, 12 * 2 ** i))
        self.stem = ModuleList([
            ConvBnRelu(widths[i], widths[i + 1], 3, 2, 1, rng)
            for i in range(cfg.num_stem)
        ])
        n = cfg.num_stem
        self.blocks = ModuleList([
            ConvBnRelu(widths[n + j], widths[n + j + 1], 3, 2, 1, rng)
            for j in range(len(cfg.scales))
        ])
        # One projection per scale, listed in cfg.scales (coarse-first) order;
        # block j produces the grid cfg.scales[-1 - j].
        self.project = ModuleList([
            ConvBnRelu(widths[n + len(cfg.scales) - i], d, 1, 1, 0, rng)
            for i in range(len(cfg.scales))
        ])
        self._num_scales = len(cfg.scales)

    def __call__(self, images: Tensor) -> list[Tensor]:
        x = images
        for layer in self.stem:
            x = layer(x)
        fine_to_coarse = []
        for layer in self.blocks:
            x = layer(x)
            fine_to_coarse.append(x)
        maps = []
        for i in range(self._num_scales):
            maps.append(self.project[i](fine_to_coarse[self._num_scales - 1 - i]))
        return maps


class GroundingHead(Module):
    """Per-scale 1x1 convolution emitting 5 values per anchor, flattened
    scale-major, then row-major over cells, then by prior index."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.convs = ModuleList([
            Conv(cfg.channels, cfg.anchors_per_cell * 5, 1, 1, 0, rng)
            for _ in cfg.scales
        ])
        self._anchors_per_cell = cfg.anchors_per_cell

    def __call__(self, maps: list[Tensor]) -> Tensor:
        a = self._anchors_per_cell
        flat = []
        for conv, v in zip(self.convs, maps):
            out = conv(v)  # (B, g, g, A*5); cells row-major, anchors contiguous
            b, g, _, _ = out.shape
            flat.append(out.reshape(b, g * g * a, 5))
        return T.concat(flat, axis=1)


class PPGNModel(Module):
    """End-to-end network from (image, phrase) to raw per-anchor predictions."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, seed: int):
        super().__init__()
        if vocab_size < 1:
            raise InvalidInputError("vocabulary must be non-empty")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.text = TextEncoder(vocab_size, cfg.embed_dim, cfg.channels, rng)
        self.film = FilmGenerator(cfg.channels, rng)
        self.backbone = Backbone(cfg, rng)
        self.condition = ModuleList(
            [ConditioningBlock(cfg.channels, rng) for _ in cfg.scales]
        )
        self.head = GroundingHead(cfg, rng)

    def encode_text(self, token_ids: list[int]) -> Tensor:
        """Phrase feature for a single token-id list."""
        self._check_tokens([token_ids])
        return self.text([list(token_ids)]).reshape(-1)

    def _check_tokens(self, token_lists):
        for ids in token_lists:
            if len(ids) == 0:
                raise InvalidInputError("empty phrase")
            for t in ids:
                if not 0 <= t < self.vocab_size:
                    raise InvalidInputError(
                        f"token id {t} outside vocabulary of {self.vocab_size}"
                    )

    def forward(self, images, token_lists: list[list[int]]) -> Tensor:
        """Raw predictions of shape (batch, N, 5); logits are not sigmoided."""
        images = T.as_tensor(images)
        if images.data.ndim != 4 or images.shape[3] != 3:
            raise ShapeError(f"expected (B, H, W, 3) images, got {images.shape}")
        if images.shape[0] != len(token_lists):
            raise ShapeError(
                f"{images.shape[0]} images but {len(token_lists)} phrases"
            )
        self._check_tokens(token_lists)
        q = self.text(token_lists)
        p, s = self.film(q)
        maps = self.backbone(images)
        conditioned = [blk(v, p, s) for blk, v in zip(self.condition, maps)]
        return self.head(conditioned)

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        if expected != set(state):
            missing = expected - set(state)
            extra = set(state) - expected
            raise InvalidInputError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise InvalidInputError(
                    f"shape mismatch for {name}: {p.data.shape} vs {state[name].shape}"
                )
            p.data = state[name].astype(p.data.dtype).copy()
        for name, buf in buffers.items():
            buf[...] = state[name]
