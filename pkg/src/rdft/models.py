"""Conv4 embedding network as an explicit, immutable parameter set.

Parameters live in :class:`EncoderParams` rather than an ``nn.Module`` so
inner-loop updates can build new parameter sets that stay differentiable
with respect to the originals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import _binio
from .autodiff import batch_norm, conv2d, max_pool2d, relu
from .errors import ConfigError, ContractError, IngestionError, ShapeError

N_BLOCKS = 4
CHANNELS = 64
KERNEL = 3
FIELDS = ("kernel", "bias", "bn_gamma", "bn_beta")
CHECKPOINT_MAGIC = b"RDFTCKPT"


@dataclass(frozen=True)
class ConvBlockParams:
    kernel: torch.Tensor
    bias: torch.Tensor
    bn_gamma: torch.Tensor
    bn_beta: torch.Tensor

    def __post_init__(self):
        out_c = self.kernel.shape[0]
        if self.kernel.dim() != 4 or tuple(self.kernel.shape[2:]) != (KERNEL, KERNEL):
            raise ShapeError(f"block kernel must be [out, in, 3, 3], got {tuple(self.kernel.shape)}")
        for name in ("bias", "bn_gamma", "bn_beta"):
            if tuple(getattr(self, name).shape) != (out_c,):
                raise ShapeError(f"block {name} must have shape ({out_c},)")


@dataclass(frozen=True)
class EncoderParams:
    blocks: tuple[ConvBlockParams, ...]
    input_shape: tuple[int, int, int]

    def named(self) -> dict[str, torch.Tensor]:
        return {
            f"block{i}.{f}": getattr(b, f)
            for i, b in enumerate(self.blocks)
            for f in FIELDS
        }

    @classmethod
    def from_named(cls, tensors, input_shape) -> "EncoderParams":
        n = len(tensors) // len(FIELDS)
        blocks = []
        for i in range(n):
            try:
                blocks.append(ConvBlockParams(*(tensors[f"block{i}.{f}"] for f in FIELDS)))
            except KeyError as exc:
                raise ContractError(f"missing parameter tensor {exc.args[0]}") from None
        return cls(tuple(blocks), tuple(input_shape))

    @property
    def channels(self) -> int:
        return self.blocks[0].kernel.shape[0]

    @property
    def embed_dim(self) -> int:
        return embed_dim(self.input_shape, len(self.blocks), self.channels)

    def map(self, fn) -> "EncoderParams":
        return EncoderParams.from_named(
            {k: fn(v) for k, v in self.named().items()}, self.input_shape
        )

    def as_leaves(self) -> "EncoderParams":
        """Detached copies that require grad, i.e. fresh differentiation roots."""
        return self.map(lambda t: t.detach().clone().requires_grad_(True))

    def detach(self) -> "EncoderParams":
        return self.map(lambda t: t.detach())

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.named().items()}


def embed_dim(input_shape, n_blocks: int = N_BLOCKS, channels: int = CHANNELS) -> int:
    _, h, w = input_shape
    for _ in range(n_blocks):
        h, w = h // 2, w // 2
    return channels * h * w


def init_encoder(input_shape, rng_seed: int, *, n_blocks: int = N_BLOCKS,
                 channels: int = CHANNELS, dtype=torch.float32) -> EncoderParams:
    """Randomly initialize encoder weights (fan-in scaled uniform kernels).

    Biases and BN shifts start at 0, BN scales at 1. ``n_blocks`` and
    ``channels`` exist for small test encoders; the model proper is 4 x 64.
    """
    c, h, w = (int(v) for v in input_shape)
    need = 2 ** n_blocks
    if c < 1 or h < need or w < need:
        raise ConfigError(
            f"input {tuple(input_shape)} too small for {n_blocks} 2x2 pooling stages; "
            f"mel_bins and frames must be >= {need}"
        )
    rng = np.random.default_rng(rng_seed)
    blocks = []
    in_c = c
    for _ in range(n_blocks):
        fan_in = in_c * KERNEL * KERNEL
        bound = math.sqrt(6.0 / fan_in)
        kernel = rng.uniform(-bound, bound, size=(channels, in_c, KERNEL, KERNEL))
        blocks.append(ConvBlockParams(
            kernel=torch.tensor(kernel, dtype=dtype),
            bias=torch.zeros(channels, dtype=dtype),
            bn_gamma=torch.ones(channels, dtype=dtype),
            bn_beta=torch.zeros(channels, dtype=dtype),
        ))
        in_c = channels
    return EncoderParams(tuple(blocks), (c, h, w))


def encode(params: EncoderParams, batch) -> torch.Tensor:
    """Embed a batch [N, C, H, W] into [N, embed_dim]."""
    x = torch.as_tensor(batch, dtype=params.blocks[0].kernel.dtype)
    if x.dim() != 4 or tuple(x.shape[1:]) != tuple(params.input_shape):
        raise ShapeError(
            f"encode: batch shape {tuple(x.shape)} does not match [N, {params.input_shape}]"
        )
    for b in params.blocks:
        x = max_pool2d(relu(batch_norm(conv2d(x, b.kernel, b.bias), b.bn_gamma, b.bn_beta)))
    return x.flatten(1)


def clone_params(params: EncoderParams) -> EncoderParams:
    # torch.clone copies storage but keeps the autograd link to the source
    return params.map(torch.clone)


def apply_update(params: EncoderParams, grads, lr: float) -> EncoderParams:
    """Gradient step ``p - lr * g`` for every tensor; differentiable if the inputs are."""
    named = params.named()
    missing = [k for k in named if k not in grads]
    if missing:
        raise ContractError(f"no gradient for parameter tensor {missing[0]}")
    return EncoderParams.from_named(
        {k: v - lr * grads[k] for k, v in named.items()}, params.input_shape
    )


def save_checkpoint(path, params: EncoderParams, extra=None, meta=None) -> None:
    tensors = {f"encoder.{k}": v for k, v in params.numpy().items()}
    for k, v in (extra or {}).items():
        tensors[k] = np.asarray(v)
    header = {"input_shape": list(params.input_shape), **(meta or {})}
    Path(path).write_bytes(_binio.dumps(CHECKPOINT_MAGIC, header, tensors))


def load_checkpoint(path, input_shape=None, dtype=torch.float32):
    """Returns ``(params, extra_tensors, meta)``; validates ``input_shape`` if given."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    meta, tensors = _binio.loads(CHECKPOINT_MAGIC, data)
    stored = tuple(meta["input_shape"])
    if input_shape is not None and tuple(input_shape) != stored:
        raise ShapeError(f"checkpoint input shape {stored} != configured {tuple(input_shape)}")
    enc = {k[len("encoder."):]: torch.tensor(v, dtype=dtype)
           for k, v in tensors.items() if k.startswith("encoder.")}
    extra = {k: v for k, v in tensors.items() if not k.startswith("encoder.")}
    params = EncoderParams.from_named(enc, stored)
    if params.blocks[0].kernel.shape[1] != stored[0]:
        raise ShapeError("checkpoint first-block kernel does not match input channels")
    return params, extra, meta
