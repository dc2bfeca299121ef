"""Differentiable operator set and gradient utilities.

Values are ``torch.Tensor`` objects; torch's autograd records the
computation and supplies reverse-mode (and, with ``create_graph``,
second-order) derivatives. This module pins down the operator set the
encoder and losses are allowed to use, validates shapes with readable
errors, and provides a numpy finite-difference oracle for testing.
"""
from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, ShapeError

BN_EPS = 1e-5


def _need_ndim(op, x, ndim, name="input"):
    if x.dim() != ndim:
        raise ShapeError(f"{op}: {name} must be {ndim}-D, got shape {tuple(x.shape)}")


def conv2d(x, kernel, bias=None, padding=1):
    """3x3-style convolution, stride 1, zero padding ``padding``."""
    _need_ndim("conv2d", x, 4)
    _need_ndim("conv2d", kernel, 4, "kernel")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.shape[1]} != kernel in_channels {kernel.shape[1]}"
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(
            f"conv2d: bias shape {tuple(bias.shape)} != ({kernel.shape[0]},)"
        )
    return F.conv2d(x, kernel, bias, stride=1, padding=padding)


def batch_norm(x, gamma, beta):
    """Batch normalization with the current batch's statistics (no running averages)."""
    _need_ndim("batch_norm", x, 4)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm: gamma {tuple(gamma.shape)} / beta {tuple(beta.shape)} "
            f"do not match {c} channels"
        )
    return F.batch_norm(x, None, None, gamma, beta, training=True, eps=BN_EPS)


def relu(x):
    return torch.relu(x)


def max_pool2d(x):
    """2x2 max-pool, stride 2 (floor on odd sizes)."""
    _need_ndim("max_pool2d", x, 4)
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"max_pool2d: spatial dims {tuple(x.shape[2:])} smaller than 2x2")
    return F.max_pool2d(x, 2)


def matmul(a, b):
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def add(a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"add: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None
    return a + b


def scale(x, factor: float):
    return x * factor


def reduce_sum(x, dim=None):
    return x.sum() if dim is None else x.sum(dim)


def reduce_mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim)


def squared_distance(a, b):
    """Pairwise squared Euclidean distance between rows: [M, D] x [C, D] -> [M, C]."""
    _need_ndim("squared_distance", a, 2)
    _need_ndim("squared_distance", b, 2, "second input")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"squared_distance: feature dims differ ({a.shape[1]} vs {b.shape[1]})"
        )
    # explicit difference form; the expanded a^2 - 2ab + b^2 form loses precision
    return (a.unsqueeze(1) - b.unsqueeze(0)).pow(2).sum(-1)


def log_softmax(x):
    return torch.log_softmax(x, dim=-1)


def nll(log_probs, labels):
    """Mean negative log-likelihood of integer ``labels`` under row log-probabilities."""
    _need_ndim("nll", log_probs, 2)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != (log_probs.shape[0],):
        raise ShapeError(
            f"nll: {log_probs.shape[0]} rows but {tuple(labels.shape)} labels"
        )
    return -log_probs.gather(1, labels.unsqueeze(1)).mean()


OPERATORS: dict[str, Callable] = {
    "conv2d": conv2d,
    "batch_norm": batch_norm,
    "relu": relu,
    "max_pool2d": max_pool2d,
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "squared_distance": squared_distance,
    "log_softmax": log_softmax,
    "nll": nll,
}


def forward_op(kind: str, inputs: Sequence[torch.Tensor], **attrs) -> torch.Tensor:
    """Apply operator ``kind`` to ``inputs``; the call is recorded by autograd."""
    try:
        fn = OPERATORS[kind]
    except KeyError:
        raise ContractError(f"unknown operator {kind!r}") from None
    return fn(*inputs, **attrs)


def backward(loss, leaves, create_second_order: bool = False):
    """Gradient of scalar ``loss`` with respect to ``leaves``.

    ``leaves`` may be a sequence (a list is returned) or a mapping (a dict
    with the same keys is returned). With ``create_second_order`` the
    returned gradients stay attached to the graph so they can themselves be
    differentiated; otherwise they are detached constants. Leaves that do
    not influence the loss get zero gradients.
    """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        shape = tuple(loss.shape) if isinstance(loss, torch.Tensor) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    if loss.grad_fn is None and not loss.requires_grad:
        raise ContractError("backward called on a value that was not recorded")

    keys = list(leaves.keys()) if isinstance(leaves, Mapping) else None
    tensors = list(leaves.values()) if keys is not None else list(leaves)
    live = [i for i, t in enumerate(tensors) if t.requires_grad]
    found = torch.autograd.grad(
        loss.reshape(()),
        [tensors[i] for i in live],
        create_graph=create_second_order,
        allow_unused=True,
    ) if live else ()
    grads = [None] * len(tensors)
    for i, g in zip(live, found):
        grads[i] = g
    out = []
    for t, g in zip(tensors, grads):
        if g is None:
            g = torch.zeros_like(t)
        out.append(g if create_second_order else g.detach())
    return dict(zip(keys, out)) if keys is not None else out


def finite_difference_gradient(f, params, epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``params`` (float64)."""
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    p = np.array(params, dtype=np.float64)
    flat = p.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = float(f(p))
        flat[i] = orig - epsilon
        fm = float(f(p))
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * epsilon)
    return grad.reshape(p.shape)
