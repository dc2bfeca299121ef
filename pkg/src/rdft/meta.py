"""Episodic fine-tuning of prototype networks inside MAML / Meta-Curvature.

The inner loop (``rdft_adapt``) fine-tunes a clone of the encoder on the
labeled support set alone: each of the K shots is rotated out in turn as a
one-per-class fake query set, and the remaining K-1 shots act as the
support. The outer loop (``meta_train_step``) evaluates every adapted clone
on its full episode and updates the shared initialization from the summed
losses.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
import torch

from .autodiff import backward
from .episodes import Episode, SHOT_RESTRICTION, flatten_block, rdft_divide
from .errors import ConfigError, ContractError, ShapeError, UnsupportedConfigurationError
from .models import EncoderParams, apply_update, clone_params, encode
from .protonet import classify, compute_prototypes, episode_accuracy, episode_loss

log = logging.getLogger(__name__)

ALGORITHMS = ("protonet", "maml_proto", "mc_proto")


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 0.2
    beta: float = 1e-3
    n: int = 8
    C: int = 5
    K: int = 5
    Q: int = 5
    meta_batch: int = 16
    order: str = "second"
    algorithm: str = "maml_proto"
    distance: str = "squared"
    meta_optimizer: str = "adam"
    finetune: bool = True
    learn_curvature: bool = True
    test_curvature: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.C < 2 or self.K < 1 or self.Q < 1 or self.meta_batch < 1:
            raise ConfigError("C >= 2, K >= 1, Q >= 1 and meta_batch >= 1 are required")
        if self.finetune and self.K < 2:
            raise UnsupportedConfigurationError(f"K={self.K}: {SHOT_RESTRICTION}")
        for name, allowed in (("order", ("first", "second")),
                              ("algorithm", ALGORITHMS),
                              ("distance", ("squared", "unsquared")),
                              ("meta_optimizer", ("sgd", "adam"))):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def replace(self, **changes) -> "MetaConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class EpisodeMetrics:
    episode_id: int
    seed: int
    acc_before: float
    acc_after: Optional[float]
    loss_after: float


# -- Meta-Curvature -----------------------------------------------------------

class CurvatureSet:
    """Curvature matrices per parameter tensor.

    4-D kernels get ``(M_o, M_i, M_f)``, 2-D weights ``(M_o, M_i)``, and 1-D
    tensors a single ``(M_b,)``.
    """

    def __init__(self, entries: dict[str, tuple[torch.Tensor, ...]]):
        self.entries = dict(entries)

    @classmethod
    def identity(cls, params: EncoderParams) -> "CurvatureSet":
        entries = {}
        for name, t in params.named().items():
            if t.dim() == 4:
                sizes = (t.shape[0], t.shape[1], t.shape[2] * t.shape[3])
            else:
                sizes = tuple(t.shape)
            entries[name] = tuple(torch.eye(s, dtype=t.dtype) for s in sizes)
        return cls(entries)

    def named(self) -> dict[str, torch.Tensor]:
        return {f"{k}.M{i}": m for k, ms in self.entries.items() for i, m in enumerate(ms)}

    @classmethod
    def from_named(cls, tensors: dict) -> "CurvatureSet":
        grouped: dict[str, list] = {}
        for key in sorted(tensors, key=lambda k: (k.rsplit(".M", 1)[0], int(k.rsplit(".M", 1)[1]))):
            base = key.rsplit(".M", 1)[0]
            grouped.setdefault(base, []).append(torch.as_tensor(tensors[key]))
        return cls({k: tuple(v) for k, v in grouped.items()})

    def map(self, fn) -> "CurvatureSet":
        return CurvatureSet({k: tuple(fn(m) for m in ms) for k, ms in self.entries.items()})

    def as_leaves(self) -> "CurvatureSet":
        return self.map(lambda m: m.detach().clone().requires_grad_(True))

    def detach(self) -> "CurvatureSet":
        return self.map(lambda m: m.detach())

    def __getitem__(self, name):
        return self.entries[name]


def mc_transform(grad, curvature_entry) -> torch.Tensor:
    """Precondition one gradient tensor with its curvature matrices.

    For a [C_out, C_in, d] gradient the result is the n-mode product chain
    ``G x3 M_f x2 M_i x1 M_o``, i.e.
    ``out[a, b, c] = sum_ijk M_o[a, i] M_i[b, j] M_f[c, k] G[i, j, k]``.
    """
    g = torch.as_tensor(grad)
    mats = tuple(curvature_entry)
    if g.dim() != len(mats):
        raise ShapeError(f"mc_transform: {g.dim()}-mode gradient but {len(mats)} curvature matrices")
    for mode, (m, size) in enumerate(zip(mats, g.shape), 1):
        if tuple(m.shape) != (size, size):
            raise ShapeError(
                f"mc_transform: mode-{mode} matrix is {tuple(m.shape)}, gradient mode has size {size}"
            )
    if g.dim() == 3:
        return torch.einsum("ai,bj,ck,ijk->abc", mats[0], mats[1], mats[2], g)
    if g.dim() == 2:
        return mats[0] @ g @ mats[1].T
    if g.dim() == 1:
        return mats[0] @ g
    raise ShapeError(f"mc_transform: unsupported gradient rank {g.dim()}")


def precondition(grads: dict, curvature: CurvatureSet) -> dict:
    out = {}
    for name, g in grads.items():
        if g.dim() == 4:
            co, ci, h, w = g.shape
            out[name] = mc_transform(g.reshape(co, ci, h * w), curvature[name]).reshape(co, ci, h, w)
        else:
            out[name] = mc_transform(g, curvature[name])
    return out


# -- meta optimizer -----------------------------------------------------------

class MetaOptimizer:
    """SGD or Adam over named tensors, returning new tensors instead of mutating."""

    def __init__(self, kind: str, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown meta optimizer {kind!r}")
        self.kind, self.lr, self.betas, self.eps = kind, lr, betas, eps
        self.t = 0
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}

    def update(self, tensors: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for k, p in tensors.items():
            g = grads[k].detach()
            p = p.detach()
            if self.kind == "sgd":
                out[k] = p - self.lr * g
                continue
            b1, b2 = self.betas
            self.m[k] = b1 * self.m.get(k, torch.zeros_like(g)) + (1 - b1) * g
            self.v[k] = b2 * self.v.get(k, torch.zeros_like(g)) + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1 ** self.t)
            v_hat = self.v[k] / (1 - b2 ** self.t)
            out[k] = p - self.lr * m_hat / (torch.sqrt(v_hat) + self.eps)
        return out


# -- losses ---------------------------------------------------------------------

def block_loss(params: EncoderParams, support, query, distance="squared", with_accuracy=False):
    """Cross-entropy of ``query`` against prototypes of ``support`` (both [C, *, ...]).

    Support and query are embedded in one batch so batch-norm sees a
    single set of statistics.
    """
    xs, ys = flatten_block(support)
    xq, yq = flatten_block(query)
    C = support.shape[0]
    emb = encode(params, np.concatenate([np.asarray(xs), np.asarray(xq)]))
    protos = compute_prototypes(emb[:len(ys)], ys, C)
    logp = classify(emb[len(ys):], protos, distance)
    loss = episode_loss(logp, yq)
    if with_accuracy:
        return loss, episode_accuracy(logp, yq)
    return loss


def post_loss(params: EncoderParams, episode: Episode, distance="squared", with_accuracy=False):
    return block_loss(params, episode.support, episode.query, distance, with_accuracy)


# -- inner loop -----------------------------------------------------------------

def rdft_adapt(params: EncoderParams, support, config: MetaConfig,
               curvature: CurvatureSet | None = None,
               on_update: Callable[[int, int], None] | None = None,
               loss_fn=block_loss) -> EncoderParams:
    """Fine-tune a clone of ``params`` on ``support`` for ``n`` rounds of K rotations.

    Each update is ``p <- p - alpha * g`` (or ``alpha * MC(g)`` when a
    curvature set is given). In second-order mode the result stays
    differentiable with respect to ``params`` (and the curvature).
    ``loss_fn(params, support, query, distance)`` defaults to the prototype
    cross-entropy.
    """
    K = support.shape[1]
    if K < 2:
        raise UnsupportedConfigurationError(f"K={K}: {SHOT_RESTRICTION}")
    second = config.order == "second"
    with torch.enable_grad():
        if any(t.requires_grad for t in params.named().values()):
            adapted = clone_params(params)
        else:
            adapted = params.as_leaves()
        for step in range(config.n):
            for j in range(K):
                sub_support, fake_query = rdft_divide(support, j)
                loss = loss_fn(adapted, sub_support, fake_query, config.distance)
                grads = backward(loss, adapted.named(), create_second_order=second)
                if curvature is not None:
                    grads = precondition(grads, curvature)
                adapted = apply_update(adapted, grads, config.alpha)
                if on_update is not None:
                    on_update(step, j)
    return adapted


# -- outer loop -----------------------------------------------------------------

class StepResult(NamedTuple):
    params: EncoderParams
    curvature: CurvatureSet | None
    loss: float


def meta_train_step(params: EncoderParams, curvature: CurvatureSet | None, episodes,
                    config: MetaConfig, optimizer: MetaOptimizer | None = None,
                    loss_fn=block_loss) -> StepResult:
    """One meta update from the summed post-adaptation losses of ``episodes``."""
    episodes = list(episodes)
    if not episodes:
        raise ContractError("meta_train_step needs at least one episode")
    if config.algorithm == "protonet":
        raise ConfigError("use train_protonet_baseline for the plain ProtoNet algorithm")
    if optimizer is None:
        optimizer = MetaOptimizer(config.meta_optimizer, config.beta)
    use_mc = config.algorithm == "mc_proto"
    if use_mc and curvature is None:
        curvature = CurvatureSet.identity(params)

    theta = params.as_leaves()
    curv = None
    if use_mc:
        curv = curvature.as_leaves() if config.learn_curvature else curvature.detach()

    total = 0
    for ep in episodes:
        adapted = theta
        if config.finetune:
            adapted = rdft_adapt(theta, ep.support, config, curv, loss_fn=loss_fn)
        total = total + loss_fn(adapted, ep.support, ep.query, config.distance)

    leaves = dict(theta.named())
    if curv is not None and config.learn_curvature:
        leaves.update({f"curv.{k}": v for k, v in curv.named().items()})
    grads = backward(total, leaves)
    updated = optimizer.update(leaves, grads)

    new_params = EncoderParams.from_named(
        {k: updated[k] for k in theta.named()}, params.input_shape
    )
    new_curv = curvature
    if curv is not None and config.learn_curvature:
        new_curv = CurvatureSet.from_named(
            {k[len("curv."):]: v for k, v in updated.items() if k.startswith("curv.")}
        )
    return StepResult(new_params, new_curv, float(total.detach()))


def meta_train(params: EncoderParams, curvature: CurvatureSet | None, episode_iter,
               config: MetaConfig, num_updates: int,
               callback: Callable[[int, StepResult], None] | None = None):
    """Run ``num_updates`` meta steps drawing ``meta_batch`` episodes each."""
    optimizer = MetaOptimizer(config.meta_optimizer, config.beta)
    if config.algorithm == "mc_proto" and curvature is None:
        curvature = CurvatureSet.identity(params)
    for i in range(num_updates):
        batch = [next(episode_iter) for _ in range(config.meta_batch)]
        result = meta_train_step(params, curvature, batch, config, optimizer)
        params, curvature = result.params, result.curvature
        if callback is not None:
            callback(i, result)
    return params, curvature


def train_protonet_baseline(params: EncoderParams, episodes, config: MetaConfig,
                            num_episodes: int | None = None,
                            callback: Callable[[int, float], None] | None = None) -> EncoderParams:
    """Plain episodic training: one optimizer step per episode, no inner loop."""
    optimizer = MetaOptimizer(config.meta_optimizer, config.beta)
    for i, ep in enumerate(episodes):
        if num_episodes is not None and i >= num_episodes:
            break
        theta = params.as_leaves()
        loss = post_loss(theta, ep, config.distance)
        grads = backward(loss, theta.named())
        params = EncoderParams.from_named(
            optimizer.update(theta.named(), grads), params.input_shape
        )
        if callback is not None:
            callback(i, float(loss.detach()))
    return params.detach()


# -- evaluation -----------------------------------------------------------------

def evaluate(params: EncoderParams, curvature: CurvatureSet | None, test_episodes,
             with_finetune: bool, config: MetaConfig) -> list[EpisodeMetrics]:
    """Per-episode query accuracy before and (optionally) after RDFT fine-tuning.

    Fine-tuning always starts from the given ``params``; nothing carries over
    between episodes.
    """
    base = params.detach()
    curv = None
    if config.algorithm == "mc_proto" and config.test_curvature and curvature is not None:
        curv = curvature.detach()
    out = []
    for i, ep in enumerate(test_episodes):
        with torch.no_grad():
            loss_b, acc_b = post_loss(base, ep, config.distance, with_accuracy=True)
        acc_a = None
        loss = float(loss_b)
        if with_finetune:
            if ep.shot < 2:
                raise UnsupportedConfigurationError(f"K={ep.shot}: {SHOT_RESTRICTION}")
            adapted = rdft_adapt(base, ep.support, config.replace(order="first"), curv).detach()
            with torch.no_grad():
                loss_a, acc_a = post_loss(adapted, ep, config.distance, with_accuracy=True)
            loss = float(loss_a)
        out.append(EpisodeMetrics(i, ep.seed, acc_b, acc_a, loss))
    return out


@dataclass
class SweepCell:
    alpha: float
    n: int
    acc_before: float
    acc_after: float

    @property
    def delta(self) -> float:
        return self.acc_after - self.acc_before


def finetune_sweep(params: EncoderParams, test_episodes, alphas, step_counts,
                   config: MetaConfig, curvature: CurvatureSet | None = None) -> list[SweepCell]:
    """Mean accuracy change from fine-tuning over an (alpha, n) grid."""
    alphas, step_counts = list(alphas), list(step_counts)
    if not alphas or not step_counts:
        raise ContractError("finetune_sweep needs non-empty alpha and step lists")
    test_episodes = list(test_episodes)
    cells = []
    for a in alphas:
        for n in step_counts:
            cfg = config.replace(alpha=float(a), n=int(n))
            metrics = evaluate(params, curvature, test_episodes, True, cfg)
            before = float(np.mean([m.acc_before for m in metrics]))
            after = float(np.mean([m.acc_after for m in metrics]))
            log.info("sweep alpha=%g n=%d delta=%+.4f", a, n, after - before)
            cells.append(SweepCell(float(a), int(n), before, after))
    return cells
