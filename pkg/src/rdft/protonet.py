"""Prototype classifier: class means, distance softmax, loss and accuracy."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .autodiff import log_softmax, nll, squared_distance
from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class Prototypes:
    vectors: torch.Tensor  # [C, D]
    class_ids: tuple


def compute_prototypes(support_embeddings, support_labels, C: int, class_ids=None) -> Prototypes:
    """Per-class mean of the support embeddings. Class sizes may differ."""
    emb = torch.as_tensor(support_embeddings)
    labels = torch.as_tensor(support_labels, dtype=torch.long)
    if emb.dim() != 2 or labels.shape != (emb.shape[0],):
        raise ShapeError(
            f"compute_prototypes: {tuple(emb.shape)} embeddings vs {tuple(labels.shape)} labels"
        )
    if C < 2:
        raise ContractError(f"need at least 2 classes, got C={C}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"support labels must lie in [0, {C})")
    counts = torch.bincount(labels, minlength=C)
    empty = (counts == 0).nonzero().flatten().tolist()
    if empty:
        raise ContractError(f"class {empty[0]} has no support samples")
    sums = torch.zeros(C, emb.shape[1], dtype=emb.dtype).index_add(0, labels, emb)
    vectors = sums / counts.to(emb.dtype).unsqueeze(1)
    return Prototypes(vectors, tuple(class_ids if class_ids is not None else range(C)))


def classify(query_embeddings, prototypes: Prototypes, distance: str = "squared") -> torch.Tensor:
    """Log-probabilities [M, C] from a softmax over negative distances."""
    q = torch.as_tensor(query_embeddings)
    if q.dim() != 2 or q.shape[1] != prototypes.vectors.shape[1]:
        raise ShapeError(
            f"classify: query {tuple(q.shape)} vs prototypes {tuple(prototypes.vectors.shape)}"
        )
    d = squared_distance(q, prototypes.vectors)
    if distance == "unsquared":
        # epsilon keeps the sqrt gradient finite when a query sits on a prototype
        d = torch.sqrt(d + 1e-12)
    elif distance != "squared":
        raise ContractError(f"unknown distance {distance!r}")
    return log_softmax(-d)


def _check_labels(log_probs, labels):
    labels = torch.as_tensor(labels, dtype=torch.long)
    C = log_probs.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"labels must lie in [0, {C})")
    return labels


def episode_loss(log_probs, labels) -> torch.Tensor:
    """Mean cross-entropy of the true classes."""
    return nll(log_probs, _check_labels(log_probs, labels))


def episode_accuracy(log_probs, labels) -> float:
    labels = _check_labels(log_probs, labels)
    # torch.argmax returns the first maximal index, i.e. lowest class on ties
    pred = torch.argmax(log_probs.detach(), dim=1)
    return float((pred == labels).double().mean())
