"""Prototypical classifier head and the losses that tie it to the base classifier:
pseudo-label cross-entropy over both domains and L1 fidelity on the target.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .base_model import PseudoLabels
from .datasets import SOURCE
from .errors import DomainError
from .protolayer import PrototypeBank

OWN_CLASS_WEIGHT = 1.0
OTHER_CLASS_WEIGHT = -0.5


class PrototypicalHead(nn.Module):
    """Linear map from the (N, P) similarity scores to (N, c) class logits, no bias."""

    def __init__(self, n_prototypes: int, n_classes: int, dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(n_prototypes, n_classes, dtype=dtype))

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def forward(self, scores: torch.Tensor) -> torch.Tensor:
        return scores @ self.weight


def init_head(bank: PrototypeBank, dtype=torch.float32) -> PrototypicalHead:
    """1 between a prototype and its own category, -0.5 everywhere else."""
    head = PrototypicalHead(bank.n_prototypes, bank.n_classes, dtype=dtype)
    w = torch.full((bank.n_prototypes, bank.n_classes), OTHER_CLASS_WEIGHT, dtype=dtype)
    w[torch.arange(bank.n_prototypes), torch.as_tensor(bank.assignment)] = OWN_CLASS_WEIGHT
    with torch.no_grad():
        head.weight.copy_(w)
    return head


def calibration_loss(scores_s, scores_t, head: PrototypicalHead, pseudo: PseudoLabels,
                     source_ids, target_ids, weights=(1.0, 1.0)) -> torch.Tensor:
    """Mean cross-entropy against the base model's hard labels on the source
    batch plus the same on the target batch. An empty batch contributes 0.
    """
    total = torch.zeros((), dtype=head.weight.dtype)
    for scores, ids, w in ((scores_s, source_ids, weights[0]), (scores_t, target_ids, weights[1])):
        if len(ids) == 0:
            continue
        y = torch.from_numpy(pseudo.hard(ids))
        total = total + w * F.cross_entropy(head(scores), y)
    return total


def fidelity_l1(probs_p: torch.Tensor, probs_f: torch.Tensor) -> torch.Tensor:
    """Mean L1 distance between two batches of probability vectors; in [0, 2]."""
    return (probs_p - probs_f).abs().sum(dim=1).mean()


def fidelity_loss(scores_t, head: PrototypicalHead, pseudo: PseudoLabels, target_ids) -> torch.Tensor:
    """L1 between the head's softmax and the base softmax, averaged over target samples."""
    if len(target_ids) == 0:
        return torch.zeros((), dtype=head.weight.dtype)
    if any(d == SOURCE for d in pseudo.domain_of(target_ids)):
        raise DomainError("fidelity loss is defined on target samples only")
    q = torch.from_numpy(np.asarray(pseudo.soft(target_ids))).to(head.weight.dtype)
    p = F.softmax(head(scores_t), dim=1)
    return fidelity_l1(p, q)
