"""Prototype bank, patch distances, similarity activation, cluster/separation
losses and prototype projection.

Feature volumes are channel-last tensors, (N, H, W, D) or a single (H, W, D).
Prototypes are 1x1xD and stored as a (P, D) matrix with P = c*K.

Tie rule everywhere: among equal minima the first one in row-major order of
(sample, row, col), or of prototype index, wins, and the subgradient of a min
flows to that winner only.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import AssignmentError, DomainError, EmptyClassError, ShapeError

DEFAULT_EPSILON = 1e-4
_CHUNK_ELEMENTS = 1 << 24


@dataclass(frozen=True)
class Provenance:
    sample_id: str
    row: int
    col: int
    distance: float


class PrototypeBank:
    """``c*K`` prototype vectors with a fixed category assignment.

    Prototype ``j`` belongs to category ``j // K``.
    """

    def __init__(self, vectors, n_classes: int, K: int, provenance=None):
        vectors = torch.as_tensor(vectors)
        if vectors.ndim != 2 or vectors.shape[0] != n_classes * K:
            raise AssignmentError(f"expected ({n_classes * K}, D) prototype matrix, got {tuple(vectors.shape)}")
        self.vectors = vectors
        self.n_classes = n_classes
        self.K = K
        self.provenance: list[Provenance | None] = list(provenance) if provenance is not None else [None] * len(vectors)
        if len(self.provenance) != len(vectors):
            raise AssignmentError("provenance length differs from the number of prototypes")

    @property
    def assignment(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_classes), self.K)

    @property
    def n_prototypes(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def of_class(self, k: int) -> np.ndarray:
        if not 0 <= k < self.n_classes:
            raise AssignmentError(f"category {k} has no prototypes")
        return np.arange(k * self.K, (k + 1) * self.K)

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.vectors.detach().clone(), self.n_classes, self.K, self.provenance)

    @classmethod
    def random(cls, n_classes: int, K: int, dim: int, seed: int = 0, dtype=torch.float32) -> "PrototypeBank":
        g = torch.Generator().manual_seed(seed)
        return cls(torch.rand(n_classes * K, dim, generator=g, dtype=dtype), n_classes, K)

    def provenance_records(self) -> list[dict | None]:
        return [asdict(p) if p is not None else None for p in self.provenance]

    @classmethod
    def from_records(cls, vectors, n_classes, K, records) -> "PrototypeBank":
        prov = [Provenance(**r) if r is not None else None for r in records]
        return cls(torch.as_tensor(vectors), n_classes, K, prov)


def _as_batch(volumes) -> tuple[torch.Tensor, bool]:
    v = torch.as_tensor(volumes)
    if v.ndim == 3:
        return v.unsqueeze(0), True
    if v.ndim != 4:
        raise ShapeError(f"feature volume must be (H, W, D) or (N, H, W, D), got {tuple(v.shape)}")
    return v, False


def _prototype_matrix(bank) -> torch.Tensor:
    return bank.vectors if isinstance(bank, PrototypeBank) else torch.as_tensor(bank)


def patch_distances(volumes, prototypes) -> torch.Tensor:
    """Squared L2 distance of every patch to every prototype: (N, H*W, P).

    Computed from explicit differences so that a prototype equal to a patch
    yields exactly 0.
    """
    v, _ = _as_batch(volumes)
    p = torch.as_tensor(prototypes)
    if v.shape[-1] != p.shape[-1]:
        raise ShapeError(f"volume depth {v.shape[-1]} != prototype depth {p.shape[-1]}")
    z = v.reshape(v.shape[0], -1, v.shape[-1])
    per_proto = max(1, z.shape[0] * z.shape[1] * z.shape[2])
    chunk = max(1, _CHUNK_ELEMENTS // per_proto)
    parts = []
    for start in range(0, p.shape[0], chunk):
        diff = z.unsqueeze(2) - p[start:start + chunk].unsqueeze(0).unsqueeze(0)
        # accumulate channel by channel: a vectorized sum rounds differently
        # depending on tensor shape, and values must not depend on N or P
        acc = diff[..., 0] * diff[..., 0]
        for k in range(1, diff.shape[-1]):
            acc = acc + diff[..., k] * diff[..., k]
        parts.append(acc)
    return torch.cat(parts, dim=2)


def first_min(x: torch.Tensor, dim: int, mask: torch.Tensor | None = None):
    """Min along ``dim`` with first-index tie breaking; gradient reaches the winner only.

    Entries where ``mask`` is False are excluded.
    """
    if mask is not None:
        x_masked = torch.where(mask, x, torch.full_like(x, float("inf")))
    else:
        x_masked = x
    best = x_masked.detach().min(dim=dim, keepdim=True).values
    n = x.shape[dim]
    shape = [1] * x.ndim
    shape[dim] = n
    pos = torch.arange(n, device=x.device).reshape(shape).expand_as(x)
    hit = x_masked.detach() == best
    idx = torch.where(hit, pos, torch.full_like(pos, n)).min(dim=dim, keepdim=True).values
    return x.gather(dim, idx).squeeze(dim), idx.squeeze(dim)


def min_distances(volumes, bank):
    """Per prototype, the minimum squared distance over all patches.

    Returns ``(dist, loc)``: dist is (N, P) (or (P,) for a single volume) and
    loc holds the (row, col) of the winning patch, shape (..., P, 2).
    """
    v, single = _as_batch(volumes)
    d = patch_distances(v, _prototype_matrix(bank))
    dist, flat = first_min(d, dim=1)
    width = v.shape[2]
    loc = torch.stack([flat // width, flat % width], dim=-1)
    if single:
        return dist[0], loc[0]
    return dist, loc


def similarity(dist2, epsilon: float = DEFAULT_EPSILON):
    """log((d + 1) / (d + epsilon)); positive and strictly decreasing in d >= 0."""
    if isinstance(dist2, torch.Tensor):
        if (dist2.detach() < 0).any():
            raise DomainError("squared distances must be non-negative")
        return torch.log((dist2 + 1.0) / (dist2 + epsilon))
    d = np.asarray(dist2, dtype=np.float64)
    if (d < 0).any():
        raise DomainError("squared distances must be non-negative")
    out = np.log((d + 1.0) / (d + epsilon))
    return float(out) if out.ndim == 0 else out


def _labels(labels, n: int) -> torch.Tensor:
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {tuple(y.shape)}")
    return y


def _own_mask(dist: torch.Tensor, labels, n_classes: int, K: int) -> torch.Tensor:
    y = _labels(labels, dist.shape[0])
    if (y < 0).any() or (y >= n_classes).any():
        raise AssignmentError("a label refers to a category with zero prototypes")
    assignment = torch.arange(n_classes).repeat_interleave(K)
    return assignment.unsqueeze(0) == y.unsqueeze(1)


def cluster_cost(dist: torch.Tensor, labels, n_classes: int, K: int) -> torch.Tensor:
    """Mean over samples of the min distance to an own-class prototype, from (N, P) min distances."""
    own = _own_mask(dist, labels, n_classes, K)
    vals, _ = first_min(dist, dim=1, mask=own)
    return vals.mean()


def separation_cost(dist: torch.Tensor, labels, n_classes: int, K: int) -> torch.Tensor:
    """Negated mean over samples of the min distance to any wrong-class prototype."""
    if n_classes < 2:
        raise AssignmentError("separation needs at least 2 categories")
    own = _own_mask(dist, labels, n_classes, K)
    vals, _ = first_min(dist, dim=1, mask=~own)
    return -vals.mean()


def cluster_loss(volumes, labels, bank: PrototypeBank) -> torch.Tensor:
    """Cluster loss over a batch of labeled source volumes; >= 0."""
    dist, _ = min_distances(_as_batch(volumes)[0], bank)
    return cluster_cost(dist, labels, bank.n_classes, bank.K)


def separation_loss(volumes, labels, bank: PrototypeBank) -> torch.Tensor:
    """Separation loss over a batch of labeled source volumes; <= 0."""
    dist, _ = min_distances(_as_batch(volumes)[0], bank)
    return separation_cost(dist, labels, bank.n_classes, bank.K)


@torch.no_grad()
def project_prototypes(bank: PrototypeBank, source_volumes_by_class: dict):
    """Replace each prototype by its nearest latent patch among the source
    samples of its own category.

    ``source_volumes_by_class`` maps category index -> ``(sample_ids, volumes)``
    with volumes shaped (N, H, W, D). Returns ``(new_bank, movement)`` where
    movement is the L2 distance each prototype travelled. The input bank is
    left untouched.
    """
    vectors = bank.vectors.detach().clone()
    provenance = list(bank.provenance)
    movement = np.zeros(bank.n_prototypes)
    for k in range(bank.n_classes):
        entry = source_volumes_by_class.get(k)
        if entry is None or len(entry[0]) == 0:
            raise EmptyClassError(f"category {k} has no source samples to project onto")
        ids, vols = entry
        vols, _ = _as_batch(vols)
        if vols.shape[-1] != bank.dim:
            raise ShapeError(f"volume depth {vols.shape[-1]} != prototype depth {bank.dim}")
        n, h, w, dim = vols.shape
        patches = vols.reshape(n * h * w, dim).to(vectors.dtype)
        for j in bank.of_class(k):
            diff = patches - vectors[j]
            d = (diff * diff).sum(-1)
            dist, flat = first_min(d, dim=0)
            flat = int(flat)
            s, rem = divmod(flat, h * w)
            row, col = divmod(rem, w)
            new = patches[flat].clone()
            movement[j] = float(torch.linalg.vector_norm((new - vectors[j]).double()))
            vectors[j] = new
            provenance[j] = Provenance(str(ids[s]), row, col, float(dist))
    return PrototypeBank(vectors, bank.n_classes, bank.K, provenance), movement
