"""Three-stage training of the interpretive model on top of a frozen base model.

Each round runs ``push_every`` epochs of prototype-layer optimization, one
projection of the prototypes onto source patches, then ``last_layer_iters``
epochs of head-only optimization. The base model is never modified.
"""
from __future__ import annotations

import copy
import csv
import logging
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .base_model import BaseModel, PseudoLabels, base_from_arrays, base_meta, encode_backbone, pseudo_label
from .calibration import PrototypicalHead, calibration_loss, fidelity_l1, init_head
from .checkpoint import load_archive, save_archive
from .config import TrainConfig
from .datasets import SOURCE, TARGET, Batch, DomainPair, batches
from .errors import TrainingDiverged
from .protolayer import PrototypeBank, Provenance, cluster_cost, min_distances, project_prototypes, \
    separation_cost, similarity

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "stage", "L_Cls", "L_c", "L_s", "L_Fid", "total", "agreement", "acc_hp", "acc_hf")


class BackboneCache:
    """Frozen backbone activations for every sample, plain and mirrored.

    The backbone never changes, so each image is encoded once per flip state.
    """

    def __init__(self, base: BaseModel, pair: DomainPair, flips: bool = True):
        self.pair = pair
        self._feats = {}
        for domain in (SOURCE, TARGET):
            self._feats[domain, False] = encode_backbone(base, pair, domain, flip=False)
            if flips:
                self._feats[domain, True] = encode_backbone(base, pair, domain, flip=True)

    def get(self, domain: str, idx, flip=None) -> torch.Tensor:
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        plain = self._feats[domain, False][idx]
        if flip is None or not np.any(flip):
            return plain
        mirrored = self._feats[domain, True][idx]
        sel = torch.as_tensor(np.asarray(flip, dtype=bool)).reshape(-1, 1, 1, 1)
        return torch.where(sel, mirrored, plain)

    def all(self, domain: str) -> torch.Tensor:
        return self._feats[domain, False]


class InterpretiveModel(nn.Module):
    """Prototype layer plus prototypical head explaining a frozen base model.

    The base model is referenced, not owned: it is kept out of the module
    tree so ``train()``/``parameters()`` never reach it.
    """

    def __init__(self, base: BaseModel, bank: PrototypeBank, head: PrototypicalHead, pseudo: PseudoLabels,
                 cfg: TrainConfig):
        super().__init__()
        object.__setattr__(self, "base", base)
        self.add_on = copy.deepcopy(base.add_on)
        for p in self.add_on.parameters():
            p.requires_grad_(False)
        self.prototypes = nn.Parameter(bank.vectors.detach().clone(), requires_grad=False)
        self.head = head
        for p in self.head.parameters():
            p.requires_grad_(False)
        self.n_classes = bank.n_classes
        self.K = bank.K
        self.provenance: list[Provenance | None] = list(bank.provenance)
        self.pseudo = pseudo
        self.cfg = cfg
        self.log: list[dict] = []
        self.checkpoints: list[dict] = []
        self.epoch = 0
        self.rounds_done = 0
        self._cache: BackboneCache | None = None

    # -- views
    @property
    def bank(self) -> PrototypeBank:
        return PrototypeBank(self.prototypes.detach(), self.n_classes, self.K, self.provenance)

    @property
    def epsilon(self) -> float:
        return self.cfg.epsilon

    def volumes(self, backbone_feats: torch.Tensor) -> torch.Tensor:
        """(N, C, H, W) backbone activations -> (N, H, W, D) feature volumes."""
        z = self.add_on(backbone_feats)
        if self.cfg.feature_activation == "sigmoid":
            z = torch.sigmoid(z)
        return z.permute(0, 2, 3, 1)

    def scores(self, volumes: torch.Tensor):
        dist, _ = min_distances(volumes, self.prototypes)
        return similarity(dist, self.epsilon), dist

    def forward(self, backbone_feats: torch.Tensor) -> torch.Tensor:
        s, _ = self.scores(self.volumes(backbone_feats))
        return self.head(s)

    def cache(self, pair: DomainPair) -> BackboneCache:
        if self._cache is None or self._cache.pair is not pair:
            self._cache = BackboneCache(self.base, pair, flips=self.cfg.flip)
        return self._cache

    @torch.no_grad()
    def encode(self, pair: DomainPair, domain: str) -> torch.Tensor:
        """Canonical (unflipped) feature volumes of a whole domain, (N, H, W, D).

        One sample at a time, like the backbone cache, so values match a
        single-image pass bit for bit.
        """
        feats = self.cache(pair).all(domain)
        return torch.cat([self.volumes(feats[i:i + 1]) for i in range(len(feats))])

    @torch.no_grad()
    def domain_scores(self, pair: DomainPair, domain: str):
        """Similarity scores, min distances and head logits for every sample of a domain."""
        vols = self.encode(pair, domain)
        dist, loc = min_distances(vols, self.prototypes)
        s = similarity(dist, self.epsilon)
        return s, dist, loc, self.head(s)


def _init_bank(pair: DomainPair, vols: torch.Tensor, K: int, seed: int) -> PrototypeBank:
    # random same-class source patches, lightly jittered so duplicates separate
    g = torch.Generator().manual_seed(seed)
    labels = pair.source_labels()
    n, h, w, d = vols.shape
    rows = []
    for k in range(pair.c):
        members = np.flatnonzero(labels == k)
        for _ in range(K):
            i = members[int(torch.randint(len(members), (1,), generator=g))]
            r = int(torch.randint(h, (1,), generator=g))
            c = int(torch.randint(w, (1,), generator=g))
            rows.append(vols[i, r, c])
    vectors = torch.stack(rows)
    scale = float(vols.std()) if vols.numel() > 1 else 1.0
    vectors = vectors + 0.05 * scale * torch.randn(vectors.shape, generator=g, dtype=vectors.dtype)
    return PrototypeBank(vectors, pair.c, K)


def build_model(base: BaseModel, pair: DomainPair, cfg: TrainConfig) -> InterpretiveModel:
    """Fresh interpretive model: cached pseudo-labels, initial bank, head at the +1/-0.5 pattern."""
    if not base.frozen:
        raise ValueError("base model must be frozen")
    torch.manual_seed(cfg.seed)
    pseudo = pseudo_label(base, pair)
    placeholder = PrototypeBank(torch.zeros(pair.c * cfg.K, base.cfg.feature_dim), pair.c, cfg.K)
    model = InterpretiveModel(base, placeholder, init_head(placeholder), pseudo, cfg)
    bank = _init_bank(pair, model.encode(pair, SOURCE), cfg.K, cfg.seed)
    with torch.no_grad():
        model.prototypes.copy_(bank.vectors)
    return model


# ---------------------------------------------------------------- objectives

def _ids(pair: DomainPair, domain: str, idx) -> list[str]:
    samples = pair.domain(domain)
    return [samples[i].id for i in idx]


def prototype_objective(model: InterpretiveModel, pair: DomainPair, batch: Batch, cfg: TrainConfig) -> dict:
    """Loss terms of the prototype stage on one batch (tensors, differentiable).

    ``total = L_Cls + alpha*L_c + beta*L_s + gamma*L_Fid``. Cluster and
    separation terms use source samples only.
    """
    cache = model.cache(pair)
    vs = model.volumes(cache.get(SOURCE, batch.source_idx, batch.source_flip))
    vt = model.volumes(cache.get(TARGET, batch.target_idx, batch.target_flip))
    ss, ds = model.scores(vs)
    st, _ = model.scores(vt)
    ids_s = _ids(pair, SOURCE, batch.source_idx)
    ids_t = _ids(pair, TARGET, batch.target_idx)
    ys = pair.source_labels()[batch.source_idx]

    l_cls = calibration_loss(ss, st, model.head, model.pseudo, ids_s, ids_t,
                             (cfg.cls_source_weight, cfg.cls_target_weight))
    l_c = cluster_cost(ds, ys, model.n_classes, model.K)
    l_s = separation_cost(ds, ys, model.n_classes, model.K)
    q = torch.from_numpy(model.pseudo.soft(ids_t)).to(st.dtype)
    l_fid = fidelity_l1(F.softmax(model.head(st), dim=1), q)
    total = l_cls + cfg.alpha * l_c + cfg.beta * l_s + cfg.gamma * l_fid
    return {"L_Cls": l_cls, "L_c": l_c, "L_s": l_s, "L_Fid": l_fid, "total": total}


def last_layer_objective(head: PrototypicalHead, scores_s, scores_t, pseudo: PseudoLabels, ids_s, ids_t,
                         cfg: TrainConfig) -> dict:
    """``L_Cls + lam * ||W||_1`` for the head-only stage."""
    l_cls = calibration_loss(scores_s, scores_t, head, pseudo, ids_s, ids_t,
                             (cfg.cls_source_weight, cfg.cls_target_weight))
    l1 = head.weight.abs().sum()
    return {"L_Cls": l_cls, "L1": l1, "total": l_cls + cfg.lam * l1}


def _check_finite(value: torch.Tensor, step: int):
    if not torch.isfinite(value):
        raise TrainingDiverged(step, float(value))


def _log_row(model, epoch, stage, parts=None, metrics=None, **extra) -> dict:
    row = {k: None for k in LOG_COLUMNS}
    row.update(epoch=epoch, stage=stage)
    for k, v in (parts or {}).items():
        if k in row:
            row[k] = v
    if metrics:
        row.update(agreement=metrics["agreement"], acc_hp=metrics.get("acc_hp"), acc_hf=metrics.get("acc_hf"))
    row.update(extra)
    model.log.append(row)
    return row


# ---------------------------------------------------------------- stages

def stage_prototypes(model: InterpretiveModel, pair: DomainPair, cfg: TrainConfig, epochs: int) -> InterpretiveModel:
    """Optimize the prototypes (and the add-on copy when ``cfg.train_addon``) with the head fixed."""
    params = [model.prototypes] + (list(model.add_on.parameters()) if cfg.train_addon else [])
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    try:
        for _ in range(epochs):
            model.epoch += 1
            sums, n = {}, 0
            for step, batch in enumerate(batches(pair, cfg.batch_size, cfg.seed, cfg.flip, model.epoch,
                                                 cfg.batch_mix)):
                parts = prototype_objective(model, pair, batch, cfg)
                _check_finite(parts["total"], step)
                opt.zero_grad()
                parts["total"].backward()
                opt.step()
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v.item()
                n += 1
            means = {k: v / n for k, v in sums.items()}
            metrics = evaluate(model, pair)
            row = _log_row(model, model.epoch, "prototypes", means, metrics)
            log.info("epoch %d prototypes: %s", model.epoch, row)
    finally:
        for p in params:
            p.requires_grad_(False)
    return model


def stage_push(model: InterpretiveModel, pair: DomainPair) -> InterpretiveModel:
    """Project every prototype onto its nearest same-class source patch."""
    vols = model.encode(pair, SOURCE)
    labels = pair.source_labels()
    by_class = {}
    for k in range(pair.c):
        members = np.flatnonzero(labels == k)
        by_class[k] = ([pair.source[i].id for i in members], vols[members])
    new_bank, movement = project_prototypes(model.bank, by_class)
    with torch.no_grad():
        model.prototypes.copy_(new_bank.vectors)
    model.provenance = list(new_bank.provenance)
    model.last_push_movement = movement
    _log_row(model, model.epoch, "push", movement=float(movement.sum()))
    return model


def stage_last_layer(model: InterpretiveModel, pair: DomainPair, cfg: TrainConfig) -> InterpretiveModel:
    """Optimize the head alone; prototypes and the add-on copy stay fixed."""
    cache = model.cache(pair)
    with torch.no_grad():
        scored = {}
        for domain in (SOURCE, TARGET):
            for flip in ((False, True) if cfg.flip else (False,)):
                feats = cache.all(domain) if not flip else cache.get(domain, np.arange(len(pair.domain(domain))),
                                                                     np.ones(len(pair.domain(domain)), bool))
                scored[domain, flip] = model.scores(model.volumes(feats))[0]
    ids = {d: [s.id for s in pair.domain(d)] for d in (SOURCE, TARGET)}

    def pick(domain, idx, flip):
        plain = scored[domain, False][idx]
        if not cfg.flip or not np.any(flip):
            return plain
        sel = torch.as_tensor(flip).reshape(-1, 1)
        return torch.where(sel, scored[domain, True][idx], plain)

    w = model.head.weight
    w.requires_grad_(True)
    opt = torch.optim.Adam([w], lr=cfg.lr)
    try:
        for it in range(cfg.last_layer_iters):
            sums, n = {}, 0
            seed_epoch = 100_000 + model.epoch * 1000 + it
            for step, batch in enumerate(batches(pair, cfg.batch_size, cfg.seed, cfg.flip, seed_epoch,
                                                 cfg.batch_mix)):
                ss = pick(SOURCE, batch.source_idx, batch.source_flip)
                st = pick(TARGET, batch.target_idx, batch.target_flip)
                parts = last_layer_objective(model.head, ss, st, model.pseudo,
                                             [ids[SOURCE][i] for i in batch.source_idx],
                                             [ids[TARGET][i] for i in batch.target_idx], cfg)
                _check_finite(parts["total"], step)
                opt.zero_grad()
                parts["total"].backward()
                opt.step()
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v.item()
                n += 1
            means = {k: v / n for k, v in sums.items()}
            _log_row(model, model.epoch, "last_layer", means)
    finally:
        w.requires_grad_(False)
    return model


# ---------------------------------------------------------------- evaluation

@torch.no_grad()
def evaluate(model: InterpretiveModel, pair: DomainPair) -> dict:
    """Agreement, accuracies and mean fidelity L1 of the head against the base classifier.

    Keys without a ``_source`` suffix refer to the target domain. Accuracies
    are ``None`` when held-out target labels are unavailable.
    """
    out = {}
    for domain, suffix in ((TARGET, ""), (SOURCE, "_source")):
        if not pair.domain(domain):
            continue
        _, _, _, logits = model.domain_scores(pair, domain)
        logits = logits.double().numpy()
        pred_hp = np.argmax(logits, axis=1)
        pred_hf, q = model.pseudo.for_domain(domain)
        p = np.exp(logits - logits.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        out["agreement" + suffix] = float(np.mean(pred_hp == pred_hf))
        out["fidelity" + suffix] = float(np.abs(p - q).sum(1).mean())
        truth = None
        if domain == SOURCE:
            truth = pair.source_labels()
        elif pair.has_target_labels:
            truth = pair.eval_target_labels()
        out["acc_hp" + suffix] = float(np.mean(pred_hp == truth)) if truth is not None else None
        out["acc_hf" + suffix] = float(np.mean(pred_hf == truth)) if truth is not None else None
    return out


# ---------------------------------------------------------------- protocol

def run_protocol(base: BaseModel, pair: DomainPair, cfg: TrainConfig, out_dir=None,
                 resume: bool = False) -> InterpretiveModel:
    """Full rotation: ``epochs // push_every`` rounds of prototypes -> push -> last layer.

    With ``out_dir`` a checkpoint is written after every round (``last.npz``
    and ``round_XX.npz``), the best-agreement one is kept as ``best.npz``
    and the training log goes to ``train_log.csv``. ``resume`` continues
    from ``out_dir/last.npz`` when present.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    model = None
    if resume and out_dir is not None and (out_dir / "last.npz").is_file():
        model = load_interp(out_dir / "last.npz")
        object.__setattr__(model, "base", base)
        model.cfg = cfg
    if model is None:
        model = build_model(base, pair, cfg)
    if cfg.epochs == 0:
        warnings.warn("epochs=0: returning the initialized model without any training or projection")
        return model

    rounds = cfg.epochs // cfg.push_every
    best = max((c["agreement"] for c in model.checkpoints), default=-1.0)
    for r in range(model.rounds_done, rounds):
        stage_prototypes(model, pair, cfg, cfg.push_every)
        stage_push(model, pair)
        stage_last_layer(model, pair, cfg)
        model.rounds_done = r + 1
        metrics = evaluate(model, pair)
        metrics.update(round=r + 1, epoch=model.epoch)
        model.checkpoints.append(metrics)
        _log_row(model, model.epoch, "checkpoint", metrics=metrics)
        log.info("round %d: %s", r + 1, metrics)
        if out_dir is not None:
            save_interp(model, out_dir / f"round_{r + 1:02d}.npz")
            save_interp(model, out_dir / "last.npz")
            if metrics["agreement"] > best:
                best = metrics["agreement"]
                save_interp(model, out_dir / "best.npz")
            write_log_csv(model.log, out_dir / "train_log.csv")
    return model


def write_log_csv(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in LOG_COLUMNS})


# ---------------------------------------------------------------- persistence

def save_interp(model: InterpretiveModel, path) -> str:
    arrays = {f"base/{k}": v for k, v in model.base.arrays().items()}
    arrays.update({f"addon/{k}": v.detach().numpy().copy() for k, v in model.add_on.state_dict().items()})
    arrays["prototypes"] = model.prototypes.detach().numpy().copy()
    arrays["head"] = model.head.weight.detach().numpy().copy()
    arrays["pseudo/labels"] = model.pseudo.labels
    arrays["pseudo/probs"] = model.pseudo.probs
    arrays["rng_state"] = torch.get_rng_state().numpy()
    meta = dict(kind="interp", base=base_meta(model.base), config=asdict(model.cfg), n_classes=model.n_classes,
                K=model.K, provenance=model.bank.provenance_records(), log=model.log,
                checkpoints=model.checkpoints, epoch=model.epoch, rounds_done=model.rounds_done,
                pseudo_ids=list(model.pseudo.ids), pseudo_domains=list(model.pseudo.domains))
    return save_archive(path, arrays, meta)


def load_interp(path) -> InterpretiveModel:
    arrays, meta = load_archive(path, "interpretive checkpoint")
    if meta.get("kind") != "interp":
        raise ValueError(f"{path} is not an interpretive-model checkpoint")
    base = base_from_arrays({k: v for k, v in arrays.items() if k.startswith("base/")}, meta["base"], "base/")
    cfg = TrainConfig(**meta["config"])
    bank = PrototypeBank.from_records(torch.from_numpy(arrays["prototypes"]), meta["n_classes"], meta["K"],
                                      meta["provenance"])
    head = PrototypicalHead(bank.n_prototypes, bank.n_classes)
    with torch.no_grad():
        head.weight.copy_(torch.from_numpy(arrays["head"]))
    pseudo = PseudoLabels(tuple(meta["pseudo_ids"]), tuple(meta["pseudo_domains"]), arrays["pseudo/labels"],
                          arrays["pseudo/probs"])
    model = InterpretiveModel(base, bank, head, pseudo, cfg)
    model.add_on.load_state_dict({k[len("addon/"):]: torch.from_numpy(v)
                                  for k, v in arrays.items() if k.startswith("addon/")})
    model.log = list(meta["log"])
    model.checkpoints = list(meta["checkpoints"])
    model.epoch = meta["epoch"]
    model.rounds_done = meta["rounds_done"]
    torch.set_rng_state(torch.from_numpy(arrays["rng_state"]))
    return model
