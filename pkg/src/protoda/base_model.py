"""The base domain-adaptation model: a DANN-style network trained with source
cross-entropy plus adversarial domain confusion through a gradient-reversal
layer. After training it is frozen and only ever read.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import content_hash, load_archive, save_archive
from .config import BaseConfig
from .datasets import SOURCE, TARGET, DomainPair, ImageSample, batches
from .errors import BackboneShapeError, CacheMiss, TrainingDiverged

log = logging.getLogger(__name__)


class GradientReversal(torch.autograd.Function):
    """Identity on the forward pass; multiplies gradients by ``-coeff`` on the way back."""

    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = float(coeff)
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.coeff * grad, None


def grad_reverse(x: torch.Tensor, coeff: float = 1.0) -> torch.Tensor:
    return GradientReversal.apply(x, coeff)


def reversal_coefficient(progress: float, max_coeff: float = 1.0, gamma: float = 10.0) -> float:
    """DANN schedule 2/(1+exp(-gamma*p)) - 1, scaled by ``max_coeff``; p in [0, 1]."""
    return max_coeff * (2.0 / (1.0 + math.exp(-gamma * progress)) - 1.0)


def small_backbone() -> nn.Sequential:
    """4 conv blocks, 32x32 input -> 64 x 4 x 4."""
    layers: list[nn.Module] = []
    chans = [3, 32, 64, 64, 64]
    for i in range(4):
        layers += [nn.Conv2d(chans[i], chans[i + 1], 3, padding=1), nn.BatchNorm2d(chans[i + 1]), nn.ReLU(inplace=True)]
        if i < 3:
            layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


def resnet34_backbone(pretrained: bool) -> nn.Sequential:
    import torchvision

    weights = torchvision.models.ResNet34_Weights.IMAGENET1K_V1 if pretrained else None
    net = torchvision.models.resnet34(weights=weights)
    return nn.Sequential(*list(net.children())[:-2])


BACKBONE_CHANNELS = {"small": 64, "resnet34": 512}


def add_on_block(in_ch: int, hidden: int, out_ch: int) -> nn.Sequential:
    """Two 1x1 convolutions reducing backbone channels to the feature depth D."""
    return nn.Sequential(nn.Conv2d(in_ch, hidden, 1), nn.ReLU(inplace=True), nn.Conv2d(hidden, out_ch, 1))


class BaseModel(nn.Module):
    def __init__(self, cfg: BaseConfig, n_classes: int, image_size: int):
        super().__init__()
        self.cfg = cfg
        self.n_classes = n_classes
        self.image_size = image_size
        if cfg.backbone == "small":
            self.backbone = small_backbone()
        else:
            self.backbone = resnet34_backbone(cfg.pretrained)
        d = cfg.feature_dim
        self.add_on = add_on_block(BACKBONE_CHANNELS[cfg.backbone], cfg.addon_hidden, d)
        self.classifier = nn.Linear(d, n_classes)
        self.discriminator = nn.Sequential(
            nn.Linear(d, cfg.discriminator_hidden), nn.ReLU(inplace=True), nn.Linear(cfg.discriminator_hidden, 1))
        self.frozen = False
        self.train_log: list[dict] = []

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """(N, 3, S, S) -> (N, D, H, W)."""
        return self.add_on(self.backbone(x))

    def classify(self, volume: torch.Tensor) -> torch.Tensor:
        return self.classifier(volume.mean(dim=(2, 3)))

    def discriminate(self, volume: torch.Tensor) -> torch.Tensor:
        return self.discriminator(volume.mean(dim=(2, 3))).squeeze(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classify(self.features(x))

    def freeze(self) -> "BaseModel":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    def state_hash(self) -> str:
        return content_hash(self.arrays())

    def _check_input(self, x: torch.Tensor):
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.image_size or x.shape[3] != self.image_size:
            raise BackboneShapeError(
                f"expected (N, 3, {self.image_size}, {self.image_size}) input, got {tuple(x.shape)}")


def _require_frozen(model: BaseModel):
    if not model.frozen:
        raise ValueError("base model must be frozen before inference")


@torch.no_grad()
def extract_features(model: BaseModel, image: ImageSample) -> np.ndarray:
    """Feature volume of one image as an (H, W, D) float32 array."""
    _require_frozen(model)
    x = torch.from_numpy(image.pixels).unsqueeze(0)
    model._check_input(x)
    vol = model.features(x)[0]
    return vol.permute(1, 2, 0).numpy().copy()


@torch.no_grad()
def encode_backbone(model: BaseModel, pair: DomainPair, domain: str, flip: bool = False) -> torch.Tensor:
    """Backbone activations (before the add-on block) for every sample of a domain.

    Samples go through one at a time so every caller sees bit-identical values
    for a given image regardless of batch composition.
    """
    _require_frozen(model)
    samples = pair.domain(domain)
    outs = []
    for i in range(len(samples)):
        x = torch.from_numpy(pair.images(domain, [i], [flip]))
        model._check_input(x)
        outs.append(model.backbone(x))
    return torch.cat(outs) if outs else torch.empty(0)


# ---------------------------------------------------------------- pseudo-labels

def softmax64(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PseudoLabels:
    """Hard labels and softmax references of the frozen base classifier, keyed by sample id.

    Ties in the argmax go to the smallest class index.
    """

    ids: tuple[str, ...]
    domains: tuple[str, ...]
    labels: np.ndarray
    probs: np.ndarray
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {sid: i for i, sid in enumerate(self.ids)}

    @classmethod
    def from_logits(cls, ids, domains, logits) -> "PseudoLabels":
        logits = np.asarray(logits, dtype=np.float64)
        return cls(tuple(ids), tuple(domains), np.argmax(logits, axis=1).astype(np.int64), softmax64(logits))

    def positions(self, ids) -> np.ndarray:
        try:
            return np.array([self._index[i] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise CacheMiss(f"no pseudo-label cached for sample {exc.args[0]!r}") from None

    def hard(self, ids) -> np.ndarray:
        return self.labels[self.positions(ids)]

    def soft(self, ids) -> np.ndarray:
        return self.probs[self.positions(ids)]

    def domain_of(self, ids) -> list[str]:
        return [self.domains[i] for i in self.positions(ids)]

    def for_domain(self, domain: str) -> tuple[np.ndarray, np.ndarray]:
        sel = np.array([d == domain for d in self.domains], dtype=bool)
        return self.labels[sel], self.probs[sel]


@torch.no_grad()
def pseudo_label(model: BaseModel, pair: DomainPair) -> PseudoLabels:
    _require_frozen(model)
    ids, domains, logits = [], [], []
    for domain in (SOURCE, TARGET):
        samples = pair.domain(domain)
        if not samples:
            continue
        vol = model.add_on(encode_backbone(model, pair, domain))
        logits.append(model.classify(vol).double().numpy())
        ids += [s.id for s in samples]
        domains += [domain] * len(samples)
    return PseudoLabels.from_logits(ids, domains, np.concatenate(logits))


# ---------------------------------------------------------------- training

def train_base(pair: DomainPair, cfg: BaseConfig) -> BaseModel:
    """Train the DANN-style base model and return it frozen.

    ``model.train_log`` holds one row per epoch with the mean losses, the
    running source accuracy and, when the target has held-out labels, the
    running target accuracy (reporting only).
    """
    if pair.c < 2:
        raise ValueError("domain adaptation needs at least 2 categories")
    torch.manual_seed(cfg.seed)
    image_size = pair.source[0].size
    model = BaseModel(cfg, pair.c, image_size)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    ys_all = torch.from_numpy(pair.source_labels())
    yt_all = torch.from_numpy(pair.eval_target_labels()) if pair.has_target_labels else None

    n_batches = len(list(batches(pair, cfg.batch_size, cfg.seed, False, 0)))
    total = max(1, cfg.epochs * n_batches)
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        sums = dict(cls=0.0, dom=0.0, n=0, src_ok=0, src_n=0, tgt_ok=0, tgt_n=0)
        for batch in batches(pair, cfg.batch_size, cfg.seed, cfg.flip, epoch):
            xs = torch.from_numpy(batch.source_images(pair))
            xt = torch.from_numpy(batch.target_images(pair))
            ys = ys_all[batch.source_idx]
            vol = model.features(torch.cat([xs, xt]))
            vs, vt = vol[: len(xs)], vol[len(xs):]
            logits_s = model.classify(vs)
            loss_cls = F.cross_entropy(logits_s, ys)
            coeff = reversal_coefficient(step / total, cfg.reversal_max, cfg.reversal_gamma)
            dom_logits = model.discriminate(grad_reverse(vol, coeff))
            dom_labels = torch.cat([torch.ones(len(xs)), torch.zeros(len(xt))])
            loss_dom = F.binary_cross_entropy_with_logits(dom_logits, dom_labels)
            loss = loss_cls + loss_dom
            if not torch.isfinite(loss):
                raise TrainingDiverged(step, float(loss))
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            sums["cls"] += loss_cls.item() * len(xs)
            sums["dom"] += loss_dom.item() * len(xs)
            sums["n"] += len(xs)
            sums["src_ok"] += int((logits_s.argmax(1) == ys).sum())
            sums["src_n"] += len(xs)
            if yt_all is not None:
                with torch.no_grad():
                    pred_t = model.classify(vt).argmax(1)
                sums["tgt_ok"] += int((pred_t == yt_all[batch.target_idx]).sum())
                sums["tgt_n"] += len(xt)
        row = dict(epoch=epoch + 1, loss_cls=sums["cls"] / sums["n"], loss_domain=sums["dom"] / sums["n"],
                   acc_source=sums["src_ok"] / sums["src_n"],
                   acc_target_eval=(sums["tgt_ok"] / sums["tgt_n"]) if sums["tgt_n"] else None)
        model.train_log.append(row)
        log.info("base epoch %d: %s", epoch + 1, row)
    recalibrate_batchnorm(model, pair, cfg.batch_size, cfg.seed)
    return model.freeze()


@torch.no_grad()
def recalibrate_batchnorm(model: BaseModel, pair: DomainPair, batch_size: int, seed: int = 0) -> None:
    """Replace BatchNorm running statistics with exact averages over one pass of
    joint source+target batches.

    The momentum-based running estimates lag behind the weights, and after
    adversarial training the lag is large enough to wreck eval-mode accuracy.
    """
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not norms:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative moving average
    model.train()
    try:
        for batch in batches(pair, batch_size, seed, False, 0):
            model.features(torch.cat([torch.from_numpy(batch.source_images(pair)),
                                      torch.from_numpy(batch.target_images(pair))]))
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom
        model.eval()


@torch.no_grad()
def accuracy(model: BaseModel, pair: DomainPair, domain: str) -> float:
    """Accuracy of the frozen base classifier against true labels (eval only on target)."""
    pl = pseudo_label(model, pair)
    pred, _ = pl.for_domain(domain)
    truth = pair.source_labels() if domain == SOURCE else pair.eval_target_labels()
    return float((pred == truth).mean())


# ---------------------------------------------------------------- persistence

def base_meta(model: BaseModel) -> dict:
    from dataclasses import asdict

    return dict(kind="base", config=asdict(model.cfg), n_classes=model.n_classes,
                image_size=model.image_size, train_log=model.train_log)


def base_from_arrays(arrays: dict[str, np.ndarray], meta: dict, prefix: str = "") -> BaseModel:
    cfg = BaseConfig(**dict(meta["config"], pretrained=False))
    model = BaseModel(cfg, meta["n_classes"], meta["image_size"])
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
    model.load_state_dict(state)
    model.cfg = BaseConfig(**meta["config"])
    model.train_log = list(meta.get("train_log", []))
    return model.freeze()


def save_base(model: BaseModel, path) -> str:
    return save_archive(path, model.arrays(), base_meta(model))


def load_base(path) -> BaseModel:
    arrays, meta = load_archive(path, "base checkpoint")
    if meta.get("kind") != "base":
        raise ValueError(f"{path} is not a base-model checkpoint")
    return base_from_arrays(arrays, meta)
