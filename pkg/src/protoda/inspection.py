"""Prototype inspection: rank prototypes by head weight, mask them, sweep
accuracy on both domains as they are removed, and correlate the drops.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .datasets import SOURCE, TARGET, DomainPair
from .trainer import InterpretiveModel, evaluate, run_protocol

ALL_CLASSES = "all"
ZERO_VARIANCE = "zero-variance drops"


def rank_prototypes(model: InterpretiveModel, category: int) -> list[int]:
    """The category's prototype ids by descending head weight to it; ties by id."""
    w = model.head.weight.detach().double().numpy()
    ids = range(category * model.K, (category + 1) * model.K)
    return sorted(ids, key=lambda j: (-w[j, category], j))


@dataclass(frozen=True)
class MaskedView:
    """Read-only view of a model whose head rows for ``masked`` are zeroed."""

    model: InterpretiveModel
    masked: frozenset = frozenset()

    def weight(self) -> np.ndarray:
        w = self.model.head.weight.detach().double().numpy().copy()
        if self.masked:
            w[sorted(self.masked)] = 0.0
        return w

    def logits(self, scores) -> np.ndarray:
        return np.asarray(scores, dtype=np.float64) @ self.weight()

    def predict(self, scores) -> np.ndarray:
        # argmax takes the first maximum, so an all-masked head predicts class 0
        return np.argmax(self.logits(scores), axis=1)


def mask_prototype(model, prototype_id: int) -> MaskedView:
    """Add one prototype to the mask set. Accepts a model or an existing view."""
    view = model if isinstance(model, MaskedView) else MaskedView(model)
    n = view.model.prototypes.shape[0]
    if not 0 <= prototype_id < n:
        raise IndexError(f"prototype id {prototype_id} out of range [0, {n})")
    return MaskedView(view.model, view.masked | {int(prototype_id)})


def mask_prototypes(model, ids) -> MaskedView:
    view = model if isinstance(model, MaskedView) else MaskedView(model)
    for j in ids:
        view = mask_prototype(view, j)
    return view


def _has_zero_variance(x: np.ndarray) -> bool:
    return bool(np.all(x == x[0]))


def spearman(a, b) -> float:
    """Spearman's rho: average ranks for ties, then Pearson correlation.

    Returns NaN when either sequence is constant.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("spearman needs two 1-D sequences of equal length >= 2")
    if _has_zero_variance(a) or _has_zero_variance(b):
        return math.nan
    ra, rb = rankdata(a) - (len(a) + 1) / 2.0, rankdata(b) - (len(b) + 1) / 2.0
    rho = float((ra * rb).sum() / math.sqrt((ra * ra).sum() * (rb * rb).sum()))
    return min(1.0, max(-1.0, rho))


@dataclass
class RemovalStep:
    removed: tuple[int, ...]
    acc_source: float
    acc_target: float


@dataclass
class RemovalCurve:
    scope: str
    cumulative: bool
    steps: list[RemovalStep] = field(default_factory=list)
    spearman: float = math.nan
    spearman_reason: str | None = None

    def drops(self) -> tuple[np.ndarray, np.ndarray]:
        s = np.array([st.acc_source for st in self.steps])
        t = np.array([st.acc_target for st in self.steps])
        return s[:-1] - s[1:], t[:-1] - t[1:]

    def summary(self) -> dict:
        return dict(scope=self.scope, cumulative=self.cumulative, n_steps=len(self.steps) - 1,
                    spearman=None if math.isnan(self.spearman) else self.spearman,
                    spearman_reason=self.spearman_reason)

    def save(self, out_dir, stem: str | None = None) -> dict[str, Path]:
        """Write ``<stem>.csv``, ``<stem>.json`` and ``<stem>.png``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or f"removal_{self.scope}"
        paths = {ext: out_dir / f"{stem}.{ext}" for ext in ("csv", "json", "png")}
        with open(paths["csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "removed_id", "acc_source", "acc_target"])
            for i, st in enumerate(self.steps):
                w.writerow([i, ";".join(map(str, st.removed)), st.acc_source, st.acc_target])
        paths["json"].write_text(json.dumps(self.summary(), indent=1, sort_keys=True))
        self.plot(paths["png"])
        return paths

    def plot(self, path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        x = np.arange(len(self.steps))
        fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
        ax.plot(x, [100 * s.acc_source for s in self.steps], "o-", label="source")
        ax.plot(x, [100 * s.acc_target for s in self.steps], "s-", label="target")
        rho = "n/a" if math.isnan(self.spearman) else f"{self.spearman:.2f}"
        ax.set_title(f"{self.scope} (Spearman {rho})")
        ax.set_xlabel("prototypes removed")
        ax.set_ylabel("accuracy (%)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)


def _scope_index(pair: DomainPair, scope) -> int | None:
    if scope in (None, ALL_CLASSES):
        return None
    return pair.categories.index(scope) if isinstance(scope, str) else int(scope)


def removal_sweep(model: InterpretiveModel, pair: DomainPair, scope=ALL_CLASSES,
                  cumulative: bool = True) -> RemovalCurve:
    """Mask prototypes in rank order and record accuracy on both domains.

    ``scope="all"`` removes, at step t, the rank-t prototype of every category
    and measures overall accuracy. A single category removes its own
    prototypes one per step and measures accuracy on that category's samples.
    With ``cumulative=False`` each step masks only that step's prototypes.
    Target accuracy uses held-out labels (evaluation only).
    """
    k = _scope_index(pair, scope)
    scores = {d: model.domain_scores(pair, d)[0].double().numpy() for d in (SOURCE, TARGET)}
    truth = {SOURCE: pair.source_labels(), TARGET: pair.eval_target_labels()}
    if k is None:
        ranks = [rank_prototypes(model, c) for c in range(pair.c)]
        step_ids = [tuple(r[t] for r in ranks) for t in range(model.K)]
        keep = {d: np.ones(len(truth[d]), dtype=bool) for d in truth}
        name = ALL_CLASSES
    else:
        step_ids = [(j,) for j in rank_prototypes(model, k)]
        keep = {d: truth[d] == k for d in truth}
        name = pair.categories[k]

    def acc(view: MaskedView, domain: str) -> float:
        sel = keep[domain]
        if not sel.any():
            return math.nan
        pred = view.predict(scores[domain][sel])
        return float(np.mean(pred == truth[domain][sel]))

    curve = RemovalCurve(name, cumulative)
    view = MaskedView(model)
    curve.steps.append(RemovalStep((), acc(view, SOURCE), acc(view, TARGET)))
    for ids in step_ids:
        view = mask_prototypes(view if cumulative else MaskedView(model), ids)
        curve.steps.append(RemovalStep(ids, acc(view, SOURCE), acc(view, TARGET)))

    ds, dt = curve.drops()
    if len(ds) < 2 or np.isnan(ds).any() or np.isnan(dt).any():
        curve.spearman, curve.spearman_reason = math.nan, "insufficient steps"
    elif _has_zero_variance(ds) or _has_zero_variance(dt):
        curve.spearman, curve.spearman_reason = math.nan, ZERO_VARIANCE
    else:
        curve.spearman = spearman(ds, dt)
    return curve


def fidelity_ablation(base, pair: DomainPair, cfg, out_dir=None) -> dict:
    """Train with the configured fidelity weight and with it set to 0 (same seed),
    then evaluate both and sweep their all-class removal curves.

    Returns ``{"full": ..., "no_fidelity": ...}``, each with the fidelity
    weight, evaluation metrics, removal curve, trained model and training time.
    """
    out = {}
    for label, run_cfg in (("full", cfg), ("no_fidelity", cfg.replace(gamma=0.0))):
        run_dir = Path(out_dir) / label if out_dir is not None else None
        start = time.perf_counter()
        model = run_protocol(base, pair, run_cfg, out_dir=run_dir)
        seconds = time.perf_counter() - start
        curve = removal_sweep(model, pair, ALL_CLASSES)
        if run_dir is not None:
            curve.save(run_dir)
        out[label] = dict(gamma=run_cfg.gamma, metrics=evaluate(model, pair), curve=curve, model=model,
                          seconds=seconds)
    return out
