"""Prototype visualization: similarity heatmaps, percentile bounding boxes,
source/target patch matching and the on-disk report bundle.

Box convention: ``top``/``left`` inclusive, ``bottom``/``right`` exclusive,
so ``rgb[top:bottom, left:right]`` is the crop.
"""
from __future__ import annotations

import html
import io
import json
import os
import tempfile
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .datasets import SOURCE, TARGET, DomainPair, ImageSample
from .errors import ReportIOError
from .protolayer import patch_distances, similarity
from .trainer import InterpretiveModel

DEFAULT_PERCENTILE = 95.0
DEFAULT_TAU = 0.1


@dataclass
class HeatMap:
    grid: np.ndarray
    upsampled: np.ndarray

    @property
    def peak(self) -> float:
        return float(self.grid.max())


@dataclass(frozen=True)
class PatchBox:
    top: int
    left: int
    bottom: int
    right: int
    peak_value: float

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left

    def as_mask(self, size: int) -> np.ndarray:
        m = np.zeros((size, size), dtype=bool)
        m[self.top:self.bottom, self.left:self.right] = True
        return m

    def crop(self, rgb: np.ndarray) -> np.ndarray:
        return rgb[self.top:self.bottom, self.left:self.right]


@dataclass
class MatchedExample:
    sample_id: str
    index: int
    box: PatchBox
    score: float
    distance: float
    mismatch: bool | None = None


@dataclass
class CrossDomainMatch:
    prototype_id: int
    category: int
    anchor: MatchedExample
    source: list[MatchedExample] = field(default_factory=list)
    target: list[MatchedExample] = field(default_factory=list)


def upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinear (half-pixel centers) upsampling of an (H, W) grid to (size, size)."""
    t = torch.as_tensor(np.asarray(grid, dtype=np.float64))[None, None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0, 0].numpy()


def heatmap_from_volume(volume, prototype, size: int, epsilon: float) -> HeatMap:
    """Similarity of every patch of an (H, W, D) volume to one prototype."""
    v = torch.as_tensor(volume)
    p = torch.as_tensor(prototype).reshape(1, -1).to(v.dtype)
    d = patch_distances(v, p)[0, :, 0].reshape(v.shape[0], v.shape[1])
    grid = similarity(d, epsilon).double().numpy()
    return HeatMap(grid, upsample(grid, size))


@torch.no_grad()
def image_volume(model: InterpretiveModel, image: ImageSample) -> torch.Tensor:
    x = torch.from_numpy(image.pixels).unsqueeze(0)
    model.base._check_input(x)
    return model.volumes(model.base.backbone(x))[0]


def heatmap(model: InterpretiveModel, image: ImageSample, prototype_id: int) -> HeatMap:
    if not 0 <= prototype_id < model.prototypes.shape[0]:
        raise IndexError(f"prototype id {prototype_id} out of range [0, {model.prototypes.shape[0]})")
    vol = image_volume(model, image)
    return heatmap_from_volume(vol, model.prototypes.detach()[prototype_id], image.size, model.epsilon)


def bbox(heat: HeatMap, percentile: float = DEFAULT_PERCENTILE) -> PatchBox:
    """Smallest box holding every upsampled pixel at or above the given percentile.

    A constant heatmap yields the full image.
    """
    up = heat.upsampled
    threshold = np.percentile(up, percentile)
    hot = up >= threshold
    rows = np.flatnonzero(hot.any(axis=1))
    cols = np.flatnonzero(hot.any(axis=0))
    return PatchBox(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1, float(up.max()))


def box_iou(box: PatchBox, mask: np.ndarray) -> float:
    b = box.as_mask(mask.shape[0])
    union = np.logical_or(b, mask).sum()
    return float(np.logical_and(b, mask).sum() / union) if union else 0.0


def _category_index(pair: DomainPair, category) -> int:
    if isinstance(category, str):
        return pair.categories.index(category)
    return int(category)


def match_cross_domain(model: InterpretiveModel, pair: DomainPair, category, m: int = 3,
                       tau: float = DEFAULT_TAU, percentile: float = DEFAULT_PERCENTILE) -> list[CrossDomainMatch]:
    """For each prototype of ``category``: its source anchor plus the top-``m``
    source images of the category and top-``m`` target images pseudo-labeled
    as the category, ranked by similarity (ties by dataset order).

    Target examples get a mismatch flag when foreground masks exist: box IoU
    with the mask below ``tau``. Without masks the flag stays ``None``.
    """
    k = _category_index(pair, category)
    eps = model.epsilon
    protos = model.prototypes.detach()
    vols = {SOURCE: model.encode(pair, SOURCE), TARGET: model.encode(pair, TARGET)}
    members = {
        SOURCE: np.flatnonzero(pair.source_labels() == k),
        TARGET: np.flatnonzero(model.pseudo.for_domain(TARGET)[0] == k),
    }
    if len(members[TARGET]) == 0:
        warnings.warn(f"no target sample is pseudo-labeled as {pair.categories[k]!r}; target matches are empty")
    source_index = {s.id: i for i, s in enumerate(pair.source)}

    def example(domain, i, j) -> MatchedExample:
        sample = pair.domain(domain)[i]
        hm = heatmap_from_volume(vols[domain][i], protos[j], sample.size, eps)
        box = bbox(hm, percentile)
        d = patch_distances(vols[domain][i], protos[j:j + 1])[0, :, 0].min().item()
        flag = None
        if domain == TARGET and sample.mask is not None:
            flag = box_iou(box, sample.mask) < tau
        return MatchedExample(sample.id, int(i), box, hm.peak, float(d), flag)

    out = []
    for j in range(k * model.K, (k + 1) * model.K):
        ranked = {}
        for domain in (SOURCE, TARGET):
            idx = members[domain]
            if len(idx) == 0:
                ranked[domain] = []
                continue
            d = patch_distances(vols[domain][idx], protos[j:j + 1])[:, :, 0].min(dim=1).values
            scores = similarity(d, eps).double().numpy()
            order = np.argsort(-scores, kind="stable")[:m]
            ranked[domain] = [example(domain, idx[o], j) for o in order]
        prov = model.provenance[j]
        if prov is not None:
            anchor = example(SOURCE, source_index[prov.sample_id], j)
        else:
            anchor = ranked[SOURCE][0]
        out.append(CrossDomainMatch(j, k, anchor, ranked[SOURCE], ranked[TARGET]))
    return out


# ---------------------------------------------------------------- report bundle

def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _png_bytes(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(rgb)).save(buf, format="PNG")
    return buf.getvalue()


def _overlay(rgb: np.ndarray, heat: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    span = heat.max() - heat.min()
    norm = (heat - heat.min()) / span if span > 0 else np.zeros_like(heat)
    colored = colormaps["jet"](norm)[..., :3] * 255
    return np.clip(0.5 * rgb + 0.5 * colored, 0, 255).astype(np.uint8)


def _scaled(rgb: np.ndarray, cell: int) -> Image.Image:
    h, w = rgb.shape[:2]
    s = cell / max(h, w)
    return Image.fromarray(np.ascontiguousarray(rgb)).resize((max(1, round(w * s)), max(1, round(h * s))),
                                                            Image.NEAREST)


def _card(model, pair, match: CrossDomainMatch, scale: int = 4) -> np.ndarray:
    sample = pair.source[match.anchor.index]
    vol = model.encode(pair, SOURCE)[match.anchor.index]
    hm = heatmap_from_volume(vol, model.prototypes.detach()[match.prototype_id], sample.size, model.epsilon)
    size = sample.size * scale
    left = Image.fromarray(sample.rgb).resize((size, size), Image.NEAREST)
    mid = Image.fromarray(_overlay(sample.rgb.astype(np.float64), hm.upsampled)).resize((size, size), Image.NEAREST)
    b = match.anchor.box
    for im in (left, mid):
        ImageDraw.Draw(im).rectangle([b.left * scale, b.top * scale, b.right * scale - 1, b.bottom * scale - 1],
                                     outline=(255, 255, 0), width=2)
    crop = _scaled(b.crop(sample.rgb), size)
    canvas = Image.new("RGB", (3 * size + 8, size), (255, 255, 255))
    canvas.paste(left, (0, 0))
    canvas.paste(mid, (size + 4, 0))
    canvas.paste(crop, (2 * size + 8, 0))
    return np.asarray(canvas)


def _panel(pair, matches: list[CrossDomainMatch], m: int, cell: int = 64) -> np.ndarray:
    cols = 1 + 2 * m
    text_h = 12
    width = cols * (cell + 6) + 12
    height = len(matches) * (cell + text_h + 8) + 4
    canvas = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    for r, match in enumerate(matches):
        y = 4 + r * (cell + text_h + 8)
        entries = [(SOURCE, match.anchor, f"p{match.prototype_id}")]
        entries += [(SOURCE, e, f"s {e.score:.2f}") for e in match.source]
        entries += [(None, None, "")] * (m - len(match.source))
        entries += [(TARGET, e, f"t {e.score:.2f}") for e in match.target]
        for c, (domain, e, label) in enumerate(entries):
            x = 4 + c * (cell + 6) + (6 if c > m else 0)
            if e is None:
                continue
            sample = pair.domain(domain)[e.index]
            tile = _scaled(e.box.crop(sample.rgb), cell)
            canvas.paste(tile, (x, y))
            if e.mismatch:
                draw.rectangle([x - 2, y - 2, x + tile.width + 1, y + tile.height + 1], outline=(255, 0, 0), width=2)
            draw.text((x, y + cell + 1), label, fill=(0, 0, 0))
    return np.asarray(canvas)


def _example_record(e: MatchedExample, path: str | None) -> dict:
    return dict(sample_id=e.sample_id, index=e.index, box=asdict(e.box), score=e.score, distance=e.distance,
                mismatch=e.mismatch, crop=path)


def emit_report(model: InterpretiveModel, pair: DomainPair, out_dir, m: int = 3, tau: float = DEFAULT_TAU,
                percentile: float = DEFAULT_PERCENTILE) -> dict:
    """Write the explanation bundle and return its metadata.

    Layout: ``{category}/proto_{j}/{card,source_{rank},target_{rank}}.png``,
    ``{category}/panel.png``, ``matches.json`` and ``index.html``. Crop files
    hold exactly the box region of the original image.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ReportIOError(f"cannot write report to {out_dir}: {exc}") from exc

    records = []
    try:
        for k, name in enumerate(pair.categories):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                matches = match_cross_domain(model, pair, k, m, tau, percentile)
            for match in matches:
                pdir = f"{name}/proto_{match.prototype_id}"
                _atomic_write(out_dir / pdir / "card.png", _png_bytes(_card(model, pair, match)))
                rec = dict(prototype_id=match.prototype_id, category=name, card=f"{pdir}/card.png",
                           anchor=_example_record(match.anchor, None), source=[], target=[])
                for domain, items in ((SOURCE, match.source), (TARGET, match.target)):
                    for rank, e in enumerate(items):
                        rel = f"{pdir}/{domain}_{rank}.png"
                        crop = e.box.crop(pair.domain(domain)[e.index].rgb)
                        _atomic_write(out_dir / rel, _png_bytes(crop))
                        rec[domain].append(_example_record(e, rel))
                records.append(rec)
            _atomic_write(out_dir / name / "panel.png", _png_bytes(_panel(pair, matches, m)))
        meta = dict(categories=list(pair.categories), K=model.K, m=m, tau=tau, percentile=percentile,
                    epsilon=model.epsilon, prototypes=records)
        _atomic_write(out_dir / "matches.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        _atomic_write(out_dir / "index.html", _index_html(meta).encode())
    except OSError as exc:
        raise ReportIOError(f"failed writing report under {out_dir}: {exc}") from exc
    return meta


def _index_html(meta: dict) -> str:
    rows = []
    for name in meta["categories"]:
        rows.append(f"<h2>{html.escape(name)}</h2><img src='{html.escape(name)}/panel.png'>")
        for rec in (r for r in meta["prototypes"] if r["category"] == name):
            flags = [t["mismatch"] for t in rec["target"]]
            n_bad = sum(1 for f in flags if f)
            rows.append(
                f"<div><b>prototype {rec['prototype_id']}</b> anchor {html.escape(rec['anchor']['sample_id'])}"
                f" &middot; target mismatches {n_bad}/{len(flags)}<br><img src='{html.escape(rec['card'])}'></div>")
    body = "\n".join(rows)
    return ("<!doctype html><html><head><meta charset='utf-8'><title>Prototype report</title></head>"
            f"<body><h1>Transferred prototypes</h1>\n{body}\n</body></html>\n")
