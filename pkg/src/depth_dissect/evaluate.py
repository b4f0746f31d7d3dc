"""Depth metrics, ordered ablation, response correction and adversarial error attribution."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .bins import BinningScheme, discretize
from .dissect import ResponseTable, SelectivityReport, accumulate, build_report, upscale
from .net import Network
from .scenes import Sample, stack
from .tensor import Tensor, nearest_resize
from .train import base_depth_loss, layer_scheme

THRESHOLD = 1.25


@dataclass
class DepthMetrics:
    delta1: float
    delta2: float
    delta3: float
    rms: float
    rel: float
    log10: float

    def to_dict(self) -> dict:
        return asdict(self)


def depth_metrics(pred, gt, valid=None) -> DepthMetrics:
    pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    gt = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    mask = np.ones(gt.shape, bool) if valid is None else np.asarray(getattr(valid, "data", valid)) > 0
    if not mask.any():
        raise ValueError("no valid pixels to evaluate")
    p, g = pred[mask], gt[mask]
    if np.any(g <= 0):
        raise ValueError("ground truth must be positive on valid pixels")
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        delta1=float(np.mean(ratio < THRESHOLD)),
        delta2=float(np.mean(ratio < THRESHOLD**2)),
        delta3=float(np.mean(ratio < THRESHOLD**3)),
        rms=float(np.sqrt(np.mean((p - g) ** 2))),
        rel=float(np.mean(np.abs(p - g) / g)),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
    )


def _batches(samples: list[Sample], size: int):
    for i in range(0, len(samples), size):
        yield stack(samples[i:i + size])


def predict(net: Network, samples: list[Sample], batch_size: int = 16) -> np.ndarray:
    return np.concatenate([net.forward(img)[0].data for img, _, _ in _batches(samples, batch_size)])


def evaluate(net: Network, samples: list[Sample], batch_size: int = 16) -> DepthMetrics:
    _, depth, valid = stack(samples)
    return depth_metrics(predict(net, samples, batch_size), depth, valid)


def dissect_layer(net: Network, samples: list[Sample], layer: str, scheme: BinningScheme,
                  batch_size: int = 16, threads: int = 1) -> ResponseTable:
    """Response table of ``layer`` over ``samples`` using the layer's effective binning.

    With ``threads > 1`` batches are processed concurrently and their tables
    merged in batch order, so the result does not depend on scheduling.
    """
    k = net.config.units(layer)
    sch = layer_scheme(scheme, k)

    def one(batch) -> ResponseTable:
        img, depth, valid = batch
        _, acts = net.forward(img, {layer})
        return accumulate(ResponseTable(layer, k, sch.n_bins), acts[layer].data, discretize(depth, valid, sch))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, _batches(samples, batch_size)))
        table = ResponseTable(layer, k, sch.n_bins)
        for part in parts:
            table = table.merge(part)
        return table
    table = ResponseTable(layer, k, sch.n_bins)
    for img, depth, valid in _batches(samples, batch_size):
        _, acts = net.forward(img, {layer})
        accumulate(table, acts[layer].data, discretize(depth, valid, sch))
    return table


def selectivity_report(net: Network, samples: list[Sample], layer: str, scheme: BinningScheme,
                       split: str = "train", assignments=None, threads: int = 1) -> SelectivityReport:
    table = dissect_layer(net, samples, layer, scheme, threads=threads)
    return build_report(table, assignments, split, layer_scheme(scheme, table.n_units))


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationCurve:
    layer: str
    order: str
    units: list[int] = field(default_factory=list)  # ablation order
    accuracy: list[float] = field(default_factory=list)  # delta_1.25 after t units ablated, t = 0..K

    @property
    def auc(self) -> float:
        a = np.asarray(self.accuracy)
        return float(np.trapezoid(a) / max(len(a) - 1, 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["auc"] = self.auc
        return d


def ablation_order(report: SelectivityReport, order: str) -> list[int]:
    if order not in ("descending", "ascending"):
        raise ValueError("order must be 'descending' or 'ascending'")
    ds = report.ds
    sign = -1 if order == "descending" else 1
    return [int(i) for i in np.lexsort((np.arange(len(ds)), sign * ds))]


def ablation_curve(net: Network, samples: list[Sample], layer: str, report: SelectivityReport,
                   order: str = "descending", batch_size: int = 25) -> AblationCurve:
    """delta_1.25 as units are zeroed one after another in DS order."""
    k = net.config.units(layer)
    if report.layer != layer or len(report.units) != k:
        raise ValueError(f"report does not cover layer {layer!r}")
    units = ablation_order(report, order)
    batches = []
    for img, depth, valid in _batches(samples, batch_size):
        _, acts = net.forward(img, {layer})
        batches.append((img, depth, valid, acts[layer].data))
    curve = AblationCurve(layer, order, units)
    for t in range(k + 1):
        preds, gts, masks = [], [], []
        for img, depth, valid, act in batches:
            a = act.copy()
            a[:, units[:t]] = 0
            preds.append(net.forward_with_override(img, layer, Tensor(a, dtype=a.dtype)).data)
            gts.append(depth)
            masks.append(valid)
        curve.accuracy.append(depth_metrics(np.concatenate(preds), np.concatenate(gts), np.concatenate(masks)).delta1)
    return curve


# ---------------------------------------------------------------------------
# correction


def correct_activation(activation: np.ndarray, bins_small: np.ndarray, table: ResponseTable) -> np.ndarray:
    """Replace every pixel of every unit by the unit's average response at that pixel's bin.

    ``bins_small`` is (N, h, w) at activation resolution. Pixels whose bin is
    invalid or never seen in ``table`` keep their original value.
    """
    resp = table.responses  # K, D with NaN for undefined
    out = activation.copy()
    ok = bins_small >= 0
    safe = np.where(ok, bins_small, 0)
    for k in range(activation.shape[1]):
        vals = resp[k][safe]
        use = ok & ~np.isnan(vals)
        out[:, k] = np.where(use, vals, activation[:, k])
    return out.astype(activation.dtype)


@dataclass
class CorrectionResult:
    layer: str
    before: DepthMetrics
    after: DepthMetrics

    def to_dict(self) -> dict:
        return {"layer": self.layer, "before": self.before.to_dict(), "after": self.after.to_dict()}


def correct_responses(net: Network, samples: list[Sample], layer: str, table: ResponseTable,
                      scheme: BinningScheme, batch_size: int = 25) -> CorrectionResult:
    """Metrics before/after replacing ``layer``'s responses with train-split averages."""
    sch = layer_scheme(scheme, table.n_units)
    if sch.n_bins != table.n_bins:
        raise ValueError("table and binning disagree on the number of bins")
    _, h, w = net.config.layer_shapes()[layer]
    before, after, gts, masks = [], [], [], []
    for img, depth, valid in _batches(samples, batch_size):
        pred, acts = net.forward(img, {layer})
        bins = discretize(depth, valid, sch)[:, 0]
        small = nearest_resize(bins, h, w)
        fixed = correct_activation(acts[layer].data, small, table)
        before.append(pred.data)
        after.append(net.forward_with_override(img, layer, Tensor(fixed, dtype=fixed.dtype)).data)
        gts.append(depth)
        masks.append(valid)
    gt, m = np.concatenate(gts), np.concatenate(masks)
    return CorrectionResult(layer, depth_metrics(np.concatenate(before), gt, m),
                            depth_metrics(np.concatenate(after), gt, m))


# ---------------------------------------------------------------------------
# adversarial attack and error attribution


def fgsm_attack(net: Network, image: np.ndarray, depth: np.ndarray, valid: np.ndarray, epsilon: float = 0.05) -> np.ndarray:
    """One signed-gradient step on the input that increases the depth loss, clipped to [0, 1]."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = Tensor(image, requires_grad=True)
    pred, _ = net.forward(x)
    loss = base_depth_loss(pred, depth, valid)
    net.zero_grad()
    loss.backward()
    net.zero_grad()
    eps = np.asarray(epsilon, dtype=image.dtype)
    adv = np.clip(image + eps * np.sign(x.grad).astype(image.dtype), 0.0, 1.0).astype(image.dtype)
    # x + eps is rounded (and eps itself may round up), so |x' - x| can exceed eps
    # by an ulp. Pull the step back to eps in float64, round, then nudge any
    # remaining pixel one ulp (at its own magnitude) toward x. The float64
    # difference of two float32 values is exact.
    ref = image.astype(np.float64)
    adv = (ref + np.clip(adv.astype(np.float64) - ref, -float(epsilon), float(epsilon))).astype(image.dtype)
    while True:
        over = np.abs(adv.astype(np.float64) - ref) > float(epsilon)
        if not over.any():
            return adv
        adv[over] = np.nextafter(adv[over], image[over])


def attack_samples(net: Network, samples: list[Sample], epsilon: float = 0.05, batch_size: int = 16) -> list[Sample]:
    out = []
    for img, depth, valid in _batches(samples, batch_size):
        adv = fgsm_attack(net, img, depth, valid, epsilon)
        out.extend(Sample(adv[i:i + 1], depth[i:i + 1], valid[i:i + 1]) for i in range(len(adv)))
    return out


@dataclass
class BinAttribution:
    bin: int
    error_share: float
    units: list[int]
    iou: list[float]
    control_unit: int | None = None
    control_iou: float | None = None


@dataclass
class AttributionReport:
    layer: str
    n_error_pixels: int
    shares: dict[int, float] = field(default_factory=dict)
    top: list[BinAttribution] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.n_error_pixels == 0

    def mean_iou(self) -> float | None:
        vals = [v for b in self.top for v in b.iou]
        return float(np.mean(vals)) if vals else None

    def mean_control_iou(self) -> float | None:
        vals = [b.control_iou for b in self.top if b.control_iou is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shares"] = {str(k): v for k, v in self.shares.items()}
        return d


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def _unit_mask(act: np.ndarray, h: int, w: int, thresh: float) -> np.ndarray:
    mag = np.abs(upscale(act[None, None], h, w)[0, 0])
    peak = mag.max()
    return mag / peak >= thresh if peak > 0 else np.zeros((h, w), bool)


def error_unit_attribution(net: Network, image: np.ndarray, depth: np.ndarray, valid: np.ndarray, layer: str,
                           assignments: list[int], scheme: BinningScheme, top_bins: int = 3,
                           threshold: float = 0.5, rng: np.random.Generator | None = None) -> AttributionReport:
    """Trace prediction errors of one sample back to the units assigned to the erroneous depth bins.

    Error pixels have max(pred/gt, gt/pred) >= 1.25. For each of the
    ``top_bins`` predicted-depth bins holding most errors, every assigned
    unit's magnitude map (upscaled, divided by its peak, thresholded at
    ``threshold``) is compared by IoU with the error pixels in that bin. A
    random unit assigned elsewhere gives the control IoU.
    """
    rng = rng or np.random.default_rng(0)
    pred, acts = net.forward(image, {layer})
    p = pred.data[0, 0].astype(np.float64)
    g = depth[0, 0].astype(np.float64)
    ok = valid[0, 0] > 0
    ratio = np.where(ok, np.maximum(p / np.where(ok, g, 1), np.where(ok, g, 1) / p), 1.0)
    err = ok & (ratio >= THRESHOLD)
    report = AttributionReport(layer, int(err.sum()))
    if report.empty:
        return report
    k = len(assignments)
    sch = layer_scheme(scheme, k)
    pbins = discretize(p, None, sch)
    counts = np.bincount(pbins[err], minlength=sch.n_bins)
    shares = counts / counts.sum()
    report.shares = {int(d): float(s) for d, s in enumerate(shares) if s > 0}
    act = acts[layer].data[0]
    h, w = p.shape
    assignments = np.asarray(assignments)
    for d in np.argsort(-shares, kind="stable")[:top_bins]:
        if shares[d] == 0:
            break
        target = err & (pbins == d)
        units = [int(u) for u in np.flatnonzero(assignments == d)]
        ious = [_iou(_unit_mask(act[u], h, w, threshold), target) for u in units]
        others = np.flatnonzero(assignments != d)
        ctrl = int(rng.choice(others)) if others.size else None
        ctrl_iou = _iou(_unit_mask(act[ctrl], h, w, threshold), target) if ctrl is not None else None
        report.top.append(BinAttribution(int(d), float(shares[d]), units, ious, ctrl, ctrl_iou))
    return report


def dump_json(obj, path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1)
