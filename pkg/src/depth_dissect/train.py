"""Training with the plain depth loss plus an optional selectivity term.

Modes:

* ``baseline``: L1 depth loss only.
* ``regularize``: adds -lambda * mean unit DS, where each unit's max is its
  strongest bin within the current batch.
* ``assign``: adds -lambda * mean unit contrast against a fixed bin d_k per
  unit; units whose bin is missing from the batch are skipped.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .bins import BinningScheme, discretize, make_bins
from .dissect import ResponseTable, build_report
from .net import Network
from .scenes import Sample
from .tensor import Tensor, bilinear_matrix

log = logging.getLogger(__name__)

MODES = ("baseline", "regularize", "assign")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# assignment of bins to units


def effective_bins(n_units: int, n_bins: int) -> int:
    return min(n_bins, n_units)


def assign_bins(n_units: int, n_bins: int) -> list[int]:
    """d_k = floor(k * N_b' / K) with N_b' = min(N_b, K).

    Equals floor(k / (K / N_b')) whenever K is a multiple of N_b', and still
    covers every bin when it is not.
    """
    if n_units < 2 or n_bins < 2:
        raise ValueError("need at least 2 units and 2 bins")
    nb = effective_bins(n_units, n_bins)
    return [k * nb // n_units for k in range(n_units)]


def layer_scheme(scheme: BinningScheme, n_units: int) -> BinningScheme:
    """Binning used for a layer: the base scheme, or a coarser one when the layer has fewer units than bins."""
    nb = effective_bins(n_units, scheme.n_bins)
    if nb == scheme.n_bins:
        return scheme
    return make_bins(scheme.kind, scheme.d_min, scheme.d_max, nb)


@dataclass
class AssignmentTable:
    rows: dict[str, list[int]] = field(default_factory=dict)
    n_bins: dict[str, int] = field(default_factory=dict)

    @classmethod
    def for_layers(cls, units: dict[str, int], n_bins: int) -> "AssignmentTable":
        return cls({name: assign_bins(k, n_bins) for name, k in units.items()},
                   {name: effective_bins(k, n_bins) for name, k in units.items()})

    def to_dict(self) -> dict:
        return {"rows": self.rows, "n_bins": self.n_bins}

    @classmethod
    def from_dict(cls, d: dict) -> "AssignmentTable":
        return cls({k: list(v) for k, v in d["rows"].items()}, dict(d["n_bins"]))


# ---------------------------------------------------------------------------
# differentiable batch responses and contrast terms


def soft_masks(bins: np.ndarray, n_bins: int, h: int, w: int, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample bin masks pulled back through the bilinear upscale.

    Returns (weights (N, D, h, w), counts (N, D)). Because the upscale is
    linear, sum_p up(A)[p] * M_d[p] == sum_q A[q] * weights_d[q], so batch
    responses can be formed at activation resolution.
    """
    bins = np.asarray(bins)
    if bins.ndim == 4:
        bins = bins[:, 0]
    n, H, W = bins.shape
    onehot = np.zeros((n, n_bins, H, W))
    for d in range(n_bins):
        onehot[:, d] = bins == d
    counts = onehot.sum(axis=(2, 3))
    mh, mw = bilinear_matrix(h, H), bilinear_matrix(w, W)
    weights = mh.T @ onehot @ mw
    return weights.astype(dtype), counts


def batch_responses(activation: Tensor, weights: np.ndarray, counts: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Average response of each unit on each bin present in the batch.

    Returns (R (K, D) tensor, present (D,) bool). Absent bins hold 0.
    """
    n, k, h, w = activation.shape
    total = counts.sum(axis=0)
    present = total > 0
    inv = np.where(present, 1.0 / np.where(present, total, 1), 0.0).astype(activation.dtype)
    wt = weights.reshape(n, -1, h * w).astype(activation.dtype)  # n, D, q
    a = activation.data.reshape(n, k, h * w)
    sums = np.einsum("nkq,ndq->kd", a, wt, optimize=True)
    out = sums * inv

    def bw(g):
        gs = g * inv
        return (np.einsum("kd,ndq->nkq", gs, wt, optimize=True).reshape(n, k, h, w),)

    return Tensor.from_op(out.astype(activation.dtype), (activation,), bw, "batch_responses"), present


def contrast_terms(responses: Tensor, present: np.ndarray, targets=None) -> tuple[Tensor, np.ndarray]:
    """Per-unit (|R_t| - mean other |R|) / (|R_t| + mean other |R|) over present bins.

    ``targets`` gives the bin per unit; ``None`` uses each unit's strongest
    present bin (lowest index on ties). Returns (terms (K,), eligible (K,)).
    Ineligible units (target absent, or fewer than two present bins) get a
    zero term and zero gradient.
    """
    r = responses.data.astype(np.float64)
    k, nb = r.shape
    present = np.asarray(present, bool)
    n_present = int(present.sum())
    mag = np.abs(r) * present
    if targets is None:
        masked = np.where(present, np.abs(r), -np.inf)
        tgt = np.argmax(masked, axis=1) if n_present else np.zeros(k, int)
    else:
        tgt = np.asarray(targets, int)
    eligible = present[tgt] & (n_present >= 2)
    rows = np.arange(k)
    top = mag[rows, tgt]
    rest = (mag.sum(axis=1) - top) / max(n_present - 1, 1)
    denom = top + rest
    live = eligible & (denom > 0)
    safe = np.where(live, denom, 1.0)
    terms = np.where(live, (top - rest) / safe, 0.0)
    d_top = np.where(live, 2 * rest / safe**2, 0.0)
    d_rest = np.where(live, -2 * top / safe**2, 0.0)
    sign = np.sign(r)

    def bw(g):
        g = g.astype(np.float64)
        grad = (g * d_rest / max(n_present - 1, 1))[:, None] * sign * present
        grad[rows, tgt] = g * d_top * sign[rows, tgt]
        return (grad.astype(responses.dtype),)

    return Tensor.from_op(terms.astype(responses.dtype), (responses,), bw, "contrast"), eligible


def _layer_mean(terms: Tensor, eligible: np.ndarray) -> Tensor | None:
    if not eligible.any():
        return None
    return T.reduce(terms, "mean", mask=eligible)


def _combine(parts: list[Tensor], lam: float, dtype) -> Tensor | None:
    parts = [p for p in parts if p is not None]
    if not parts:
        return None
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total * (-lam)


def reg_loss(layer_responses: list[tuple[Tensor, np.ndarray]], lam: float) -> Tensor | None:
    """-lambda * sum over layers of the mean batch-wise DS of the layer's units."""
    parts = []
    for resp, present in layer_responses:
        terms, eligible = contrast_terms(resp, present, None)
        parts.append(_layer_mean(terms, eligible))
    return _combine(parts, lam, None)


def assign_loss(layer_responses: list[tuple[Tensor, np.ndarray]], assignments: list[list[int]], lam: float) -> Tensor | None:
    """-lambda * sum over layers of the mean contrast of each unit at its assigned bin."""
    parts = []
    for (resp, present), targets in zip(layer_responses, assignments):
        terms, eligible = contrast_terms(resp, present, targets)
        parts.append(_layer_mean(terms, eligible))
    return _combine(parts, lam, None)


def base_depth_loss(pred: Tensor, gt, valid) -> Tensor:
    """Mean absolute depth error over valid pixels."""
    gt = T.as_tensor(gt)
    valid = np.asarray(getattr(valid, "data", valid))
    return T.reduce(T.abs_(pred - gt), "mean", mask=valid)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    mode: str = "assign"
    lam: float = 0.1
    layers: tuple[str, ...] = ("d",)
    n_bins: int = 64
    binning: str = "sid"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        self.layers = tuple(self.layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = list(self.layers)
        return d


@dataclass
class EpochLog:
    epoch: int
    base_loss: float
    lambda_term: float
    train_mean_ds: float


def write_log_csv(rows: list[EpochLog], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "base_loss", "lambda_term", "train_mean_DS"])
        for r in rows:
            w.writerow([r.epoch, f"{r.base_loss:.6f}", f"{r.lambda_term:.6f}", f"{r.train_mean_ds:.6f}"])


class _Prepared:
    """Stacked training arrays plus per-layer soft bin masks, computed once."""

    def __init__(self, net: Network, samples: list[Sample], cfg: TrainConfig, scheme: BinningScheme):
        self.images = np.concatenate([s.image for s in samples]).astype(np.float32)
        self.depth = np.concatenate([s.depth for s in samples]).astype(np.float32)
        self.valid = np.concatenate([s.valid for s in samples]).astype(np.float32)
        shapes = net.config.layer_shapes()
        self.masks = {}
        self.schemes = {}
        for name in cfg.layers:
            k, h, w = shapes[name]
            sch = layer_scheme(scheme, k)
            bins = discretize(self.depth, self.valid, sch)
            self.schemes[name] = sch
            self.masks[name] = soft_masks(bins, sch.n_bins, h, w)


def fit(net: Network, samples: list[Sample], config: TrainConfig, scheme: BinningScheme | None = None,
        on_epoch=None) -> tuple[Network, list[EpochLog]]:
    """Train ``net`` in place; returns (net, per-epoch log)."""
    if not samples:
        raise ValueError("training set is empty")
    cfg = config
    scheme = scheme or make_bins(cfg.binning, net.config.d_min, net.config.d_max, cfg.n_bins)
    units = {name: net.config.units(name) for name in cfg.layers}
    assignments = AssignmentTable.for_layers(units, cfg.n_bins)
    data = _Prepared(net, samples, cfg, scheme)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.parameters(), lr=cfg.lr)
    n = len(samples)
    use_term = cfg.mode != "baseline" and cfg.lam > 0
    capture = set(cfg.layers)
    history: list[EpochLog] = []

    for epoch in range(cfg.epochs):
        t0 = time.time()
        order = rng.permutation(n)
        base_sum = term_sum = 0.0
        batches = 0
        tables = {name: ResponseTable(name, units[name], data.schemes[name].n_bins) for name in cfg.layers}
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            pred, acts = net.forward(Tensor(data.images[idx]), capture)
            loss = base_depth_loss(pred, data.depth[idx], data.valid[idx])
            base_val = loss.item()
            layer_resp = []
            for name in cfg.layers:
                weights, counts = data.masks[name]
                resp, present = batch_responses(acts[name], weights[idx], counts[idx])
                layer_resp.append((resp, present))
                tab = tables[name]
                c = counts[idx].sum(axis=0)
                tab.response_sum += resp.data.astype(np.float64) * c
                tab.pixel_count += c.astype(np.uint64)
            term = None
            if use_term:
                if cfg.mode == "assign":
                    term = assign_loss(layer_resp, [assignments.rows[nm] for nm in cfg.layers], cfg.lam)
                else:
                    term = reg_loss(layer_resp, cfg.lam)
            total = loss if term is None else loss + term
            if not math.isfinite(total.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            net.zero_grad()
            try:
                total.backward()
            except T.NonFiniteError as e:
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}: {e}") from e
            opt.step()
            base_sum += base_val
            term_sum += 0.0 if term is None else term.item()
            batches += 1
        mean_ds = float(np.mean([build_report(tables[nm]).mean_ds for nm in cfg.layers]))
        row = EpochLog(epoch, base_sum / batches, term_sum / batches, mean_ds)
        history.append(row)
        log.info("epoch %d base %.4f term %.4f ds %.4f (%.1fs)", epoch, row.base_loss, row.lambda_term,
                 row.train_mean_ds, time.time() - t0)
        if on_epoch is not None:
            on_epoch(row)

    net.binning = scheme
    net.metadata = {
        "epoch": cfg.epochs,
        "train_config": cfg.to_dict(),
        "loss_curve": [asdict(r) for r in history],
        "lambda": cfg.lam,
        "assignments": assignments.to_dict(),
    }
    return net, history
