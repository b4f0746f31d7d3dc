"""Unit dissection: per-bin average responses, depth selectivity and its random baseline."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .bins import BinningScheme
from .tensor import bilinear_matrix


class InsufficientBinsError(ValueError):
    pass


@dataclass
class ResponseTable:
    """Running sums behind the per-bin average response of every unit in a layer."""

    layer: str
    n_units: int
    n_bins: int
    response_sum: np.ndarray = None  # (K, D) float64
    pixel_count: np.ndarray = None  # (D,) uint64, shared by all units of the layer

    def __post_init__(self):
        if self.response_sum is None:
            self.response_sum = np.zeros((self.n_units, self.n_bins))
        if self.pixel_count is None:
            self.pixel_count = np.zeros(self.n_bins, dtype=np.uint64)

    @property
    def defined(self) -> np.ndarray:
        return self.pixel_count > 0

    @property
    def responses(self) -> np.ndarray:
        """(K, D) average responses; NaN where the bin was never observed."""
        out = np.full(self.response_sum.shape, np.nan)
        d = self.defined
        out[:, d] = self.response_sum[:, d] / self.pixel_count[d]
        return out

    def merge(self, other: "ResponseTable") -> "ResponseTable":
        self._check(other.n_units, other.n_bins)
        return ResponseTable(
            self.layer, self.n_units, self.n_bins,
            self.response_sum + other.response_sum, self.pixel_count + other.pixel_count,
        )

    def _check(self, k: int, d: int) -> None:
        if (k, d) != (self.n_units, self.n_bins):
            raise ValueError(f"table is K={self.n_units}, N_b={self.n_bins}; got K={k}, N_b={d}")

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "n_units": self.n_units,
            "n_bins": self.n_bins,
            "response_sum": self.response_sum.tolist(),
            "pixel_count": [int(c) for c in self.pixel_count],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResponseTable":
        return cls(d["layer"], d["n_units"], d["n_bins"], np.asarray(d["response_sum"], dtype=np.float64),
                   np.asarray(d["pixel_count"], dtype=np.uint64))


def upscale(activation: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear upscale of (N, K, h', w') activations to (N, K, h, w) in float64."""
    a = np.asarray(activation, dtype=np.float64)
    ih, iw = a.shape[-2:]
    if (ih, iw) == (h, w):
        return a
    return bilinear_matrix(ih, h) @ a @ bilinear_matrix(iw, w).T


def accumulate(table: ResponseTable, activation, bins: np.ndarray) -> ResponseTable:
    """Add one batch of activations (N, K, h, w) against bin maps (N, [1,] H, W) to ``table``.

    Updates the table in place and returns it.
    """
    act = np.asarray(getattr(activation, "data", activation))
    bins = np.asarray(bins)
    if bins.ndim == 4:
        bins = bins[:, 0]
    n, k = act.shape[:2]
    table._check(k, table.n_bins)
    if bins.shape[0] != n:
        raise ValueError("activation and bin maps disagree on batch size")
    if bins.max(initial=-1) >= table.n_bins:
        raise ValueError(f"bin map has index {bins.max()} but table has {table.n_bins} bins")
    h, w = bins.shape[1:]
    up = upscale(act, h, w).reshape(n, k, h * w)
    flat = bins.reshape(n, h * w)
    for i in range(n):
        valid = flat[i] >= 0
        b = flat[i][valid]
        for unit in range(k):
            table.response_sum[unit] += np.bincount(b, weights=up[i, unit][valid], minlength=table.n_bins)
        table.pixel_count += np.bincount(b, minlength=table.n_bins).astype(np.uint64)
    return table


# ---------------------------------------------------------------------------
# selectivity


def _contrast(top: np.ndarray, rest: np.ndarray) -> np.ndarray:
    denom = top + rest
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, (top - rest) / np.where(denom > 0, denom, 1), 0.0)


def selectivity_details(responses, defined=None) -> tuple[float, int, float, float]:
    """(DS, argmax bin, |R|max, mean of the other |R|) for one unit.

    Undefined bins (NaN or ``defined`` False) are left out of both the max and
    the mean. All-zero responses give DS = 0.
    """
    r = np.abs(np.asarray(responses, dtype=np.float64))
    ok = ~np.isnan(r) if defined is None else np.asarray(defined, bool) & ~np.isnan(r)
    idx = np.flatnonzero(ok)
    if idx.size < 2:
        raise InsufficientBinsError("insufficient bins: selectivity needs at least 2 defined bins")
    vals = r[idx]
    j = int(np.argmax(vals))  # first occurrence -> lowest bin on ties
    top = vals[j]
    rest = (vals.sum() - top) / (vals.size - 1)
    return float(_contrast(np.float64(top), np.float64(rest))), int(idx[j]), float(top), float(rest)


def selectivity(responses, defined=None) -> float:
    return selectivity_details(responses, defined)[0]


def random_baseline(n_bins: int, trials: int = 100_000, b: float = 1.0, seed: int = 0) -> float:
    """Monte Carlo mean DS for i.i.d. |R| ~ U[0, b]."""
    if b <= 0:
        raise ValueError("upper bound b must be positive")
    if trials < 1000:
        raise ValueError("use at least 1000 trials")
    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    rng = np.random.default_rng(seed)
    total, done = 0.0, 0
    chunk = max(1, 2_000_000 // n_bins)
    while done < trials:
        m = min(chunk, trials - done)
        r = rng.uniform(0.0, 1.0, (m, n_bins)) * b
        top = r.max(axis=1)
        rest = (r.sum(axis=1) - top) / (n_bins - 1)
        total += float(_contrast(top, rest).sum())
        done += m
    return total / trials


# ---------------------------------------------------------------------------
# reports


@dataclass
class UnitStats:
    unit: int
    ds: float
    argmax_bin: int
    assigned_bin: int | None
    r_max: float
    r_other_mean: float


@dataclass
class SelectivityReport:
    layer: str
    split: str
    n_bins: int
    units: list[UnitStats] = field(default_factory=list)
    binning: dict | None = None
    responses: list[list[float | None]] | None = None

    @property
    def ds(self) -> np.ndarray:
        return np.array([u.ds for u in self.units])

    @property
    def mean_ds(self) -> float:
        return float(self.ds.mean())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_ds"] = self.mean_ds
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SelectivityReport":
        return cls(
            layer=d["layer"], split=d["split"], n_bins=d["n_bins"],
            units=[UnitStats(**u) for u in d["units"]], binning=d.get("binning"),
            responses=d.get("responses"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SelectivityReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["unit", "ds", "argmax_bin", "assigned_bin"])
        for u in self.units:
            w.writerow([u.unit, f"{u.ds:.6f}", u.argmax_bin, "" if u.assigned_bin is None else u.assigned_bin])
        return buf.getvalue()


def build_report(table: ResponseTable, assignments=None, split: str = "train",
                 binning: BinningScheme | None = None) -> SelectivityReport:
    resp = table.responses
    defined = table.defined
    units = []
    for k in range(table.n_units):
        ds, arg, top, rest = selectivity_details(resp[k], defined)
        assigned = None if assignments is None else int(assignments[k])
        units.append(UnitStats(k, ds, arg, assigned, top, rest))
    rows = [[None if np.isnan(v) else float(v) for v in row] for row in resp]
    return SelectivityReport(table.layer, split, table.n_bins, units,
                             binning.to_dict() if binning else None, rows)
