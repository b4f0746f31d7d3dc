"""Depth discretization: bin edges, per-pixel bin indices and bin masks."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

INVALID = -1


@dataclass(frozen=True)
class BinningScheme:
    kind: str
    edges: tuple[float, ...]

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.float64)
        if e.ndim != 1 or e.size < 3:
            raise ValueError("a binning scheme needs at least 2 bins")
        if not np.all(np.diff(e) > 0):
            raise ValueError("bin edges must be strictly increasing")

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    @property
    def d_min(self) -> float:
        return self.edges[0]

    @property
    def d_max(self) -> float:
        return self.edges[-1]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "edges": list(self.edges)}

    @classmethod
    def from_dict(cls, d: dict) -> "BinningScheme":
        return cls(kind=d["kind"], edges=tuple(float(x) for x in d["edges"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def make_sid_bins(d_min: float, d_max: float, n_bins: int = 64) -> BinningScheme:
    """Log-spaced ("spacing-increasing") edges between d_min and d_max."""
    if d_min <= 0:
        raise ValueError("SID bins need d_min > 0")
    if not d_min < d_max:
        raise ValueError("SID bins need d_min < d_max")
    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    i = np.arange(n_bins + 1)
    edges = np.exp(np.log(d_min) + (i / n_bins) * np.log(d_max / d_min))
    edges[0], edges[-1] = d_min, d_max
    return BinningScheme("sid", tuple(float(e) for e in edges))


def make_uniform_bins(d_min: float, d_max: float, n_bins: int = 64) -> BinningScheme:
    if not d_min < d_max:
        raise ValueError("uniform bins need d_min < d_max")
    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    width = (d_max - d_min) / n_bins
    edges = d_min + width * np.arange(n_bins + 1)
    edges[-1] = d_max
    return BinningScheme("uniform", tuple(float(e) for e in edges))


def make_bins(kind: str, d_min: float, d_max: float, n_bins: int = 64) -> BinningScheme:
    if kind == "sid":
        return make_sid_bins(d_min, d_max, n_bins)
    if kind == "uniform":
        return make_uniform_bins(d_min, d_max, n_bins)
    raise ValueError(f"unknown binning kind {kind!r}")


def discretize(depth, valid_mask, scheme: BinningScheme) -> np.ndarray:
    """Bin index per pixel; -1 where invalid.

    Intervals are [e_i, e_{i+1}) except the last, which is closed. Depths
    outside [d_min, d_max] clamp to the end bins.
    """
    depth = np.asarray(getattr(depth, "data", depth), dtype=np.float64)
    valid = np.ones(depth.shape, bool) if valid_mask is None else np.asarray(getattr(valid_mask, "data", valid_mask)) > 0
    edges = np.asarray(scheme.edges)
    # searchsorted on interior edges gives index of the left-closed interval
    idx = np.searchsorted(edges[1:-1], np.where(valid, depth, edges[0]), side="right")
    return np.where(valid, idx, INVALID).astype(np.int64)


def bin_mask(bins: np.ndarray, d: int, n_bins: int | None = None) -> np.ndarray:
    if d < 0 or (n_bins is not None and d >= n_bins):
        raise ValueError(f"bin index {d} out of range")
    return (bins == d).astype(np.float32)


def one_hot(bins: np.ndarray, n_bins: int) -> np.ndarray:
    """(..., P) bin map -> (..., n_bins) float mask; invalid pixels are all-zero rows."""
    out = np.zeros(bins.shape + (n_bins,), dtype=np.float32)
    valid = bins >= 0
    out[valid, bins[valid]] = 1.0
    return out
