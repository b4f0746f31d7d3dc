"""Procedural RGB-D scenes and the on-disk dataset format (PPM + PFM + JSON manifest)."""
from __future__ import annotations

import fnmatch
import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .bins import discretize, make_sid_bins


@dataclass(frozen=True)
class SceneConfig:
    h: int = 64
    w: int = 64
    d_min: float = 1.0
    d_max: float = 10.0
    min_objects: int = 2
    max_objects: int = 6
    noise: float = 0.05
    albedo_lo: float = 0.5
    albedo_hi: float = 1.0
    back_wall: bool = False
    min_bins: int = 8

    def validate(self) -> None:
        if self.h < 16 or self.w < 16:
            raise ValueError(f"scene must be at least 16x16, got {self.h}x{self.w}")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("scene needs 0 < d_min < d_max")
        if not 0 < self.albedo_lo <= self.albedo_hi <= 1:
            raise ValueError("albedo range must lie within (0, 1]")
        if not 2 <= self.min_objects <= self.max_objects <= 8:
            raise ValueError("object count range must lie within 2..8")


@dataclass
class Sample:
    image: np.ndarray  # (1, 3, H, W) in [0, 1]
    depth: np.ndarray  # (1, 1, H, W) metres
    valid: np.ndarray  # (1, 1, H, W) {0, 1}

    def __post_init__(self):
        if self.image.shape[-2:] != self.depth.shape[-2:]:
            raise ValueError("image and depth sizes differ")


@dataclass
class DatasetManifest:
    n: int
    d_min: float
    d_max: float
    h: int
    w: int
    split: str
    samples: list[dict] = field(default_factory=list)
    path: Path | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("path")
        return d


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.concatenate([s.image for s in samples]),
        np.concatenate([s.depth for s in samples]),
        np.concatenate([s.valid for s in samples]),
    )


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class Rect:
    """Fronto-parallel rectangle covering rows top..bottom and columns left..right (inclusive)."""

    top: int
    bottom: int
    left: int
    right: int
    depth: float
    colour: tuple[float, float, float] = (1.0, 1.0, 1.0)


def compose(rects: list[Rect], cfg: SceneConfig, floor_colour=(1.0, 1.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffer the ground plane and rectangles; returns (depth (H, W), albedo (3, H, W))."""
    h, w = cfg.h, cfg.w
    rows = np.arange(h, dtype=np.float64)
    # ground plane: d_min at the bottom row, d_max at the top row
    floor = cfg.d_max - (cfg.d_max - cfg.d_min) * rows / (h - 1)
    depth = np.repeat(floor[:, None], w, axis=1)
    albedo = np.broadcast_to(np.asarray(floor_colour, float)[:, None, None], (3, h, w)).copy()
    for r in rects:
        region = (slice(r.top, r.bottom + 1), slice(r.left, r.right + 1))
        nearer = depth[region] > r.depth
        depth[region] = np.where(nearer, r.depth, depth[region])
        for c in range(3):
            albedo[c][region] = np.where(nearer, r.colour[c], albedo[c][region])
    return depth, albedo


def _render(rng: np.random.Generator, cfg: SceneConfig) -> Sample:
    h, w = cfg.h, cfg.w
    floor_colour = rng.uniform(cfg.albedo_lo, cfg.albedo_hi, 3)
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    log_lo, log_hi = np.log(cfg.d_min), np.log(cfg.d_max)
    rects = []
    if cfg.back_wall:
        # full-width wall closing the room; its depth sets the scene's depth range
        zw = float(np.exp(rng.uniform(0.5 * (log_lo + log_hi), log_hi)))
        bottom = int(round((cfg.d_max - zw) / (cfg.d_max - cfg.d_min) * (h - 1)))
        rects.append(Rect(0, bottom, 0, w - 1, zw, tuple(rng.uniform(cfg.albedo_lo, cfg.albedo_hi, 3))))
        log_hi = np.log(zw)
        n_obj -= 1
    for _ in range(n_obj):
        z = float(np.exp(rng.uniform(log_lo, log_hi)))
        # stands on the ground: bottom edge at the row whose floor depth is z
        bottom = int(round((cfg.d_max - z) / (cfg.d_max - cfg.d_min) * (h - 1)))
        rect_h = max(2, int(round(rng.uniform(0.3, 0.8) * h * cfg.d_min / z)))
        rect_w = max(2, int(round(rng.uniform(0.2, 0.6) * w * cfg.d_min / z)))
        left = int(rng.integers(0, max(1, w - rect_w + 1)))
        colour = tuple(rng.uniform(cfg.albedo_lo, cfg.albedo_hi, 3))
        rects.append(Rect(max(0, bottom - rect_h + 1), bottom, left, min(w, left + rect_w) - 1, z, colour))
    depth, albedo = compose(rects, cfg, floor_colour)

    image = albedo / depth[None] + rng.normal(0.0, cfg.noise, (3, h, w))
    image = np.round(np.clip(image, 0.0, 1.0) * 255) / 255
    depth = np.clip(depth, cfg.d_min, cfg.d_max)
    return Sample(
        image=image[None].astype(np.float32),
        depth=depth[None, None].astype(np.float32),
        valid=np.ones((1, 1, h, w), dtype=np.float32),
    )


def generate_sample(seed: int, config: SceneConfig | None = None) -> Sample:
    """Deterministic scene for ``seed``; re-rolls until enough depth bins are covered."""
    cfg = config or SceneConfig()
    cfg.validate()
    scheme = make_sid_bins(cfg.d_min, cfg.d_max, 64)
    for attempt in range(100):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), attempt]))
        sample = _render(rng, cfg)
        bins = discretize(sample.depth, sample.valid, scheme)
        if len(np.unique(bins[bins >= 0])) >= cfg.min_bins:
            return sample
    raise RuntimeError(f"seed {seed}: could not cover {cfg.min_bins} depth bins")


def generate_samples(seed: int, n: int, config: SceneConfig | None = None) -> list[Sample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [generate_sample(seed ^ i, config) for i in range(n)]


# ---------------------------------------------------------------------------
# file formats


def write_pfm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"(P[fF])\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if not m:
        raise ValueError(f"{path}: not a PFM file")
    channels = 1 if m.group(1) == b"Pf" else 3
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    body = raw[m.end():]
    expected = w * h * channels * 4
    if len(body) != expected:
        raise ValueError(f"{path}: truncated PFM data ({len(body)} of {expected} bytes)")
    data = np.frombuffer(body, dtype=dtype).reshape(h, w, channels)[::-1]
    data = data[..., 0] if channels == 1 else data
    return data.astype(np.float32)


def write_ppm(path, image: np.ndarray) -> None:
    """``image`` is (3, H, W) in [0, 1]."""
    c, h, w = image.shape
    q = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(q.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    body = raw[m.end():]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: truncated PPM data")
    return (np.frombuffer(body, np.uint8).reshape(h, w, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


# ---------------------------------------------------------------------------
# datasets on disk


def generate_dataset(seed: int, n: int, config: SceneConfig | None, out_dir, split: str = "train") -> DatasetManifest:
    cfg = config or SceneConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(generate_samples(seed, n, cfg)):
        img_name, depth_name = f"{split}_{i:05d}.ppm", f"{split}_{i:05d}.pfm"
        write_ppm(out / img_name, s.image[0])
        write_pfm(out / depth_name, s.depth[0, 0])
        entries.append({"image": img_name, "depth": depth_name})
    manifest = DatasetManifest(n, cfg.d_min, cfg.d_max, cfg.h, cfg.w, split, entries, out / f"{split}.json")
    with open(manifest.path, "w") as f:
        json.dump(manifest.to_dict(), f, indent=1)
    return manifest


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path) as f:
            d = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: cannot read manifest ({e})") from e
    missing = {"n", "d_min", "d_max", "h", "w", "split", "samples"} - set(d)
    if missing:
        raise ValueError(f"{path}: manifest missing keys {sorted(missing)}")
    if d["n"] < 1 or len(d["samples"]) != d["n"]:
        raise ValueError(f"{path}: manifest sample count mismatch")
    return DatasetManifest(d["n"], d["d_min"], d["d_max"], d["h"], d["w"], d["split"], d["samples"], path)


def load_dataset(manifest_path) -> Iterator[Sample]:
    """Stream samples in manifest order. Non-positive or non-finite depth counts as invalid."""
    manifest = read_manifest(manifest_path)
    root = manifest.path.parent
    for entry in manifest.samples:
        img_path, depth_path = root / entry["image"], root / entry["depth"]
        for p in (img_path, depth_path):
            if not p.is_file():
                raise FileNotFoundError(f"missing dataset file {p}")
        try:
            image = read_ppm(img_path)
            depth = read_pfm(depth_path)
        except ValueError as e:
            raise ValueError(f"corrupt dataset file: {e}") from e
        if image.shape[1:] != depth.shape:
            raise ValueError(f"{img_path}: image and depth sizes differ")
        valid = (np.isfinite(depth) & (depth > 0)).astype(np.float32)
        depth = np.where(valid > 0, depth, 0).astype(np.float32)
        yield Sample(image[None], depth[None, None], valid[None, None])


def load_split(manifest_path) -> list[Sample]:
    return list(load_dataset(manifest_path))


def hash_dir(path, exclude: tuple[str, ...] = ("run_*.json",)) -> str:
    """SHA-256 over (relative name, contents) of every file under ``path``.

    Files matching ``exclude`` (by default the CLI's run records, which hold
    wall times and paths) are skipped.
    """
    h = hashlib.sha256()
    root = Path(path)
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            if any(fnmatch.fnmatch(name, pat) for pat in exclude):
                continue
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
