"""Rasterize trajectories to speed fields, pick probe vehicles, window training pairs."""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, PartialField, SpeedField, encode_partial, load_field, \
    load_partial, save_field, save_partial
from .microsim import TrajectorySet


@dataclass(frozen=True)
class SamplePair:
    """One training example: sparse probe input and the full field it came from."""

    input: PartialField
    target: SpeedField

    def __post_init__(self):
        if self.input.spec.nx != self.target.spec.nx \
                or self.input.spec.nt != self.target.spec.nt:
            raise ValueError("input and target grids differ in size")


def grid_for_trajectories(trajs: TrajectorySet, dx: float = 10.0, dt: float = 1.0,
                          v_max: float = 30.0, v_cong: float = -5.0,
                          road_len: float | None = None,
                          duration: float | None = None) -> GridSpec:
    """GridSpec covering the trajectory extent (or the given spans)."""
    if road_len is None or duration is None:
        max_x = 0.0
        max_t = 0.0
        for arr in trajs.vehicles.values():
            max_t = max(max_t, float(arr[-1, 0]))
            max_x = max(max_x, float(arr[:, 1].max()))
        road_len = road_len if road_len is not None else max_x
        duration = duration if duration is not None else max_t
    nx = max(1, math.ceil(road_len / dx - 1e-9))
    nt = max(1, math.ceil(duration / dt - 1e-9))
    return GridSpec(nx=nx, nt=nt, dx=dx, dt=dt, v_max=v_max, v_cong=v_cong)


def _bin_samples(trajs: TrajectorySet, spec: GridSpec):
    """Per-cell sum and count of instantaneous speeds over all samples."""
    n = spec.nx * spec.nt
    sums = np.zeros(n)
    counts = np.zeros(n)
    x_hi = spec.road_len * (1 + 1e-9)
    t_hi = spec.duration * (1 + 1e-9)
    for vid in trajs.ids():
        arr = trajs.vehicles[vid]
        t, x, v = arr[:, 0], arr[:, 1], arr[:, 2]
        if (x < 0).any() or (x > x_hi).any() or (t < 0).any() or (t > t_hi).any():
            raise ValueError(f"vehicle {vid} has samples outside the grid span")
        ix = np.minimum((x / spec.dx).astype(np.int64), spec.nx - 1)
        it = np.minimum((t / spec.dt).astype(np.int64), spec.nt - 1)
        flat = ix * spec.nt + it
        sums += np.bincount(flat, weights=v, minlength=n)
        counts += np.bincount(flat, minlength=n)
    return sums.reshape(spec.nx, spec.nt), counts.reshape(spec.nx, spec.nt)


def _fill_row_nearest(row: np.ndarray, fallback: float) -> np.ndarray:
    """Fill NaNs with the nearest observed value along the row, earlier on ties."""
    obs = np.flatnonzero(~np.isnan(row))
    if obs.size == 0:
        return np.full_like(row, fallback)
    if obs.size == row.size:
        return row
    j = np.arange(row.size)
    pos = np.searchsorted(obs, j)
    left = obs[np.clip(pos - 1, 0, obs.size - 1)]
    right = obs[np.clip(pos, 0, obs.size - 1)]
    d_left = np.where(pos > 0, j - left, np.iinfo(np.int64).max)
    d_right = np.where(pos < obs.size, right - j, np.iinfo(np.int64).max)
    src = np.where(d_left <= d_right, left, right)  # earlier time wins ties
    return row[src]


def rasterize(trajs: TrajectorySet, spec: GridSpec) -> SpeedField:
    """Mean instantaneous speed per cell; empty cells take the nearest value in
    their space row (earlier time on ties) and v_max when the row is empty."""
    sums, counts = _bin_samples(trajs, spec)
    with np.errstate(invalid="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    means = np.clip(means, 0.0, spec.v_max)
    filled = np.empty_like(means)
    for i in range(spec.nx):
        filled[i] = _fill_row_nearest(means[i], spec.v_max)
    return SpeedField(spec, filled)


def rasterize_partial(probes: TrajectorySet, spec: GridSpec) -> PartialField:
    """Mean probe speed in cells holding at least one probe sample; no filling."""
    sums, counts = _bin_samples(probes, spec)
    with np.errstate(invalid="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    means = np.clip(means, 0.0, spec.v_max)
    return encode_partial(means, spec)


def select_probes(trajs: TrajectorySet, coverage: float, seed: int = 0) -> TrajectorySet:
    """Keep each vehicle independently with probability `coverage` (seeded)."""
    if not 0.0 <= coverage <= 1.0:
        raise ValueError(f"coverage must lie in [0, 1], got {coverage}")
    rng = np.random.default_rng(seed)
    kept = {}
    for vid in trajs.ids():
        if rng.random() < coverage:
            kept[vid] = trajs.vehicles[vid]
    return TrajectorySet(kept)


def build_samples(full: SpeedField, probes: PartialField, wx: int, wt: int,
                  stride_x: int = 10, stride_t: int = 10) -> list[SamplePair]:
    """Sliding-window pairs over the probe and ground-truth fields."""
    if full.spec.nx != probes.spec.nx or full.spec.nt != probes.spec.nt:
        raise ValueError("full and probe fields differ in size")
    if stride_x < 1 or stride_t < 1:
        raise ValueError("strides must be >= 1")
    nx, nt = full.spec.nx, full.spec.nt
    if wx > nx or wt > nt:
        raise IndexError(f"window {wx} x {wt} larger than field {nx} x {nt}")
    pairs = []
    for x0 in range(0, nx - wx + 1, stride_x):
        for t0 in range(0, nt - wt + 1, stride_t):
            pairs.append(SamplePair(probes.window(x0, t0, wx, wt),
                                    full.window(x0, t0, wx, wt)))
    return pairs


# ---------------------------------------------------------------------------
# dataset directory layout: <dir>/samples/NNNNNN.input.sfld3 + NNNNNN.target.sfld
# ---------------------------------------------------------------------------

_SAMPLE_RE = re.compile(r"^(\d{6})\.input\.sfld3$")


def save_samples(pairs: list[SamplePair], directory):
    samples_dir = os.path.join(directory, "samples")
    os.makedirs(samples_dir, exist_ok=True)
    for i, pair in enumerate(pairs):
        stem = os.path.join(samples_dir, f"{i:06d}")
        save_partial(pair.input, stem + ".input.sfld3")
        save_field(pair.target, stem + ".target.sfld")


def load_samples(directory) -> list[SamplePair]:
    samples_dir = os.path.join(directory, "samples")
    if not os.path.isdir(samples_dir):
        raise FileNotFoundError(f"no samples/ directory under {directory}")
    pairs = []
    for name in sorted(os.listdir(samples_dir)):
        m = _SAMPLE_RE.match(name)
        if not m:
            continue
        stem = os.path.join(samples_dir, m.group(1))
        pairs.append(SamplePair(load_partial(stem + ".input.sfld3"),
                                load_field(stem + ".target.sfld")))
    return pairs
