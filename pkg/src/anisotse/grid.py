"""Space-time grids, speed-field containers, RGB speed encoding, and field file IO.

Speeds are in m/s throughout; km/h appears only in reporting. Fields are
(nx, nt) arrays with space as the leading (row) index.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

KMPH_PER_MPS = 3.6

# magic, version, nx, nt, dx, dt, v_max, v_cong
_SFLD_HEADER = struct.Struct("<4sBIIdddd")
_SFLD_MAGIC = b"SFLD"


class FormatError(ValueError):
    """Malformed binary field/model file; the message names the byte offset."""


@dataclass(frozen=True)
class GridSpec:
    """Discretization of the space-time plane plus the speed bounds.

    dx/dt are the cell length (m) and duration (s); v_max is the maximum
    traffic speed and v_cong the (negative) backward shockwave speed, both
    in m/s.
    """

    nx: int
    nt: int
    dx: float = 10.0
    dt: float = 1.0
    v_max: float = 30.0
    v_cong: float = -5.0

    def __post_init__(self):
        if self.nx < 1 or self.nt < 1:
            raise ValueError(f"grid dims must be >= 1, got {self.nx} x {self.nt}")
        if self.dx <= 0 or self.dt <= 0:
            raise ValueError(f"cell sizes must be positive, got dx={self.dx}, dt={self.dt}")
        if self.v_max <= 0:
            raise ValueError(f"v_max must be positive, got {self.v_max}")
        if self.v_cong >= 0:
            raise ValueError(f"v_cong must be negative, got {self.v_cong}")

    @property
    def road_len(self) -> float:
        return self.nx * self.dx

    @property
    def duration(self) -> float:
        return self.nt * self.dt

    def resized(self, nx: int, nt: int) -> "GridSpec":
        """Same cell geometry and speed bounds on a different extent."""
        return GridSpec(nx=nx, nt=nt, dx=self.dx, dt=self.dt,
                        v_max=self.v_max, v_cong=self.v_cong)


# ---------------------------------------------------------------------------
# Colormap: two-piece linear red -> yellow -> green ramp, blue always 0.
# Injective on the 1/510 grid of normalized speeds, hence exactly invertible.
# ---------------------------------------------------------------------------

def colormap_encode(u: float) -> tuple[int, int, int]:
    """Map a normalized speed u in [0, 1] to an (r, g, b) byte triple."""
    if not 0.0 <= u <= 1.0 or not np.isfinite(u):
        raise ValueError(f"normalized speed must lie in [0, 1], got {u}")
    if u <= 0.5:
        return 255, int(np.floor(510.0 * u + 0.5)), 0
    return int(np.floor(510.0 * (1.0 - u) + 0.5)), 255, 0


def colormap_decode(rgb) -> float | None:
    """Invert colormap_encode; (0, 0, 0) decodes to None (missing).

    Accepts colors within 1 byte per channel of the ramp; anything further
    off-curve raises ValueError.
    """
    r, g, b = (int(round(float(c))) for c in rgb)
    if (r, g, b) == (0, 0, 0):
        return None
    # one candidate per linear piece
    candidates = (g / 510.0, (510 - r) / 510.0)
    best = min(candidates, key=lambda u: _byte_error(u, (r, g, b)))
    if _byte_error(best, (r, g, b)) > 1:
        raise ValueError(f"color {(r, g, b)} is not on the speed colormap curve")
    return best


def _byte_error(u: float, rgb: tuple[int, int, int]) -> int:
    if not 0.0 <= u <= 1.0:
        return 256
    enc = colormap_encode(u)
    return max(abs(enc[i] - rgb[i]) for i in range(3))


def _encode_bytes(u: np.ndarray) -> np.ndarray:
    """Vectorized colormap_encode; u is any-shape array in [0, 1] -> (..., 3) uint8."""
    u = np.asarray(u, dtype=np.float64)
    r = np.where(u <= 0.5, 255.0, np.floor(510.0 * (1.0 - u) + 0.5))
    g = np.where(u <= 0.5, np.floor(510.0 * u + 0.5), 255.0)
    out = np.zeros(u.shape + (3,), dtype=np.uint8)
    out[..., 0] = r.astype(np.uint8)
    out[..., 1] = g.astype(np.uint8)
    return out


def _decode_bytes(rgb: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Vectorized decode of (..., 3) byte colors to normalized speeds.

    Unobserved entries come back NaN. Raises on the first observed cell more
    than 1 byte per channel off the ramp, naming its index.
    """
    r = rgb[..., 0].astype(np.int64)
    g = rgb[..., 1].astype(np.int64)
    u1 = g / 510.0
    u2 = (510 - r) / 510.0
    enc1 = _encode_bytes(np.clip(u1, 0.0, 1.0)).astype(np.int64)
    enc2 = _encode_bytes(np.clip(u2, 0.0, 1.0)).astype(np.int64)
    err1 = np.abs(enc1 - rgb.astype(np.int64)).max(axis=-1)
    err2 = np.abs(enc2 - rgb.astype(np.int64)).max(axis=-1)
    u = np.where(err1 <= err2, u1, u2)
    err = np.minimum(err1, err2)
    bad = observed & (err > 1)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(
            f"cell {idx}: color {tuple(int(c) for c in rgb[idx])} is not on the colormap curve")
    u = np.where(observed, u, np.nan)
    return u


# ---------------------------------------------------------------------------
# Field containers
# ---------------------------------------------------------------------------

def _frozen_array(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SpeedField:
    """Complete macroscopic speed field: (nx, nt) array of speeds in m/s."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.spec.nx, self.spec.nt):
            raise ValueError(
                f"values shape {v.shape} does not match grid {self.spec.nx} x {self.spec.nt}")
        tol = 1e-6 * self.spec.v_max
        if not np.isfinite(v).all() or v.min() < -tol or v.max() > self.spec.v_max + tol:
            raise ValueError("speeds must lie in [0, v_max]")
        object.__setattr__(self, "values", _frozen_array(np.clip(v, 0.0, self.spec.v_max)))

    def window(self, x0: int, t0: int, wx: int, wt: int) -> "SpeedField":
        _check_window(self.spec, x0, t0, wx, wt)
        return SpeedField(self.spec.resized(wx, wt),
                          self.values[x0:x0 + wx, t0:t0 + wt].copy())

    def to_rgb_bytes(self) -> np.ndarray:
        """Colorized field as an (nx, nt, 3) uint8 array."""
        return _encode_bytes(self.values / self.spec.v_max)


@dataclass(frozen=True)
class PartialField:
    """Sparse probe observations as a normalized (nx, nt, 3) RGB array plus mask.

    Missing cells are exactly (0, 0, 0); observed cells lie on the colormap
    curve, so the observed speeds can be recovered with .speeds().
    """

    spec: GridSpec
    rgb: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float64)
        obs = np.asarray(self.observed, dtype=bool)
        if rgb.shape != (self.spec.nx, self.spec.nt, 3):
            raise ValueError(f"rgb shape {rgb.shape} does not match grid")
        if obs.shape != (self.spec.nx, self.spec.nt):
            raise ValueError(f"mask shape {obs.shape} does not match grid")
        if rgb.min() < 0.0 or rgb.max() > 1.0:
            raise ValueError("rgb values must lie in [0, 1]")
        if rgb[~obs].any():
            raise ValueError("unobserved cells must be (0, 0, 0)")
        object.__setattr__(self, "rgb", _frozen_array(rgb))
        object.__setattr__(self, "observed", _frozen_array(obs))

    def speeds(self) -> np.ndarray:
        """Observed speeds in m/s, NaN where missing."""
        as_bytes = np.floor(self.rgb * 255.0 + 0.5).astype(np.uint8)
        u = _decode_bytes(as_bytes, self.observed)
        return u * self.spec.v_max

    def window(self, x0: int, t0: int, wx: int, wt: int) -> "PartialField":
        _check_window(self.spec, x0, t0, wx, wt)
        return PartialField(self.spec.resized(wx, wt),
                            self.rgb[x0:x0 + wx, t0:t0 + wt].copy(),
                            self.observed[x0:x0 + wx, t0:t0 + wt].copy())

    def to_rgb_bytes(self) -> np.ndarray:
        return np.floor(self.rgb * 255.0 + 0.5).astype(np.uint8)

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())


def encode_partial(speeds: np.ndarray, spec: GridSpec) -> PartialField:
    """Build a PartialField from an (nx, nt) speed array with NaN marking missing cells."""
    speeds = np.asarray(speeds, dtype=np.float64)
    if speeds.shape != (spec.nx, spec.nt):
        raise ValueError(f"speeds shape {speeds.shape} does not match grid")
    observed = ~np.isnan(speeds)
    present = speeds[observed]
    if present.size and (present.min() < 0.0 or present.max() > spec.v_max):
        raise ValueError("observed speeds must lie in [0, v_max]")
    u = np.where(observed, speeds / spec.v_max, 0.0)
    rgb = _encode_bytes(u).astype(np.float64) / 255.0
    rgb[~observed] = 0.0
    return PartialField(spec, rgb, observed)


def _check_window(spec: GridSpec, x0: int, t0: int, wx: int, wt: int):
    if wx < 1 or wt < 1:
        raise IndexError(f"window dims must be >= 1, got {wx} x {wt}")
    if x0 < 0 or t0 < 0 or x0 + wx > spec.nx or t0 + wt > spec.nt:
        raise IndexError(
            f"window [{x0}:{x0 + wx}) x [{t0}:{t0 + wt}) exceeds grid {spec.nx} x {spec.nt}")


def window(field: SpeedField, x0: int, t0: int, wx: int, wt: int) -> SpeedField:
    """Copy out a wx-by-wt sub-field anchored at cell (x0, t0)."""
    return field.window(x0, t0, wx, wt)


# ---------------------------------------------------------------------------
# Binary field files (SFLD / SFLD3)
# ---------------------------------------------------------------------------

def _atomic_write(path, payload: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack_header(spec: GridSpec) -> bytes:
    return _SFLD_HEADER.pack(_SFLD_MAGIC, 1, spec.nx, spec.nt,
                             spec.dx, spec.dt, spec.v_max, spec.v_cong)


def _parse_header(raw: bytes, path) -> GridSpec:
    if len(raw) < _SFLD_HEADER.size:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    magic, version, nx, nt, dx, dt, v_max, v_cong = _SFLD_HEADER.unpack_from(raw)
    if magic != _SFLD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    return GridSpec(nx=nx, nt=nt, dx=dx, dt=dt, v_max=v_max, v_cong=v_cong)


def save_field(field: SpeedField, path):
    """Write a SpeedField as an SFLD file (f32 speeds, space-major)."""
    payload = _pack_header(field.spec) + field.values.astype("<f4").tobytes()
    _atomic_write(path, payload)


def load_field(path) -> SpeedField:
    with open(path, "rb") as fh:
        raw = fh.read()
    spec = _parse_header(raw, path)
    need = _SFLD_HEADER.size + 4 * spec.nx * spec.nt
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, file ends at byte {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", count=spec.nx * spec.nt,
                           offset=_SFLD_HEADER.size).astype(np.float64)
    return SpeedField(spec, values.reshape(spec.nx, spec.nt))


def save_partial(pf: PartialField, path):
    """Write a PartialField as an SFLD3 file (f32 RGB planes plus u8 mask)."""
    payload = (_pack_header(pf.spec)
               + pf.rgb.astype("<f4").tobytes()
               + pf.observed.astype(np.uint8).tobytes())
    _atomic_write(path, payload)


def load_partial(path) -> PartialField:
    with open(path, "rb") as fh:
        raw = fh.read()
    spec = _parse_header(raw, path)
    n = spec.nx * spec.nt
    need = _SFLD_HEADER.size + 12 * n + n
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, file ends at byte {len(raw)}")
    rgb = np.frombuffer(raw, dtype="<f4", count=3 * n,
                        offset=_SFLD_HEADER.size).astype(np.float64)
    mask = np.frombuffer(raw, dtype=np.uint8, count=n,
                         offset=_SFLD_HEADER.size + 12 * n)
    try:
        return PartialField(spec, rgb.reshape(spec.nx, spec.nt, 3),
                            mask.reshape(spec.nx, spec.nt).astype(bool))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
