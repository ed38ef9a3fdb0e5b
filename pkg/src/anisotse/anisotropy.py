"""Binary causality masks restricting convolution kernels to traffic propagation cones.

A kernel cell at space offset dx_off and time offset dt_off from the center is
kept when a disturbance could physically travel between the two points: along
the flow at up to v_max in free-flow traffic, against the flow at up to
|v_cong| in congestion. Offsets with dt_off = 0 but dx_off != 0 would imply
infinite propagation speed and are always masked out of the causal kinds.
Cones are two-sided in time: estimation smooths using both past and future
probe observations along a characteristic.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class MaskKind(enum.Enum):
    ISOTROPIC = "isotropic"
    FREE_FLOW = "free-flow"
    CONGESTED = "congested"


@dataclass(frozen=True)
class CausalityMask:
    kh: int
    kw: int
    bits: np.ndarray  # (kh, kw) uint8, center always 1, point-symmetric

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.shape != (self.kh, self.kw):
            raise ValueError(f"bits shape {bits.shape} != ({self.kh}, {self.kw})")
        bits = np.ascontiguousarray(bits)
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)


def build_mask(kind: MaskKind, kh: int, kw: int, dx: float, dt: float,
               v_max: float, v_cong: float) -> CausalityMask:
    """Construct the (kh, kw) mask for a propagation regime.

    Rows are space offsets (downstream positive), columns time offsets. The
    slope test multiplies through by |dt_off| instead of dividing, so cells
    exactly on the v_max or v_cong characteristic are stably included.
    """
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel dims must be odd, got {kh} x {kw}")
    if v_max <= 0 or v_cong >= 0:
        raise ValueError("need v_max > 0 and v_cong < 0")
    if kind is MaskKind.ISOTROPIC:
        return CausalityMask(kh, kw, np.ones((kh, kw), dtype=np.uint8))

    ci, cj = (kh - 1) // 2, (kw - 1) // 2
    i_off = (np.arange(kh) - ci)[:, None]          # space cells
    j_off = (np.arange(kw) - cj)[None, :]          # time cells
    dxm = i_off * dx                               # meters
    dts = np.abs(j_off) * dt                       # seconds, >= 0
    signed = dxm * np.sign(j_off)                  # dx_off * sign(dt_off)

    if kind is MaskKind.FREE_FLOW:
        cone = (signed >= 0) & (signed <= v_max * dts)
    elif kind is MaskKind.CONGESTED:
        cone = (signed <= 0) & (signed >= v_cong * dts)
    else:
        raise ValueError(f"unknown mask kind {kind!r}")
    bits = (cone & (j_off != 0)) | ((i_off == 0) & (j_off == 0))
    return CausalityMask(kh, kw, bits.astype(np.uint8))


def count_active(mask: CausalityMask) -> int:
    return int(mask.bits.sum())


def ascii_art(mask: CausalityMask) -> str:
    """Render the mask as a '#'/'.' grid (rows = space, columns = time)."""
    return "\n".join("".join("#" if b else "." for b in row) for row in mask.bits)
