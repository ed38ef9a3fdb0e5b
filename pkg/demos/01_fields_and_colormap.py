"""Speed fields, the RGB speed encoding, and the binary field formats.

A speed field lives on a space-time grid (rows = road cells, columns = time
cells). Sparse probe observations can't be stored as plain numbers because a
zero speed (jam) and a missing cell would collide, so observed speeds are
encoded as colors on a red->yellow->green ramp and missing cells stay black.
"""

import os
import tempfile

import numpy as np

from anisotse import (GridSpec, SpeedField, colormap_decode, colormap_encode,
                      encode_partial, load_field, save_field)

spec = GridSpec(nx=8, nt=12, dx=10.0, dt=1.0, v_max=30.0, v_cong=-5.0)
print(f"grid: {spec.nx} x {spec.nt} cells of {spec.dx} m x {spec.dt} s")
print(f"speed bounds: v_max={spec.v_max} m/s, backward waves at {spec.v_cong} m/s")

# the palette endpoints: jam is pure red, free flow pure green, missing black
print("\ncolormap samples (normalized speed -> rgb bytes):")
for u in (0.0, 0.25, 0.5, 0.75, 1.0):
    print(f"  u={u:4.2f} -> {colormap_encode(u)}")
print("decode of (255, 255, 0):", colormap_decode((255, 255, 0)))
print("decode of (0, 0, 0):", colormap_decode((0, 0, 0)), "(missing)")

# a dense field: a slow band moving backward through free-flowing traffic
x, t = np.meshgrid(np.arange(spec.nx), np.arange(spec.nt), indexing="ij")
wave = 25.0 - 20.0 * np.exp(-0.5 * ((x * spec.dx + 5.0 * t * spec.dt - 60) / 15) ** 2)
field = SpeedField(spec, wave)
print("\nfield speeds (m/s), space down / time right:")
for row in field.values:
    print("  " + " ".join(f"{v:4.1f}" for v in row))

# sparse observations of the same field: keep ~25% of cells
rng = np.random.default_rng(0)
speeds = np.where(rng.random(wave.shape) < 0.25, wave, np.nan)
partial = encode_partial(speeds, spec)
print(f"\npartial field: {partial.n_observed}/{spec.nx * spec.nt} cells observed")
recovered = partial.speeds()
obs = partial.observed
print(f"max decode error: {np.nanmax(np.abs(recovered - speeds)):.4f} m/s "
      f"(quantization bound {spec.v_max / 510:.4f})")

# fields round-trip through the little-endian SFLD container
with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "wave.sfld")
    save_field(field, path)
    back = load_field(path)
    print(f"\nSFLD roundtrip: {os.path.getsize(path)} bytes, "
          f"max diff {np.abs(back.values - field.values).max():.2e} m/s (f32 storage)")
