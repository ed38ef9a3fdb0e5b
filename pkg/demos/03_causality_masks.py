"""Causality cones that restrict what a convolution kernel may look at.

Traffic disturbances travel at bounded speeds: downstream with the flow in
free traffic (up to v_max), upstream against it in congestion (up to
|v_cong|). A kernel cell is active when its space-time offset from the
center lies inside the corresponding cone; offsets on the time axis with no
time separation would mean infinite propagation speed and are excluded.
"""

from anisotse import MaskKind, ascii_art, build_mask, count_active

DX, DT, VMAX, VCONG = 10.0, 1.0, 30.0, -5.0

print(f"cell geometry {DX} m x {DT} s, v_max {VMAX} m/s, v_cong {VCONG} m/s")
print("rows = space (downstream up), columns = time (later right)\n")

for kind in MaskKind:
    for kh, kw in [(5, 5), (9, 9)]:
        mask = build_mask(kind, kh, kw, DX, DT, VMAX, VCONG)
        print(f"{kind.value} {kh}x{kw}: {count_active(mask)}/{kh * kw} active")
        print("\n".join("  " + line for line in ascii_art(mask).splitlines()))
        print()

# the cones only share the zero-slope line: a disturbance that stays put
free = build_mask(MaskKind.FREE_FLOW, 9, 9, DX, DT, VMAX, VCONG)
cong = build_mask(MaskKind.CONGESTED, 9, 9, DX, DT, VMAX, VCONG)
overlap = free.bits & cong.bits
print(f"free-flow and congested 9x9 cones overlap on {overlap.sum()} cells "
      "(the stationary line)")

# widening v_max opens the free-flow cone
for vmax in (10.0, 30.0, 90.0):
    m = build_mask(MaskKind.FREE_FLOW, 9, 9, DX, DT, vmax, VCONG)
    print(f"free-flow 9x9 active cells at v_max={vmax:5.1f}: {count_active(m)}")
