"""The three traffic regimes produced by the built-in IDM microsimulator.

Free-flow is light demand on an open road; slow-moving adds periodic short
slow zones that shed backward-propagating stop-and-go waves; congested pins a
near-standstill cap at the downstream end so a queue spills back upstream.
"""

import numpy as np

from anisotse import (Demand, IdmParams, equilibrium_gap, grid_for_trajectories,
                      rasterize, scenario_for, simulate)

params = IdmParams()
print(f"IDM: desired speed {params.v0} m/s, headway {params.T_hw} s, "
      f"min gap {params.s0} m")
print(f"equilibrium gap at 15 m/s: {equilibrium_gap(15.0, params):.2f} m")

DURATION = 600.0
ROAD = 800.0

for demand in Demand:
    spec = scenario_for(demand, road_len=ROAD, duration=DURATION, seed=2)
    trajs = simulate(spec)
    speeds = np.concatenate([a[:, 2] for a in trajs.vehicles.values()])
    gspec = grid_for_trajectories(trajs, road_len=ROAD, duration=DURATION)
    field = rasterize(trajs, gspec)
    print(f"\n{demand.value}: inflow {spec.inflow:.0f} veh/h, "
          f"{len(spec.bottlenecks)} slow zone(s)")
    print(f"  {trajs.n_vehicles} vehicles, speed mean {speeds.mean():5.1f} m/s, "
          f"p5 {np.percentile(speeds, 5):5.1f}, p95 {np.percentile(speeds, 95):5.1f}")

    # coarse ASCII space-time picture: dark = slow (space down, time right)
    shades = " .:-=+*#%@"
    sub = field.values[::10, ::30]
    print("  speed map (@ = jammed):")
    for row in sub:
        line = "".join(shades[int((1 - v / gspec.v_max) * (len(shades) - 1))]
                       for v in row)
        print("    " + line)
