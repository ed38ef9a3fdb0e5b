"""What the encoder knows: cluster structure of pooled hidden representations.

Encoder activations pooled over space-time give one vector per input field.
Projected to two dimensions (power-iteration PCA), inputs from different
demand regimes should separate without the model ever being told the regime;
the silhouette score quantifies that separation.
"""

import numpy as np

from anisotse import (Demand, SgdConfig, build_model, build_samples,
                      default_config, embed_and_score, grid_for_trajectories,
                      rasterize, rasterize_partial, scenario_for, select_probes,
                      simulate, train)

by_demand = {}
for seed, demand in enumerate(Demand):
    scenario = scenario_for(demand, road_len=800.0, duration=500.0, seed=seed)
    trajs = simulate(scenario)
    spec = grid_for_trajectories(trajs, road_len=800.0, duration=500.0)
    full = rasterize(trajs, spec)
    partial = rasterize_partial(select_probes(trajs, 0.05, seed=seed + 50), spec)
    by_demand[demand] = build_samples(full, partial, 50, 60, 10, 10)
    print(f"{demand.value}: {len(by_demand[demand])} windows")

train_pairs = [p for pairs in by_demand.values() for p in pairs[:60]]
model = build_model(default_config(channel_scale=0.25), seed=2)
train(model, train_pairs, [], SgdConfig(learning_rate=0.1, batch_size=16,
                                        epochs=5, seed=2))

partials, labels = [], []
for demand, pairs in by_demand.items():
    for p in pairs[60:110]:
        partials.append(p.input)
        labels.append(demand)

report = embed_and_score(model, partials, labels)
print(f"\nembedded {len(partials)} held-out samples "
      f"({model.encode_hidden(partials[0]).size}-dim hidden vectors)")
print(f"variance captured: pc1 {report.explained_variance[0]:.3g}, "
      f"pc2 {report.explained_variance[1]:.3g}")
print(f"overall silhouette: {report.silhouette:.3f}")
for demand in Demand:
    print(f"  {demand.value:12s} {report.label_silhouette[demand]:+.3f}")

# coarse scatter of the 2-D embedding
sym = {Demand.FREE_FLOW: "f", Demand.SLOW_MOVING: "s", Demand.CONGESTED: "C"}
xs, ys = report.coords[:, 0], report.coords[:, 1]
grid = [[" "] * 64 for _ in range(20)]
for (px, py), lab in zip(report.coords, labels):
    col = int((px - xs.min()) / (np.ptp(xs) + 1e-12) * 63)
    row = int((py - ys.min()) / (np.ptp(ys) + 1e-12) * 19)
    grid[row][col] = sym[lab]
print("\n2-D embedding (f = free-flow, s = slow-moving, C = congested):")
for row in grid:
    print("  |" + "".join(row) + "|")
