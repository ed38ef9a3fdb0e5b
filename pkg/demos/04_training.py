"""Train a reduced encoder-decoder end to end on simulated traffic.

Full-size training is a long batch job (see the acceptance suite); this demo
shrinks channel widths and the dataset so the whole loop runs in about a
minute while exercising every stage: simulate -> rasterize -> probe select ->
window -> train -> save.
"""

import os
import tempfile

import numpy as np

from anisotse import (Demand, SgdConfig, build_model, build_samples,
                      default_config, grid_for_trajectories, load_model,
                      rasterize, rasterize_partial, save_model, scenario_for,
                      select_probes, simulate, train)

pairs = []
for seed, demand in enumerate([Demand.FREE_FLOW, Demand.SLOW_MOVING,
                               Demand.CONGESTED]):
    scenario = scenario_for(demand, road_len=800.0, duration=420.0, seed=seed)
    trajs = simulate(scenario)
    spec = grid_for_trajectories(trajs, road_len=800.0, duration=420.0)
    full = rasterize(trajs, spec)
    probes = select_probes(trajs, coverage=0.05, seed=seed + 100)
    partial = rasterize_partial(probes, spec)
    pairs += build_samples(full, partial, wx=50, wt=60, stride_x=10, stride_t=20)
    print(f"{demand.value}: {trajs.n_vehicles} vehicles, "
          f"{probes.n_vehicles} probes, {len(pairs)} total pairs")

rng = np.random.default_rng(0)
order = rng.permutation(len(pairs))
val = [pairs[i] for i in order[:20]]
trn = [pairs[i] for i in order[20:120]]

config = default_config(channel_scale=0.25)  # quarter-width for demo speed
model = build_model(config, seed=0)
print(f"\nmodel: {len(model.layers)} layers, {model.n_params} parameters, "
      f"channels {config.channel_chain()}")

report = train(model, trn, val, SgdConfig(learning_rate=0.1, batch_size=16,
                                          epochs=6, seed=0))
for e, (tl, vl) in enumerate(zip(report.train_loss, report.val_loss), start=1):
    print(f"epoch {e}: train mse {tl:.4f}, val mse {vl:.4f}")
print(f"wall time {report.wall_time:.1f} s")

from anisotse.nn import layer_params

with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "demo.atse")
    save_model(model, path)
    back = load_model(path)
    same = all(np.array_equal(p, q)
               for a, b in zip(model.layers, back.layers)
               for p, q in zip(layer_params(a), layer_params(b)))
    print(f"\nsaved {os.path.getsize(path)} bytes; reload bit-identical: {same}")
