"""Command-line driver: aniso-tse <subcommand>.

Each subcommand reads optional key=value pairs from --config; explicit flags
win over config values, which win over built-in defaults. All randomness in a
subcommand flows from its single --seed. Output files are written to a
temporary name and renamed, so failures never leave partial files behind.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

import numpy as np

from . import dataset as ds
from . import microsim as ms
from . import pipeline as pl
from .anisotropy import MaskKind, ascii_art, build_mask
from .grid import FormatError, load_field, load_partial, save_field, save_partial
from .model import SgdConfig, build_model, default_config, load_model, save_model, train
from .nn import Activation, DualBranchLayer, finite_diff_check, init_layer


class UsageError(Exception):
    pass


# flags that may also come from the config file, with their defaults
_COMMON_GRID = {"dx": 10.0, "dt": 1.0, "vmax": 30.0, "vcong": -5.0}


def _add_grid_flags(sub):
    sub.add_argument("--dx", type=float, default=None, help="cell length (m)")
    sub.add_argument("--dt", type=float, default=None, help="cell duration (s)")
    sub.add_argument("--vmax", type=float, default=None, help="maximum speed (m/s)")
    sub.add_argument("--vcong", type=float, default=None,
                     help="backward wave speed (m/s, negative)")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _load_config_file(path) -> dict[str, str]:
    out = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key=value")
                key, val = line.split("=", 1)
                out[key.strip().replace("-", "_")] = val.strip()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    return out


def _resolve(args, defaults: dict):
    """Merge flag > config > default for every key in defaults."""
    cfg = _load_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(cfg) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    resolved = {}
    for key, default in defaults.items():
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            resolved[key] = flag_val
        elif key in cfg:
            if isinstance(default, bool):
                resolved[key] = _parse_bool(cfg[key])
            elif default is None:
                resolved[key] = cfg[key]
            else:
                try:
                    resolved[key] = type(default)(cfg[key])
                except ValueError as exc:
                    raise UsageError(f"config key {key}: {exc}") from exc
        else:
            resolved[key] = default
    return resolved


def _atomic_write_text(path, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_ppm(rgb: np.ndarray, path):
    """Binary P6 image from an (nx, nt, 3) uint8 array; space runs downward."""
    h, w, _ = rgb.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P6":
            raise FormatError(f"{path}: not a binary PPM")
        dims = fh.readline().split()
        maxval = int(fh.readline())
        if maxval != 255:
            raise FormatError(f"{path}: unsupported maxval {maxval}")
        w, h = int(dims[0]), int(dims[1])
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    opts = _resolve(args, {"demand": "free-flow", "duration": 600.0,
                           "road_len": 800.0, "inflow": -1.0, "sim_dt": 0.1,
                           "seed": 0})
    demand = ms.Demand(opts["demand"])
    inflow = None if opts["inflow"] < 0 else opts["inflow"]
    spec = ms.scenario_for(demand, road_len=opts["road_len"],
                           duration=opts["duration"], seed=opts["seed"],
                           sim_dt=opts["sim_dt"], inflow=inflow)
    trajs = ms.simulate(spec)
    ms.write_trajectory_csv(trajs, args.output)
    print(f"simulated {trajs.n_vehicles} vehicles "
          f"({trajs.total_samples()} samples) -> {args.output}")
    return 0


def _cmd_rasterize(args) -> int:
    opts = _resolve(args, dict(_COMMON_GRID, road_len=-1.0, duration=-1.0))
    trajs = ms.read_trajectory_csv(args.input)
    spec = ds.grid_for_trajectories(
        trajs, dx=opts["dx"], dt=opts["dt"], v_max=opts["vmax"], v_cong=opts["vcong"],
        road_len=None if opts["road_len"] < 0 else opts["road_len"],
        duration=None if opts["duration"] < 0 else opts["duration"])
    fld = ds.rasterize(trajs, spec)
    save_field(fld, args.output)
    print(f"rasterized {spec.nx} x {spec.nt} field -> {args.output}")
    return 0


def _cmd_dataset(args) -> int:
    opts = _resolve(args, dict(_COMMON_GRID, coverage=0.05, wx=50, wt=60,
                               stride_x=10, stride_t=10, seed=0,
                               road_len=-1.0, duration=-1.0))
    trajs = ms.read_trajectory_csv(args.input)
    spec = ds.grid_for_trajectories(
        trajs, dx=opts["dx"], dt=opts["dt"], v_max=opts["vmax"], v_cong=opts["vcong"],
        road_len=None if opts["road_len"] < 0 else opts["road_len"],
        duration=None if opts["duration"] < 0 else opts["duration"])
    full = ds.rasterize(trajs, spec)
    probes = ds.select_probes(trajs, opts["coverage"], seed=opts["seed"])
    partial = ds.rasterize_partial(probes, spec)
    pairs = ds.build_samples(full, partial, opts["wx"], opts["wt"],
                             opts["stride_x"], opts["stride_t"])
    os.makedirs(args.output, exist_ok=True)
    ds.save_samples(pairs, args.output)
    save_field(full, os.path.join(args.output, "full.sfld"))
    save_partial(partial, os.path.join(args.output, "probes.sfld3"))
    print(f"{len(pairs)} sample pairs ({probes.n_vehicles}/{trajs.n_vehicles} "
          f"probe vehicles) -> {args.output}")
    return 0


def _cmd_train(args) -> int:
    opts = _resolve(args, {"lr": 1e-3, "batch": 16, "epochs": 30, "seed": 0,
                           "val_frac": 0.1, "half_channels": False})
    pairs = []
    for directory in args.data:
        pairs.extend(ds.load_samples(directory))
    if not pairs:
        raise ValueError("no sample pairs found")
    rng = np.random.default_rng(opts["seed"])
    order = rng.permutation(len(pairs))
    n_val = int(round(opts["val_frac"] * len(pairs)))
    val_pairs = [pairs[i] for i in order[:n_val]]
    train_pairs = [pairs[i] for i in order[n_val:]]

    spec = pairs[0].input.spec
    config = default_config(dx=spec.dx, dt=spec.dt, v_max=spec.v_max,
                            v_cong=spec.v_cong,
                            channel_scale=0.5 if opts["half_channels"] else 1.0)
    model = build_model(config, seed=opts["seed"])
    cfg = SgdConfig(learning_rate=opts["lr"], batch_size=opts["batch"],
                    epochs=opts["epochs"], seed=opts["seed"])
    print(f"training on {len(train_pairs)} pairs (val {len(val_pairs)}), "
          f"{model.n_params} parameters")
    report = train(model, train_pairs, val_pairs, cfg)
    for i, tl in enumerate(report.train_loss):
        vl = f" val={report.val_loss[i]:.6f}" if report.val_loss else ""
        print(f"epoch {i + 1}: train={tl:.6f}{vl}")
    save_model(model, args.output)
    print(f"model -> {args.output} ({report.wall_time:.1f} s)")
    return 0


def _cmd_estimate(args) -> int:
    model = load_model(args.model)
    partial = load_partial(args.input)
    fld = pl.estimate(model, partial)
    save_field(fld, args.output)
    print(f"estimated {fld.spec.nx} x {fld.spec.nt} field -> {args.output}")
    return 0


def _cmd_trajectories(args) -> int:
    opts = _resolve(args, {"substeps": 10})
    fld = load_field(args.field)
    try:
        entries = [float(tok) for tok in args.entry_times.split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"--entry-times: {exc}") from exc
    trajs = pl.infer_trajectories(fld, entries, substeps=opts["substeps"])
    ms.write_trajectory_csv(trajs, args.output)
    n_viol, _ = pl.fifo_violations(trajs)
    print(f"{len(entries)} trajectories -> {args.output} (fifo violations: {n_viol})")
    return 0


def _cmd_eval(args) -> int:
    est = load_field(args.estimate)
    truth = load_field(args.truth)
    observed = load_partial(args.partial).observed if args.partial else None
    report = pl.evaluate(est, truth, observed)
    text = report.to_text()
    if args.output:
        _atomic_write_text(args.output, text)
        print(f"report -> {args.output}")
    else:
        print(text, end="")
    return 0


def _cmd_embed(args) -> int:
    opts = _resolve(args, {"seed": 0})
    model = load_model(args.model)
    partials, labels = [], []
    for item in args.inputs:
        if "=" not in item:
            raise UsageError(f"--inputs expects label=dir, got {item!r}")
        label, directory = item.split("=", 1)
        for pair in ds.load_samples(directory):
            partials.append(pair.input)
            labels.append(label)
    report = pl.embed_and_score(model, partials, labels, seed=opts["seed"])
    pl.write_embedding_csv(report, args.output)
    print(f"embedded {len(partials)} samples -> {args.output}")
    print(f"silhouette={report.silhouette:.4f}"
          + ("" if not report.degenerate else " (degenerate)"))
    for label in sorted(report.label_silhouette):
        print(f"silhouette[{label}]={report.label_silhouette[label]:.4f}")
    return 0


def _cmd_mask(args) -> int:
    opts = _resolve(args, dict(_COMMON_GRID, kind="free-flow", kh=5, kw=5))
    mask = build_mask(MaskKind(opts["kind"]), opts["kh"], opts["kw"],
                      opts["dx"], opts["dt"], opts["vmax"], opts["vcong"])
    print(ascii_art(mask))
    return 0


def _cmd_gradcheck(args) -> int:
    opts = _resolve(args, {"seed": 0})
    seed = opts["seed"]
    shape = (6, 7, 2)
    checks = []
    for name, act in (("relu", Activation.RELU), ("sigmoid", Activation.SIGMOID),
                      ("linear", Activation.NONE)):
        layer = init_layer(3, 5, 2, 3, activation=act, seed=seed, dtype=np.float64)
        checks.append((f"isotropic {name}", layer))
    m_free = build_mask(MaskKind.FREE_FLOW, 5, 5, 10.0, 1.0, 30.0, -5.0)
    m_cong = build_mask(MaskKind.CONGESTED, 5, 5, 10.0, 1.0, 30.0, -5.0)
    dual = DualBranchLayer(
        init_layer(5, 5, 2, 2, mask=m_free, activation=Activation.RELU,
                   seed=seed + 1, dtype=np.float64),
        init_layer(5, 5, 2, 2, mask=m_cong, activation=Activation.RELU,
                   seed=seed + 2, dtype=np.float64))
    checks.append(("dual-branch masked relu", dual))
    worst = 0.0
    for name, layer in checks:
        err = finite_diff_check(layer, shape, seed=seed)
        worst = max(worst, err)
        print(f"{name}: max relative error {err:.3e}")
    print(f"worst: {worst:.3e} ({'OK' if worst < 1e-4 else 'FAIL'})")
    return 0 if worst < 1e-4 else 1


def _cmd_export_image(args) -> int:
    kind = args.kind
    if kind is None:
        kind = "partial" if str(args.input).endswith(".sfld3") else "full"
    if kind == "partial":
        rgb = load_partial(args.input).to_rgb_bytes()
    else:
        rgb = load_field(args.input).to_rgb_bytes()
    write_ppm(rgb, args.output)
    print(f"{rgb.shape[1]} x {rgb.shape[0]} image -> {args.output}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aniso-tse",
        description="Traffic speed-field reconstruction from sparse probe vehicles")
    subs = parser.add_subparsers(dest="cmd")

    def sub(name, func, help_text):
        p = subs.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None, help="key=value config file")
        return p

    p = sub("simulate", _cmd_simulate, "run the IDM microsimulation")
    p.add_argument("--demand", choices=[d.value for d in ms.Demand], default=None)
    p.add_argument("--duration", type=float, default=None, help="simulated seconds")
    p.add_argument("--road-len", type=float, default=None, help="road length (m)")
    p.add_argument("--inflow", type=float, default=None, help="override preset veh/h")
    p.add_argument("--sim-dt", type=float, default=None, help="integration step (s)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--output", required=True, help="trajectory CSV")

    p = sub("rasterize", _cmd_rasterize, "trajectory CSV to SFLD speed field")
    p.add_argument("input", help="trajectory CSV")
    _add_grid_flags(p)
    p.add_argument("--road-len", type=float, default=None)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("-o", "--output", required=True, help="output .sfld")

    p = sub("dataset", _cmd_dataset, "build training sample pairs from trajectories")
    p.add_argument("input", help="trajectory CSV")
    _add_grid_flags(p)
    p.add_argument("--road-len", type=float, default=None)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--coverage", type=float, default=None, help="probe fraction")
    p.add_argument("--wx", type=int, default=None, help="window height (space cells)")
    p.add_argument("--wt", type=int, default=None, help="window width (time cells)")
    p.add_argument("--stride-x", type=int, default=None)
    p.add_argument("--stride-t", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--output", required=True, help="dataset directory")

    p = sub("train", _cmd_train, "train the encoder-decoder on sample pairs")
    p.add_argument("data", nargs="+", help="dataset directories")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--val-frac", type=float, default=None)
    p.add_argument("--half-channels", action="store_const", const=True, default=None,
                   help="halve all hidden channel counts")
    p.add_argument("-o", "--output", required=True, help="output .atse model")

    p = sub("estimate", _cmd_estimate, "reconstruct a field from sparse input")
    p.add_argument("model", help=".atse model file")
    p.add_argument("input", help="input .sfld3 partial field")
    p.add_argument("-o", "--output", required=True, help="output .sfld")

    p = sub("trajectories", _cmd_trajectories, "trace vehicles through a field")
    p.add_argument("field", help=".sfld speed field")
    p.add_argument("--entry-times", required=True,
                   help="comma-separated entry times (s)")
    p.add_argument("--substeps", type=int, default=None,
                   help="Euler sub-steps per grid interval")
    p.add_argument("-o", "--output", required=True, help="trajectory CSV")

    p = sub("eval", _cmd_eval, "compare an estimated field against ground truth")
    p.add_argument("estimate", help="estimated .sfld")
    p.add_argument("truth", help="ground-truth .sfld")
    p.add_argument("--partial", default=None,
                   help="input .sfld3 for observed-cell-only RMSE")
    p.add_argument("-o", "--output", default=None, help="write report here")

    p = sub("embed", _cmd_embed, "2-D embedding of hidden representations")
    p.add_argument("model", help=".atse model file")
    p.add_argument("--inputs", action="append", required=True,
                   metavar="LABEL=DIR", help="dataset dir with its demand label")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--output", required=True, help="embedding CSV")

    p = sub("mask", _cmd_mask, "print a causality mask as ASCII")
    p.add_argument("--kind", choices=[k.value for k in MaskKind], default=None)
    p.add_argument("--kh", type=int, default=None)
    p.add_argument("--kw", type=int, default=None)
    _add_grid_flags(p)

    p = sub("gradcheck", _cmd_gradcheck, "finite-difference gradient check")
    p.add_argument("--seed", type=int, default=None)

    p = sub("export-image", _cmd_export_image, "render a field file as binary PPM")
    p.add_argument("input", help=".sfld or .sfld3 file")
    p.add_argument("--kind", choices=["full", "partial"], default=None)
    p.add_argument("-o", "--output", required=True, help="output .ppm")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    if getattr(args, "cmd", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"aniso-tse: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"aniso-tse: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
