"""End-user workflows: field estimation, trajectory inference, metrics, embeddings."""

from __future__ import annotations

import csv
import enum
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import KMPH_PER_MPS, PartialField, SpeedField
from .microsim import TrajectorySet
from .model import EncoderDecoder


# ---------------------------------------------------------------------------
# estimation and evaluation
# ---------------------------------------------------------------------------

def estimate(model: EncoderDecoder, partial: PartialField) -> SpeedField:
    """Reconstruct the dense speed field; clamped to [0, v_max]."""
    cfg = model.config
    spec = partial.spec
    if (spec.dx, spec.dt, spec.v_max) != (cfg.dx, cfg.dt, cfg.v_max):
        raise ValueError(
            f"grid constants (dx={spec.dx}, dt={spec.dt}, v_max={spec.v_max}) do not "
            f"match the model (dx={cfg.dx}, dt={cfg.dt}, v_max={cfg.v_max})")
    out = model.forward(partial)
    return SpeedField(spec, np.clip(out.values, 0.0, spec.v_max))


def baseline_nearest(partial: PartialField) -> SpeedField:
    """Fill every missing cell with the nearest observed cell's speed.

    Euclidean distance in cell units; an all-missing input fills with v_max.
    This is the reference interpolator the learned model must beat.
    """
    spec = partial.spec
    speeds = partial.speeds()
    if not partial.observed.any():
        return SpeedField(spec, np.full((spec.nx, spec.nt), spec.v_max))
    ix, it = ndimage.distance_transform_edt(~partial.observed, return_distances=False,
                                            return_indices=True)
    return SpeedField(spec, speeds[ix, it])


@dataclass
class EvalReport:
    """Speed-field error summary; RMSE reported in km/h, errors kept in m/s."""

    rmse_kmph: float
    relative_rmse: float
    error: np.ndarray
    observed_rmse_kmph: float | None = None
    relative_defined: bool = True

    def to_text(self) -> str:
        lines = [f"rmse_kmph={self.rmse_kmph:.6f}",
                 f"relative_rmse={self.relative_rmse:.6f}"]
        if self.observed_rmse_kmph is not None:
            lines.append(f"observed_rmse_kmph={self.observed_rmse_kmph:.6f}")
        if not self.relative_defined:
            lines.append("relative_rmse_defined=false")
        return "\n".join(lines) + "\n"


def evaluate(est: SpeedField, truth: SpeedField,
             observed: np.ndarray | None = None) -> EvalReport:
    """RMSE over all cells (and over observed cells when a mask is given)."""
    if est.values.shape != truth.values.shape:
        raise ValueError(
            f"shape mismatch {est.values.shape} vs {truth.values.shape}")
    err = est.values - truth.values
    rmse = float(np.sqrt(np.mean(err * err)))
    mean_truth = float(truth.values.mean())
    defined = mean_truth > 0
    relative = rmse / mean_truth if defined else float("nan")
    obs_rmse = None
    if observed is not None:
        observed = np.asarray(observed, dtype=bool)
        if observed.shape != err.shape:
            raise ValueError("observed mask shape mismatch")
        if observed.any():
            obs_rmse = float(np.sqrt(np.mean(err[observed] ** 2))) * KMPH_PER_MPS
    return EvalReport(rmse_kmph=rmse * KMPH_PER_MPS, relative_rmse=relative,
                      error=err, observed_rmse_kmph=obs_rmse, relative_defined=defined)


# ---------------------------------------------------------------------------
# trajectory inference
# ---------------------------------------------------------------------------

def _bilinear(values: np.ndarray, spec, x: float, t: float) -> float:
    """Interpolate the field at (x, t) with cell centers as nodes, edge-clamped."""
    gx = min(max(x / spec.dx - 0.5, 0.0), spec.nx - 1.0)
    gt = min(max(t / spec.dt - 0.5, 0.0), spec.nt - 1.0)
    i0 = min(int(gx), spec.nx - 2) if spec.nx > 1 else 0
    j0 = min(int(gt), spec.nt - 2) if spec.nt > 1 else 0
    i1 = min(i0 + 1, spec.nx - 1)
    j1 = min(j0 + 1, spec.nt - 1)
    fx = gx - i0
    ft = gt - j0
    return float((values[i0, j0] * (1 - fx) * (1 - ft)
                  + values[i1, j0] * fx * (1 - ft)
                  + values[i0, j1] * (1 - fx) * ft
                  + values[i1, j1] * fx * ft))


def infer_trajectories(fld: SpeedField, entry_times, substeps: int = 10) -> TrajectorySet:
    """Trace one vehicle per entry time through the speed field.

    Explicit Euler with `substeps` sub-steps per grid interval (h = dt/substeps
    for aligned entries), bilinear speed interpolation, samples recorded at
    field-time multiples. A vehicle stops being recorded once it passes the
    downstream end or the time span runs out.
    """
    spec = fld.spec
    entry_times = [float(t) for t in entry_times]
    if any(b < a for a, b in zip(entry_times, entry_times[1:])):
        raise ValueError("entry times must be sorted ascending")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    vehicles = {}
    for vid, t0 in enumerate(entry_times):
        if not 0.0 <= t0 <= spec.duration:
            raise ValueError(f"entry time {t0} outside [0, {spec.duration}]")
        samples = [(t0, 0.0, _bilinear(fld.values, spec, 0.0, t0))]
        x = 0.0
        t = t0
        while t < spec.duration - 1e-9 and x < spec.road_len:
            # next field-time multiple strictly after t
            t_next = min((math.floor(t / spec.dt + 1e-9) + 1) * spec.dt, spec.duration)
            h = (t_next - t) / substeps
            for _ in range(substeps):
                x += h * _bilinear(fld.values, spec, x, t)
                t += h
            t = t_next  # avoid float drift across intervals
            if x < spec.road_len:
                samples.append((t, x, _bilinear(fld.values, spec, x, t)))
            else:
                break
        vehicles[vid] = np.asarray(samples)
    return TrajectorySet(vehicles)


def fifo_violations(trajs: TrajectorySet, tol: float = 1e-6):
    """Count sample instants where a later-entering vehicle is ahead of an
    earlier one; returns (count, list of offending (earlier_id, later_id) pairs)."""
    ids = trajs.ids()
    entry = {vid: float(trajs.vehicles[vid][0, 0]) for vid in ids}
    ids.sort(key=lambda vid: (entry[vid], vid))
    tables = {}
    for vid in ids:
        arr = trajs.vehicles[vid]
        tables[vid] = dict(zip(np.round(arr[:, 0] / 1e-6).astype(np.int64) , arr[:, 1]))
    count = 0
    pairs = []
    for a_idx in range(len(ids)):
        for b_idx in range(a_idx + 1, len(ids)):
            a, b = ids[a_idx], ids[b_idx]
            ta, tb = tables[a], tables[b]
            common = ta.keys() & tb.keys()
            bad = sum(1 for k in common if tb[k] > ta[k] + tol)
            if bad:
                count += bad
                pairs.append((a, b))
    return count, pairs


# ---------------------------------------------------------------------------
# hidden-representation embedding
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingReport:
    coords: np.ndarray                     # (n, 2) projections
    components: np.ndarray                 # (2, c) orthonormal axes
    explained_variance: np.ndarray         # (2,)
    silhouette: float
    label_silhouette: dict = field(default_factory=dict)
    labels: list = field(default_factory=list)
    degenerate: bool = False
    hidden: np.ndarray | None = None       # raw (n, c) vectors for external tools


def _power_iteration_pca(xc: np.ndarray, n_components: int = 2,
                         tol: float = 1e-10, max_iter: int = 10_000,
                         seed: int = 0):
    """Leading principal components by power iteration with deflation."""
    n, c = xc.shape
    cov = (xc.T @ xc) / n
    rng = np.random.default_rng(seed)
    comps = np.zeros((n_components, c))
    variances = np.zeros(n_components)
    for k in range(n_components):
        v = rng.standard_normal(c)
        norm = np.linalg.norm(v)
        v /= norm
        lam = 0.0
        for _ in range(max_iter):
            w = cov @ v
            lam = float(np.linalg.norm(w))
            if lam < 1e-300:
                break
            w /= lam
            if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol:
                v = w
                break
            v = w
        if lam < 1e-300:
            # exhausted variance: fill with any unit vector orthogonal to the rest
            v = _orthogonal_unit(comps[:k], c)
            lam = 0.0
        comps[k] = v
        variances[k] = lam
        cov = cov - lam * np.outer(v, v)
    return comps, variances


def _orthogonal_unit(basis: np.ndarray, c: int) -> np.ndarray:
    for k in range(c):
        v = np.zeros(c)
        v[k] = 1.0
        for b in basis:
            v -= (v @ b) * b
        norm = np.linalg.norm(v)
        if norm > 1e-12:
            return v / norm
    raise ValueError("cannot find an orthogonal direction")


def silhouette_values(points: np.ndarray, labels) -> np.ndarray:
    """Per-point silhouette with Euclidean distances; singletons score 0."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(points)
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    uniq = sorted(set(labels.tolist()), key=str)
    scores = np.zeros(n)
    for i in range(n):
        own = labels == labels[i]
        n_own = int(own.sum())
        if n_own <= 1:
            continue
        a = d[i, own].sum() / (n_own - 1)
        b = min(d[i, labels == lab].mean() for lab in uniq if lab != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return scores


def embed_and_score(model: EncoderDecoder, partials, labels,
                    seed: int = 0) -> EmbeddingReport:
    """Pool encoder activations, project to 2-D by PCA, score label separation."""
    partials = list(partials)
    labels = list(labels)
    if len(partials) < 3:
        raise ValueError("need at least 3 samples")
    if len(partials) != len(labels):
        raise ValueError("labels must match samples")
    if len(set(map(str, labels))) < 2:
        raise ValueError("need at least 2 distinct labels")
    hidden = np.stack([model.encode_hidden(p) for p in partials])
    centered = hidden - hidden.mean(axis=0)
    if float(np.abs(centered).max()) < 1e-12:
        n = len(partials)
        return EmbeddingReport(coords=np.zeros((n, 2)),
                               components=np.zeros((2, hidden.shape[1])),
                               explained_variance=np.zeros(2),
                               silhouette=0.0,
                               label_silhouette={lab: 0.0 for lab in set(labels)},
                               labels=labels, degenerate=True, hidden=hidden)
    comps, variances = _power_iteration_pca(centered, seed=seed)
    coords = centered @ comps.T
    svals = silhouette_values(coords, labels)
    lab_arr = np.asarray(labels)
    per_label = {lab: float(svals[lab_arr == lab].mean()) for lab in set(labels)}
    return EmbeddingReport(coords=coords, components=comps,
                           explained_variance=variances,
                           silhouette=float(svals.mean()),
                           label_silhouette=per_label, labels=labels,
                           degenerate=False, hidden=hidden)


def write_embedding_csv(report: EmbeddingReport, path):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "pc1", "pc2", "label"])
            for i, lab in enumerate(report.labels):
                name = lab.value if isinstance(lab, enum.Enum) else str(lab)
                writer.writerow([i, f"{report.coords[i, 0]:.6f}",
                                 f"{report.coords[i, 1]:.6f}", name])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
