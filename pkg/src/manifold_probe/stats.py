"""Statistics over metric tensors: anisotropy, homogeneity, random-direction
mixing and robustness to the choice of output distance."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DegenerateSpectrumError
from .metric import MetricTensor, compute_metric, hessian_full

DIM_THRESHOLDS = (0.99, 0.999, 0.9999, 0.99999)
LOG_FLOOR_REL = 1e-12
_CONST_REL = 1e-9


@dataclass
class SpectrumSummary:
    eigenvalues: np.ndarray
    trace: float
    dims: dict[float, int]
    log_range: float
    top_to_median: float

    @property
    def n(self) -> int:
        return len(self.eigenvalues)

    def row(self) -> dict:
        out = {"n": self.n, "lambda_1": float(self.eigenvalues[0]), "trace": self.trace}
        for p, m in self.dims.items():
            out[f"dim{str(p)[1:]}"] = m
        out["log_range"] = self.log_range
        out["top_to_median"] = self.top_to_median
        return out


def summarize_spectrum(eigenvalues, thresholds=DIM_THRESHOLDS) -> SpectrumSummary:
    """Power distribution of a PSD spectrum.

    ``dims[p]`` is the smallest ``m`` whose top-``m`` eigenvalues carry at
    least a fraction ``p`` of the trace.  Input order does not matter.
    Round-off negatives down to ``-1e-8 * lambda_1`` are treated as zero.
    """
    lam = np.sort(np.asarray(eigenvalues, dtype=np.float64).ravel())[::-1]
    if lam.size == 0 or not lam[0] > 0:
        raise DegenerateSpectrumError("spectrum has no positive eigenvalue")
    if lam[-1] < -1e-8 * lam[0]:
        raise ArgumentError(f"spectrum has a negative eigenvalue {lam[-1]:.3e}")
    lam = np.maximum(lam, 0.0)
    trace = float(lam.sum())
    cum = np.cumsum(lam)
    dims = {}
    for p in thresholds:
        # small slack so exact boundary hits (98+1 == .99*100) count
        m = int(np.searchsorted(cum, p * trace * (1 - 1e-12), side="left")) + 1
        dims[p] = min(m, lam.size)
    floor = max(lam[-1], lam[0] * LOG_FLOOR_REL)
    return SpectrumSummary(lam, trace, dims, float(np.log10(lam[0] / floor)),
                           float(lam[0] / max(np.median(lam), lam[0] * LOG_FLOOR_REL)))


# ---------------------------------------------------------------------------
# homogeneity


def _near_constant(x) -> bool:
    x = np.asarray(x, dtype=np.float64)
    return bool(np.ptp(x) <= _CONST_REL * max(np.max(np.abs(x)), 1e-300))


def _pearson(a, b) -> float:
    a = a - a.mean()
    b = b - b.mean()
    r = float(a @ b / np.sqrt((a @ a) * (b @ b)))
    return min(1.0, max(-1.0, r))


@dataclass
class ConsistencyStat:
    """Action of ``H_j`` on the eigenframe of ``H_i``.

    ``c_lin`` / ``c_log`` are ``None`` when the correlation is undefined
    because one side is constant (e.g. an isotropic metric); the matching
    ``*_undefined`` flag is then set.
    """

    lam_ij: np.ndarray
    lam_j: np.ndarray
    c_lin: float | None
    c_log: float | None
    n_clamped: int
    floor: float

    @property
    def lin_undefined(self) -> bool:
        return self.c_lin is None

    @property
    def log_undefined(self) -> bool:
        return self.c_log is None


def consistency_pair(h_i: MetricTensor, h_j: MetricTensor) -> ConsistencyStat:
    if h_i.n != h_j.n:
        raise ArgumentError("metric tensors live in different dimensions")
    k = min(h_i.k, h_j.k)
    lam_ij = h_j.quad(h_i.eigenvectors[:, :k])
    lam_j = np.asarray(h_j.eigenvalues[:k], dtype=np.float64)
    floor = float(h_j.eigenvalues[0]) * LOG_FLOOR_REL
    lin_const = _near_constant(lam_ij) or _near_constant(lam_j)
    c_lin = None if lin_const else _pearson(lam_ij, lam_j)
    a, b = np.maximum(lam_ij, floor), np.maximum(lam_j, floor)
    n_clamped = int(np.sum(lam_ij < floor) + np.sum(lam_j < floor))
    c_log = None
    if floor > 0 and not (lin_const or _near_constant(a) or _near_constant(b)):
        c_log = _pearson(np.log(a), np.log(b))
    return ConsistencyStat(lam_ij, lam_j, c_lin, c_log, n_clamped, floor)


@dataclass
class ConsistencyReport:
    pairs: dict[tuple[int, int], ConsistencyStat]
    n_points: int
    summary: dict
    histogram: dict
    tensors: list[MetricTensor] = field(default_factory=list, repr=False)

    def matrix(self, which="c_log") -> np.ndarray:
        """N x N array; NaN marks the diagonal and undefined pairs."""
        out = np.full((self.n_points, self.n_points), np.nan)
        for (i, j), st in self.pairs.items():
            val = getattr(st, which)
            if val is not None:
                out[i, j] = val
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("i,j,c_lin,c_log,lin_undefined,log_undefined,n_clamped\n")
        for (i, j), st in sorted(self.pairs.items()):
            lin = "" if st.c_lin is None else repr(st.c_lin)
            lg = "" if st.c_log is None else repr(st.c_log)
            buf.write(f"{i},{j},{lin},{lg},{int(st.lin_undefined)},{int(st.log_undefined)},"
                      f"{st.n_clamped}\n")
        return buf.getvalue()


def _mean_std(values):
    if not values:
        return None, None
    arr = np.asarray(values)
    return float(arr.mean()), float(arr.std())


def consistency_from_tensors(tensors: list[MetricTensor], bins: int = 20) -> ConsistencyReport:
    """All ordered pairs ``i != j``; undefined pairs are skipped and counted."""
    if len(tensors) < 2:
        raise ArgumentError("need at least two metric tensors")
    pairs = {}
    for i, hi in enumerate(tensors):
        for j, hj in enumerate(tensors):
            if i != j:
                pairs[(i, j)] = consistency_pair(hi, hj)
    logs = [s.c_log for s in pairs.values() if s.c_log is not None]
    lins = [s.c_lin for s in pairs.values() if s.c_lin is not None]
    log_mean, log_std = _mean_std(logs)
    lin_mean, lin_std = _mean_std(lins)
    summary = {
        "n_points": len(tensors),
        "n_pairs": len(pairs),
        "pairs": "ordered, i != j",
        "c_log_mean": log_mean, "c_log_std": log_std,
        "c_lin_mean": lin_mean, "c_lin_std": lin_std,
        "n_log_undefined": len(pairs) - len(logs),
        "n_lin_undefined": len(pairs) - len(lins),
        "n_clamped": int(sum(s.n_clamped for s in pairs.values())),
    }
    edges = np.linspace(-1.0, 1.0, bins + 1)
    hist = {"edges": edges.tolist(),
            "c_log": np.histogram(logs, edges)[0].tolist(),
            "c_lin": np.histogram(lins, edges)[0].tolist()}
    return ConsistencyReport(pairs, len(tensors), summary, hist, list(tensors))


def consistency_matrix(points, gmap, distance, k: int | None = None,
                       method: str = "full_bp", **metric_kw) -> ConsistencyReport:
    """Metric at every point, then :func:`consistency_from_tensors`.

    With ``k`` set, only the top-``k`` eigenframe enters each pair.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(points) < 2:
        raise ArgumentError("need at least two points")
    tensors = [compute_metric(gmap, distance, z, method, k=k, **metric_kw) for z in points]
    if k is not None:
        tensors = [_truncate(t, k) for t in tensors]
    return consistency_from_tensors(tensors)


def _truncate(t: MetricTensor, k: int) -> MetricTensor:
    return MetricTensor(t.point, t.eigenvalues[:k], t.eigenvectors[:, :k], t.method, t.matrix,
                        t.tol, t.seed, t.iterations, t.residuals)


def global_hessian(tensors: list[MetricTensor]) -> MetricTensor:
    """Element-wise mean of dense metric tensors, re-eigendecomposed."""
    if not tensors:
        raise ArgumentError("need at least one metric tensor")
    if any(t.matrix is None for t in tensors):
        raise ArgumentError("global_hessian needs dense matrices")
    shapes = {t.matrix.shape for t in tensors}
    if len(shapes) != 1:
        raise ArgumentError(f"mixed dimensions {sorted(shapes)}")
    stack = np.stack([t.matrix for t in tensors])
    mean = stack.sum(axis=0) / len(tensors)
    point = np.stack([t.point for t in tensors]).mean(axis=0)
    return MetricTensor.from_matrix(point, mean, "global_mean")


def subspace_cosines(a, b) -> np.ndarray:
    """Cosines of the principal angles between the column spans of a and b."""
    qa, _ = np.linalg.qr(np.asarray(a, dtype=np.float64))
    qb, _ = np.linalg.qr(np.asarray(b, dtype=np.float64))
    return np.clip(np.linalg.svd(qa.T @ qb, compute_uv=False), 0.0, 1.0)


# ---------------------------------------------------------------------------
# random mixing


@dataclass
class MixingStat:
    n: int
    eigenvalues: np.ndarray
    mean_alpha: float
    var_alpha: float
    var_lambda: float
    samples: np.ndarray = field(repr=False)

    @property
    def sample_mean(self) -> float:
        return float(self.samples.mean())

    @property
    def sample_var(self) -> float:
        return float(self.samples.var(ddof=1))


def alpha_moments(eigenvalues) -> tuple[float, float, float]:
    """Closed-form ``E[alpha]``, ``Var[alpha]`` for isotropic directions and ``Var[lambda]``."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    n = lam.size
    s1, s2 = float(lam.sum()), float(lam @ lam)
    mean = s1 / n
    var_alpha = 2.0 / (n * (n + 2)) * s2 - 2.0 / (n * n * (n + 2)) * s1 * s1
    var_lambda = s2 / n - s1 * s1 / (n * n)
    return mean, var_alpha, var_lambda


def mixing_stats(eigenvalues, n_samples: int = 100_000, seed: int = 0,
                 chunk: int = 20_000) -> MixingStat:
    """Closed-form moments next to a Monte Carlo sample of ``alpha(v)``.

    For ``v ~ N(0, I)`` the weights ``w_i^2 / sum w^2`` on the eigenvalues
    are Dirichlet(1/2, ..., 1/2); the sample draws them that way.
    """
    if n_samples < 1000:
        raise ArgumentError("n_samples must be >= 1000")
    lam = np.asarray(eigenvalues, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    parts = []
    left = n_samples
    while left:
        m = min(chunk, left)
        w2 = rng.standard_normal((m, lam.size)) ** 2
        parts.append((w2 / w2.sum(axis=1, keepdims=True)) @ lam)
        left -= m
    mean, var_a, var_l = alpha_moments(lam)
    return MixingStat(lam.size, lam, mean, var_a, var_l, np.concatenate(parts))


# ---------------------------------------------------------------------------
# robustness across distances


def _log_clamped(lam):
    lam = np.asarray(lam, dtype=np.float64)
    return np.log10(np.maximum(lam, lam[0] * LOG_FLOOR_REL))


@dataclass
class RobustnessReport:
    rows: list[dict]
    summary: dict

    COLUMNS = ("h_corr", "eigval_corr", "c_lin", "c_log", "slope", "intercept")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("point," + ",".join(self.COLUMNS) + "\n")
        for r in self.rows:
            vals = ["" if r[c] is None else repr(r[c]) for c in self.COLUMNS]
            buf.write(f"{r['point']}," + ",".join(vals) + "\n")
        return buf.getvalue()


def compare_tensors(h_a: MetricTensor, h_b: MetricTensor) -> dict:
    """Similarity of two dense metrics at the same point."""
    a, b = h_a.dense().ravel(), h_b.dense().ravel()
    h_corr = None if _near_constant(a) or _near_constant(b) else _pearson(a, b)
    la, lb = h_a.eigenvalues, h_b.eigenvalues
    eig_corr = None if _near_constant(la) or _near_constant(lb) else _pearson(la, lb)
    st = consistency_pair(h_a, h_b)
    xa, xb = _log_clamped(la), _log_clamped(lb)
    if _near_constant(xa) and np.ptp(xa) == 0:
        slope = intercept = None
    else:
        xm = xa - xa.mean()
        slope = float(xm @ (xb - xb.mean()) / (xm @ xm))
        intercept = float(xb.mean() - slope * xa.mean())
    return {"h_corr": h_corr, "eigval_corr": eig_corr, "c_lin": st.c_lin, "c_log": st.c_log,
            "slope": slope, "intercept": intercept}


def compare_distance_metrics(gmap, points, dist_a, dist_b) -> RobustnessReport:
    """Per-point comparison of metrics computed under two distances.

    The log10 spectrum under ``dist_b`` is regressed on the one under
    ``dist_a``; a pure rescaling of the distance shows up as slope 1 and an
    intercept equal to log10 of the scale.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(points) < 1:
        raise ArgumentError("need at least one point")
    rows = []
    for idx, z in enumerate(points):
        row = compare_tensors(hessian_full(gmap, dist_a, z), hessian_full(gmap, dist_b, z))
        row["point"] = idx
        rows.append(row)
    summary = {}
    for col in RobustnessReport.COLUMNS:
        vals = [r[col] for r in rows if r[col] is not None]
        mean, std = _mean_std(vals)
        summary[col] = {"mean": mean, "std": std, "n_undefined": len(rows) - len(vals)}
    return RobustnessReport(rows, summary)
