"""Geometry-aware optimizers: eigenbasis-preconditioned Adam, CMA-ES with an
optional Hessian-shaped start, a basin-interleaving driver and axis traversal."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .autodiff import DiffMap
from .errors import (ArgumentError, DimensionError, DivergenceError, InversionError,
                     NumericalError)
from .metric import DistanceMetric, MetricTensor, pixel_metric

EPS_REG_REL = 1e-6


# ---------------------------------------------------------------------------
# preconditioning


@dataclass(frozen=True)
class Preconditioner:
    """Change of variables ``z = offset + U (s * y)``.

    ``s`` is all ones unless ``use_scales`` is set, in which case it holds
    ``1 / sqrt(lambda_i + eps_reg)``.
    """

    basis: np.ndarray
    eigenvalues: np.ndarray
    scales: np.ndarray
    eps_reg: float
    use_scales: bool = False
    offset: np.ndarray | None = None

    def __post_init__(self):
        u = self.basis
        if u.ndim != 2 or u.shape[1] > u.shape[0]:
            raise DimensionError(f"basis must be n x k with k <= n, got {u.shape}")
        if not np.allclose(u.T @ u, np.eye(u.shape[1]), atol=1e-8, rtol=0):
            raise ArgumentError("basis columns are not orthonormal")

    @property
    def n(self) -> int:
        return self.basis.shape[0]

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @property
    def mode(self) -> str:
        return "rotate_full" if self.k == self.n else "project_topk"

    @property
    def effective_scales(self) -> np.ndarray:
        return self.scales if self.use_scales else np.ones(self.k)

    def with_offset(self, z) -> "Preconditioner":
        """Freeze the complement of the basis span at that of ``z``."""
        z = np.asarray(z, dtype=np.float64)
        off = z - self.basis @ (self.basis.T @ z)
        return Preconditioner(self.basis, self.eigenvalues, self.scales, self.eps_reg,
                              self.use_scales, off)

    def to_latent(self, y) -> np.ndarray:
        z = self.basis @ (self.effective_scales * np.asarray(y, dtype=np.float64))
        return z if self.offset is None else z + self.offset

    def from_latent(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self.offset is not None:
            z = z - self.offset
        return (self.basis.T @ z) / self.effective_scales

    def pull_gradient(self, gz) -> np.ndarray:
        return self.effective_scales * (self.basis.T @ np.asarray(gz, dtype=np.float64))


def default_eps_reg(eigenvalues) -> float:
    return EPS_REG_REL * float(np.max(eigenvalues))


def make_preconditioner(global_h: MetricTensor, k: int | None = None,
                        eps_reg: float | None = None, use_scales: bool = False) -> Preconditioner:
    k = global_h.n if k is None else int(k)
    if k < 1:
        raise ArgumentError("k must be >= 1")
    if k > global_h.k:
        raise ArgumentError(f"k={k} exceeds the {global_h.k} available eigenvectors")
    lam = np.asarray(global_h.eigenvalues[:k], dtype=np.float64)
    eps_reg = default_eps_reg(global_h.eigenvalues) if eps_reg is None else float(eps_reg)
    if eps_reg < 0:
        raise ArgumentError("eps_reg must be >= 0")
    denom = np.maximum(lam, 0.0) + eps_reg
    if np.any(denom <= 0):
        raise ArgumentError("eps_reg = 0 with a zero eigenvalue gives infinite scales")
    return Preconditioner(np.array(global_h.eigenvectors[:, :k]), lam, 1.0 / np.sqrt(denom),
                          eps_reg, use_scales)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    y: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def step(self, grad) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        self.y = self.y - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class AdamTrace:
    iterates: np.ndarray
    losses: np.ndarray
    evaluations: int

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.losses))

    @property
    def best_loss(self) -> float:
        return float(self.losses[self.best_index])

    @property
    def best_z(self) -> np.ndarray:
        return self.iterates[self.best_index]

    @property
    def final_loss(self) -> float:
        return float(self.losses[-1])

    def to_csv(self) -> str:
        return "step,loss\n" + "".join(f"{i},{float(l)!r}\n" for i, l in enumerate(self.losses))


def adam_minimize(objective: Callable, gradient: Callable | None, z_init,
                  precond: Preconditioner | None = None, budget: int = 500, lr: float = 0.05,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamTrace:
    """Adam on ``objective`` from ``z_init``, optionally in preconditioned coordinates.

    With ``gradient=None`` the objective must return ``(loss, grad)``.  The
    trace holds ``budget + 1`` iterates (latent coordinates) and losses.
    """
    if budget < 1:
        raise ArgumentError("budget must be >= 1")

    def fg(z):
        if gradient is None:
            return objective(z)
        return objective(z), gradient(z)

    z = np.array(z_init, dtype=np.float64)
    y0 = z if precond is None else precond.from_latent(z)
    state = AdamState(y0.copy(), np.zeros_like(y0), np.zeros_like(y0), 0, lr, beta1, beta2, eps)
    iterates, losses = [], []
    for step in range(budget + 1):
        z = state.y if precond is None else precond.to_latent(state.y)
        loss, gz = fg(z)
        loss = float(loss)
        iterates.append(np.array(z))
        losses.append(loss)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}",
                                  AdamTrace(np.array(iterates), np.array(losses), step + 1))
        if step == budget:
            break
        g = np.asarray(gz, dtype=np.float64)
        state.step(g if precond is None else precond.pull_gradient(g))
    return AdamTrace(np.array(iterates), np.array(losses), budget + 1)


# ---------------------------------------------------------------------------
# inversion


@dataclass
class InversionConfig:
    n_restarts: int = 4
    steps: int = 500
    lr: float = 0.05
    seed: int = 0
    init_scale: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InversionResult:
    best_z: np.ndarray
    best_loss: float
    traces: list = field(default_factory=list)
    init_points: np.ndarray | None = None
    failures: list = field(default_factory=list)
    evaluations: int = 0

    def to_json(self) -> dict:
        return {
            "best_z": [float(x) for x in self.best_z],
            "best_loss": self.best_loss,
            "evaluations": self.evaluations,
            "failures": list(self.failures),
            "losses": [None if t is None else [float(x) for x in t.losses] for t in self.traces],
        }


def distance_objective(gmap: DiffMap, distance: DistanceMetric, target_output) -> Callable:
    """``z -> (d2(G(z), target), grad)`` with the same d2 used for the metric."""
    target_output = np.asarray(target_output, dtype=np.float64).ravel()
    if target_output.size != gmap.output_dim:
        raise DimensionError(f"target has {target_output.size} entries, map outputs "
                             f"{gmap.output_dim}")
    comp = distance.composite(gmap)
    target_feat = distance.embed(target_output[None])[0]
    scale = distance.scale

    def fg(z):
        out, pull = comp.forward_with_pullback(np.asarray(z, dtype=np.float64)[None])
        r = out[0] - target_feat
        gz, _ = pull(scale * r[None])
        return 0.5 * scale * float(r @ r), gz[0]

    return fg


def invert(gmap: DiffMap, distance: DistanceMetric | None, target_output,
           config: InversionConfig | None = None,
           precond: Preconditioner | None = None) -> InversionResult:
    """Best of ``n_restarts`` Adam runs from seeded Gaussian inits."""
    config = config or InversionConfig()
    distance = distance or pixel_metric()
    fg = distance_objective(gmap, distance, target_output)
    rng = np.random.default_rng(config.seed)
    inits = config.init_scale * rng.standard_normal((config.n_restarts, gmap.input_dim))
    traces, failures = [], []
    best_z, best_loss, evals = None, math.inf, 0
    for r, z0 in enumerate(inits):
        try:
            tr = adam_minimize(fg, None, z0, precond, config.steps, config.lr)
        except DivergenceError as exc:
            traces.append(None)
            failures.append({"restart": r, "reason": str(exc)})
            evals += exc.trace.evaluations
            continue
        traces.append(tr)
        evals += tr.evaluations
        if tr.best_loss < best_loss:
            best_z, best_loss = tr.best_z, tr.best_loss
    if best_z is None:
        raise InversionError("every restart diverged")
    return InversionResult(best_z, best_loss, traces, inits, failures, evals)


# ---------------------------------------------------------------------------
# CMA-ES


@dataclass
class CmaState:
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    popsize: int
    generation: int = 0


@dataclass
class CmaTrace:
    best_x: np.ndarray
    best_f: float
    evaluations: int
    fitness: np.ndarray
    best_history: np.ndarray
    state: CmaState

    def to_csv(self) -> str:
        return "generation,best_f\n" + "".join(
            f"{i},{float(v)!r}\n" for i, v in enumerate(self.best_history))


def default_popsize(k: int) -> int:
    return 4 + int(math.floor(3 * math.log(k)))


def _sym_sqrt(cov):
    cov = 0.5 * (cov + cov.T)
    w, b = np.linalg.eigh(cov)
    if not np.all(np.isfinite(w)):
        raise NumericalError("covariance has non-finite eigenvalues")
    top = float(w.max())
    if top <= 0:
        raise NumericalError("covariance collapsed")
    w = np.maximum(w, top * 1e-14)
    root = np.sqrt(w)
    return (b * w) @ b.T, (b * root) @ b.T, (b / root) @ b.T


def cmaes_minimize(objective: Callable, x_init, sigma: float, budget: int, seed: int = 0,
                   popsize: int | None = None, cov_init=None, noise_map=None,
                   f_target: float | None = None) -> CmaTrace:
    """(mu/mu_w, lambda)-CMA-ES with cumulative step-size adaptation.

    Candidates are ``m + sigma * C^(1/2) R w`` with ``w`` the raw Gaussian
    draws and ``R`` the optional ``noise_map`` (k x m, orthonormal rows,
    identity by default).  Using the symmetric square root makes the run
    equivariant under a rotation ``Q`` of the problem when ``R`` is rotated
    along with it.  Ranking is a stable sort on (fitness, candidate index).
    """
    x = np.array(x_init, dtype=np.float64)
    k = x.size
    lam = popsize or default_popsize(k)
    if budget < lam:
        raise ArgumentError(f"budget {budget} is below one generation ({lam})")
    if sigma <= 0:
        raise ArgumentError("sigma must be positive")
    mu = lam // 2
    w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mueff = 1.0 / float(w @ w)
    cc = (4 + mueff / k) / (k + 4 + 2 * mueff / k)
    cs = (mueff + 2) / (k + mueff + 5)
    c1 = 2 / ((k + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((k + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (k + 1)) - 1) + cs
    chi_n = math.sqrt(k) * (1 - 1 / (4 * k) + 1 / (21 * k * k))

    cov = np.eye(k) if cov_init is None else np.array(cov_init, dtype=np.float64)
    if cov.ndim == 1:
        cov = np.diag(cov)
    r_map = np.eye(k) if noise_map is None else np.asarray(noise_map, dtype=np.float64)
    if r_map.shape[0] != k:
        raise DimensionError(f"noise_map must have {k} rows")
    st = CmaState(x, float(sigma), cov, np.zeros(k), np.zeros(k), lam)
    rng = np.random.default_rng(seed)

    fitness, history = [], []
    best_x, best_f = x.copy(), math.inf
    evals = 0
    while evals + lam <= budget:
        cov, root, inv_root = _sym_sqrt(st.cov)
        raw = rng.standard_normal((lam, r_map.shape[1]))
        steps = (raw @ r_map.T) @ root
        cand = st.mean + st.sigma * steps
        f = np.array([float(objective(c)) for c in cand])
        evals += lam
        fitness.extend(f.tolist())
        rank_f = np.where(np.isnan(f), np.inf, f)
        order = np.argsort(rank_f, kind="stable")
        if rank_f[order[0]] < best_f:
            best_f, best_x = float(rank_f[order[0]]), cand[order[0]].copy()
        history.append(best_f)

        sel = steps[order[:mu]]
        y_w = w @ sel
        old_mean = st.mean
        st.mean = old_mean + st.sigma * y_w
        st.p_sigma = (1 - cs) * st.p_sigma + math.sqrt(cs * (2 - cs) * mueff) * (inv_root @ y_w)
        st.generation += 1
        ps_norm = float(np.linalg.norm(st.p_sigma))
        h_sig = ps_norm / math.sqrt(1 - (1 - cs) ** (2 * st.generation)) < (1.4 + 2 / (k + 1)) * chi_n
        st.p_c = (1 - cc) * st.p_c + h_sig * math.sqrt(cc * (2 - cc) * mueff) * y_w
        rank_mu = (sel.T * w) @ sel
        delta = (1 - h_sig) * cc * (2 - cc)
        st.cov = ((1 - c1 - cmu) * cov + c1 * (np.outer(st.p_c, st.p_c) + delta * cov)
                  + cmu * rank_mu)
        st.sigma *= math.exp((cs / damps) * (ps_norm / chi_n - 1))
        if not (np.isfinite(st.sigma) and np.all(np.isfinite(st.cov))):
            raise NumericalError("CMA-ES state became non-finite")
        if f_target is not None and best_f <= f_target:
            break
    st.cov = _sym_sqrt(st.cov)[0]
    return CmaTrace(best_x, best_f, evals, np.array(fitness), np.array(history), st)


@dataclass
class HessianCmaTrace:
    cma: CmaTrace
    basis: np.ndarray
    offset: np.ndarray
    cov_init: np.ndarray

    @property
    def best_z(self) -> np.ndarray:
        return self.offset + self.basis @ self.cma.best_x

    @property
    def best_f(self) -> float:
        return self.cma.best_f

    @property
    def evaluations(self) -> int:
        return self.cma.evaluations


def hessian_cov_init(eigenvalues, eps_reg: float | None = None) -> np.ndarray:
    """Diagonal ``1 / (lambda + eps_reg)`` rescaled to trace ``k``."""
    lam = np.maximum(np.asarray(eigenvalues, dtype=np.float64), 0.0)
    eps_reg = EPS_REG_REL * float(lam.max()) if eps_reg is None else eps_reg
    c0 = 1.0 / (lam + eps_reg)
    return c0 * (lam.size / c0.sum())


def cmaes_hessian_minimize(objective_on_z: Callable, global_h: MetricTensor, k: int,
                           budget: int, seed: int = 0, z_init=None, sigma: float = 1.0,
                           eps_reg: float | None = None, popsize: int | None = None,
                           f_target: float | None = None) -> HessianCmaTrace:
    """CMA-ES over the top-``k`` eigencoordinates of ``global_h``.

    Latents are ``z = offset + U y``; the complement of ``U`` stays at the
    projection of ``z_init``.  The raw draws are taken in latent space and
    mapped through ``U^T``, so with ``k = n`` and a flat spectrum the run
    matches :func:`cmaes_minimize` on the same objective.
    """
    if k < 1 or k > global_h.k:
        raise ArgumentError(f"k={k} outside 1..{global_h.k}")
    n = global_h.n
    z_init = np.zeros(n) if z_init is None else np.asarray(z_init, dtype=np.float64)
    u = np.array(global_h.eigenvectors[:, :k])
    offset = z_init - u @ (u.T @ z_init)
    c0 = hessian_cov_init(global_h.eigenvalues[:k],
                          default_eps_reg(global_h.eigenvalues) if eps_reg is None else eps_reg)
    cma = cmaes_minimize(lambda y: objective_on_z(offset + u @ y), u.T @ z_init, sigma, budget,
                         seed, popsize, c0, u.T, f_target)
    return HessianCmaTrace(cma, u, offset, c0)


# ---------------------------------------------------------------------------
# basin interleaving


@dataclass
class BasinConfig:
    generations: int = 10
    popsize: int | None = None
    inner_steps: int = 20
    lr: float = 0.05
    sigma: float = 1.0
    seed: int = 0
    max_evals: int | None = None
    final_steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def basin_interleave(objective: Callable, gradient: Callable | None, global_h: MetricTensor | None,
                     config: BasinConfig | None = None, z_init=None) -> InversionResult:
    """Outer CMA-ES over seeds, each refined by a short preconditioned Adam run.

    Candidates are ranked by their post-refinement loss while the CMA-ES
    update uses the proposed (unrefined) seeds.  Every objective evaluation,
    Adam steps included, counts against ``max_evals``.
    """
    config = config or BasinConfig()
    precond = make_preconditioner(global_h) if global_h is not None else None
    n = global_h.n if global_h is not None else np.asarray(z_init).size
    z_init = np.zeros(n) if z_init is None else np.asarray(z_init, dtype=np.float64)
    lam = config.popsize or default_popsize(n)
    per_cand = config.inner_steps + 1
    max_evals = config.max_evals
    gens = config.generations
    if max_evals is not None:
        gens = min(gens, (max_evals - config.final_steps - 1) // (lam * per_cand))
        if gens < 1:
            raise ArgumentError("max_evals too small for one generation")

    refined = {"best_z": None, "best_loss": math.inf, "evals": 0, "traces": []}

    def refine(seed_z):
        tr = adam_minimize(objective, gradient, seed_z, precond, config.inner_steps, config.lr)
        refined["evals"] += tr.evaluations
        refined["traces"].append(tr)
        if tr.best_loss < refined["best_loss"]:
            refined["best_loss"], refined["best_z"] = tr.best_loss, tr.best_z
        return tr.best_loss

    cmaes_minimize(refine, z_init, config.sigma, gens * lam, config.seed, lam)
    if config.final_steps > 0:
        tr = adam_minimize(objective, gradient, refined["best_z"], precond, config.final_steps,
                           config.lr)
        refined["evals"] += tr.evaluations
        refined["traces"].append(tr)
        if tr.best_loss < refined["best_loss"]:
            refined["best_loss"], refined["best_z"] = tr.best_loss, tr.best_z
    return InversionResult(refined["best_z"], refined["best_loss"], refined["traces"],
                           None, [], refined["evals"])


# ---------------------------------------------------------------------------
# traversal


@dataclass
class Traversal:
    mus: np.ndarray
    latents: np.ndarray
    outputs: np.ndarray
    distances: np.ndarray
    mode: str

    def to_csv(self) -> str:
        return "mu,distance\n" + "".join(
            f"{float(m)!r},{float(d)!r}\n" for m, d in zip(self.mus, self.distances))


def step_grid(steps: int, step_size: float) -> np.ndarray:
    """Symmetric grid ``step_size * (-steps .. steps)`` with an exact zero."""
    return step_size * np.arange(-steps, steps + 1, dtype=np.float64)


def traverse_axis(gmap: DiffMap, z0, axis, steps: int, step_size: float, mode: str = "linear",
                  distance: DistanceMetric | None = None) -> Traversal:
    """Walk ``2 * steps + 1`` points along ``axis`` through ``z0``.

    The distance curve is ``scale * ||phi(G(z_mu)) - phi(G(z0))||^2`` (twice
    d2), so along a unit eigenvector ``u`` it grows like ``mu^2 u^T H u``.
    In slerp mode ``mu`` is arc length on the sphere of radius ``|z0|``
    measured for the unit tangent direction.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    axis = np.asarray(axis, dtype=np.float64)
    if axis.shape != z0.shape:
        raise DimensionError("axis and z0 differ in shape")
    if not np.linalg.norm(axis) > 0:
        raise ArgumentError("axis must be nonzero")
    mus = step_grid(steps, step_size)
    if mode == "linear":
        zs = z0 + mus[:, None] * axis
    elif mode == "slerp":
        r = float(np.linalg.norm(z0))
        if r == 0:
            raise ArgumentError("slerp needs a nonzero reference point")
        e = z0 / r
        t = axis - (axis @ e) * e
        tn = float(np.linalg.norm(t))
        if tn <= 1e-12 * np.linalg.norm(axis):
            raise ArgumentError("axis is parallel to z0; no tangent direction")
        t = t / tn
        theta = mus / r
        zs = r * (np.cos(theta)[:, None] * e + np.sin(theta)[:, None] * t)
        zs[steps] = z0
    else:
        raise ArgumentError(f"unknown mode {mode!r}")
    outputs = gmap.forward(zs)
    distance = distance or pixel_metric()
    feats = distance.embed(outputs)
    diff = feats - feats[steps]
    dists = distance.scale * np.einsum("ij,ij->i", diff, diff)
    return Traversal(mus, zs, outputs, dists, mode)
