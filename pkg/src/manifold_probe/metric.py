"""Riemannian metric of a generator pulled back from an output-space distance.

With ``d^2(z1, z2) = scale/2 * ||phi(G(z1)) - phi(G(z2))||^2`` the metric at
``z0`` is the Hessian of ``d^2(z0, .)`` at ``z0``, which equals
``scale * J^T J`` for the Jacobian ``J`` of the composite ``phi o G``.

Three routes are provided:

* :func:`hessian_full` assembles ``J`` column by column and forms ``J^T J``;
* :func:`lanczos_topk` with a backward :class:`HvpOperator` (``J^T (J v)``);
* :func:`lanczos_topk` with a forward operator, a central difference of the
  gradient of ``d^2`` along ``v``.
"""

from __future__ import annotations

import base64
import io
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .autodiff import (DEFAULT_DENSE_CAP, DiffMap, act, bias, crosses_kink, dense,
                       dense_jacobian)
from .errors import (ArgumentError, CapacityError, ConvergenceError, DimensionError,
                     NumericalError)
from .generators import build_generator, GeneratorSpec

METHODS = ("full_bp", "backward_iter", "forward_iter")
MAX_STEP_SHRINKS = 3


# ---------------------------------------------------------------------------
# distances


@dataclass(frozen=True)
class DistanceMetric:
    """Squared output distance ``scale/2 * ||phi(x1) - phi(x2)||^2``.

    ``kind="pixel"`` uses ``phi = identity``; ``kind="feature"`` uses the
    concatenated tap activations of ``encoder``.
    """

    kind: str = "pixel"
    encoder: DiffMap | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("pixel", "feature"):
            raise ArgumentError(f"unknown distance kind {self.kind!r}")
        if self.kind == "feature" and self.encoder is None:
            raise ArgumentError("feature distance needs an encoder")
        if not self.scale > 0:
            raise ArgumentError("distance scale must be positive")

    def scaled(self, factor: float) -> "DistanceMetric":
        return DistanceMetric(self.kind, self.encoder, self.scale * factor)

    def composite(self, gmap: DiffMap) -> DiffMap:
        return gmap if self.kind == "pixel" else gmap.then(self.encoder)

    def embed(self, outputs) -> np.ndarray:
        """Map generator outputs into the space where L2 is measured."""
        outputs = np.asarray(outputs, dtype=np.float64)
        return outputs if self.kind == "pixel" else self.encoder.forward(outputs)

    def between_outputs(self, x1, x2) -> float:
        diff = self.embed(x1) - self.embed(x2)
        return 0.5 * self.scale * float(np.sum(diff * diff))

    def d2(self, gmap: DiffMap, z1, z2) -> float:
        return self.between_outputs(gmap.forward(z1), gmap.forward(z2))


def random_feature_encoder(input_dim: int, widths=(128, 64), seed: int = 1234,
                           activation: str = "tanh") -> DiffMap:
    """A fixed, untrained dense encoder tapping every nonlinearity."""
    arch, taps = [], []
    for w in widths:
        arch += [dense(w), bias(), act(activation, 0.2 if activation == "leaky_relu" else 0.0)]
        taps.append(len(arch) - 1)
    spec = GeneratorSpec(tuple(arch), input_dim, (widths[-1],), seed=seed)
    base = build_generator(spec)
    # nonzero biases so tanh is not operated around its odd symmetry point
    rng = np.random.default_rng(seed + 1)
    w = {k: (rng.standard_normal(v.shape) * 0.1 if k.endswith("bias") else v)
         for k, v in base.weights.items()}
    return DiffMap(base.layers, w, input_dim, taps=tuple(taps))


def pixel_metric(scale: float = 1.0) -> DistanceMetric:
    return DistanceMetric("pixel", None, scale)


def feature_metric(input_dim: int, seed: int = 1234, widths=(128, 64), scale: float = 1.0,
                   activation: str = "tanh") -> DistanceMetric:
    return DistanceMetric("feature", random_feature_encoder(input_dim, widths, seed, activation),
                          scale)


# ---------------------------------------------------------------------------
# metric tensors


def _sign_fix(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so each one's largest-magnitude entry is positive."""
    vectors = np.array(vectors, dtype=np.float64)
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def eig_descending(matrix) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric eigendecomposition, eigenvalues descending, signs fixed."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(matrix)):
        raise NumericalError("metric matrix has non-finite entries")
    w, v = np.linalg.eigh(0.5 * (matrix + matrix.T))
    order = np.argsort(-w, kind="stable")
    return w[order], _sign_fix(v[:, order])


@dataclass
class MetricTensor:
    """Metric at ``point``: optional dense matrix plus (top-k) eigenpairs."""

    point: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    method: str
    matrix: np.ndarray | None = None
    tol: float | None = None
    seed: int | None = None
    iterations: int | None = None
    residuals: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(self.eigenvectors.shape[0])

    @property
    def k(self) -> int:
        return int(len(self.eigenvalues))

    @classmethod
    def from_matrix(cls, point, matrix, method="full_bp") -> "MetricTensor":
        matrix = np.asarray(matrix, dtype=np.float64)
        matrix = 0.5 * (matrix + matrix.T)
        w, v = eig_descending(matrix)
        return cls(np.asarray(point, dtype=np.float64), w, v, method, matrix)

    def dense(self) -> np.ndarray:
        """Dense matrix, or the rank-k reconstruction when none is stored."""
        if self.matrix is not None:
            return self.matrix
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T

    def quad(self, vectors) -> np.ndarray:
        """Quadratic forms ``v^T H v`` for the columns of ``vectors``."""
        vectors = np.asarray(vectors, dtype=np.float64)
        if self.matrix is not None:
            return np.einsum("ik,ij,jk->k", vectors, self.matrix, vectors)
        proj = self.eigenvectors.T @ vectors
        return self.eigenvalues @ (proj * proj)

    def scaled(self, factor: float) -> "MetricTensor":
        return MetricTensor(self.point, self.eigenvalues * factor, self.eigenvectors, self.method,
                            None if self.matrix is None else self.matrix * factor,
                            self.tol, self.seed, self.iterations, self.residuals)

    # -- serialization ----------------------------------------------------------
    def to_json(self) -> dict:
        out = {
            "point": [float(x) for x in self.point],
            "method": self.method,
            "k": self.k,
            "n": self.n,
            "tol": self.tol,
            "seed": self.seed,
            "iterations": self.iterations,
            "eigenvalues": encode_array(self.eigenvalues),
            "eigenvectors": encode_array(self.eigenvectors),
        }
        if self.matrix is not None:
            out["matrix"] = encode_array(self.matrix)
        if self.residuals is not None:
            out["residuals"] = encode_array(self.residuals)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "MetricTensor":
        return cls(
            point=np.array(d["point"], dtype=np.float64),
            eigenvalues=decode_array(d["eigenvalues"]),
            eigenvectors=decode_array(d["eigenvectors"]),
            method=d["method"],
            matrix=decode_array(d["matrix"]) if "matrix" in d else None,
            tol=d.get("tol"),
            seed=d.get("seed"),
            iterations=d.get("iterations"),
            residuals=decode_array(d["residuals"]) if "residuals" in d else None,
        )

    def spectrum_csv(self) -> str:
        buf = io.StringIO()
        buf.write("rank,eigenvalue\n")
        for i, lam in enumerate(self.eigenvalues, start=1):
            buf.write(f"{i},{float(lam)!r}\n")
        return buf.getvalue()


def encode_array(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"dtype": "<f8", "shape": list(a.shape),
            "base64": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["base64"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).copy()


# ---------------------------------------------------------------------------
# gradients and HVPs


def grad_d2(gmap: DiffMap, distance: DistanceMetric, z0, z) -> np.ndarray:
    """Gradient of ``d^2(z0, z)`` with respect to ``z``."""
    comp = distance.composite(gmap)
    z0, z = np.asarray(z0, dtype=np.float64), np.asarray(z, dtype=np.float64)
    if z0.shape != z.shape or z.shape != (comp.input_dim,):
        raise DimensionError("z0 and z must both be latent vectors")
    return _composite_grad(comp, distance.scale, comp.forward(z0), z)


def _composite_grad(comp, scale, target, z):
    return scale * comp.vjp(z, comp.forward(z) - target)


@dataclass(frozen=True)
class HvpOperator:
    """``v -> H(z0) v`` for a generator under a distance.

    ``backward`` evaluates ``scale * J^T (J v)``, exact at ``z0`` since the
    gradient vanishes there.  ``forward`` takes a central difference of the
    gradient along ``v / ||v||`` with step ``eps`` and rescales by ``||v||``.
    If the stencil straddles a relu-type kink the step is divided by 10, at
    most ``MAX_STEP_SHRINKS`` times, since differencing a gradient across a
    branch switch measures the jump rather than the curvature.
    """

    composite: DiffMap
    z0: np.ndarray
    scale: float = 1.0
    mode: str = "backward"
    eps: float | None = None
    _target: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in ("backward", "forward"):
            raise ArgumentError(f"unknown HVP mode {self.mode!r}")
        z0 = np.array(self.z0, dtype=np.float64)
        if z0.shape != (self.composite.input_dim,):
            raise DimensionError("z0 has the wrong dimension")
        z0.setflags(write=False)
        object.__setattr__(self, "z0", z0)
        if self.mode == "forward" and self.eps is None:
            object.__setattr__(self, "eps", default_fd_step(z0))
        object.__setattr__(self, "_target", self.composite.forward(z0))

    @classmethod
    def build(cls, gmap: DiffMap, distance: DistanceMetric, z0, mode="backward",
              eps=None) -> "HvpOperator":
        return cls(distance.composite(gmap), z0, distance.scale, mode, eps)

    @property
    def n(self) -> int:
        return self.composite.input_dim

    def gradient(self, z) -> np.ndarray:
        return _composite_grad(self.composite, self.scale, self._target, np.asarray(z, float))

    def __call__(self, v) -> np.ndarray:
        return hvp(self, v)


def default_fd_step(z0) -> float:
    return 1e-4 * (1.0 + float(np.max(np.abs(z0))))


def hvp(op: HvpOperator, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (op.n,):
        raise DimensionError(f"vector must have shape ({op.n},)")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ArgumentError("HVP of the zero vector is undefined")
    if op.mode == "backward":
        return op.scale * op.composite.vjp(op.z0, op.composite.jvp(op.z0, v))
    u = v / norm
    eps = op.eps
    for _ in range(MAX_STEP_SHRINKS):
        if not crosses_kink(op.composite, op.z0, eps * u):
            break
        eps /= 10
    gp = op.gradient(op.z0 + eps * u)
    gm = op.gradient(op.z0 - eps * u)
    return (gp - gm) / (2 * eps) * norm


def hessian_full(gmap: DiffMap, distance: DistanceMetric, z0,
                 cap: int = DEFAULT_DENSE_CAP) -> MetricTensor:
    """Dense metric ``scale * J^T J`` with its full eigendecomposition."""
    comp = distance.composite(gmap)
    z0 = np.asarray(z0, dtype=np.float64)
    if comp.input_dim**2 > cap:
        raise CapacityError(f"dense {comp.input_dim}x{comp.input_dim} Hessian exceeds cap")
    jac = dense_jacobian(comp, z0, cap)
    return MetricTensor.from_matrix(z0, distance.scale * (jac.T @ jac), "full_bp")


def layer_metric(gmap: DiffMap, z0, layer_index: int) -> MetricTensor:
    """Pixel-L2 metric of ``z -> activations after layer_index``."""
    if not 0 <= layer_index < len(gmap.layers):
        raise ArgumentError(f"layer index {layer_index} out of range")
    return hessian_full(gmap.truncate(layer_index), pixel_metric(), z0)


# ---------------------------------------------------------------------------
# Lanczos


def lanczos_topk(op, k: int, max_iter: int | None = None, tol: float = 1e-8,
                 seed: int = 0) -> MetricTensor:
    """Top-``k`` (by magnitude) eigenpairs of a symmetric operator.

    Lanczos with full reorthogonalisation from a seeded random start.  When
    the Krylov space becomes invariant before ``k`` pairs have converged the
    recurrence restarts from a fresh random vector orthogonal to the basis
    (the tridiagonal matrix then decouples into blocks).  A wanted pair is
    converged when its Ritz residual estimate ``beta_j |s_ji|`` is at most
    ``tol * |theta_1|``; reaching ``j = n`` spans the whole space and is
    treated as converged.  True residuals ``||H u - theta u||`` are
    recomputed afterwards and stored on the result.

    ``op`` is an :class:`HvpOperator` or any callable with an integer ``n``
    attribute.
    """
    n = int(op.n)
    if not 1 <= k <= n - 1:
        raise ArgumentError(f"k must lie in [1, n-1] = [1, {n - 1}]")
    if tol <= 0:
        raise ArgumentError("tol must be positive")
    max_iter = n if max_iter is None else min(int(max_iter), n)
    rng = np.random.default_rng(seed)
    basis = np.zeros((n, max_iter))
    alphas, betas = [], []

    def fresh_vector(j):
        q = rng.standard_normal(n)
        for _ in range(2):
            q -= basis[:, :j] @ (basis[:, :j].T @ q)
        return q / np.linalg.norm(q)

    def ritz(j):
        t = np.diag(alphas) + np.diag(betas[:j - 1], 1) + np.diag(betas[:j - 1], -1)
        theta, s = np.linalg.eigh(t)
        order = np.argsort(-np.abs(theta), kind="stable")[:k]
        return theta[order], s[:, order]

    q = fresh_vector(0)
    prev, beta_prev = None, 0.0
    scale_est = 0.0
    theta = s = None
    converged = False
    j = 0
    for j in range(1, max_iter + 1):
        basis[:, j - 1] = q
        w = op(q)
        a = float(q @ w)
        w = w - a * q
        if prev is not None:
            w = w - beta_prev * prev
        for _ in range(2):
            w -= basis[:, :j] @ (basis[:, :j].T @ w)
        b = float(np.linalg.norm(w))
        alphas.append(a)
        scale_est = max(scale_est, abs(a), b)
        if j >= k:
            theta, s = ritz(j)
            est = b * np.abs(s[-1, :])
            if j == n or np.all(est <= tol * max(abs(theta[0]), 1e-300)):
                converged = True
                break
        if j == max_iter:
            break
        if b <= 1e-12 * scale_est:
            # invariant subspace: restart in the orthogonal complement
            prev, beta_prev = None, 0.0
            betas.append(0.0)
            q = fresh_vector(j)
        else:
            betas.append(b)
            prev, beta_prev = q, b
            q = w / b
    if theta is None:
        theta, s = ritz(j)
    vecs = basis[:, :j] @ s
    vecs /= np.linalg.norm(vecs, axis=0)
    order = np.argsort(-theta, kind="stable")
    theta, vecs = theta[order], _sign_fix(vecs[:, order])
    residuals = np.array([np.linalg.norm(op(vecs[:, i]) - theta[i] * vecs[:, i])
                          for i in range(k)])
    method = "forward_iter" if getattr(op, "mode", "backward") == "forward" else "backward_iter"
    point = getattr(op, "z0", np.zeros(n))
    result = MetricTensor(np.asarray(point), theta, vecs, method, None, tol, seed, j, residuals)
    if not converged:
        raise ConvergenceError(
            f"Lanczos: {k} pairs not converged to {tol:.1e}*|lambda_1| after {j} steps", result)
    return result


# ---------------------------------------------------------------------------

HLike = Union[MetricTensor, HvpOperator, np.ndarray]


def alpha(h: HLike, v) -> float:
    """Rayleigh quotient ``v^T H v / v^T v``: speed of output change along ``v``."""
    v = np.asarray(v, dtype=np.float64)
    vv = float(v @ v)
    if vv == 0.0:
        raise ArgumentError("alpha of the zero vector is undefined")
    if isinstance(h, MetricTensor):
        return float(h.quad(v[:, None])[0]) / vv
    if isinstance(h, HvpOperator):
        return float(v @ hvp(h, v)) / vv
    h = np.asarray(h, dtype=np.float64)
    return float(v @ h @ v) / vv


def pushforward(gmap: DiffMap, z0, v) -> np.ndarray:
    """Output-space change ``J(z0) v`` (unnormalised left singular direction)."""
    return gmap.jvp(np.asarray(z0, dtype=np.float64), v)


def compute_metric(gmap: DiffMap, distance: DistanceMetric, z0, method: str = "full_bp",
                   k: int | None = None, tol: float = 1e-8, seed: int = 0,
                   eps: float | None = None) -> MetricTensor:
    """Dispatch to one of the three methods by name."""
    if method == "full_bp":
        return hessian_full(gmap, distance, z0)
    if method not in METHODS:
        raise ArgumentError(f"unknown method {method!r}")
    mode = "backward" if method == "backward_iter" else "forward"
    op = HvpOperator.build(gmap, distance, z0, mode, eps)
    return lanczos_topk(op, k if k is not None else op.n - 1, tol=tol, seed=seed)
