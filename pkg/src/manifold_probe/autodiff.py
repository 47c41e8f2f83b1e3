"""Dense layer stacks with exact forward-mode and reverse-mode derivatives.

A :class:`DiffMap` is an ordered list of :class:`LayerSpec` plus a
:class:`WeightStore`.  Activations travel as flat float64 arrays with a
leading batch axis; layers that need spatial structure (transposed
convolution, per-channel bias) reshape internally using the shape chain
computed at construction time.

Forward evaluation and JVP run through the same function (``_apply``), which
propagates a value and an optional batch of tangents together.  For a single
base point the tangent batch may be arbitrarily large, which is how
:func:`dense_jacobian` gets all columns in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import Mapping

import numpy as np

from .errors import CapacityError, DimensionError, SpecError

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "identity")
KINDS = ("dense", "bias", "elementwise", "transposed_conv2d", "reshape")

DEFAULT_DENSE_CAP = 2**24
KINK_TOL = 1e-9


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_features: int | None = None
    activation: str | None = None
    slope: float = 0.0
    in_ch: int | None = None
    out_ch: int | None = None
    kernel: int | None = None
    stride: int = 1
    pad: int = 0
    shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and (self.out_features is None or self.out_features < 1):
            raise SpecError("dense layer needs out_features >= 1")
        if self.kind == "elementwise":
            if self.activation not in ACTIVATIONS:
                raise SpecError(f"unknown activation {self.activation!r}")
            if self.activation == "leaky_relu" and not 0.0 < self.slope < 1.0:
                raise SpecError("leaky_relu slope must lie in (0, 1)")
        if self.kind == "transposed_conv2d":
            for name in ("in_ch", "out_ch", "kernel"):
                if getattr(self, name) is None or getattr(self, name) < 1:
                    raise SpecError(f"transposed_conv2d needs {name} >= 1")
            if self.stride < 1 or self.pad < 0:
                raise SpecError("transposed_conv2d needs stride >= 1 and pad >= 0")
        if self.kind == "reshape":
            if not self.shape or any(s < 1 for s in self.shape):
                raise SpecError("reshape needs a positive target shape")
            object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "dense":
            out["out_features"] = self.out_features
        elif self.kind == "elementwise":
            out["activation"] = self.activation
            if self.activation == "leaky_relu":
                out["slope"] = self.slope
        elif self.kind == "transposed_conv2d":
            out.update(in_ch=self.in_ch, out_ch=self.out_ch, kernel=self.kernel,
                       stride=self.stride, pad=self.pad)
        elif self.kind == "reshape":
            out["shape"] = list(self.shape)
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        d = dict(d)
        if "shape" in d and d["shape"] is not None:
            d["shape"] = tuple(d["shape"])
        return cls(**d)


# Small constructors; they read better than keyword soup in architecture lists.
def dense(out_features: int) -> LayerSpec:
    return LayerSpec("dense", out_features=out_features)


def bias() -> LayerSpec:
    return LayerSpec("bias")


def act(name: str, slope: float = 0.0) -> LayerSpec:
    return LayerSpec("elementwise", activation=name, slope=slope)


def tconv(in_ch: int, out_ch: int, kernel: int, stride: int = 1, pad: int = 0) -> LayerSpec:
    return LayerSpec("transposed_conv2d", in_ch=in_ch, out_ch=out_ch, kernel=kernel,
                     stride=stride, pad=pad)


def reshape(*shape: int) -> LayerSpec:
    return LayerSpec("reshape", shape=tuple(shape))


def layer_output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    size = prod(in_shape)
    if spec.kind == "dense":
        return (spec.out_features,)
    if spec.kind in ("bias", "elementwise"):
        return in_shape
    if spec.kind == "reshape":
        if prod(spec.shape) != size:
            raise SpecError(f"cannot reshape {in_shape} to {spec.shape}")
        return spec.shape
    # transposed_conv2d
    if len(in_shape) != 3 or in_shape[0] != spec.in_ch:
        raise SpecError(f"transposed_conv2d expects ({spec.in_ch}, H, W) input, got {in_shape}")
    _, h, w = in_shape
    ho = (h - 1) * spec.stride - 2 * spec.pad + spec.kernel
    wo = (w - 1) * spec.stride - 2 * spec.pad + spec.kernel
    if ho < 1 or wo < 1:
        raise SpecError("transposed_conv2d output would be empty")
    return (spec.out_ch, ho, wo)


def layer_param_shapes(spec: LayerSpec, in_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    if spec.kind == "dense":
        return {"weight": (spec.out_features, prod(in_shape))}
    if spec.kind == "bias":
        return {"bias": (in_shape[0],) if len(in_shape) == 3 else (prod(in_shape),)}
    if spec.kind == "transposed_conv2d":
        return {"weight": (spec.in_ch, spec.out_ch, spec.kernel, spec.kernel)}
    return {}


def shape_chain(layers, input_dim: int) -> list[tuple[int, ...]]:
    """Return the activation shape before layer 0, after layer 0, ... after the last."""
    shapes = [(int(input_dim),)]
    for spec in layers:
        shapes.append(layer_output_shape(spec, shapes[-1]))
    return shapes


class WeightStore(Mapping):
    """Read-only mapping ``"<layer>.<param>" -> float64 array``.

    Arrays are copied on construction and flagged non-writeable, so a store
    can be shared between threads and maps.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._tensors = {}
        for name, arr in (tensors or {}).items():
            a = np.array(arr, dtype=np.float64, copy=True)
            a.setflags(write=False)
            self._tensors[name] = a

    def __getitem__(self, key):
        return self._tensors[key]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    @property
    def n_params(self) -> int:
        return int(sum(a.size for a in self._tensors.values()))

    def layer(self, index: int) -> dict[str, np.ndarray]:
        prefix = f"{index}."
        return {k[len(prefix):]: v for k, v in self._tensors.items() if k.startswith(prefix)}

    def replace(self, updates: Mapping[str, np.ndarray]) -> "WeightStore":
        merged = dict(self._tensors)
        merged.update(updates)
        return WeightStore(merged)

    def __eq__(self, other):
        if not isinstance(other, WeightStore):
            return NotImplemented
        if set(self) != set(other):
            return False
        return all(self[k].shape == other[k].shape
                   and self[k].tobytes() == other[k].tobytes() for k in self)

    def __repr__(self):
        return f"WeightStore({len(self)} tensors, {self.n_params} params)"


# ---------------------------------------------------------------------------
# layer kernels


def _act_value(name, slope, x):
    if name == "tanh":
        return np.tanh(x)
    if name == "relu":
        return np.where(x > 0, x, 0.0)
    if name == "leaky_relu":
        return np.where(x > 0, x, slope * x)
    return x


def _act_deriv(name, slope, x, y):
    if name == "tanh":
        return 1.0 - y * y
    # subgradient at exactly 0 is taken from the left branch
    if name == "relu":
        return (x > 0).astype(np.float64)
    if name == "leaky_relu":
        return np.where(x > 0, 1.0, slope)
    return np.ones_like(x)


def _tconv_forward(x4, w, stride, pad):
    b, _, h, wd = x4.shape
    _, cout, k, _ = w.shape
    hf, wf = (h - 1) * stride + k, (wd - 1) * stride + k
    full = np.zeros((b, cout, hf, wf))
    # scatter each kernel tap onto its strided output lattice
    for ki in range(k):
        for kj in range(k):
            full[:, :, ki:ki + stride * (h - 1) + 1:stride, kj:kj + stride * (wd - 1) + 1:stride] += \
                np.einsum("bchw,co->bohw", x4, w[:, :, ki, kj])
    return full[:, :, pad:hf - pad, pad:wf - pad]


def _tconv_backward(x4, g4, w, stride, pad, want_params):
    b, cin, h, wd = x4.shape
    _, cout, k, _ = w.shape
    hf, wf = (h - 1) * stride + k, (wd - 1) * stride + k
    gfull = np.zeros((g4.shape[0], cout, hf, wf))
    gfull[:, :, pad:hf - pad, pad:wf - pad] = g4
    gx = np.zeros((g4.shape[0], cin, h, wd))
    gw = np.zeros_like(w) if want_params else None
    for ki in range(k):
        for kj in range(k):
            gs = gfull[:, :, ki:ki + stride * (h - 1) + 1:stride, kj:kj + stride * (wd - 1) + 1:stride]
            gx += np.einsum("bohw,co->bchw", gs, w[:, :, ki, kj])
            if want_params:
                gw[:, :, ki, kj] = np.einsum("bchw,bohw->co", x4, gs)
    return gx, gw


def _apply(spec, params, in_shape, x, dx):
    """Propagate value ``x`` (B, d) and optional tangents ``dx`` (T, d)."""
    kind = spec.kind
    if kind == "dense":
        w = params["weight"]
        return x @ w.T, (None if dx is None else dx @ w.T)
    if kind == "bias":
        b = params["bias"]
        if len(in_shape) == 3:
            c, h, wd = in_shape
            y = (x.reshape(-1, c, h * wd) + b[:, None]).reshape(x.shape)
        else:
            y = x + b
        return y, dx
    if kind == "elementwise":
        y = _act_value(spec.activation, spec.slope, x)
        if dx is None:
            return y, None
        return y, dx * _act_deriv(spec.activation, spec.slope, x, y)
    if kind == "reshape":
        return x, dx
    w = params["weight"]
    x4 = x.reshape((-1,) + in_shape)
    y = _tconv_forward(x4, w, spec.stride, spec.pad).reshape(x.shape[0], -1)
    if dx is None:
        return y, None
    dy = _tconv_forward(dx.reshape((-1,) + in_shape), w, spec.stride, spec.pad)
    return y, dy.reshape(dx.shape[0], -1)


def _backward(spec, params, in_shape, x, y, g, want_params):
    """Pull cotangent ``g`` back through one layer evaluated at input ``x``."""
    kind = spec.kind
    if kind == "dense":
        w = params["weight"]
        pg = {"weight": g.T @ x} if want_params else {}
        return g @ w, pg
    if kind == "bias":
        if not want_params:
            return g, {}
        if len(in_shape) == 3:
            c = in_shape[0]
            gb = g.reshape(g.shape[0], c, -1).sum(axis=(0, 2))
        else:
            gb = g.sum(axis=0)
        return g, {"bias": gb}
    if kind == "elementwise":
        return g * _act_deriv(spec.activation, spec.slope, x, y), {}
    if kind == "reshape":
        return g, {}
    w = params["weight"]
    x4 = x.reshape((-1,) + in_shape)
    gx, gw = _tconv_backward(x4, g.reshape((-1,) + layer_output_shape(spec, in_shape)),
                             w, spec.stride, spec.pad, want_params)
    return gx.reshape(g.shape[0], -1), ({"weight": gw} if want_params else {})


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffMap:
    """A differentiable map ``R^n -> R^M`` built from a layer stack.

    ``taps`` lists the layer indices whose outputs are concatenated to form
    the map's output; by default only the last layer is tapped.
    """

    layers: tuple[LayerSpec, ...]
    weights: WeightStore
    input_dim: int
    taps: tuple[int, ...] | None = None
    shapes: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not isinstance(self.weights, WeightStore):
            object.__setattr__(self, "weights", WeightStore(self.weights))
        if self.input_dim < 1:
            raise SpecError("input_dim must be positive")
        shapes = shape_chain(self.layers, self.input_dim)
        object.__setattr__(self, "shapes", shapes)
        taps = self.taps
        if taps is None:
            taps = (len(self.layers) - 1,) if self.layers else ()
        taps = tuple(int(t) for t in taps)
        if self.layers and (not taps or any(not 0 <= t < len(self.layers) for t in taps)):
            raise SpecError(f"invalid taps {taps} for {len(self.layers)} layers")
        object.__setattr__(self, "taps", taps)
        for i, spec in enumerate(self.layers):
            expected = layer_param_shapes(spec, shapes[i])
            got = self.weights.layer(i)
            if set(expected) != set(got):
                raise SpecError(f"layer {i}: expected params {sorted(expected)}, got {sorted(got)}")
            for name, shp in expected.items():
                if got[name].shape != shp:
                    raise SpecError(f"layer {i}.{name}: shape {got[name].shape} != {shp}")

    # -- shape helpers -----------------------------------------------------
    @property
    def output_dim(self) -> int:
        if not self.layers:
            return self.input_dim
        return int(sum(prod(self.shapes[t + 1]) for t in self.taps))

    @property
    def output_shape(self) -> tuple[int, ...]:
        if len(self.taps) == 1:
            return self.shapes[self.taps[0] + 1]
        return (self.output_dim,)

    def _check(self, a, dim, what):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim not in (1, 2) or a.shape[-1] != dim:
            raise DimensionError(f"{what} must have trailing dimension {dim}, got shape {a.shape}")
        return a

    # -- core passes -------------------------------------------------------
    def _run(self, z, dz=None):
        """Dual pass: returns (activations, tangents); index 0 is the input."""
        xs, dxs = [z], [dz]
        x, dx = z, dz
        last = max(self.taps) if self.layers else -1
        for i in range(last + 1):
            x, dx = _apply(self.layers[i], self.weights.layer(i), self.shapes[i], x, dx)
            xs.append(x)
            dxs.append(dx)
        return xs, dxs

    def _gather(self, xs):
        if not self.layers:
            return xs[0]
        parts = [xs[t + 1] for t in self.taps]
        return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-1)

    def forward(self, z):
        z = self._check(z, self.input_dim, "z")
        single = z.ndim == 1
        xs, _ = self._run(z.reshape(-1, self.input_dim))
        out = self._gather(xs)
        return out[0] if single else out

    __call__ = forward

    def jvp(self, z, tangent):
        """``J(z) @ tangent``; ``tangent`` may be a (T, n) batch."""
        z = self._check(z, self.input_dim, "z")
        if z.ndim != 1:
            raise DimensionError("jvp takes a single base point")
        t = self._check(tangent, self.input_dim, "tangent")
        single = t.ndim == 1
        _, dxs = self._run(z[None, :], t.reshape(-1, self.input_dim))
        out = self._gather(dxs)
        return out[0] if single else out

    def _pullback(self, xs, g_out, want_params):
        n_layers = max(self.taps) + 1 if self.layers else 0
        if n_layers == 0:
            return g_out, {}
        sizes = [prod(self.shapes[t + 1]) for t in self.taps]
        offsets = np.cumsum([0] + sizes)
        tap_slices = {t: (offsets[j], offsets[j + 1]) for j, t in enumerate(self.taps)}
        batch = g_out.shape[0]
        g = np.zeros((batch, prod(self.shapes[n_layers])))
        grads = {}
        for i in range(n_layers - 1, -1, -1):
            if i in tap_slices:
                lo, hi = tap_slices[i]
                g = g + g_out[:, lo:hi]
            g, pg = _backward(self.layers[i], self.weights.layer(i), self.shapes[i],
                              xs[i], xs[i + 1], g, want_params)
            for name, val in pg.items():
                grads[f"{i}.{name}"] = val
        return g, grads

    def vjp(self, z, cotangent):
        """``J(z).T @ cotangent``; ``cotangent`` may be a (T, M) batch."""
        z = self._check(z, self.input_dim, "z")
        if z.ndim != 1:
            raise DimensionError("vjp takes a single base point")
        u = self._check(cotangent, self.output_dim, "cotangent")
        single = u.ndim == 1
        xs, _ = self._run(z[None, :])
        g, _ = self._pullback(xs, u.reshape(-1, self.output_dim), False)
        return g[0] if single else g

    def forward_with_pullback(self, z_batch):
        """Forward a batch; return outputs and a closure for weight gradients.

        ``pull(cotangents)`` returns ``(input_grads, weight_grads)`` with weight
        gradients summed over the batch.  Used by training loops.
        """
        z = self._check(z_batch, self.input_dim, "z").reshape(-1, self.input_dim)
        xs, _ = self._run(z)
        out = self._gather(xs)

        def pull(cotangents):
            u = self._check(cotangents, self.output_dim, "cotangent").reshape(out.shape)
            return self._pullback(xs, u, True)

        return out, pull

    def activations(self, z) -> list[np.ndarray]:
        """Outputs of every layer at a single point (index i is layer i)."""
        z = self._check(z, self.input_dim, "z")
        xs, _ = self._run(z.reshape(1, -1))
        return [x[0] for x in xs[1:]]

    # -- structural helpers ---------------------------------------------------
    def truncate(self, layer_index: int) -> "DiffMap":
        """Map from the input to the output of ``layer_index``."""
        if not 0 <= layer_index < len(self.layers):
            raise DimensionError(f"layer index {layer_index} out of range")
        kept = {k: v for k, v in self.weights.items() if int(k.split(".")[0]) <= layer_index}
        return DiffMap(self.layers[:layer_index + 1], WeightStore(kept), self.input_dim,
                       taps=(layer_index,))

    def then(self, outer: "DiffMap") -> "DiffMap":
        """Composite ``outer ∘ self``; output taps come from ``outer``."""
        if outer.input_dim != self.output_dim or len(self.taps) != 1 \
                or self.taps[0] != len(self.layers) - 1:
            raise DimensionError("composition needs a single trailing output matching outer input")
        layers = list(self.layers)
        if len(self.shapes[-1]) != 1:
            # outer's first layer sees a flat vector
            layers.append(reshape(self.output_dim))
        off = len(layers)
        renamed = dict(self.weights.items())
        for k, v in outer.weights.items():
            idx, name = k.split(".", 1)
            renamed[f"{int(idx) + off}.{name}"] = v
        layers.extend(outer.layers)
        return DiffMap(tuple(layers), WeightStore(renamed), self.input_dim,
                       taps=tuple(t + off for t in outer.taps))


def linear_map(matrix) -> DiffMap:
    """A single dense layer with the given (M, n) matrix."""
    a = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    return DiffMap((dense(a.shape[0]),), WeightStore({"0.weight": a}), a.shape[1])


def identity_map(n: int) -> DiffMap:
    return DiffMap((act("identity"),), WeightStore(), n)


def dense_jacobian(fmap: DiffMap, z, cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    """Full (M, n) Jacobian; column i is ``jvp(z, e_i)``."""
    n, m = fmap.input_dim, fmap.output_dim
    if n * m > cap:
        raise CapacityError(f"dense Jacobian needs {n * m} entries, cap is {cap}")
    return np.ascontiguousarray(fmap.jvp(z, np.eye(n)).T)


# ---------------------------------------------------------------------------


@dataclass
class ProbeResult:
    jvp_error: float
    vjp_error: float
    kink: bool


@dataclass
class CheckReport:
    max_jvp_error: float
    max_vjp_error: float
    n_probes: int
    n_kink: int
    tol: float
    passed: bool
    probes: list[ProbeResult]

    @property
    def max_error(self) -> float:
        return max(self.max_jvp_error, self.max_vjp_error)


def _kink_signature(fmap, z):
    """Pre-activations feeding relu-type layers, concatenated."""
    xs, _ = fmap._run(np.asarray(z, dtype=np.float64)[None, :])
    pre = [xs[i][0] for i, s in enumerate(fmap.layers)
           if s.kind == "elementwise" and s.activation in ("relu", "leaky_relu")]
    return np.concatenate(pre) if pre else np.zeros(0)


def has_kinks(fmap: DiffMap) -> bool:
    return any(s.kind == "elementwise" and s.activation in ("relu", "leaky_relu")
               for s in fmap.layers)


def crosses_kink(fmap: DiffMap, z, dz) -> bool:
    """True when some relu-type unit switches branch between ``z - dz`` and ``z + dz``."""
    if not has_kinks(fmap):
        return False
    z = np.asarray(z, dtype=np.float64)
    plus, minus = _kink_signature(fmap, z + dz), _kink_signature(fmap, z - dz)
    return bool(np.any(np.sign(plus) != np.sign(minus)))


def grad_check(fmap: DiffMap, z, n_probes: int = 8, tol: float = 1e-5,
               step: float = 1e-5, seed: int = 0) -> CheckReport:
    """Compare JVP/VJP against central differences along random probes.

    A probe is marked ``kink`` instead of scored when a relu-type
    pre-activation sits within ``KINK_TOL`` of zero at ``z`` or changes sign
    across the difference stencil.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    z = np.asarray(z, dtype=np.float64)
    rng = np.random.default_rng(seed)
    base_pre = _kink_signature(fmap, z)
    near_zero = bool(np.any(np.abs(base_pre) <= KINK_TOL))
    probes = []
    for _ in range(n_probes):
        v = rng.standard_normal(fmap.input_dim)
        u = rng.standard_normal(fmap.output_dim)
        kink = near_zero
        if not kink and base_pre.size:
            kink = crosses_kink(fmap, z, step * v)
        fd = (fmap.forward(z + step * v) - fmap.forward(z - step * v)) / (2 * step)
        jv = fmap.jvp(z, v)
        e_jvp = float(np.max(np.abs(jv - fd)) / max(1.0, np.max(np.abs(fd))))
        lhs, rhs = float(fmap.vjp(z, u) @ v), float(u @ fd)
        e_vjp = abs(lhs - rhs) / max(1.0, abs(rhs))
        probes.append(ProbeResult(e_jvp, e_vjp, kink))
    scored = [p for p in probes if not p.kink]
    mj = max((p.jvp_error for p in scored), default=0.0)
    mv = max((p.vjp_error for p in scored), default=0.0)
    return CheckReport(mj, mv, n_probes, len(probes) - len(scored), tol,
                       bool(mj < tol and mv < tol), probes)
