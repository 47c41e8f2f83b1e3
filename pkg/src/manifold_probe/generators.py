"""Small generative maps: seeded random networks, a trained blob decoder,
and weight-shuffled controls."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from math import prod

import numpy as np

from .autodiff import (DiffMap, LayerSpec, WeightStore, act, bias, dense, layer_param_shapes,
                       reshape, shape_chain, tconv)
from .errors import SpecError, TrainingError

log = logging.getLogger(__name__)

N_BLOB_PARAMS = 4


@dataclass(frozen=True)
class GeneratorSpec:
    """Architecture, seed and latent distribution of a generator.

    ``output_shape`` is ``(H, W, C)`` for images or ``(M,)`` for flat
    outputs.  Image pixels are stored channel-major, i.e. the flat output is
    ``(C, H, W)`` raveled; for single-channel images both orders coincide.
    """

    architecture: tuple[LayerSpec, ...]
    latent_dim: int
    output_shape: tuple[int, ...]
    seed: int = 0
    init_gain: float = 1.0
    latent: str = "gaussian"
    truncation: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "architecture", tuple(self.architecture))
        object.__setattr__(self, "output_shape", tuple(int(s) for s in self.output_shape))
        if self.latent_dim < 2:
            raise SpecError("latent_dim must be >= 2")
        if not self.output_shape or any(s < 1 for s in self.output_shape):
            raise SpecError("output dims must be positive")
        if self.latent not in ("gaussian", "truncated_gaussian"):
            raise SpecError(f"unknown latent distribution {self.latent!r}")
        if self.latent == "truncated_gaussian" and not (self.truncation and self.truncation > 0):
            raise SpecError("truncated_gaussian needs a positive truncation limit")
        out = shape_chain(self.architecture, self.latent_dim)[-1]
        if prod(out) != prod(self.output_shape):
            raise SpecError(f"architecture produces {out}, spec declares {self.output_shape}")

    @property
    def output_dim(self) -> int:
        return prod(self.output_shape)

    @property
    def image_hw(self) -> tuple[int, int] | None:
        if len(self.output_shape) == 3:
            return self.output_shape[0], self.output_shape[1]
        return None

    def to_dict(self) -> dict:
        return {
            "architecture": [layer.to_dict() for layer in self.architecture],
            "latent_dim": self.latent_dim,
            "output_shape": list(self.output_shape),
            "seed": self.seed,
            "init_gain": self.init_gain,
            "latent": self.latent,
            "truncation": self.truncation,
        }

    @classmethod
    def from_dict(cls, d) -> "GeneratorSpec":
        d = dict(d)
        d["architecture"] = tuple(LayerSpec.from_dict(x) for x in d["architecture"])
        d["output_shape"] = tuple(d["output_shape"])
        return cls(**d)


def init_weights(spec: GeneratorSpec) -> WeightStore:
    """Scaled-normal init: std = gain / sqrt(fan_in); biases start at zero."""
    rng = np.random.default_rng(spec.seed)
    shapes = shape_chain(spec.architecture, spec.latent_dim)
    tensors = {}
    for i, layer in enumerate(spec.architecture):
        for name, shp in layer_param_shapes(layer, shapes[i]).items():
            if name == "bias":
                tensors[f"{i}.{name}"] = np.zeros(shp)
                continue
            if layer.kind == "dense":
                fan_in = shp[1]
            else:
                fan_in = layer.in_ch * layer.kernel**2 / layer.stride**2
            tensors[f"{i}.{name}"] = rng.standard_normal(shp) * (spec.init_gain / np.sqrt(fan_in))
    return WeightStore(tensors)


def build_generator(spec: GeneratorSpec, weights: WeightStore | None = None) -> DiffMap:
    """Instantiate ``spec``; weights default to the seeded initialisation."""
    if weights is None:
        weights = init_weights(spec)
    return DiffMap(spec.architecture, weights, spec.latent_dim)


# ---------------------------------------------------------------------------
# builtin architectures


def linear_spec(latent_dim: int = 8, output_dim: int = 64, seed: int = 0) -> GeneratorSpec:
    return GeneratorSpec((dense(output_dim),), latent_dim, (output_dim,), seed=seed)


def mlp_spec(latent_dim: int = 8, hidden: int = 64, output_dim: int = 256, seed: int = 0,
             activation: str = "tanh") -> GeneratorSpec:
    arch = (dense(hidden), bias(), act(activation), dense(output_dim), bias())
    return GeneratorSpec(arch, latent_dim, (output_dim,), seed=seed)


def orthogonal_generator(latent_dim: int = 8, output_dim: int = 64, gain: float = 1.0,
                         seed: int = 0) -> tuple[GeneratorSpec, WeightStore]:
    """Linear map with orthonormal columns times ``gain``; its metric is ``gain^2 I``."""
    if output_dim < latent_dim:
        raise SpecError("orthogonal generator needs output_dim >= latent_dim")
    spec = linear_spec(latent_dim, output_dim, seed)
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((output_dim, latent_dim)))
    return spec, WeightStore({"0.weight": gain * q})


def deconv_spec(latent_dim: int = 8, seed: int = 0) -> GeneratorSpec:
    """DCGAN-style 8 -> (8,4,4) -> (4,8,8) -> (1,16,16)."""
    arch = (
        dense(128), bias(), act("leaky_relu", 0.2), reshape(8, 4, 4),
        tconv(8, 4, 4, stride=2, pad=1), bias(), act("leaky_relu", 0.2),
        tconv(4, 1, 4, stride=2, pad=1), act("tanh"),
    )
    return GeneratorSpec(arch, latent_dim, (16, 16, 1), seed=seed)


def blob_decoder_spec(latent_dim: int = 8, image_size: int = 16, hidden=(64, 128),
                      seed: int = 0, truncation: float = 1.5, init_gain: float = 0.3) -> GeneratorSpec:
    """Tanh MLP decoder for :class:`BlobFamily` images.

    The small init gain keeps the random initial weights from dominating the
    learned low-rank structure, so shuffling the trained weights produces
    a genuinely different (flatter) geometry.
    """
    arch = []
    for width in hidden:
        arch += [dense(width), bias(), act("tanh")]
    arch += [dense(image_size * image_size), bias()]
    return GeneratorSpec(tuple(arch), latent_dim, (image_size, image_size, 1), seed=seed,
                         init_gain=init_gain, latent="truncated_gaussian", truncation=truncation)


# ---------------------------------------------------------------------------


def shuffle_permutations(store: WeightStore, seed: int) -> dict[str, np.ndarray]:
    """The per-tensor permutations ``shuffle_weights`` applies for ``seed``."""
    rng = np.random.default_rng(seed)
    return {name: rng.permutation(store[name].size) for name in sorted(store, key=tensor_order)}


def tensor_order(name):
    idx, param = name.split(".", 1)
    return int(idx), param


def shuffle_weights(store: WeightStore, seed: int) -> WeightStore:
    """Permute the entries of every tensor within that tensor."""
    perms = shuffle_permutations(store, seed)
    return WeightStore({name: store[name].ravel()[p].reshape(store[name].shape)
                        for name, p in perms.items()})


def unshuffle_weights(store: WeightStore, seed: int) -> WeightStore:
    """Inverse of :func:`shuffle_weights` for the same seed."""
    perms = shuffle_permutations(store, seed)
    out = {}
    for name, p in perms.items():
        flat = np.empty(store[name].size)
        flat[p] = store[name].ravel()
        out[name] = flat.reshape(store[name].shape)
    return WeightStore(out)


def sample_latent(spec: GeneratorSpec, rng_seed: int, count: int) -> np.ndarray:
    """``count`` i.i.d. latent draws, shape (count, latent_dim).

    The truncated variant redraws each out-of-range coordinate until it
    falls inside the limit.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal((count, spec.latent_dim))
    if spec.latent == "truncated_gaussian":
        bad = np.abs(z) > spec.truncation
        while bad.any():
            z[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(z) > spec.truncation
    return z


# ---------------------------------------------------------------------------
# blob family


@dataclass(frozen=True)
class BlobFamily:
    """Single Gaussian blobs ``a * exp(-((px-x)^2 + (py-y)^2) / (2 s^2))``.

    Parameters are ordered (x, y, sigma, amplitude).  Each one is embedded
    affinely into a latent coordinate so that its range maps onto
    ``[-latent_scale, latent_scale]``.
    """

    height: int = 16
    width: int = 16
    x_range: tuple[float, float] = (4.0, 11.0)
    y_range: tuple[float, float] = (4.0, 11.0)
    sigma_range: tuple[float, float] = (1.5, 3.0)
    amp_range: tuple[float, float] = (0.5, 1.0)
    latent_scale: float = 1.5

    def __post_init__(self):
        if self.sigma_range[0] <= 0 or self.amp_range[0] <= 0:
            raise SpecError("sigma and amplitude must be positive")
        for lo, hi, size in ((*self.x_range, self.width), (*self.y_range, self.height)):
            if not 0 <= lo <= hi <= size - 1:
                raise SpecError("blob centres must lie inside the image")

    @property
    def ranges(self) -> np.ndarray:
        return np.array([self.x_range, self.y_range, self.sigma_range, self.amp_range])

    def embed(self, params) -> np.ndarray:
        r = self.ranges
        mid, half = r.mean(axis=1), (r[:, 1] - r[:, 0]) / 2
        return (np.asarray(params) - mid) / half * self.latent_scale

    def unembed(self, coords) -> np.ndarray:
        r = self.ranges
        mid, half = r.mean(axis=1), (r[:, 1] - r[:, 0]) / 2
        return np.asarray(coords) / self.latent_scale * half + mid

    def sample_params(self, rng: np.random.Generator, count: int) -> np.ndarray:
        r = self.ranges
        return r[:, 0] + rng.random((count, N_BLOB_PARAMS)) * (r[:, 1] - r[:, 0])

    def render(self, params) -> np.ndarray:
        """Images for a (B, 4) parameter batch, shape (B, H*W)."""
        p = np.atleast_2d(np.asarray(params, dtype=np.float64))
        py, px = np.mgrid[0:self.height, 0:self.width]
        x, y, s, a = (p[:, i, None, None] for i in range(4))
        img = a * np.exp(-((px - x) ** 2 + (py - y) ** 2) / (2 * s**2))
        return img.reshape(len(p), -1)

    def render_grad(self, params) -> np.ndarray:
        """Analytic d(image)/d(x, y, sigma, amplitude); shape (4, H*W) for one blob."""
        x, y, s, a = np.asarray(params, dtype=np.float64)
        py, px = np.mgrid[0:self.height, 0:self.width]
        r2 = (px - x) ** 2 + (py - y) ** 2
        e = np.exp(-r2 / (2 * s**2))
        grads = [a * e * (px - x) / s**2, a * e * (py - y) / s**2, a * e * r2 / s**3, e]
        return np.stack([g.ravel() for g in grads])

    def latents(self, params, nuisance) -> np.ndarray:
        """Latent codes whose first 4 coordinates encode ``params``."""
        return np.concatenate([self.embed(params), np.asarray(nuisance)], axis=-1)


@dataclass
class TrainConfig:
    seed: int = 0
    max_epochs: int = 60
    steps_per_epoch: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    target_loss: float | None = 1e-4
    n_eval: int = 512
    nuisance_std: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    decoder: DiffMap
    losses: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    epochs: int = 0


def blob_batch(family: BlobFamily, latent_dim: int, rng: np.random.Generator, count: int,
               nuisance_std: float = 1.0, truncation: float | None = None):
    """Draw (latents, images) for training or evaluation."""
    params = family.sample_params(rng, count)
    nuis = rng.standard_normal((count, latent_dim - N_BLOB_PARAMS)) * nuisance_std
    if truncation is not None:
        np.clip(nuis, -truncation, truncation, out=nuis)
    return family.latents(params, nuis), family.render(params)


def reconstruction_mse(decoder: DiffMap, latents, images) -> float:
    return float(np.mean((decoder.forward(latents) - images) ** 2))


def fit_blob_decoder(family: BlobFamily, arch: GeneratorSpec,
                     cfg: TrainConfig | None = None) -> TrainResult:
    """Train ``arch`` to render blobs from their embedded parameters with Adam.

    Training data is drawn fresh every step from a stream seeded by
    ``cfg.seed``; the evaluation set comes from an independent stream.  Stops
    after the first epoch whose evaluation MSE is below ``cfg.target_loss``.
    """
    cfg = cfg or TrainConfig()
    if arch.latent_dim < N_BLOB_PARAMS:
        raise SpecError("blob decoder needs latent_dim >= 4")
    if arch.output_dim != family.height * family.width:
        raise SpecError("decoder output does not match blob image size")
    train_rng, eval_rng = (np.random.default_rng(s) for s in
                           np.random.SeedSequence(cfg.seed).spawn(2))
    ev_z, ev_img = blob_batch(family, arch.latent_dim, eval_rng, cfg.n_eval,
                              cfg.nuisance_std, arch.truncation)
    decoder = build_generator(arch)
    params = {k: np.array(v) for k, v in decoder.weights.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(v) for k, v in params.items()}
    losses = [reconstruction_mse(decoder, ev_z, ev_img)]
    step, epoch = 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        for _ in range(cfg.steps_per_epoch):
            z, img = blob_batch(family, arch.latent_dim, train_rng, cfg.batch_size,
                                cfg.nuisance_std, arch.truncation)
            out, pull = decoder.forward_with_pullback(z)
            resid = out - img
            _, grads = pull(2 * resid / resid.size)
            step += 1
            for k, g in grads.items():
                m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
                v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g * g
                mhat = m[k] / (1 - cfg.beta1**step)
                vhat = v[k] / (1 - cfg.beta2**step)
                params[k] = params[k] - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
            decoder = DiffMap(arch.architecture, WeightStore(params), arch.latent_dim)
        losses.append(reconstruction_mse(decoder, ev_z, ev_img))
        log.debug("epoch %d eval mse %.3e", epoch, losses[-1])
        if not np.isfinite(losses[-1]):
            raise TrainingError("training diverged", losses[-1])
        if cfg.target_loss is not None and losses[-1] < cfg.target_loss:
            break
    result = TrainResult(decoder, losses, losses[-1], epoch if cfg.max_epochs else 0)
    if cfg.target_loss is not None and not result.final_loss < cfg.target_loss:
        raise TrainingError(
            f"eval MSE {result.final_loss:.3e} above target {cfg.target_loss:.1e}", result.final_loss)
    return result


def train_blob_decoder(family: BlobFamily, arch: GeneratorSpec,
                       cfg: TrainConfig | None = None) -> DiffMap:
    return fit_blob_decoder(family, arch, cfg).decoder
