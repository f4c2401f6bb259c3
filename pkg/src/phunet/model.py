"""Probabilistic Hadamard U-Net: scalar-field extractor plus conditional VAE."""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .layers import HTBlock, inverse_softplus
from .wht import check_power_of_two

FIELD_FLOOR = 1e-3
VARIANCE_FLOOR = 1e-6


@dataclass
class ModelConfig:
    size: int = 64
    latent_dim: int = 6
    hunet_channels: tuple = (8, 16)
    hunet_kernels: tuple = (16, 7, 7, 16)
    encoder_channels: tuple = (32, 64)
    encoder_depth: int = 4
    fusion_channels: int = 32
    init_threshold: float = 1e-3

    def __post_init__(self):
        check_power_of_two(self.size, "image size")
        self.hunet_channels = tuple(int(c) for c in self.hunet_channels)
        self.hunet_kernels = tuple(int(k) for k in self.hunet_kernels)
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class LatentGaussian:
    """Diagonal Gaussian over the latent space, batched as (B, D) tensors."""

    mean: Tensor
    var: Tensor

    @property
    def dim(self):
        return self.mean.shape[-1]


@dataclass
class Correction:
    samples: list
    field: np.ndarray
    prototype: np.ndarray
    latent_mean: np.ndarray = field(default=None)


def normalize_slice(x):
    """Min-max scale to [0, 1]; returns (scaled, offset, span)."""
    x = np.asarray(x, dtype=np.float64)
    lo = float(x.min())
    span = float(x.max()) - lo
    if span <= 0:
        span = 1.0
    return (x - lo) / span, lo, span


def sample_latent(g, rng):
    """Reparameterized draw ``mean + sqrt(var) * eps`` with eps ~ N(0, I)."""
    eps = rng.standard_normal(g.mean.shape).astype(g.mean.dtype)
    return g.mean + ad.sqrt(g.var) * Tensor(eps, dtype=g.mean.dtype)


class _Conv:
    def __init__(self, params, name, cin, cout, k, rng, dtype, gain=1.0):
        std = gain * np.sqrt(2.0 / (cin * k * k))
        self.w = params.add(f"{name}.w", rng.normal(0.0, std, (cout, cin, k, k)), dtype)
        self.b = params.add(f"{name}.b", np.zeros(cout), dtype)

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b)


class ParamStore(dict):
    """Ordered name -> Tensor mapping; order fixes checkpoint layout."""

    def add(self, name, value, dtype):
        if name in self:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(value), requires_grad=True, name=name, dtype=dtype)
        self[name] = t
        return t


class _Encoder:
    """Two 3x3 conv blocks, 2x2 average pool between them, mean head."""

    def __init__(self, params, name, cin, cfg, rng, dtype):
        self.layers = []
        c = cin
        for bi, width in enumerate(cfg.encoder_channels):
            block = []
            for li in range(cfg.encoder_depth):
                block.append(_Conv(params, f"{name}.b{bi}.c{li}", c, width, 3, rng, dtype))
                c = width
            self.layers.append(block)
        d = cfg.latent_dim
        self.head_w = params.add(
            f"{name}.head.w", rng.normal(0.0, 0.01 / np.sqrt(c), (c, 2 * d)), dtype
        )
        self.head_b = params.add(f"{name}.head.b", np.zeros(2 * d), dtype)
        self.latent_dim = d

    def __call__(self, x):
        h = x
        for bi, block in enumerate(self.layers):
            if bi > 0:
                h = ad.avgpool2d(h)
            for conv in block:
                h = ad.relu(conv(h))
        stats = ad.linear(ad.global_avgpool(h), self.head_w, self.head_b)
        d = self.latent_dim
        mean = stats[:, :d]
        var = ad.exp(stats[:, d:]) + VARIANCE_FLOOR
        return LatentGaussian(mean, var)


class PHUNet:
    """All trainable pieces of the model and their forward passes.

    Parameters
    ----------
    config : ModelConfig
    seed : int
        Seed for weight initialization.
    dtype : numpy dtype
        float64 for exact checks, float32 for speed.
    """

    def __init__(self, config=None, seed=0, dtype=np.float64):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        cfg = self.config
        rng = np.random.default_rng(seed)
        p = self.params = ParamStore()
        c1, c2 = cfg.hunet_channels
        k1, k2, k3, k4 = cfg.hunet_kernels
        m = cfg.size

        self.conv1 = _Conv(p, "hunet.conv1", 1, c1, k1, rng, dtype)
        self.ht1 = HTBlock(c1, m, cfg.init_threshold, dtype, "hunet.ht1")
        p["hunet.ht1.W"], p["hunet.ht1.theta"] = self.ht1.parameters()
        self.conv2 = _Conv(p, "hunet.conv2", c1, c2, k2, rng, dtype)
        self.ht2 = HTBlock(c2, m, cfg.init_threshold, dtype, "hunet.ht2")
        p["hunet.ht2.W"], p["hunet.ht2.theta"] = self.ht2.parameters()
        self.conv3 = _Conv(p, "hunet.conv3", c2, c1, k3, rng, dtype)
        # Small output weights plus a bias at softplus^-1(1 - floor) start U near 1.
        self.conv4 = _Conv(p, "hunet.conv4", c1, 1, k4, rng, dtype, gain=1e-2)
        self.conv4.b.data[:] = inverse_softplus(1.0 - FIELD_FLOOR)

        self.prior_net = _Encoder(p, "prior", 1, cfg, rng, dtype)
        self.posterior_net = _Encoder(p, "posterior", 2, cfg, rng, dtype)

        d, fc = cfg.latent_dim, cfg.fusion_channels
        self.fuse1 = _Conv(p, "fusion.c0", 1 + d, fc, 1, rng, dtype, gain=1e-2)
        self.fuse2 = _Conv(p, "fusion.c1", fc, fc, 1, rng, dtype, gain=1e-2)
        self.fuse3 = _Conv(p, "fusion.c2", fc, 1, 1, rng, dtype, gain=1e-2)
        # Channel 0 carries the prototype straight through (ReLU is exact on it).
        for conv in (self.fuse1, self.fuse2, self.fuse3):
            conv.w.data[0, 0, 0, 0] = 1.0

    # ------------------------------------------------------------------ api

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in self.params.items():
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise DimensionError(f"{name}: shape {value.shape}, expected {t.shape}")
            t.data = value.astype(self.dtype)

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for t in self.params.values():
            t.data = t.data.astype(self.dtype)
        return self

    def _check_input(self, x, channels=1):
        if x.ndim != 4 or x.shape[1] != channels:
            raise DimensionError(f"expected (B, {channels}, H, W), got {x.shape}")
        m = self.config.size
        if x.shape[2:] != (m, m):
            check_power_of_two(x.shape[2], "image side")
            raise DimensionError(f"model is built for {m}x{m} inputs, got {x.shape[2]}x{x.shape[3]}")

    def _tensor(self, x):
        if isinstance(x, Tensor):
            return x
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None, None]
        return Tensor(x, dtype=self.dtype)

    def hunet(self, x):
        """Scalar field U (B, 1, H, W) and the thresholded spectra of each HT block."""
        x = self._tensor(x)
        self._check_input(x)
        h1 = ad.relu(self.conv1(x))
        a1, z1 = self.ht1(h1)
        h2 = ad.relu(self.conv2(a1))
        a2, z2 = self.ht2(h2)
        h3 = ad.relu(self.conv3(a2))
        pre = self.conv4(h3 + h1)
        u = ad.softplus(pre) + FIELD_FLOOR
        return u, [z1, z2]

    def prior(self, x):
        x = self._tensor(x)
        self._check_input(x)
        return self.prior_net(x)

    def posterior(self, x, y):
        x, y = self._tensor(x), self._tensor(y)
        self._check_input(x)
        self._check_input(y)
        return self.posterior_net(ad.concat([x, y], axis=1))

    def fuse(self, prototype, r):
        """Combine the prototype (B, 1, H, W) with latent samples r (B, D)."""
        prototype = self._tensor(prototype)
        if prototype.ndim != 4 or prototype.shape[1] != 1:
            raise DimensionError(f"prototype must be (B, 1, H, W), got {prototype.shape}")
        if r.ndim != 2 or r.shape != (prototype.shape[0], self.config.latent_dim):
            raise DimensionError(
                f"latent batch {r.shape} does not fit prototype batch {prototype.shape[0]}"
            )
        h, w = prototype.shape[2:]
        z = ad.concat([prototype, ad.broadcast_spatial(r, h, w)], axis=1)
        z = ad.relu(self.fuse1(z))
        z = ad.relu(self.fuse2(z))
        return self.fuse3(z)

    def forward_train(self, x, y, rng):
        """Training-path forward pass using one posterior sample per example."""
        x, y = self._tensor(x), self._tensor(y)
        u, zs = self.hunet(x)
        prototype = x * u
        post = self.posterior(x, y)
        prior = self.prior(x)
        r = sample_latent(post, rng)
        out = self.fuse(prototype, r)
        return {"field": u, "spectra": zs, "prototype": prototype,
                "posterior": post, "prior": prior, "output": out}

    def correct(self, x, rng, n_samples=1):
        """Correct one raw 2D slice with ``n_samples`` prior draws.

        Intensities are min-max normalized for the network and mapped back
        afterwards. Returns a :class:`Correction` with the corrected samples,
        the scalar field U and the prototype ``X * U`` (original units).
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise DimensionError(f"expected a 2D slice, got shape {x.shape}")
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        xn, lo, span = normalize_slice(x)
        xt = self._tensor(xn)
        u, _ = self.hunet(xt)
        proto = xt * u
        g = self.prior(xt)
        mean = np.repeat(g.mean.data, n_samples, axis=0)
        var = np.repeat(g.var.data, n_samples, axis=0)
        r = sample_latent(LatentGaussian(Tensor(mean, dtype=self.dtype), Tensor(var, dtype=self.dtype)), rng)
        protos = Tensor(np.repeat(proto.data, n_samples, axis=0), dtype=self.dtype)
        out = self.fuse(protos, r).data[:, 0].astype(np.float64)
        samples = [o * span + lo for o in out]
        prototype = proto.data[0, 0].astype(np.float64) * span + lo
        return Correction(samples, u.data[0, 0].astype(np.float64), prototype, g.mean.data[0].copy())

    def fuse_mean(self, x):
        """Output with r fixed at the prior mean (deterministic path), original units."""
        xn, lo, span = normalize_slice(x)
        xt = self._tensor(xn)
        u, _ = self.hunet(xt)
        g = self.prior(xt)
        out = self.fuse(xt * u, g.mean).data[0, 0].astype(np.float64)
        return out * span + lo
