"""Two-level hierarchical latent-variable codec model.

Inference nets f (image -> latents) and f_h (latents -> hyperlatents),
generative nets g (latents -> image) and g_h (hyperlatents -> conditional
prior parameters), plus a per-channel factorized density over hyperlatents
built from a monotone sigmoid-mixture network.

In bits-back mode f_h outputs twice the hyperlatent channels (mean and log
variance of a Gaussian variational posterior) and the factorized density is
used unconvolved as a continuous prior.
"""

from __future__ import annotations

import hashlib
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy import special as _sp

from . import numcore as nc
from .numcore import Tensor

# Smallest probability mass ever handed to a rate term or the entropy coder.
MASS_FLOOR = 2.0 ** -32
SCALE_FLOOR = 1e-6
LOGVAR_MIN, LOGVAR_MAX = -14.0, 3.0

CHECKPOINT_MAGIC = b"SGCK"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid model configuration or incompatible input."""


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    latent_channels: int = 8      # C_y
    hyper_channels: int = 4       # C_z
    enc_hidden: int = 32
    hyper_hidden: int = 16
    kernel: int = 5
    stride: int = 2
    density_components: int = 8
    lam: float = 300.0
    bitsback: bool = False

    @property
    def downsample(self) -> int:
        # two stride-2 stages to y, two more to z
        return self.stride ** 4

    @property
    def y_downsample(self) -> int:
        return self.stride ** 2


@dataclass
class PriorParams:
    """Location/scale of the conditional Gaussian prior over latents."""

    loc: Tensor
    scale: Tensor


@dataclass
class VariationalState:
    """Per-image local variational parameters, refined at compression time."""

    mu_y: np.ndarray
    mu_z: np.ndarray
    var_z: np.ndarray | None = None


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    k, ci, cy, cz = cfg.kernel, cfg.in_channels, cfg.latent_channels, cfg.hyper_channels
    eh, hh, kk = cfg.enc_hidden, cfg.hyper_hidden, cfg.kernel ** 2
    fh_out = 2 * cz if cfg.bitsback else cz
    K = cfg.density_components
    arrs: dict[str, np.ndarray] = {
        # encoder f
        "enc_w1": _he(rng, (eh, ci, k, k), ci * kk), "enc_b1": np.zeros(eh),
        "enc_w2": _he(rng, (cy, eh, k, k), eh * kk), "enc_b2": np.zeros(cy),
        # hyper-encoder f_h
        "henc_w1": _he(rng, (hh, cy, k, k), cy * kk), "henc_b1": np.zeros(hh),
        "henc_w2": _he(rng, (fh_out, hh, k, k), hh * kk), "henc_b2": np.zeros(fh_out),
        # decoder g (transposed-conv weights are (in, out, kh, kw))
        "dec_w1": _he(rng, (cy, eh, k, k), cy * kk), "dec_b1": np.zeros(eh),
        "dec_w2": _he(rng, (eh, ci, k, k), eh * kk), "dec_b2": np.zeros(ci),
        # hyper-decoder g_h
        "hdec_w1": _he(rng, (cz, hh, k, k), cz * kk), "hdec_b1": np.zeros(hh),
        "hdec_w2": _he(rng, (hh, 2 * cy, k, k), hh * kk), "hdec_b2": np.zeros(2 * cy),
        # factorized hyperprior density, per channel mixture of K sigmoids
        "dens_logscale": np.zeros((cz, K)),
        "dens_loc": np.tile(np.linspace(-8.0, 8.0, K), (cz, 1))
        + rng.normal(0.0, 0.05, size=(cz, K)),
        "dens_logit": np.zeros((cz, K)),
    }
    return {name: Tensor(a, requires_grad=True) for name, a in arrs.items()}


class FactorizedDensity:
    """Per-channel strictly monotone CDF: softmax-weighted sigmoid mixture.

    Three stages (exp-reparameterized positive scales, sigmoid saturations,
    exp-normalized nonnegative mixing weights) keep c strictly increasing
    with exact limits c(-inf)=0, c(+inf)=1, and give a closed-form density
    so training never needs second derivatives.
    """

    def __init__(self, params: dict[str, Tensor]):
        self.logscale = params["dens_logscale"]
        self.loc = params["dens_loc"]
        self.logit = params["dens_logit"]

    # -- differentiable path -------------------------------------------
    def _weights(self) -> Tensor:
        e = nc.exp(self.logit)
        return nc.div(e, nc.sum_(e, axis=1, keepdims=True))

    def _expand(self, t: Tensor) -> Tensor:
        c, K = t.shape
        return nc.reshape(t, (1, c, 1, 1, K))

    def cdf(self, z: Tensor) -> Tensor:
        n, c, h, w = z.shape
        z5 = nc.reshape(z, (n, c, h, w, 1))
        s = nc.exp(self._expand(self.logscale))
        t = nc.mul(nc.sub(z5, self._expand(self.loc)), s)
        return nc.sum_(nc.mul(self._expand(self._weights()), nc.sigmoid(t)), axis=4)

    def pdf(self, z: Tensor) -> Tensor:
        n, c, h, w = z.shape
        z5 = nc.reshape(z, (n, c, h, w, 1))
        s = nc.exp(self._expand(self.logscale))
        t = nc.mul(nc.sub(z5, self._expand(self.loc)), s)
        sig = nc.sigmoid(t)
        dsig = nc.mul(sig, nc.sub(1.0, sig))
        return nc.sum_(nc.mul(self._expand(self._weights()), nc.mul(s, dsig)), axis=4)

    def mass(self, z: Tensor) -> Tensor:
        """CDF difference over a unit bin centered at z, floored."""
        hi = self.cdf(nc.add(z, 0.5))
        lo = self.cdf(nc.sub(z, 0.5))
        return nc.clamp(nc.sub(hi, lo), MASS_FLOOR, 1.0)

    # -- plain float path (coder tables, true R-D evaluation) -----------
    def _np_params(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        e = np.exp(self.logit.data)
        w = e / e.sum(axis=1, keepdims=True)
        return np.exp(self.logscale.data), self.loc.data, w

    def cdf_np(self, z: np.ndarray, channel: int) -> np.ndarray:
        s, m, w = self._np_params()
        t = (np.asarray(z, dtype=np.float64)[..., None] - m[channel]) * s[channel]
        return (_sp.expit(t) * w[channel]).sum(axis=-1)

    def pdf_np(self, z: np.ndarray, channel: int) -> np.ndarray:
        s, m, w = self._np_params()
        t = (np.asarray(z, dtype=np.float64)[..., None] - m[channel]) * s[channel]
        sig = _sp.expit(t)
        return (w[channel] * s[channel] * sig * (1.0 - sig)).sum(axis=-1)

    def mass_np(self, z: np.ndarray, channel: int) -> np.ndarray:
        m = self.cdf_np(np.asarray(z) + 0.5, channel) - self.cdf_np(np.asarray(z) - 0.5, channel)
        return np.maximum(m, MASS_FLOOR)


class Model:
    """Parameter container plus the four network forward maps."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.density = FactorizedDensity(params)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed)))

    def param_list(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())

    # -- network forward maps (Tensor in, Tensor out) -------------------
    def f(self, x) -> Tensor:
        cfg = self.cfg
        h = nc.leaky_relu(nc.conv2d(x, self.params["enc_w1"], self.params["enc_b1"],
                                    stride=cfg.stride, pad=cfg.kernel // 2))
        return nc.conv2d(h, self.params["enc_w2"], self.params["enc_b2"],
                         stride=cfg.stride, pad=cfg.kernel // 2)

    def f_h(self, y) -> tuple[Tensor, Tensor | None]:
        """Hyper-inference; returns (mu_z, log_var_z or None)."""
        cfg = self.cfg
        h = nc.leaky_relu(nc.conv2d(y, self.params["henc_w1"], self.params["henc_b1"],
                                    stride=cfg.stride, pad=cfg.kernel // 2))
        out = nc.conv2d(h, self.params["henc_w2"], self.params["henc_b2"],
                        stride=cfg.stride, pad=cfg.kernel // 2)
        if not cfg.bitsback:
            return out, None
        cz = cfg.hyper_channels
        mu = nc.narrow(out, 1, 0, cz)
        logvar = nc.clamp(nc.narrow(out, 1, cz, cz), LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    def decode(self, y) -> Tensor:
        """Latents -> image mean; unclamped (clamp to [0,1] only for file IO)."""
        cfg = self.cfg
        y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))
        if y.data.ndim != 4 or y.data.shape[1] != cfg.latent_channels:
            raise ConfigError(f"decode expects (N,{cfg.latent_channels},h,w), got {y.data.shape}")
        h = nc.leaky_relu(nc.transposed_conv2d(y, self.params["dec_w1"], self.params["dec_b1"],
                                               stride=cfg.stride, pad=cfg.kernel // 2))
        return nc.transposed_conv2d(h, self.params["dec_w2"], self.params["dec_b2"],
                                    stride=cfg.stride, pad=cfg.kernel // 2)

    def hyper_decode(self, z) -> PriorParams:
        cfg = self.cfg
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
        if z.data.ndim != 4 or z.data.shape[1] != cfg.hyper_channels:
            raise ConfigError(f"hyper_decode expects (N,{cfg.hyper_channels},h,w), got {z.data.shape}")
        h = nc.leaky_relu(nc.transposed_conv2d(z, self.params["hdec_w1"], self.params["hdec_b1"],
                                               stride=cfg.stride, pad=cfg.kernel // 2))
        out = nc.transposed_conv2d(h, self.params["hdec_w2"], self.params["hdec_b2"],
                                   stride=cfg.stride, pad=cfg.kernel // 2)
        cy = cfg.latent_channels
        loc = nc.narrow(out, 1, 0, cy)
        scale = nc.add(nc.softplus(nc.narrow(out, 1, cy, cy)), SCALE_FLOOR)
        return PriorParams(loc=loc, scale=scale)

    def check_image(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"expected (N,{self.cfg.in_channels},H,W) image, got {x.shape}")
        if x.shape[2] % self.cfg.downsample or x.shape[3] % self.cfg.downsample:
            raise ConfigError(
                f"image spatial dims {x.shape[2:]} must be divisible by {self.cfg.downsample}")

    def infer(self, x: np.ndarray) -> VariationalState:
        """Amortized init of the local variational parameters for one batch."""
        x = np.asarray(x, dtype=np.float64)
        self.check_image(x)
        mu_y = self.f(Tensor(x))
        mu_z, logvar = self.f_h(mu_y)
        var = np.exp(logvar.data) if logvar is not None else None
        return VariationalState(mu_y=mu_y.data.copy(), mu_z=mu_z.data.copy(), var_z=var)

    # -- hyperprior rate helpers ----------------------------------------
    def hyperprior_logmass(self, z_int: np.ndarray) -> float:
        """Total log2 probability mass of an integer hyperlatent tensor."""
        z = np.asarray(z_int, dtype=np.float64)
        total = 0.0
        for c in range(self.cfg.hyper_channels):
            total += np.sum(np.log2(self.density.mass_np(z[:, c], c)))
        return float(total)

    def hyperprior_logpdf(self, z) -> Tensor:
        """Elementwise natural-log density of the unconvolved hyperprior."""
        return nc.log(nc.clamp(self.density.pdf(z), MASS_FLOOR, np.inf))

    def likelihood_distortion(self, x, x_rec) -> Tensor:
        xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        rt = x_rec if isinstance(x_rec, Tensor) else Tensor(np.asarray(x_rec, dtype=np.float64))
        if xt.shape != rt.shape:
            raise nc.ShapeError(f"distortion shape mismatch {xt.shape} vs {rt.shape}")
        return nc.sum_(nc.square(nc.sub(xt, rt)))

    # -- checkpoint container -------------------------------------------
    def state_bytes(self) -> bytes:
        chunks = []
        for name, t in self.param_list():
            nb = name.encode()
            chunks.append(struct.pack("<B", len(nb)) + nb)
            chunks.append(struct.pack("<B", t.data.ndim))
            chunks.append(struct.pack(f"<{t.data.ndim}H", *t.data.shape))
            chunks.append(t.data.astype("<f8").tobytes())
        return b"".join(chunks)

    def content_hash(self) -> int:
        """64-bit identifier for bitstream/checkpoint pairing."""
        h = hashlib.blake2b(self.state_bytes(), digest_size=8)
        return int.from_bytes(h.digest(), "little")

    def save(self, path) -> None:
        cfg = self.cfg
        payload = self.state_bytes()
        head = CHECKPOINT_MAGIC + struct.pack(
            "<BBd8B H",
            CHECKPOINT_VERSION,
            1 if cfg.bitsback else 0,
            cfg.lam,
            cfg.in_channels, cfg.latent_channels, cfg.hyper_channels,
            cfg.enc_hidden, cfg.hyper_hidden, cfg.kernel, cfg.stride,
            cfg.density_components,
            len(self.params),
        )
        with open(path, "wb") as fh:
            fh.write(head)
            fh.write(struct.pack("<Q", self.content_hash()))
            fh.write(payload)

    @classmethod
    def load(cls, path) -> "Model":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != CHECKPOINT_MAGIC:
            raise ConfigError(f"not a checkpoint file: {path}")
        off = 4
        version, bb, lam, ci, cy, cz, eh, hh, k, s, K, n = struct.unpack_from("<BBd8B H", raw, off)
        off += struct.calcsize("<BBd8B H")
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        (stored_hash,) = struct.unpack_from("<Q", raw, off)
        off += 8
        cfg = ModelConfig(in_channels=ci, latent_channels=cy, hyper_channels=cz,
                          enc_hidden=eh, hyper_hidden=hh, kernel=k, stride=s,
                          density_components=K, lam=lam, bitsback=bool(bb))
        params: dict[str, Tensor] = {}
        for _ in range(n):
            (nl,) = struct.unpack_from("<B", raw, off); off += 1
            name = raw[off : off + nl].decode(); off += nl
            (nd,) = struct.unpack_from("<B", raw, off); off += 1
            shape = struct.unpack_from(f"<{nd}H", raw, off); off += 2 * nd
            cnt = int(np.prod(shape)) if nd else 1
            data = np.frombuffer(raw, dtype="<f8", count=cnt, offset=off).reshape(shape)
            off += 8 * cnt
            params[name] = Tensor(data.copy(), requires_grad=True)
        m = cls(cfg, params)
        if m.content_hash() != stored_hash:
            raise ConfigError("checkpoint content hash mismatch (corrupt file)")
        return m


@contextmanager
def frozen(m: "Model"):
    """Temporarily exclude model weights from gradient computation.

    Compression-time loops optimize only local variational parameters; the
    weight-gradient work in backward is pure overhead there.
    """
    flags = {k: t.requires_grad for k, t in m.params.items()}
    for t in m.params.values():
        t.requires_grad = False
    try:
        yield m
    finally:
        for k, t in m.params.items():
            t.requires_grad = flags[k]


def pad_to_factor(img: np.ndarray, factor: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Edge-pad (C,H,W) image up to a spatial multiple of factor."""
    c, h, w = img.shape
    ph = (-h) % factor
    pw = (-w) % factor
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return img, (h, w)
