"""Bit-exact entropy coding and the two compression protocols.

A 64-bit-state, 16-bit-precision, byte-renormalizing rANS stack coder; 16-bit
quantized entropy models for Gaussian and factorized-density sources; the
standard two-part container (hyperlatents then latents); and the lossy
bits-back protocol whose decoder-side inference is replayed deterministically
from a fixed protocol seed.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import special as _sp

from . import numcore as nc
from . import objectives as obj
from . import relaxations as rel
from .model import Model, VariationalState, frozen, pad_to_factor
from .numcore import Adam, Tensor

RANS_PRECISION = 16
RANS_TOTAL = 1 << RANS_PRECISION
RANS_L = 1 << 31                       # state stays in [L, 256L)
_RANS_MASK = RANS_TOTAL - 1
_STATE_BYTES = 8

GLOBAL_SUPPORT = (-255, 256)           # hard window for any coded symbol
SIGMA_SPAN = 16                        # support half-width in multiples of sigma

MAGIC = b"SGAC"
STREAM_VERSION = 1
MODE_STANDARD = 0
MODE_BITSBACK = 1
_HEADER = struct.Struct("<4sBBHHQBI")  # magic, version, mode, w, h, hash, lam_idx, payload_len
_SIDE_LEN = struct.Struct("<I")

# Decoder-replayable inference protocol constants (part of the stream version
# contract: both ends must run the identical refinement).
PROTOCOL_SEED = 0x53474143
BBVI_STEPS = 2000
BBVI_LR = 0.003
JOINT_STEPS = 2000
JOINT_LR = 0.005

LAMBDA_GRID = (0.001, 0.0025, 0.005, 0.01, 0.02, 0.04, 0.08)


class ProtocolError(RuntimeError):
    """Bitstream cannot be (safely) decoded: bad container, wrong model,
    truncated payload, or replay divergence."""


class OutOfSupportError(ValueError):
    """Symbol outside its quantized model's support."""


def lam_index(lam: float) -> int:
    for i, v in enumerate(LAMBDA_GRID):
        if abs(lam - v) <= 1e-12 + 1e-9 * v:
            return i
    return 255


# ---------------------------------------------------------------------------
# rANS stack coder
# ---------------------------------------------------------------------------

class RansCoder:
    """LIFO range-ANS coder over byte stacks.

    decode is the exact inverse of encode, and encode of decode: decoding
    symbols from arbitrary bytes (the bits-back direction) consumes them in
    a way that re-encoding restores bit-exactly.  When `allow_zero_fill` is
    set, running out of stack bytes during decode pulls zero bytes instead
    of failing (the padded-side-information convention).
    """

    def __init__(self, data: bytes = b"", allow_zero_fill: bool = False):
        self.state = RANS_L
        self.stack: deque[int] = deque(data)
        self.allow_zero_fill = allow_zero_fill
        self.zero_filled = 0

    @classmethod
    def from_bytes(cls, blob: bytes, allow_zero_fill: bool = False) -> "RansCoder":
        if len(blob) < _STATE_BYTES:
            raise ProtocolError("truncated coder blob")
        c = cls(blob[_STATE_BYTES:], allow_zero_fill=allow_zero_fill)
        c.state = int.from_bytes(blob[:_STATE_BYTES], "little")
        return c

    def to_bytes(self) -> bytes:
        return self.state.to_bytes(_STATE_BYTES, "little") + bytes(self.stack)

    def num_bits(self) -> int:
        return 8 * len(self.stack) + self.state.bit_length()

    def encode(self, start: int, freq: int) -> None:
        if freq <= 0:
            raise OutOfSupportError("zero-frequency symbol cannot be encoded")
        x_max = ((RANS_L >> RANS_PRECISION) << 8) * freq
        x = self.state
        while x >= x_max:
            self.stack.appendleft(x & 0xFF)
            x >>= 8
        self.state = ((x // freq) << RANS_PRECISION) + (x % freq) + start

    def decode_cf(self) -> int:
        return self.state & _RANS_MASK

    def decode_advance(self, start: int, freq: int) -> None:
        x = freq * (self.state >> RANS_PRECISION) + (self.state & _RANS_MASK) - start
        while x < RANS_L:
            if self.stack:
                x = (x << 8) | self.stack.popleft()
            elif self.allow_zero_fill:
                x <<= 8
                self.zero_filled += 1
            else:
                raise ProtocolError("truncated byte stream while decoding")
        self.state = x


# ---------------------------------------------------------------------------
# quantized entropy models
# ---------------------------------------------------------------------------

@dataclass
class QuantizedModel:
    """Cumulative frequency table over integer support [k_min, k_max]."""

    k_min: int
    freqs: np.ndarray          # int64, every entry >= 1, sums to RANS_TOTAL
    cum: np.ndarray = field(init=False)

    def __post_init__(self):
        self.cum = np.concatenate([[0], np.cumsum(self.freqs)]).astype(np.int64)
        if self.cum[-1] != RANS_TOTAL:
            raise ValueError("frequencies must sum to the rANS total")
        if np.any(self.freqs < 1):
            raise ValueError("every in-support symbol needs frequency >= 1")

    @property
    def k_max(self) -> int:
        return self.k_min + len(self.freqs) - 1

    def start_freq(self, symbol: int) -> tuple[int, int]:
        idx = int(symbol) - self.k_min
        if idx < 0 or idx >= len(self.freqs):
            raise OutOfSupportError(f"symbol {symbol} outside [{self.k_min}, {self.k_max}]")
        return int(self.cum[idx]), int(self.freqs[idx])

    def symbol_from_cf(self, cf: int) -> tuple[int, int, int]:
        idx = int(np.searchsorted(self.cum, cf, side="right")) - 1
        return self.k_min + idx, int(self.cum[idx]), int(self.freqs[idx])

    def bits(self, symbol: int) -> float:
        _, f = self.start_freq(symbol)
        return float(RANS_PRECISION - np.log2(f))

    def mode(self) -> int:
        return self.k_min + int(np.argmax(self.freqs))


def _masses_to_freqs(mass: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding to integers summing to RANS_TOTAL, min 1."""
    mass = np.maximum(np.asarray(mass, dtype=np.float64), 0.0)
    total = mass.sum()
    if total <= 0:
        mass = np.ones_like(mass)
        total = mass.sum()
    scaled = mass / total * RANS_TOTAL
    f = np.maximum(np.floor(scaled).astype(np.int64), 1)
    diff = RANS_TOTAL - int(f.sum())
    if diff > 0:
        order = np.argsort(-(scaled - np.floor(scaled)), kind="stable")
        i = 0
        while diff > 0:
            f[order[i % len(f)]] += 1
            diff -= 1
            i += 1
    elif diff < 0:
        order = np.argsort(-f, kind="stable")
        i = 0
        while diff < 0:
            j = order[i % len(f)]
            if f[j] > 1:
                f[j] -= 1
                diff += 1
            i += 1
    return f


def quantize_gaussian(loc: float, scale: float) -> QuantizedModel:
    """16-bit table for a Gaussian source, tail mass folded into the edges.

    Support spans SIGMA_SPAN sigmas either side of loc, clamped to the
    global window.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    lo_w, hi_w = GLOBAL_SUPPORT
    center = int(np.clip(np.rint(loc), lo_w, hi_w))
    half = int(np.ceil(SIGMA_SPAN * scale))
    k_min = max(lo_w, center - half)
    k_max = min(hi_w, center + half)
    ks = np.arange(k_min, k_max + 1, dtype=np.float64)
    upper = _sp.ndtr((ks + 0.5 - loc) / scale)
    lower = _sp.ndtr((ks - 0.5 - loc) / scale)
    mass = upper - lower
    mass[0] = upper[0]            # fold left tail
    mass[-1] = 1.0 - lower[-1]    # fold right tail
    return QuantizedModel(k_min, _masses_to_freqs(mass))


def quantize_density_channel(m: Model, channel: int) -> QuantizedModel:
    """Table for one factorized-density channel over the global window."""
    lo_w, hi_w = GLOBAL_SUPPORT
    ks = np.arange(lo_w, hi_w + 1, dtype=np.float64)
    mass = m.density.cdf_np(ks + 0.5, channel) - m.density.cdf_np(ks - 0.5, channel)
    mass[0] = m.density.cdf_np(np.array(lo_w + 0.5), channel)
    mass[-1] = 1.0 - m.density.cdf_np(np.array(hi_w - 0.5), channel)
    return QuantizedModel(lo_w, _masses_to_freqs(mass))


def rans_encode(symbols, models, coder: RansCoder | None = None) -> RansCoder:
    """Push a symbol sequence (reversed, so decode pops it in order)."""
    symbols = list(symbols)
    models = list(models)
    if len(symbols) != len(models):
        raise ValueError("one model per symbol required")
    c = coder if coder is not None else RansCoder()
    for s, qm in zip(reversed(symbols), reversed(models)):
        start, freq = qm.start_freq(s)
        c.encode(start, freq)
    return c


def rans_decode(coder: RansCoder, models) -> np.ndarray:
    out = np.empty(len(models), dtype=np.int64)
    for i, qm in enumerate(models):
        sym, start, freq = qm.symbol_from_cf(coder.decode_cf())
        coder.decode_advance(start, freq)
        out[i] = sym
    return out


# ---------------------------------------------------------------------------
# per-tensor model construction
# ---------------------------------------------------------------------------

def hyper_tables(m: Model) -> list[QuantizedModel]:
    return [quantize_density_channel(m, c) for c in range(m.cfg.hyper_channels)]


def z_symbol_models(m: Model, z_shape: tuple[int, ...]) -> list[QuantizedModel]:
    """One shared table per channel, repeated in raster order."""
    per_channel = hyper_tables(m)
    _, cz, h, w = z_shape
    out = []
    for c in range(cz):
        out.extend([per_channel[c]] * (h * w))
    return out


def y_symbol_models(m: Model, z_int: np.ndarray) -> list[QuantizedModel]:
    """Conditional Gaussian tables from the hyper-decoder, raster per channel."""
    prior = m.hyper_decode(np.asarray(z_int, dtype=np.float64))
    loc = prior.loc.data.reshape(-1)
    scale = prior.scale.data.reshape(-1)
    return [quantize_gaussian(float(l), float(s)) for l, s in zip(loc, scale)]


def _flatten_latents(a: np.ndarray) -> np.ndarray:
    # (1,C,H,W) -> raster order per channel, channels ascending
    return np.asarray(a, dtype=np.int64).reshape(-1)


def table_bits(symbols: np.ndarray, models) -> float:
    return float(sum(qm.bits(int(s)) for s, qm in zip(symbols, models)))


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

def pack_header(mode: int, width: int, height: int, model_hash: int,
                lam_idx: int, payload_len: int) -> bytes:
    return _HEADER.pack(MAGIC, STREAM_VERSION, mode, width, height,
                        model_hash, lam_idx, payload_len)


def unpack_header(blob: bytes) -> tuple[int, int, int, int, int, int, int]:
    if len(blob) < _HEADER.size:
        raise ProtocolError("stream shorter than header")
    magic, version, mode, w, h, mh, li, plen = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ProtocolError("bad magic; not a codec stream")
    if version != STREAM_VERSION:
        raise ProtocolError(f"unsupported stream version {version}")
    return mode, w, h, mh, li, plen, _HEADER.size


def _grid_shapes(m: Model, width: int, height: int) -> tuple[tuple, tuple, tuple]:
    f = m.cfg.downsample
    hp, wp = height + (-height) % f, width + (-width) % f
    yf = m.cfg.y_downsample
    y_shape = (1, m.cfg.latent_channels, hp // yf, wp // yf)
    z_shape = (1, m.cfg.hyper_channels, hp // f, wp // f)
    return (hp, wp), y_shape, z_shape


# ---------------------------------------------------------------------------
# standard path
# ---------------------------------------------------------------------------

@dataclass
class StandardStats:
    rate_estimate_bits: float
    payload_bytes: int
    stream_bytes: int
    bpp: float
    psnr: float
    distortion: float


def find_latents(m: Model, x4: np.ndarray,
                 cfg: rel.InferenceConfig | None) -> tuple[np.ndarray, np.ndarray, list]:
    """Direct rounding of the amortized prediction, or iterative refinement."""
    state = m.infer(x4)
    if cfg is None:
        return np.rint(state.mu_y), np.rint(state.mu_z), []
    if cfg.method is rel.Method.SGA:
        return rel.sga_optimize(m, x4, state, cfg)
    return rel.ablation_optimize(m, x4, state, cfg)


def _psnr01(x: np.ndarray, y: np.ndarray) -> float:
    mse = float(np.mean((x - np.clip(y, 0.0, 1.0)) ** 2))
    if mse == 0:
        return 100.0
    return float(min(100.0, 10.0 * np.log10(1.0 / mse)))


def encode_standard(m: Model, img: np.ndarray,
                    cfg: rel.InferenceConfig | None = None,
                    latents: tuple[np.ndarray, np.ndarray] | None = None
                    ) -> tuple[bytes, StandardStats]:
    """Compress one (C,H,W) image in [0,1] to a standard-mode stream."""
    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    padded, _ = pad_to_factor(img, m.cfg.downsample)
    x4 = padded[None]
    if latents is not None:
        y_int, z_int = np.asarray(latents[0]), np.asarray(latents[1])
    else:
        y_int, z_int, _ = find_latents(m, x4, cfg)

    zs = _flatten_latents(z_int)
    ys = _flatten_latents(y_int)
    z_models = z_symbol_models(m, z_int.shape)
    y_models = y_symbol_models(m, z_int)

    coder = RansCoder()
    rans_encode(ys, y_models, coder)   # pushed first, popped last
    rans_encode(zs, z_models, coder)   # popped first: prior tables need z
    payload = coder.to_bytes()

    rd = obj.true_rd(m, y_int, z_int, x4)
    x_rec = m.decode(np.asarray(y_int, dtype=np.float64)).data[0, :, :h, :w]
    stream = pack_header(MODE_STANDARD, w, h, m.content_hash(),
                         lam_index(m.cfg.lam), len(payload)) + payload
    stats = StandardStats(
        rate_estimate_bits=rd.rate_bits,
        payload_bytes=len(payload),
        stream_bytes=len(stream),
        bpp=8.0 * len(payload) / (h * w),
        psnr=_psnr01(img, x_rec),
        distortion=rd.distortion,
    )
    return stream, stats


def decode_standard(m: Model, stream: bytes) -> tuple[np.ndarray, dict]:
    mode, w, h, mh, _li, plen, off = unpack_header(stream)
    if mode != MODE_STANDARD:
        raise ProtocolError("not a standard-mode stream")
    if mh != m.content_hash():
        raise ProtocolError("model hash mismatch: wrong checkpoint for this stream")
    payload = stream[off : off + plen]
    if len(payload) != plen:
        raise ProtocolError("truncated payload")
    _, y_shape, z_shape = _grid_shapes(m, w, h)

    coder = RansCoder.from_bytes(payload)
    z_int = rans_decode(coder, z_symbol_models(m, z_shape)).reshape(z_shape)
    y_int = rans_decode(coder, y_symbol_models(m, z_int)).reshape(y_shape)
    x_rec = m.decode(np.asarray(y_int, dtype=np.float64)).data[0]
    x_out = np.clip(x_rec[:, :h, :w], 0.0, 1.0)
    return x_out, {"y": y_int, "z": z_int, "bpp": 8.0 * plen / (h * w)}


# ---------------------------------------------------------------------------
# bits-back path (encode / decode / reproducible decoder-side inference)
# ---------------------------------------------------------------------------

def reproducible_bbvi(m: Model, y_int: np.ndarray, steps: int = BBVI_STEPS,
                      lr: float = BBVI_LR, seed: int = PROTOCOL_SEED
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Refit (mu_z, var_z) from the discrete latents alone, bit-reproducibly.

    Initialization comes from the hyper-inference net applied to y_int; the
    refinement minimizes the net hyperlatent rate with Gaussian draws from a
    generator seeded by the protocol constant.  Output depends only on
    (y_int, seed, checkpoint); any non-finite intermediate aborts.
    """
    if not m.cfg.bitsback:
        raise ProtocolError("bits-back requires a bits-back-mode checkpoint")
    y = np.asarray(y_int, dtype=np.float64)
    rng = np.random.default_rng(seed)
    with frozen(m):
        mu0, logvar0 = m.f_h(Tensor(y))
        mu = mu0.data.copy()
        logvar = logvar0.data.copy()
        opt = Adam(lr)
        for _ in range(steps):
            mu_t = Tensor(mu, requires_grad=True)
            lv_t = Tensor(logvar, requires_grad=True)
            eps = rng.standard_normal(mu.shape)
            loss = obj.bbvi_rate_objective(m, y, mu_t, lv_t, eps)
            loss.backward()
            mu, logvar = opt.update([mu, logvar], [mu_t.grad, lv_t.grad])
    return mu, np.exp(logvar)


def q_symbol_models(mu_z: np.ndarray, var_z: np.ndarray) -> list[QuantizedModel]:
    """Variational posterior tables on the same grid/window rules as the prior."""
    mu = mu_z.reshape(-1)
    sd = np.sqrt(var_z).reshape(-1)
    return [quantize_gaussian(float(l), float(s)) for l, s in zip(mu, sd)]


def joint_sga_bbvi(m: Model, x4: np.ndarray, init: VariationalState,
                   cfg: rel.InferenceConfig) -> np.ndarray:
    """Line-2 optimization: alternate one annealed-rounding step on mu_y with
    one variational step on (mu_z, log var_z) per iteration."""
    rng = np.random.default_rng(cfg.seed)
    mu_y = init.mu_y.copy()
    mu_z = init.mu_z.copy()
    logvar = np.log(np.maximum(init.var_z, 1e-12))
    opt_y = Adam(cfg.learning_rate)
    opt_z = Adam(cfg.learning_rate)
    with frozen(m):
        for t in range(cfg.steps):
            tau = cfg.schedule(t)
            # substep A: full objective, update mu_y only
            y_leaf = Tensor(mu_y, requires_grad=True)
            y_rel = obj.relaxed_rounding(y_leaf, tau, rng)
            loss = obj.nelbo_bitsback(m, x4, y_leaf, Tensor(mu_z), Tensor(logvar),
                                      rng, y_value=y_rel)
            loss.backward()
            mu_y = opt_y.update([mu_y], [y_leaf.grad])[0]
            # substep B: rate-only objective, update the posterior parameters
            mu_t = Tensor(mu_z, requires_grad=True)
            lv_t = Tensor(logvar, requires_grad=True)
            eps = rng.standard_normal(mu_z.shape)
            z_loss = obj.bbvi_rate_objective(m, y_rel.data, mu_t, lv_t, eps)
            z_loss.backward()
            mu_z, logvar = opt_z.update([mu_z, logvar], [mu_t.grad, lv_t.grad])
    return np.rint(mu_y)


@dataclass
class BitsBackStats:
    payload_bytes: int
    side_info_bits: int
    consumed_side_bits: float
    bits_z: float              # -log2 P(z) under the quantized table
    bits_y: float              # -log2 P(y|z)
    bits_back: float           # -log2 Q(z|mu,var)
    psnr: float

    @property
    def net_bits(self) -> float:
        return 8.0 * self.payload_bytes - self.side_info_bits


def bitsback_encode(m: Model, img: np.ndarray, side_info: bytes,
                    cfg: rel.InferenceConfig | None = None,
                    y_int: np.ndarray | None = None) -> tuple[bytes, BitsBackStats]:
    """Compress an image plus arbitrary side information.

    Side information shorter than what the hyperlatent decode consumes is
    zero-padded (its true length is recorded in the header); longer side
    information rides along verbatim in the payload.  Passing y_int skips
    the joint optimization (used for ablations and repeated-side-info runs;
    everything the decoder replays is unaffected).
    """
    if not m.cfg.bitsback:
        raise ProtocolError("bits-back encoding requires a bits-back-mode checkpoint")
    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    padded, _ = pad_to_factor(img, m.cfg.downsample)
    x4 = padded[None]

    if y_int is None:
        if cfg is None:
            cfg = rel.InferenceConfig(method=rel.Method.SGA, steps=JOINT_STEPS,
                                      learning_rate=JOINT_LR)
        init = m.infer(x4)
        y_int = joint_sga_bbvi(m, x4, init, cfg)
    y_int = np.asarray(y_int)

    mu_z, var_z = reproducible_bbvi(m, y_int)
    q_models = q_symbol_models(mu_z, var_z)

    coder = RansCoder(side_info, allow_zero_fill=True)
    bits_before = coder.num_bits()
    if len(side_info) == 0:
        z_flat = np.array([qm.mode() for qm in q_models], dtype=np.int64)
        consumed = 0.0
    else:
        z_flat = rans_decode(coder, q_models)
        consumed = bits_before - coder.num_bits()
    z_int = z_flat.reshape(mu_z.shape)

    z_models = z_symbol_models(m, z_int.shape)
    y_models = y_symbol_models(m, z_int)
    ys = _flatten_latents(y_int)
    rans_encode(ys, y_models, coder)
    rans_encode(z_flat, z_models, coder)
    payload = coder.to_bytes()

    x_rec = m.decode(np.asarray(y_int, dtype=np.float64)).data[0, :, :h, :w]
    stream = (pack_header(MODE_BITSBACK, w, h, m.content_hash(),
                          lam_index(m.cfg.lam), len(payload))
              + _SIDE_LEN.pack(len(side_info)) + payload)
    stats = BitsBackStats(
        payload_bytes=len(payload),
        side_info_bits=8 * len(side_info),
        consumed_side_bits=float(consumed),
        bits_z=table_bits(z_flat, z_models),
        bits_y=table_bits(ys, y_models),
        bits_back=table_bits(z_flat, q_models),
        psnr=_psnr01(img, x_rec),
    )
    return stream, stats


def bitsback_decode(m: Model, stream: bytes) -> tuple[np.ndarray, bytes, dict]:
    """Recover the reconstruction and the embedded side information."""
    if not m.cfg.bitsback:
        raise ProtocolError("bits-back decoding requires a bits-back-mode checkpoint")
    mode, w, h, mh, _li, plen, off = unpack_header(stream)
    if mode != MODE_BITSBACK:
        raise ProtocolError("not a bits-back stream")
    if mh != m.content_hash():
        raise ProtocolError("model hash mismatch: wrong checkpoint for this stream")
    (side_len,) = _SIDE_LEN.unpack_from(stream, off)
    off += _SIDE_LEN.size
    payload = stream[off : off + plen]
    if len(payload) != plen:
        raise ProtocolError("truncated payload")
    _, y_shape, z_shape = _grid_shapes(m, w, h)

    coder = RansCoder.from_bytes(payload)
    z_flat = rans_decode(coder, z_symbol_models(m, z_shape))
    z_int = z_flat.reshape(z_shape)
    y_int = rans_decode(coder, y_symbol_models(m, z_int)).reshape(y_shape)
    x_rec = m.decode(np.asarray(y_int, dtype=np.float64)).data[0]
    x_out = np.clip(x_rec[:, :h, :w], 0.0, 1.0)

    if side_len == 0:
        return x_out, b"", {"y": y_int, "z": z_int}

    mu_z, var_z = reproducible_bbvi(m, y_int)
    rans_encode(z_flat, q_symbol_models(mu_z, var_z), coder)
    if coder.state != RANS_L:
        raise ProtocolError("replay divergence: decoder-side inference did not "
                            "restore the coder state")
    recovered = bytes(coder.stack)
    if len(recovered) < side_len:
        recovered = recovered + b"\x00" * (side_len - len(recovered))
    return x_out, recovered[:side_len], {"y": y_int, "z": z_int}
