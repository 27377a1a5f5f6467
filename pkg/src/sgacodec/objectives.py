"""Rate-distortion losses.

All rates are in bits (log base 2), distortion is squared error on the
[0,1] pixel scale summed over pixels, and lambda weighs distortion against
total bits.  Four losses: the true discrete R-D objective, the uniform-noise
relaxation, the annealed stochastic-rounding objective, and the bits-back
variant with a Gaussian entropy bonus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

from . import numcore as nc
from .model import MASS_FLOOR, Model
from .numcore import Tensor

LOG2E = 1.0 / np.log(2.0)
_SQRT1_2 = 1.0 / np.sqrt(2.0)
# differential entropy of a unit Gaussian in bits: 0.5*log2(2*pi*e)
_GAUSS_ENTROPY_CONST = 0.5 * np.log2(2.0 * np.pi * np.e)


@dataclass
class RDLoss:
    rate_bits: float
    distortion: float
    lam: float

    @property
    def total(self) -> float:
        return self.rate_bits + self.lam * self.distortion


def lambda_from_noise_variance(var_x: float) -> float:
    """Trade-off weight implied by a Gaussian likelihood variance."""
    return 1.0 / (2.0 * var_x * np.log(2.0))


def noise_variance_from_lambda(lam: float) -> float:
    return 1.0 / (2.0 * lam * np.log(2.0))


# ---------------------------------------------------------------------------
# Gaussian bin masses
# ---------------------------------------------------------------------------

def gaussian_mass(y: Tensor, loc: Tensor, scale: Tensor) -> Tensor:
    """Differentiable CDF difference over the unit bin at y, floored."""
    inv = nc.div(_SQRT1_2, scale)
    hi = nc.erf(nc.mul(nc.sub(nc.add(y, 0.5), loc), inv))
    lo = nc.erf(nc.mul(nc.sub(nc.sub(y, 0.5), loc), inv))
    return nc.clamp(nc.mul(nc.sub(hi, lo), 0.5), MASS_FLOOR, 1.0)


def gaussian_mass_np(y: np.ndarray, loc: np.ndarray, scale: np.ndarray) -> np.ndarray:
    hi = _sp.ndtr((y + 0.5 - loc) / scale)
    lo = _sp.ndtr((y - 0.5 - loc) / scale)
    return np.maximum(hi - lo, MASS_FLOOR)


def rate_bits_tensor(mass: Tensor) -> Tensor:
    """-sum log2(mass)."""
    return nc.neg(nc.mul(nc.sum_(nc.log(mass)), LOG2E))


# ---------------------------------------------------------------------------
# true discrete objective
# ---------------------------------------------------------------------------

def rate_z_bits(m: Model, z_int: np.ndarray) -> float:
    return -m.hyperprior_logmass(z_int)


def rate_y_bits(m: Model, y_int: np.ndarray, z_int: np.ndarray) -> float:
    prior = m.hyper_decode(np.asarray(z_int, dtype=np.float64))
    mass = gaussian_mass_np(np.asarray(y_int, dtype=np.float64), prior.loc.data, prior.scale.data)
    return float(-np.sum(np.log2(mass)))


def true_rd(m: Model, y_int: np.ndarray, z_int: np.ndarray, x: np.ndarray) -> RDLoss:
    """Eq.-2-style two-part rate plus weighted distortion at integer latents."""
    y_int = np.asarray(y_int)
    z_int = np.asarray(z_int)
    if not (np.all(y_int == np.round(y_int)) and np.all(z_int == np.round(z_int))):
        raise ValueError("true_rd requires integer-valued latents")
    rate = rate_z_bits(m, z_int) + rate_y_bits(m, y_int, z_int)
    x_rec = m.decode(np.asarray(y_int, dtype=np.float64)).data
    dist = float(np.sum((np.asarray(x, dtype=np.float64) - x_rec) ** 2))
    return RDLoss(rate_bits=rate, distortion=dist, lam=m.cfg.lam)


# ---------------------------------------------------------------------------
# relaxed objectives (all return a scalar Tensor)
# ---------------------------------------------------------------------------

def _t(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))


def rd_at(m: Model, x: np.ndarray, y: Tensor, z: Tensor) -> Tensor:
    """L_lambda evaluated at (possibly non-integer) latent values.

    Rates use the discretized bin-mass functions at continuous arguments; at
    integers this agrees exactly with true_rd.
    """
    prior = m.hyper_decode(z)
    r_y = rate_bits_tensor(gaussian_mass(y, prior.loc, prior.scale))
    r_z = rate_bits_tensor(m.density.mass(z))
    dist = m.likelihood_distortion(x, m.decode(y))
    return nc.add(nc.add(r_y, r_z), nc.mul(dist, m.cfg.lam))


def nelbo_uniform(m: Model, x: np.ndarray, mu_y, mu_z,
                  rng: np.random.Generator | None, zero_noise: bool = False) -> Tensor:
    """One-sample uniform-noise relaxation of the R-D objective."""
    mu_y, mu_z = _t(mu_y), _t(mu_z)
    if zero_noise:
        return rd_at(m, x, mu_y, mu_z)
    u_y = rng.uniform(-0.5, 0.5, size=mu_y.shape)
    u_z = rng.uniform(-0.5, 0.5, size=mu_z.shape)
    return rd_at(m, x, nc.add(mu_y, u_y), nc.add(mu_z, u_z))


def relaxed_rounding(mu: Tensor, tau: float, rng: np.random.Generator,
                     sample_shape: tuple[int, ...] = ()) -> Tensor:
    """Stochastically rounded value via the tempered two-point distribution.

    Sampled with the Gumbel-softmax trick at the same temperature, so the
    result floor(mu) + r_up stays differentiable w.r.t. mu.  A nonempty
    sample_shape prepends independent sample axes (vectorized Monte Carlo).
    """
    lo = nc.Tensor(np.floor(mu.data))
    frac = nc.clamp(nc.sub(mu, lo), 0.0, 1.0 - 1e-9)
    co_frac = nc.clamp(nc.sub(1.0, frac), 0.0, 1.0 - 1e-9)
    logit_down = nc.mul(nc.atanh(frac), -1.0 / tau)
    logit_up = nc.mul(nc.atanh(co_frac), -1.0 / tau)
    g = rng.gumbel(size=(2,) + sample_shape + mu.shape)
    delta = nc.add(nc.sub(logit_up, logit_down), g[1] - g[0])
    r_up = nc.sigmoid(nc.mul(delta, 1.0 / tau))
    return nc.add(lo, r_up)


def deterministic_rounding(mu: Tensor, tau: float) -> Tensor:
    """Expectation of the tempered rounding pushed inside the objective."""
    lo = nc.Tensor(np.floor(mu.data))
    frac = nc.clamp(nc.sub(mu, lo), 0.0, 1.0 - 1e-9)
    co_frac = nc.clamp(nc.sub(1.0, frac), 0.0, 1.0 - 1e-9)
    # p_up = sigmoid((psi(frac) - psi(1-frac)) / tau) with psi = atanh
    p_up = nc.sigmoid(nc.mul(nc.sub(nc.atanh(frac), nc.atanh(co_frac)), 1.0 / tau))
    return nc.add(lo, p_up)


def sga_objective(m: Model, x: np.ndarray, mu_y, mu_z, tau: float,
                  rng: np.random.Generator, n_samples: int = 1) -> Tensor:
    """Monte-Carlo estimate of the annealed stochastic-rounding objective."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    mu_y, mu_z = _t(mu_y), _t(mu_z)
    acc = None
    for _ in range(n_samples):
        y = relaxed_rounding(mu_y, tau, rng)
        z = relaxed_rounding(mu_z, tau, rng)
        term = rd_at(m, x, y, z)
        acc = term if acc is None else nc.add(acc, term)
    return nc.mul(acc, 1.0 / n_samples) if n_samples > 1 else acc


def gaussian_entropy_bits(logvar: Tensor) -> Tensor:
    """Entropy of a diagonal Gaussian in bits: sum of 0.5*log2(2*pi*e*var)."""
    half_log2var = nc.mul(nc.sum_(logvar), 0.5 * LOG2E)
    n = logvar.data.size
    return nc.add(half_log2var, n * _GAUSS_ENTROPY_CONST)


def nelbo_bitsback(m: Model, x: np.ndarray, mu_y, mu_z, logvar_z,
                   rng: np.random.Generator, y_value: Tensor | None = None) -> Tensor:
    """Bits-back NELBO: net rate (rates minus posterior entropy) + distortion.

    The hyperprior enters through its continuous (unconvolved) log density.
    y_value, when given, is an already-relaxed latent (annealed-rounding
    path used at compression time); otherwise uniform noise is added to mu_y
    as during training.
    """
    mu_y, mu_z, logvar_z = _t(mu_y), _t(mu_z), _t(logvar_z)
    if y_value is None:
        y_value = nc.add(mu_y, rng.uniform(-0.5, 0.5, size=mu_y.shape))
    eps = rng.standard_normal(mu_z.shape)
    z = nc.add(mu_z, nc.mul(nc.exp(nc.mul(logvar_z, 0.5)), eps))

    r_z = nc.neg(nc.mul(nc.sum_(m.hyperprior_logpdf(z)), LOG2E))
    prior = m.hyper_decode(z)
    r_y = rate_bits_tensor(gaussian_mass(y_value, prior.loc, prior.scale))
    dist = m.likelihood_distortion(x, m.decode(y_value))
    ent = gaussian_entropy_bits(logvar_z)
    return nc.sub(nc.add(nc.add(r_y, r_z), nc.mul(dist, m.cfg.lam)), ent)


def bbvi_rate_objective(m: Model, y_int: np.ndarray, mu_z: Tensor, logvar_z: Tensor,
                        eps: np.ndarray) -> Tensor:
    """Net hyperlatent rate for fixed integer latents (no distortion term).

    This is the quantity refined by the reproducible decoder-side inference:
    -log2 p(z) - log2 p(y|z) - H[q(z)] at a fixed reparameterization draw.
    """
    z = nc.add(mu_z, nc.mul(nc.exp(nc.mul(logvar_z, 0.5)), eps))
    r_z = nc.neg(nc.mul(nc.sum_(m.hyperprior_logpdf(z)), LOG2E))
    prior = m.hyper_decode(z)
    y = Tensor(np.asarray(y_int, dtype=np.float64))
    r_y = rate_bits_tensor(gaussian_mass(y, prior.loc, prior.scale))
    return nc.sub(nc.add(r_z, r_y), gaussian_entropy_bits(logvar_z))


def training_nelbo(m: Model, x_batch: np.ndarray, rng: np.random.Generator) -> Tensor:
    """Model-training loss: graph reaches the network weights."""
    x = Tensor(np.asarray(x_batch, dtype=np.float64))
    m.check_image(x.data)
    mu_y = m.f(x)
    mu_z, logvar = m.f_h(mu_y)
    if m.cfg.bitsback:
        return nelbo_bitsback(m, x.data, mu_y, mu_z, logvar, rng)
    return nelbo_uniform(m, x.data, mu_y, mu_z, rng)
