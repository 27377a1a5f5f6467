"""Compression-time inference engines over discrete latents.

The main routine anneals stochastically rounded proxies toward integers
(temperature-scheduled Gumbel-softmax rounding); the four alternatives kept
for ablation are plain continuous optimization (MAP), straight-through
rounding (STE), uniform-noise injection, and the deterministic-average
version of the annealed rounding.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import numcore as nc
from . import objectives as obj
from .model import Model, VariationalState, frozen
from .numcore import Adam, Tensor


class Method(str, Enum):
    SGA = "sga"
    MAP = "map"
    STE = "ste"
    UNIFORM_NOISE = "uniform"
    DET_ANNEAL = "det_anneal"


# Learning rates follow the inference recipe: 5e-3 everywhere except the
# straight-through estimator, which only tolerates 1e-4.
DEFAULT_LR = {
    Method.SGA: 0.005,
    Method.MAP: 0.005,
    Method.STE: 0.0001,
    Method.UNIFORM_NOISE: 0.005,
    Method.DET_ANNEAL: 0.005,
}

DIVERGENCE_FACTOR = 10.0


class DivergenceError(RuntimeError):
    """True R-D loss exploded past the divergence guard."""


@dataclass(frozen=True)
class TemperatureSchedule:
    """Hold at tau0 for `hold` steps, then decay exponentially at rate c."""

    tau0: float = 0.5
    decay: float = 0.001
    hold: int = 700

    def __call__(self, t: int) -> float:
        return float(min(self.tau0, self.tau0 * np.exp(-self.decay * (t - self.hold))))


@dataclass
class RoundingDistribution:
    p_down: np.ndarray
    p_up: np.ndarray


def round_probs(mu, tau: float) -> RoundingDistribution:
    """Tempered two-point rounding distribution per coordinate.

    Ceiling is defined as floor+1 everywhere; a fractional part of exactly 0
    puts probability one on the integer itself.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    mu = np.asarray(mu, dtype=np.float64)
    frac = mu - np.floor(mu)
    a = np.arctanh(np.minimum(frac, 1.0 - 1e-9))
    b = np.arctanh(np.minimum(1.0 - frac, 1.0 - 1e-9))
    from scipy.special import expit

    p_up = expit((a - b) / tau)
    p_up = np.where(frac == 0.0, 0.0, p_up)
    return RoundingDistribution(p_down=1.0 - p_up, p_up=p_up)


def hard_rounding_sample(mu, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Integer sample from the tempered rounding distribution (Gumbel argmax)."""
    mu = np.asarray(mu, dtype=np.float64)
    frac = mu - np.floor(mu)
    l_down = -np.arctanh(np.minimum(frac, 1.0 - 1e-9)) / tau
    l_up = -np.arctanh(np.minimum(1.0 - frac, 1.0 - 1e-9)) / tau
    g = rng.gumbel(size=(2,) + mu.shape)
    up = (l_up + g[1]) > (l_down + g[0])
    return np.floor(mu) + up


@dataclass
class InferenceConfig:
    method: Method = Method.SGA
    steps: int = 2000
    learning_rate: float | None = None  # method default when None
    schedule: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    early_stopping: bool | None = None  # defaults on for MAP and STE
    seed: int = 0
    n_samples: int = 1
    eval_every: int = 10

    def __post_init__(self):
        if isinstance(self.method, str):
            self.method = Method(self.method)
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.method]
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.early_stopping is None:
            self.early_stopping = self.method in (Method.MAP, Method.STE)


@dataclass
class TraceRow:
    step: int
    tau: float
    relaxed_loss: float
    true_rd: float
    rate_bits: float
    distortion: float

    @property
    def gap(self) -> float:
        return self.true_rd - self.relaxed_loss


def trace_to_csv(trace: list[TraceRow], path=None) -> str:
    """Columns: step,tau,relaxed_loss,true_rd,rate_bits,distortion."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["step", "tau", "relaxed_loss", "true_rd", "rate_bits", "distortion"])
    for r in trace:
        w.writerow([r.step, f"{r.tau:.10g}", f"{r.relaxed_loss:.10g}",
                    f"{r.true_rd:.10g}", f"{r.rate_bits:.10g}", f"{r.distortion:.10g}"])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def discretization_gap(trace: list[TraceRow]) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-step series of true minus relaxed loss, plus the final gap."""
    if not trace:
        raise ValueError("empty trace")
    steps = np.array([r.step for r in trace])
    gaps = np.array([r.gap for r in trace])
    return steps, gaps, float(gaps[-1])


# ---------------------------------------------------------------------------
# generic annealing engine over a discrete problem
# ---------------------------------------------------------------------------

class ModelProblem:
    """R-D objective of a trained model for one image."""

    def __init__(self, m: Model, x: np.ndarray, init: VariationalState):
        self.m = m
        self.x = np.asarray(x, dtype=np.float64)
        self.init = init

    def init_values(self) -> list[np.ndarray]:
        return [self.init.mu_y.copy(), self.init.mu_z.copy()]

    def loss_at(self, values: list[Tensor]) -> Tensor:
        y, z = values
        return obj.rd_at(self.m, self.x, y, z)

    def true_loss(self, ints: list[np.ndarray]) -> tuple[float, float, float]:
        r = obj.true_rd(self.m, ints[0], ints[1], self.x)
        return r.total, r.rate_bits, r.distortion


class ScalarProblem:
    """Integer minimization of a user-supplied differentiable scalar function.

    fn must act elementwise, which lets Monte-Carlo samples run as one
    vectorized evaluation.
    """

    elementwise = True

    def __init__(self, fn, x0: float):
        self.fn = fn
        self.x0 = float(x0)

    def init_values(self) -> list[np.ndarray]:
        return [np.array(self.x0)]

    def loss_at(self, values: list[Tensor]) -> Tensor:
        return self.fn(values[0])

    def true_loss(self, ints: list[np.ndarray]) -> tuple[float, float, float]:
        v = float(self.fn(Tensor(np.asarray(ints[0], dtype=np.float64))).item())
        return v, 0.0, v


def _relax(v: Tensor, method: Method, tau: float, rng: np.random.Generator) -> Tensor:
    if method is Method.SGA:
        return obj.relaxed_rounding(v, tau, rng)
    if method is Method.DET_ANNEAL:
        return obj.deterministic_rounding(v, tau)
    if method is Method.MAP:
        return v
    if method is Method.STE:
        return nc.round_ste(v)
    if method is Method.UNIFORM_NOISE:
        return nc.add(v, rng.uniform(-0.5, 0.5, size=v.shape))
    raise ValueError(method)


def optimize_discrete(problem, cfg: InferenceConfig) -> tuple[list[np.ndarray], list[TraceRow]]:
    """Run cfg.steps Adam steps on the chosen relaxation, then hard-round.

    Returns integer latents and a trace of (step, tau, relaxed loss, true
    loss) sampled every cfg.eval_every steps.  Non-STE methods abort if the
    true loss exceeds 10x its initial value; STE divergence is recorded in
    the trace and cut short instead, since it is an expected failure mode.
    """
    rng = np.random.default_rng(cfg.seed)
    vars_ = [Tensor(v, requires_grad=True) for v in problem.init_values()]
    opt = Adam(cfg.learning_rate)

    def rounded() -> list[np.ndarray]:
        return [np.rint(v.data) for v in vars_]

    init_total, init_rate, init_dist = problem.true_loss(rounded())
    trace: list[TraceRow] = []
    best_total, best_ints = init_total, rounded()
    guard = DIVERGENCE_FACTOR * max(abs(init_total), 1.0)

    n_mc = cfg.n_samples
    vector_mc = (n_mc > 1 and getattr(problem, "elementwise", False)
                 and cfg.method is Method.SGA)

    def mc_loss(tau: float) -> Tensor:
        if vector_mc:
            rel = [obj.relaxed_rounding(v, tau, rng, sample_shape=(n_mc,)) for v in vars_]
            return nc.mean_(problem.loss_at(rel))
        acc = None
        for _ in range(n_mc):
            term = problem.loss_at([_relax(v, cfg.method, tau, rng) for v in vars_])
            acc = term if acc is None else nc.add(acc, term)
        return nc.mul(acc, 1.0 / n_mc) if n_mc > 1 else acc

    for t in range(cfg.steps):
        tau = cfg.schedule(t)
        loss = mc_loss(tau)
        loss_val = loss.item()

        record = (t % cfg.eval_every == 0) or (t == cfg.steps - 1)
        if record:
            total, rate, dist = problem.true_loss(rounded())
            trace.append(TraceRow(t, tau, loss_val, total, rate, dist))
            if cfg.early_stopping and total < best_total:
                best_total, best_ints = total, rounded()
            if total > guard:
                if cfg.method is Method.STE:
                    break  # expected STE blow-up: keep trace, stop refining
                raise DivergenceError(
                    f"{cfg.method.value}: true R-D loss {total:.4g} exceeded "
                    f"10x initial {init_total:.4g} at step {t}")

        loss.backward()
        new = opt.update([v.data for v in vars_], [v.grad for v in vars_])
        for v, a in zip(vars_, new):
            v.data = a
            v.grad = None

    final_ints = rounded()
    final_total, final_rate, final_dist = problem.true_loss(final_ints)
    if cfg.early_stopping and best_total < final_total:
        final_ints = best_ints
        final_total, final_rate, final_dist = problem.true_loss(final_ints)
    # final multi-sample estimate of the relaxed loss for gap reporting
    tau_f = cfg.schedule(cfg.steps)
    if cfg.method in (Method.SGA, Method.DET_ANNEAL, Method.UNIFORM_NOISE):
        vals = []
        for _ in range(10):
            vals.append(problem.loss_at(
                [_relax(v, cfg.method, tau_f, rng) for v in vars_]).item())
        relaxed_final = float(np.mean(vals))
    else:
        relaxed_final = problem.loss_at([_relax(v, cfg.method, tau_f, rng) for v in vars_]).item()
    trace.append(TraceRow(cfg.steps, tau_f, relaxed_final, final_total, final_rate, final_dist))
    return final_ints, trace


# ---------------------------------------------------------------------------
# model-facing entry points
# ---------------------------------------------------------------------------

def sga_optimize(m: Model, x: np.ndarray, init: VariationalState | None,
                 cfg: InferenceConfig) -> tuple[np.ndarray, np.ndarray, list[TraceRow]]:
    if cfg.method is not Method.SGA:
        raise ValueError("cfg.method must be SGA")
    return _run_model(m, x, init, cfg)


def ablation_optimize(m: Model, x: np.ndarray, init: VariationalState | None,
                      cfg: InferenceConfig) -> tuple[np.ndarray, np.ndarray, list[TraceRow]]:
    if cfg.method is Method.SGA:
        raise ValueError("use sga_optimize for the SGA method")
    return _run_model(m, x, init, cfg)


def _run_model(m: Model, x: np.ndarray, init: VariationalState | None,
               cfg: InferenceConfig) -> tuple[np.ndarray, np.ndarray, list[TraceRow]]:
    x = np.asarray(x, dtype=np.float64)
    if init is None:
        init = m.infer(x)
    with frozen(m):
        ints, trace = optimize_discrete(ModelProblem(m, x, init), cfg)
    return ints[0], ints[1], trace


def sga_minimize_scalar(fn, x0: float, cfg: InferenceConfig | None = None,
                        seed: int = 0) -> tuple[int, list[TraceRow]]:
    """Anneal a scalar integer program min_k fn(k); fn maps Tensor -> Tensor.

    Defaults to 10 rounding samples per step: one-sample gradients are too
    heavy-tailed to carry the iterate across intermediate integers on these
    long-travel scalar demos.
    """
    if cfg is None:
        cfg = InferenceConfig(method=Method.SGA, seed=seed, n_samples=10)
    ints, trace = optimize_discrete(ScalarProblem(fn, x0), cfg)
    return int(ints[0]), trace
