"""Model training on the synthetic corpus (or user-supplied patches)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as dat
from . import numcore as nc
from . import objectives as obj
from .model import Model, ModelConfig
from .numcore import Adam

TRAIN_LR = 1e-3
TRAIN_BATCH = 8


@dataclass
class TrainLog:
    step: int
    nelbo: float


class TrainingAborted(RuntimeError):
    """Loss went non-finite; the last finite-loss parameters were kept."""


def train_model(cfg: ModelConfig, steps: int, seed: int = 0,
                batch_size: int = TRAIN_BATCH, lr: float = TRAIN_LR,
                corpus: np.ndarray | None = None, corpus_size: int = 256,
                log_every: int = 250, verbose: bool = False
                ) -> tuple[Model, list[TrainLog]]:
    """Minimize the relaxed objective (or its bits-back variant) by Adam.

    Returns the trained model and the per-interval loss history.  If the
    loss ever goes non-finite the previous parameters are restored and
    TrainingAborted is raised with the partial history attached.
    """
    m = Model.create(cfg, seed=seed)
    if corpus is None:
        corpus = dat.random_field_patches(corpus_size, channels=cfg.in_channels, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF17]))
    opt = Adam(lr)
    names = [n for n, _ in m.param_list()]
    history: list[TrainLog] = []
    snapshot = {n: m.params[n].data.copy() for n in names}

    for t in range(steps):
        idx = rng.integers(0, len(corpus), size=batch_size)
        batch = corpus[idx]
        try:
            loss = obj.training_nelbo(m, batch, rng)
            loss.backward()
        except nc.NonFiniteError as e:
            for n in names:
                m.params[n].data = snapshot[n]
                m.params[n].grad = None
            err = TrainingAborted(f"non-finite loss at step {t}: {e}")
            err.history = history
            err.model = m
            raise err
        vals = opt.update([m.params[n].data for n in names],
                          [m.params[n].grad for n in names])
        for n, v in zip(names, vals):
            m.params[n].data = v
            m.params[n].grad = None
        if t % log_every == 0 or t == steps - 1:
            history.append(TrainLog(step=t, nelbo=loss.item()))
            snapshot = {n: m.params[n].data.copy() for n in names}
            if verbose:
                print(f"step {t:6d}  nelbo {loss.item():.3f}")
    return m, history


def eval_nelbo(m: Model, corpus: np.ndarray, seed: int = 1234, batches: int = 8,
               batch_size: int = TRAIN_BATCH) -> float:
    """Monte-Carlo NELBO estimate on held-out batches (fresh noise draws)."""
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(batches):
        idx = rng.integers(0, len(corpus), size=batch_size)
        vals.append(obj.training_nelbo(m, corpus[idx], rng).item())
    return float(np.mean(vals))
