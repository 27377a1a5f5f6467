"""Shared fixtures for the acceptance suite.

Trained checkpoints and per-method optimization results are cached under
.cache/acceptance (keyed by every input that affects them) so repeated runs
don't retrain; delete the directory for a fully fresh run.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for gradcheck helpers

from sgacodec import data as dat
from sgacodec import objectives as obj
from sgacodec import relaxations as rel
from sgacodec import training
from sgacodec.model import Model, ModelConfig

CACHE = Path(__file__).resolve().parent.parent / ".cache" / "acceptance"

TRAIN_STEPS = 6000
TRAIN_SEED = 11
CORPUS_SEED = 777
N_IMAGES = 20


def _cached_model(lam: float, bitsback: bool, steps: int = TRAIN_STEPS) -> Model:
    CACHE.mkdir(parents=True, exist_ok=True)
    tag = f"lam{lam:g}_{'bb' if bitsback else 'std'}_s{steps}_seed{TRAIN_SEED}_v{dat.CORPUS_VERSION}"
    path = CACHE / f"{tag}.ckpt"
    if path.exists():
        return Model.load(path)
    m, _ = training.train_model(ModelConfig(lam=lam, bitsback=bitsback),
                                steps=steps, seed=TRAIN_SEED)
    m.save(path)
    return m


@pytest.fixture(scope="session")
def model_low():
    """Standard checkpoint in the rate-dominated regime."""
    return _cached_model(50.0, bitsback=False)


@pytest.fixture(scope="session")
def model_high():
    """Standard checkpoint at a higher-rate operating point."""
    return _cached_model(300.0, bitsback=False)


@pytest.fixture(scope="session")
def model_bb():
    """Bits-back-mode checkpoint."""
    return _cached_model(300.0, bitsback=True)


@pytest.fixture(scope="session")
def corpus():
    return dat.random_field_patches(N_IMAGES, seed=CORPUS_SEED)


@dataclass
class MethodResult:
    image: int
    base_rd: float      # direct rounding of the amortized prediction
    final_rd: float
    final_relaxed: float
    final_gap: float


def run_method(m: Model, corpus: np.ndarray, method: rel.Method,
               seed_base: int = 0) -> list[MethodResult]:
    """Per-image optimization results for one (model, method), disk-cached."""
    CACHE.mkdir(parents=True, exist_ok=True)
    key = f"runs_{m.content_hash():016x}_{method.value}_n{len(corpus)}_s{seed_base}"
    path = CACHE / f"{key}.json"
    if path.exists():
        return [MethodResult(**row) for row in json.loads(path.read_text())]
    out: list[MethodResult] = []
    for i, img in enumerate(corpus):
        x4 = img[None]
        state = m.infer(x4)
        base = obj.true_rd(m, np.rint(state.mu_y), np.rint(state.mu_z), x4).total
        cfg = rel.InferenceConfig(method=method, seed=seed_base + i)
        if method is rel.Method.SGA:
            _, _, trace = rel.sga_optimize(m, x4, state, cfg)
        else:
            _, _, trace = rel.ablation_optimize(m, x4, state, cfg)
        out.append(MethodResult(image=i, base_rd=base, final_rd=trace[-1].true_rd,
                                final_relaxed=trace[-1].relaxed_loss,
                                final_gap=trace[-1].gap))
    path.write_text(json.dumps([r.__dict__ for r in out]))
    return out


@pytest.fixture(scope="session")
def nelbo_history():
    """Training-sanity run at the spec's lambda, with the logged NELBO path."""
    CACHE.mkdir(parents=True, exist_ok=True)
    path = CACHE / f"nelbo_lam0.01_s5000_seed{TRAIN_SEED}.json"
    if path.exists():
        return json.loads(path.read_text())
    _, history = training.train_model(ModelConfig(lam=0.01), steps=5000,
                                      seed=TRAIN_SEED)
    data = [{"step": h.step, "nelbo": h.nelbo} for h in history]
    path.write_text(json.dumps(data))
    return data
