"""Acceptance suite: one test per release criterion.

Each test prints a `CRITERION <n> PASS` line (run with -s to stream them).
The heavy fixtures (trained checkpoints, per-method optimization runs) come
from conftest and are disk-cached under .cache/acceptance.
"""

import time

import numpy as np
import pytest

from sgacodec import bench
from sgacodec import coder as cd
from sgacodec import data as dat
from sgacodec import numcore as nc
from sgacodec import objectives as obj
from sgacodec import relaxations as rel

from conftest import run_method
from gradcheck import check_gradients, op_case_registry


def note(n: int, msg: str) -> None:
    print(f"\nCRITERION {n:2d} PASS: {msg}")


# -- 1. gradient correctness -------------------------------------------------

def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    names = [c[0] for c in op_case_registry(rng, small=True)()]
    worst = {}
    for _ in range(100):
        for name, build, inputs in op_case_registry(rng, small=True)():
            err = check_gradients(build, inputs, rtol=1e-4)
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"gradient sweep took {elapsed:.1f}s"
    assert set(worst) == set(names)
    note(1, f"{len(names)} ops x 100 randomized cases, max rel err "
            f"{max(worst.values()):.2e} < 1e-4, {elapsed:.1f}s")


# -- 2. tempered rounding probabilities ---------------------------------------

def test_criterion_02_rounding_probability_oracle():
    for tau in (0.05, 0.2, 0.5, 2.0):
        rp = rel.round_probs(2.5, tau)
        assert (rp.p_down, rp.p_up) == (0.5, 0.5)
        rp = rel.round_probs(3.0, tau)
        assert (rp.p_down, rp.p_up) == (1.0, 0.0)
    tau = 0.2
    num = np.exp(-np.arctanh(0.25) / tau)
    den = num + np.exp(-np.arctanh(0.75) / tau)
    assert rel.round_probs(2.75, tau).p_up == pytest.approx(num / den, abs=1e-12)
    note(2, "half-integer symmetry, integer certainty, and the 2.75/tau=0.2 "
            "two-term evaluation all exact")


# -- 3. scalar annealing oracle -----------------------------------------------

def test_criterion_03_scalar_annealing_converges():
    t0 = time.perf_counter()
    ok = 0
    for x0 in (2.3, -1.7, 0.6):
        for seed in range(10):
            k, trace = rel.sga_minimize_scalar(lambda t: nc.square(t), x0, seed=seed)
            assert k == 0, f"x0={x0} seed={seed} ended at {k}"
            assert trace[-1].true_rd == 0.0
            ok += 1
    note(3, f"{ok}/30 runs reached 0 with final objective 0 under the default "
            f"schedule ({time.perf_counter() - t0:.0f}s)")


# -- 4. discretization-gap behaviour ------------------------------------------

def test_criterion_04_discretization_gap(model_low, corpus):
    res = {m: run_method(model_low, corpus, m) for m in
           (rel.Method.SGA, rel.Method.MAP, rel.Method.STE,
            rel.Method.UNIFORM_NOISE, rel.Method.DET_ANNEAL)}
    sga = res[rel.Method.SGA]
    rel_gap = np.mean([abs(r.final_gap) for r in sga]) / np.mean([r.final_rd for r in sga])
    assert rel_gap < 0.005, f"annealed-rounding relative gap {rel_gap:.4%}"
    uni_gap = np.mean([r.final_gap for r in res[rel.Method.UNIFORM_NOISE]])
    assert uni_gap < 0.0, f"uniform-noise mean gap {uni_gap:+.2f} not negative"
    means = {m.value: float(np.mean([r.final_rd for r in rows]))
             for m, rows in res.items()}
    best = min(means, key=means.get)
    assert best == "sga", f"method means: {means}"
    note(4, f"relative gap {rel_gap:.3%} < 0.5%; uniform-noise gap {uni_gap:+.1f} "
            f"(negative); mean true R-D by method {means} -> sga lowest")


# -- 5. iterative inference improves over direct rounding ----------------------

def test_criterion_05_iterative_improvement(model_low, model_high, corpus):
    for m in (model_low, model_high):
        sga = run_method(m, corpus, rel.Method.SGA)
        uni = run_method(m, corpus, rel.Method.UNIFORM_NOISE)
        improved = np.mean([r.final_rd < r.base_rd for r in sga])
        assert improved >= 0.90, f"lam={m.cfg.lam}: improved on {improved:.0%}"
        # never worse than the amortized rounding beyond sampling slack
        for r in sga:
            assert r.final_rd <= r.base_rd * 1.001
        sga_mean = np.mean([r.final_rd for r in sga])
        uni_mean = np.mean([r.final_rd for r in uni])
        base_mean = np.mean([r.base_rd for r in sga])
        assert uni_mean < base_mean, "uniform-noise refinement should improve"
        assert sga_mean < uni_mean, "annealed rounding should beat noise injection"
    note(5, "annealed rounding improved >=90% of images at every trained lambda "
            "and beat uniform-noise refinement on mean")


# -- 6. coder exactness ---------------------------------------------------------

def test_criterion_06_coder_exactness(model_low, corpus):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    qm = cd.quantize_gaussian(0.0, 1.0)
    syms = np.clip(np.round(rng.normal(0, 1, size=100_000)).astype(int),
                   qm.k_min, qm.k_max)
    coder = cd.rans_encode(syms, [qm] * len(syms))
    measured = coder.num_bits() - 32
    ideal = cd.table_bits(syms, [qm] * len(syms))
    assert measured <= 1.01 * ideal + 32
    back = cd.rans_decode(cd.RansCoder.from_bytes(coder.to_bytes()), [qm] * len(syms))
    assert np.array_equal(back, syms)

    gaps = []
    for img in corpus[:5]:
        stream, st = cd.encode_standard(model_low, img)
        est_bytes = st.rate_estimate_bits / 8.0
        assert abs(st.payload_bytes - est_bytes) <= 0.005 * est_bytes + 8
        gaps.append(st.payload_bytes - est_bytes)
        x_rec, _ = cd.decode_standard(model_low, stream)
        assert x_rec.shape == img.shape
    note(6, f"1e5-symbol round trip exact; measured rate {measured} vs entropy "
            f"{ideal:.0f} bits; file-size gaps {[f'{g:+.1f}B' for g in gaps]} "
            f"within 0.5%+8B ({time.perf_counter() - t0:.0f}s)")


# -- 7. bits-back protocol -------------------------------------------------------

def test_criterion_07_bitsback_roundtrip_and_ledger(model_bb, corpus):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    cfg = rel.InferenceConfig(method=rel.Method.SGA, steps=cd.JOINT_STEPS, seed=0)
    sizes = [64, 512, 4096]
    trials = 0
    worst_ledger = 0.0
    for i, img in enumerate(corpus[:2]):
        x4 = img[None]
        y_int = cd.joint_sga_bbvi(model_bb, x4, model_bb.infer(x4),
                                  rel.InferenceConfig(method=rel.Method.SGA,
                                                      steps=cfg.steps, seed=i))
        for t in range(10):
            nbits = sizes[(i * 10 + t) % len(sizes)]
            xi = bytes(rng.integers(0, 256, size=nbits // 8, dtype=np.uint8))
            stream, st = cd.bitsback_encode(model_bb, img, xi, y_int=y_int)
            x_rec, xi_back, info = cd.bitsback_decode(model_bb, stream)
            assert xi_back == xi, f"side info mismatch at trial {trials}"
            x_enc = np.clip(model_bb.decode(
                np.asarray(info["y"], dtype=np.float64)).data[0, :, :32, :32], 0, 1)
            np.testing.assert_array_equal(x_rec, x_enc)
            n_symbols = info["y"].size + 2 * info["z"].size
            ledger = st.bits_z + st.bits_y - st.bits_back
            assert abs(st.net_bits - ledger) < n_symbols
            worst_ledger = max(worst_ledger, abs(st.net_bits - ledger))
            trials += 1
    elapsed = time.perf_counter() - t0
    assert trials == 20
    assert elapsed < 600.0, f"bits-back trials took {elapsed:.0f}s"
    note(7, f"20/20 round trips byte-identical (64/512/4096-bit side info), "
            f"worst ledger slack {worst_ledger:.1f} bits < 1 bit/symbol "
            f"({elapsed:.0f}s)")


# -- 8. decoder-side inference replay determinism --------------------------------

def test_criterion_08_replay_determinism(model_bb):
    t0 = time.perf_counter()
    patches = dat.random_field_patches(50, size=16, seed=31)
    checked = 0
    for img in patches:
        y = np.rint(model_bb.infer(img[None]).mu_y)
        mu1, var1 = cd.reproducible_bbvi(model_bb, y)
        mu2, var2 = cd.reproducible_bbvi(model_bb, y)
        assert np.array_equal(mu1, mu2) and np.array_equal(var1, var2)
        checked += 1
    note(8, f"{checked}/50 latents: double invocation bit-identical "
            f"({time.perf_counter() - t0:.0f}s); encode/decode-path equality "
            f"is enforced by the replay check in every criterion-7 trial")


# -- 9. bits-back without optimization hurts -------------------------------------

def test_criterion_09_unoptimized_bitsback_hurts(model_bb, model_high, corpus):
    rng = np.random.default_rng(23)
    nets, stds = [], []
    for img in corpus:
        x4 = img[None]
        y = np.rint(model_bb.infer(x4).mu_y)
        mu0, lv0 = model_bb.f_h(nc.Tensor(y))
        q_models = cd.q_symbol_models(mu0.data, np.exp(lv0.data))
        xi = rng.integers(0, 256, size=64, dtype=np.uint8).tobytes()
        coder = cd.RansCoder(xi, allow_zero_fill=True)
        z_flat = cd.rans_decode(coder, q_models)
        z_int = z_flat.reshape(mu0.data.shape)
        bits_z = cd.table_bits(z_flat, cd.z_symbol_models(model_bb, z_int.shape))
        bits_y = cd.table_bits(cd._flatten_latents(y),
                               cd.y_symbol_models(model_bb, z_int))
        bits_back = cd.table_bits(z_flat, q_models)
        nets.append(bits_z + bits_y - bits_back)
        _, st = cd.encode_standard(model_high, img)
        stds.append(st.rate_estimate_bits)
    assert np.mean(nets) > np.mean(stds), (np.mean(nets), np.mean(stds))
    note(9, f"unoptimized bits-back mean net rate {np.mean(nets):.0f} bits > "
            f"standard-path mean rate {np.mean(stds):.0f} bits")


# -- 10. training sanity and BD-rate units ----------------------------------------

def test_criterion_10_training_sanity(nelbo_history):
    first, last = nelbo_history[0]["nelbo"], nelbo_history[-1]["nelbo"]
    assert last < 0.8 * first, f"NELBO {first:.1f} -> {last:.1f}"

    psnr = np.array([28.0, 30.0, 32.0, 34.0, 36.0])
    bpp = np.array([0.2, 0.35, 0.6, 1.0, 1.7])
    assert bench.bd_rate(bpp, psnr, bpp, psnr) == pytest.approx(0.0, abs=1e-6)
    assert bench.bd_rate(bpp, psnr, 0.9 * bpp, psnr) == pytest.approx(-10.0, abs=1e-6)
    note(10, f"NELBO fell {100 * (1 - last / first):.1f}% (>= 20%) over 5000 "
             f"steps at lam=0.01; BD-rate unit cases exact to 1e-6")
