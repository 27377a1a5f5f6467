"""Command-line interface: train, compress, decompress, ablate, report.

A flat key=value config file can seed any flag's default; explicit flags
win.  Every command is deterministic under a fixed --seed.  Exit codes:
0 success, 2 configuration error, 3 protocol/bitstream error, 4 numerical
abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, coder, data, numcore, relaxations as rel, training
from .model import ConfigError, Model, ModelConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_NUMERIC = 4

METHOD_CHOICES = ("round", "sga", "map", "ste", "uniform", "det_anneal")


def load_config_file(path: str) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line (want key = value): {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def make_inference_config(args, method: str) -> rel.InferenceConfig | None:
    if method == "round":
        return None
    sched = rel.TemperatureSchedule(tau0=args.tau0, decay=args.tau_decay,
                                    hold=args.tau_hold)
    return rel.InferenceConfig(method=rel.Method(method), steps=args.inference_steps,
                               schedule=sched, seed=args.seed)


def _load_side_info(path: str | None) -> bytes:
    return Path(path).read_bytes() if path else b""


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    if args.lam is None:
        raise ConfigError("train requires --lam (flag or config file)")
    cfg = ModelConfig(lam=args.lam, bitsback=args.bitsback,
                      in_channels=args.channels)
    try:
        m, history = training.train_model(
            cfg, steps=args.steps, seed=args.seed, batch_size=args.batch,
            lr=args.lr, corpus_size=args.corpus_size, verbose=not args.quiet)
    except training.TrainingAborted as e:
        # keep the last finite-loss parameters on disk
        e.model.save(args.out)
        print(f"error: {e}; last-good checkpoint written to {args.out}", file=sys.stderr)
        return EXIT_NUMERIC
    m.save(args.out)
    if history:
        print(f"nelbo first={history[0].nelbo:.4f} last={history[-1].nelbo:.4f}")
    print(f"checkpoint written to {args.out} (hash {m.content_hash():016x})")
    return EXIT_OK


def cmd_compress(args) -> int:
    m = Model.load(args.checkpoint)
    if args.mode == "bitsback" and not m.cfg.bitsback:
        raise ConfigError("bits-back compression needs a bits-back-mode checkpoint")
    img = data.load_image(args.input, channels=m.cfg.in_channels)
    if args.mode == "bitsback":
        xi = _load_side_info(args.side_info)
        cfg = make_inference_config(args, "sga")
        if cfg is not None:
            cfg.steps = args.inference_steps
        stream, st = coder.bitsback_encode(m, img, xi, cfg=cfg)
        Path(args.output).write_bytes(stream)
        print(f"bpp={8.0 * st.payload_bytes / (img.shape[1] * img.shape[2]):.6f} "
              f"psnr={st.psnr:.6f} net_bits={st.net_bits:.1f} "
              f"side_info_bits={st.side_info_bits}")
    else:
        cfg = make_inference_config(args, args.method)
        stream, st = coder.encode_standard(m, img, cfg=cfg)
        Path(args.output).write_bytes(stream)
        print(f"bpp={st.bpp:.6f} psnr={st.psnr:.6f} "
              f"rate_estimate_bits={st.rate_estimate_bits:.1f} "
              f"payload_bytes={st.payload_bytes}")
    return EXIT_OK


def cmd_decompress(args) -> int:
    m = Model.load(args.checkpoint)
    stream = Path(args.input).read_bytes()
    mode = coder.unpack_header(stream)[0]
    if mode == coder.MODE_BITSBACK:
        if not m.cfg.bitsback:
            raise ConfigError("bits-back stream needs a bits-back-mode checkpoint")
        x_rec, xi, info = coder.bitsback_decode(m, stream)
        if args.side_info_out:
            Path(args.side_info_out).write_bytes(xi)
    else:
        x_rec, info = coder.decode_standard(m, stream)
    data.save_image(args.output, x_rec)
    line = f"bpp={info.get('bpp', float('nan')):.6f}" if "bpp" in info else ""
    if args.original:
        orig = data.load_image(args.original, channels=m.cfg.in_channels)
        line += f" psnr={bench.psnr(orig, x_rec):.6f}"
    if line:
        print(line.strip())
    return EXIT_OK


def _synthetic_corpus(args) -> dict[str, np.ndarray]:
    patches = data.random_field_patches(args.images, channels=args.channels,
                                        seed=args.corpus_seed)
    return {f"synthetic_{i:03d}": patches[i] for i in range(len(patches))}


def _corpus_from_args(args) -> dict[str, np.ndarray]:
    if args.corpus_dir:
        files = sorted(Path(args.corpus_dir).glob("*.png"))
        if not files:
            raise ConfigError(f"no PNG files in {args.corpus_dir}")
        return {f.stem: data.load_image(f, channels=args.channels) for f in files}
    return _synthetic_corpus(args)


def cmd_ablate(args) -> int:
    checkpoints: dict[float, Model] = {}
    missing = []
    for p in args.checkpoint:
        try:
            m = Model.load(p)
        except FileNotFoundError:
            missing.append(p)
            continue
        checkpoints[m.cfg.lam] = m
    if missing:
        print(f"warning: skipping missing checkpoints: {missing}", file=sys.stderr)
    if not checkpoints:
        raise ConfigError("no usable checkpoints")
    corpus = _corpus_from_args(args)
    methods = [m for m in args.methods.split(",") if m]

    report: dict = {"lambdas": sorted(checkpoints), "methods": {}, "n_images": len(corpus)}
    traces_by_method: dict[str, list] = {}
    for method in methods:
        per_lam = {}
        for lam, m in sorted(checkpoints.items()):
            rows = []
            for image_id, img in sorted(corpus.items()):
                x4 = img[None]
                npix = img.shape[1] * img.shape[2]
                state = m.infer(x4)
                base_total, base_rate, base_dist = rel.ModelProblem(m, x4, state).true_loss(
                    [np.rint(state.mu_y), np.rint(state.mu_z)])
                cfg = make_inference_config(args, method)
                if cfg is None:
                    rows.append({"image": image_id, "true_rd": base_total,
                                 "baseline_rd": base_total, "gap": 0.0,
                                 "rate_bits": base_rate, "distortion": base_dist,
                                 "npix": npix})
                    continue
                if cfg.method is rel.Method.SGA:
                    _, _, trace = rel.sga_optimize(m, x4, state, cfg)
                else:
                    _, _, trace = rel.ablation_optimize(m, x4, state, cfg)
                rows.append({"image": image_id, "true_rd": trace[-1].true_rd,
                             "baseline_rd": base_total, "gap": trace[-1].gap,
                             "rate_bits": trace[-1].rate_bits,
                             "distortion": trace[-1].distortion, "npix": npix})
                if lam == min(checkpoints):
                    traces_by_method.setdefault(method, []).append(trace)
            improved = [r["true_rd"] < r["baseline_rd"] for r in rows]
            per_lam[f"{lam:g}"] = {
                "mean_true_rd": float(np.mean([r["true_rd"] for r in rows])),
                "mean_baseline_rd": float(np.mean([r["baseline_rd"] for r in rows])),
                "mean_final_gap": float(np.mean([r["gap"] for r in rows])),
                "improved_fraction": float(np.mean(improved)) if rows else 0.0,
                "mean_bpp": float(np.mean([r["rate_bits"] / r["npix"] for r in rows])),
                "mean_psnr": float(np.mean([
                    bench.psnr_from_mse(r["distortion"] / r["npix"]) for r in rows])),
            }
        report["methods"][method] = per_lam

    if args.bitsback_checkpoint:
        mb = Model.load(args.bitsback_checkpoint)
        if not mb.cfg.bitsback:
            raise ConfigError("--bitsback-checkpoint must be a bits-back-mode checkpoint")
        report["bitsback"] = _bitsback_ablation(mb, corpus, args)

    if len(checkpoints) >= 4 and "round" in report["methods"]:
        report["bd_vs_round_percent"] = _bd_table(report)
    out = Path(args.out)
    out.write_text(json.dumps(report, indent=1))
    if args.traces_dir:
        _write_gap_curves(traces_by_method, Path(args.traces_dir))
    print(f"ablation report written to {out}")
    return EXIT_OK


def _bd_table(report: dict) -> dict:
    """BD-rate of each method against direct rounding (needs >= 4 lambdas)."""
    out = {}
    ref = report["methods"]["round"]
    lams = sorted(ref, key=float)
    ref_bpp = [ref[k]["mean_bpp"] for k in lams]
    ref_psnr = [ref[k]["mean_psnr"] for k in lams]
    for method, per_lam in report["methods"].items():
        if method == "round":
            continue
        try:
            out[method] = bench.bd_rate(ref_bpp, ref_psnr,
                                        [per_lam[k]["mean_bpp"] for k in lams],
                                        [per_lam[k]["mean_psnr"] for k in lams])
        except ValueError:
            out[method] = None
    return out


def _write_gap_curves(traces_by_method: dict[str, list], tdir: Path) -> None:
    """Mean true/relaxed/gap per recorded step, one CSV per method."""
    import csv

    tdir.mkdir(parents=True, exist_ok=True)
    for method, traces in traces_by_method.items():
        n_rows = min(len(t) for t in traces)
        with open(tdir / f"gap_curve_{method}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "tau", "mean_relaxed_loss", "mean_true_rd", "mean_gap"])
            for i in range(n_rows):
                rows = [t[i] for t in traces]
                w.writerow([rows[0].step, f"{rows[0].tau:.6g}",
                            f"{np.mean([r.relaxed_loss for r in rows]):.6g}",
                            f"{np.mean([r.true_rd for r in rows]):.6g}",
                            f"{np.mean([r.gap for r in rows]):.6g}"])


def _bitsback_ablation(mb: Model, corpus: dict[str, np.ndarray], args) -> dict:
    """Net rates of the bits-back variants against the standard two-part path."""
    rng = np.random.default_rng(args.seed)
    out: dict[str, list[float]] = {"m2": [], "a5": [], "a6": [], "standard": []}
    for _, img in sorted(corpus.items()):
        xi = rng.integers(0, 256, size=64, dtype=np.uint8).tobytes()
        x4 = img[None]
        state = mb.infer(x4)
        y_round = np.rint(state.mu_y)
        # M2: joint optimization; A5: no optimization over latents;
        # A6: no optimization at all (posterior straight from the hyper net).
        cfg = make_inference_config(args, "sga")
        _, st_m2 = coder.bitsback_encode(mb, img, xi, cfg=cfg)
        _, st_a5 = coder.bitsback_encode(mb, img, xi, y_int=y_round)
        mu0, lv0 = mb.f_h(numcore.Tensor(y_round))
        q_a6 = coder.q_symbol_models(mu0.data, np.exp(lv0.data))
        st_a6 = _net_rate_fixed_posterior(mb, y_round, xi, q_a6)
        _, st_std = coder.encode_standard(mb, img)
        out["m2"].append(st_m2.net_bits)
        out["a5"].append(st_a5.net_bits)
        out["a6"].append(st_a6)
        out["standard"].append(8.0 * st_std.payload_bytes)
    return {k: float(np.mean(v)) for k, v in out.items()}


def _net_rate_fixed_posterior(mb: Model, y_int: np.ndarray, xi: bytes,
                              q_models: list) -> float:
    """Net payload bits when the hyperlatent posterior is not refined."""
    c = coder.RansCoder(xi, allow_zero_fill=True)
    z_flat = coder.rans_decode(c, q_models)
    z_int = z_flat.reshape((1, mb.cfg.hyper_channels,
                            y_int.shape[2] // mb.cfg.y_downsample,
                            y_int.shape[3] // mb.cfg.y_downsample))
    coder.rans_encode(coder._flatten_latents(y_int), coder.y_symbol_models(mb, z_int), c)
    coder.rans_encode(z_flat, coder.z_symbol_models(mb, z_int.shape), c)
    return 8.0 * len(c.to_bytes()) - 8.0 * len(xi)


def cmd_report(args) -> int:
    checkpoints = {}
    for p in args.checkpoint:
        m = Model.load(p)
        checkpoints[m.cfg.lam] = m
    corpus = _corpus_from_args(args)
    methods = {name: make_inference_config(args, name)
               for name in args.methods.split(",") if name}
    points = bench.rd_sweep(corpus, checkpoints, methods)
    out = Path(args.out)
    if out.suffix == ".json":
        bench.points_to_json(points, out)
    else:
        bench.points_to_csv(points, out)
    print(f"{len(points)} rate-distortion points written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgacodec", description=__doc__)
    p.add_argument("--config", help="flat key=value file providing flag defaults")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--channels", type=int, default=1, choices=(1, 3))

    def inference_flags(sp):
        sp.add_argument("--inference-steps", type=int, default=2000)
        sp.add_argument("--tau0", type=float, default=0.5)
        sp.add_argument("--tau-decay", type=float, default=0.001)
        sp.add_argument("--tau-hold", type=int, default=700)

    t = sub.add_parser("train", help="train a checkpoint on the synthetic corpus")
    common(t)
    t.add_argument("--lam", type=float, default=None)  # required via flag or config
    t.add_argument("--steps", type=int, default=5000)
    t.add_argument("--batch", type=int, default=training.TRAIN_BATCH)
    t.add_argument("--lr", type=float, default=training.TRAIN_LR)
    t.add_argument("--corpus-size", type=int, default=256)
    t.add_argument("--bitsback", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("compress", help="compress an image file")
    common(c)
    inference_flags(c)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--input", required=True)
    c.add_argument("--output", required=True)
    c.add_argument("--method", choices=METHOD_CHOICES, default="round")
    c.add_argument("--mode", choices=("standard", "bitsback"), default="standard")
    c.add_argument("--side-info", help="file whose bytes ride along (bits-back mode)")
    c.set_defaults(fn=cmd_compress)

    d = sub.add_parser("decompress", help="reconstruct an image from a stream")
    common(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--side-info-out", help="where to write recovered side information")
    d.add_argument("--original", help="original image for a PSNR printout")
    d.set_defaults(fn=cmd_decompress)

    a = sub.add_parser("ablate", help="method comparison tables and gap curves")
    common(a)
    inference_flags(a)
    a.add_argument("--checkpoint", nargs="+", required=True)
    a.add_argument("--bitsback-checkpoint")
    a.add_argument("--methods", default="round,sga,map,ste,uniform,det_anneal")
    a.add_argument("--images", type=int, default=20)
    a.add_argument("--corpus-seed", type=int, default=777)
    a.add_argument("--corpus-dir")
    a.add_argument("--traces-dir")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    r = sub.add_parser("report", help="rate-distortion sweep table")
    common(r)
    inference_flags(r)
    r.add_argument("--checkpoint", nargs="+", required=True)
    r.add_argument("--methods", default="round,sga")
    r.add_argument("--images", type=int, default=8)
    r.add_argument("--corpus-seed", type=int, default=777)
    r.add_argument("--corpus-dir")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    # first pass just for --config; file values become defaults, flags win
    probe, _ = parser.parse_known_args(argv)
    if probe.config:
        try:
            values = load_config_file(probe.config)
        except (ConfigError, FileNotFoundError) as e:
            print(f"config error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        for sp in parser._subparsers._group_actions[0].choices.values():  # noqa: SLF001
            defaults = {}
            for act in sp._actions:  # noqa: SLF001
                if act.dest not in values:
                    continue
                raw = values[act.dest]
                if isinstance(act, (argparse._StoreTrueAction,  # noqa: SLF001
                                    argparse._StoreFalseAction)):  # noqa: SLF001
                    defaults[act.dest] = raw.lower() in ("1", "true", "yes", "on")
                elif act.type is not None:
                    defaults[act.dest] = act.type(raw)
                else:
                    defaults[act.dest] = raw
            sp.set_defaults(**defaults)
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except coder.ProtocolError as e:
        print(f"protocol error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (numcore.NonFiniteError, training.TrainingAborted) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
