"""Measurement and reporting: PSNR, rate-distortion sweeps, BD-rate savings.

Result tables export as CSV and JSON with stable column names
(method, lam, image_id, bpp, psnr) for downstream plotting.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import coder as cd
from . import relaxations as rel
from .model import Model

PSNR_CAP_DB = 100.0  # reported for bit-identical reconstructions


@dataclass
class RDPoint:
    bpp: float
    psnr: float
    method_id: str
    lam: float
    image_id: str


def psnr_from_mse(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse)))


def psnr(x: np.ndarray, x_rec: np.ndarray) -> float:
    """10*log10(1/MSE) on the [0,1] pixel scale, capped at 100 dB."""
    x = np.asarray(x, dtype=np.float64)
    x_rec = np.asarray(x_rec, dtype=np.float64)
    if x.shape != x_rec.shape:
        raise ValueError(f"psnr shape mismatch {x.shape} vs {x_rec.shape}")
    return psnr_from_mse(float(np.mean((x - x_rec) ** 2)))


def rd_sweep(corpus: dict[str, np.ndarray], checkpoints: dict[float, Model],
             methods: dict[str, rel.InferenceConfig | None]) -> list[RDPoint]:
    """One RDPoint per (method, lam, image); bpp from actual stream payloads.

    methods maps a method id to an inference config (None = direct rounding).
    An empty corpus yields an empty table.
    """
    points: list[RDPoint] = []
    for lam in sorted(checkpoints):
        m = checkpoints[lam]
        for method_id, cfg in methods.items():
            for image_id in sorted(corpus):
                img = corpus[image_id]
                _, stats = cd.encode_standard(m, img, cfg=cfg)
                points.append(RDPoint(bpp=stats.bpp, psnr=stats.psnr,
                                      method_id=method_id, lam=lam,
                                      image_id=image_id))
    return points


def mean_curve(points: list[RDPoint], method_id: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-lambda mean (bpp, psnr) curve for one method, sorted by bpp."""
    lams = sorted({p.lam for p in points if p.method_id == method_id})
    bpps, psnrs = [], []
    for lam in lams:
        sel = [p for p in points if p.method_id == method_id and p.lam == lam]
        bpps.append(np.mean([p.bpp for p in sel]))
        psnrs.append(np.mean([p.psnr for p in sel]))
    order = np.argsort(bpps)
    return np.asarray(bpps)[order], np.asarray(psnrs)[order]


def points_to_csv(points: list[RDPoint], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["method", "lam", "image_id", "bpp", "psnr"])
    for p in points:
        w.writerow([p.method_id, f"{p.lam:.10g}", p.image_id,
                    f"{p.bpp:.10g}", f"{p.psnr:.10g}"])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def points_to_json(points: list[RDPoint], path=None) -> str:
    text = json.dumps([asdict(p) for p in points], indent=1)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def bd_rate(ref_bpp, ref_psnr, test_bpp, test_psnr) -> float:
    """Average rate difference (%) of the test curve against the reference.

    Cubic fit of log-rate over PSNR, integrated over the overlapping PSNR
    interval; negative values mean the test curve saves rate.
    """
    ref_bpp = np.asarray(ref_bpp, dtype=np.float64)
    ref_psnr = np.asarray(ref_psnr, dtype=np.float64)
    test_bpp = np.asarray(test_bpp, dtype=np.float64)
    test_psnr = np.asarray(test_psnr, dtype=np.float64)
    if len(ref_bpp) < 4 or len(test_bpp) < 4:
        raise ValueError("bd_rate needs at least 4 points per curve")
    lo = max(ref_psnr.min(), test_psnr.min())
    hi = min(ref_psnr.max(), test_psnr.max())
    if hi <= lo:
        raise ValueError("R-D curves have no overlapping PSNR range")
    p_ref = np.polyfit(ref_psnr, np.log(ref_bpp), 3)
    p_test = np.polyfit(test_psnr, np.log(test_bpp), 3)
    int_ref = np.polyval(np.polyint(p_ref), hi) - np.polyval(np.polyint(p_ref), lo)
    int_test = np.polyval(np.polyint(p_test), hi) - np.polyval(np.polyint(p_test), lo)
    avg_log_diff = (int_test - int_ref) / (hi - lo)
    return float((np.exp(avg_log_diff) - 1.0) * 100.0)
