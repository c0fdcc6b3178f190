"""Reconstruction quality metrics and report generation.

pcc is the Pearson correlation over flattened pixels. ssim uses a uniform
8x8 sliding window (stride 1) with C1 = (0.01 L)^2, C2 = (0.03 L)^2 at
L = 1. pixcom is the objective two-alternative comparison: for every
reconstruction, the true stimulus competes against one seeded distractor
drawn from the other test stimuli; ties count half.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as md
from .autodiff import Tensor
from .data import write_pgm
from .errors import ContractError, UndefinedCorrelationError

SSIM_WINDOW = 8
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2


def _pixels(img):
    if isinstance(img, md.StimulusImage):
        return np.asarray(img.pixels, dtype=np.float64)
    return np.asarray(img, dtype=np.float64)


def pcc(a, b):
    """Pearson correlation of flattened pixels, in [-1, 1]."""
    av = _pixels(a).reshape(-1)
    bv = _pixels(b).reshape(-1)
    if av.shape != bv.shape:
        raise ContractError(f"pcc shapes differ: {av.shape} vs {bv.shape}")
    ac = av - av.mean()
    bc = bv - bv.mean()
    na = np.sqrt((ac * ac).sum())
    nb = np.sqrt((bc * bc).sum())
    if na == 0.0 or nb == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant image")
    return float(np.clip((ac * bc).sum() / (na * nb), -1.0, 1.0))


def _ssim_map_single(a, b):
    if a.shape != b.shape:
        raise ContractError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ContractError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    wa = np.lib.stride_tricks.sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW))
    wb = np.lib.stride_tricks.sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim_map(a, b):
    """Per-window SSIM values, shape (H - 7, W - 7); channels averaged."""
    av, bv = _pixels(a), _pixels(b)
    if av.ndim == 2:
        av, bv = av[None], bv[None]
    maps = [_ssim_map_single(ca, cb) for ca, cb in zip(av, bv)]
    return np.mean(maps, axis=0)


def ssim(a, b):
    """Mean local structural similarity, in [-1, 1]."""
    return float(ssim_map(a, b).mean())


def _safe_pcc(a, b):
    try:
        return pcc(a, b)
    except UndefinedCorrelationError:
        return None


def pixcom(recons, stimuli, seed):
    """Fraction of 2AFC trials where the paired stimulus beats one seeded
    distractor in pixel correlation with the reconstruction. Undefined
    correlations (constant images) score the trial as a tie."""
    if len(recons) != len(stimuli):
        raise ContractError("reconstruction/stimulus lists must align")
    n = len(stimuli)
    if n < 2:
        raise ContractError("pixcom needs at least 2 test stimuli")
    rng = np.random.default_rng(seed)
    score = 0.0
    for i, recon in enumerate(recons):
        j = int(rng.integers(0, n - 1))
        if j >= i:
            j += 1
        true_val = _safe_pcc(recon, stimuli[i])
        dist_val = _safe_pcc(recon, stimuli[j])
        if true_val is None and dist_val is None:
            score += 0.5
        elif true_val is None:
            pass
        elif dist_val is None or true_val > dist_val:
            score += 1.0
        elif true_val == dist_val:
            score += 0.5
    return score / n


@dataclass
class EvalReport:
    per_image: list
    pcc_mean: float
    pcc_std: float
    ssim_mean: float
    ssim_std: float
    pixcom: float
    n_trials: int
    seed: int
    excluded: list = field(default_factory=list)

    def to_dict(self):
        return {
            "per_image": self.per_image,
            "aggregates": {
                "pcc": {"mean": self.pcc_mean, "std": self.pcc_std},
                "ssim": {"mean": self.ssim_mean, "std": self.ssim_std},
            },
            "pixcom": self.pixcom,
            "n_trials": self.n_trials,
            "seed": self.seed,
            "excluded": self.excluded,
        }


def masked_signal_matrix(dataset, idx):
    return np.stack([dataset.records[i][0].masked_values() for i in idx]).astype(np.float32)


def reconstruct_test_split(bundle, dataset, batch_size=64):
    """Posterior-mean reconstructions of every test signal (no sampling)."""
    sig = masked_signal_matrix(dataset, dataset.test_idx)
    out = np.empty((len(sig),) + dataset.image_shape, dtype=np.float32)
    for start in range(0, len(sig), batch_size):
        x = Tensor(sig[start : start + batch_size])
        code = md.encode_batch(bundle.e_cog, x, bundle.arch, deterministic=True)
        out[start : start + batch_size] = bundle.gen(code.mu).data
    return out


def score_images(recons, stimuli, seed):
    """Metric block shared by trained-model and imported-reconstruction paths."""
    per_image, excluded = [], []
    for recon, stim in zip(recons, stimuli):
        stim_id = stim.id if isinstance(stim, md.StimulusImage) else None
        p = _safe_pcc(recon, stim)
        s = ssim(recon, stim)
        if p is None:
            excluded.append(stim_id)
            warnings.warn(f"constant image for {stim_id}: pcc undefined, excluded from aggregates")
        per_image.append({"id": stim_id, "pcc": p, "ssim": s})
    valid = [r["pcc"] for r in per_image if r["pcc"] is not None]
    ssims = [r["ssim"] for r in per_image]
    return EvalReport(
        per_image=per_image,
        pcc_mean=float(np.mean(valid)) if valid else float("nan"),
        pcc_std=float(np.std(valid)) if valid else float("nan"),
        ssim_mean=float(np.mean(ssims)),
        ssim_std=float(np.std(ssims)),
        pixcom=pixcom(list(recons), list(stimuli), seed),
        n_trials=len(per_image),
        seed=seed,
        excluded=excluded,
    )


def make_report(bundle, dataset, seed=0, out_dir=None):
    """Reconstruct the test split and score it; optionally write JSON report,
    per-image CSV, and stimulus|reconstruction PGM pairs."""
    if len(dataset.test_idx) == 0:
        raise ContractError("dataset has no test split")
    recons = reconstruct_test_split(bundle, dataset)
    stimuli = [dataset.stimulus(i) for i in dataset.test_idx]
    report = score_images(recons, stimuli, seed)
    if out_dir is not None:
        write_report_files(report, recons, stimuli, out_dir)
    return report


def write_report_files(report, recons, stimuli, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=1))
    with open(out / "per_image.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "pcc", "ssim"])
        for row in report.per_image:
            writer.writerow([row["id"], row["pcc"], row["ssim"]])
    pairs = out / "pairs"
    pairs.mkdir(exist_ok=True)
    for recon, stim in zip(recons, stimuli):
        a = _pixels(stim).mean(axis=0)
        b = _pixels(recon).mean(axis=0)
        divider = np.full((a.shape[0], 2), 0.5)
        write_pgm(pairs / f"{stim.id}.pgm", np.concatenate([a, divider, b], axis=1))
    return out
