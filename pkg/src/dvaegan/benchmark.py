"""Canonical desk-scale benchmark: dataset recipe, training config, and the
frozen quality thresholds used by the acceptance suite and the scripts.

The thresholds were confirmed on the first full benchmark run and then
frozen; see tests/test_acceptance.py for the pass/fail harness.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import SynthParams, make_synthetic_dataset
from .train import TrainConfig, default_arch, train_full

N_TRAIN = 1200
N_TEST = 50
IMAGE_HW = 32
D_X = 2048
D_Z = 64
NOISE_SIGMA = 0.1

PCC_THRESHOLD = 0.6
PIXCOM_THRESHOLD = 0.8
DISTILL_RATIO = 0.5
UNTRAINED_PIXCOM_TOL = 0.05


@dataclass(frozen=True)
class BenchmarkSettings:
    epochs: tuple = (8, 8, 4)
    batch_size: int = 32
    lr: float = 3e-4
    lambda_rec: float = 300.0
    lambda_prior: float = 1.0
    d_z: int = D_Z
    cog_hidden: int = 512
    conv_channels: tuple = (32, 64, 128)


SETTINGS = BenchmarkSettings()


def benchmark_dataset(seed=0):
    params = SynthParams(d_x=D_X, noise_sigma=NOISE_SIGMA, image_hw=IMAGE_HW)
    return make_synthetic_dataset(params, N_TRAIN, N_TEST, seed=seed)


def benchmark_config(seed=0, ablation="full", settings=SETTINGS):
    return TrainConfig(
        lr=settings.lr,
        batch_size=settings.batch_size,
        epochs=settings.epochs,
        seed=seed,
        ablation=ablation,
        lambda_rec=settings.lambda_rec,
        lambda_prior=settings.lambda_prior,
    )


def run_benchmark(dataset, seed=0, ablation="full", out_dir=None, settings=SETTINGS):
    cfg = benchmark_config(seed=seed, ablation=ablation, settings=settings)
    arch = default_arch(
        dataset,
        cfg,
        d_z=settings.d_z,
        cog_hidden=settings.cog_hidden,
        conv_channels=settings.conv_channels,
    )
    return train_full(dataset, cfg, arch=arch, out_dir=out_dir)
