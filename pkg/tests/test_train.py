import json

import numpy as np
import pytest

from dvaegan import data, model, nn, train
from dvaegan.autodiff import Tensor
from dvaegan.errors import ContractError, TrainingAborted, ValidationError

ARCH_KW = dict(d_z=4, cog_hidden=8, conv_channels=(2, 3))


def tiny_dataset(n_train=12, n_test=4, hw=16, d_x=24, seed=0):
    params = data.SynthParams(d_x=d_x, noise_sigma=0.05, image_hw=hw)
    return data.make_synthetic_dataset(params, n_train, n_test, seed=seed)


def tiny_cfg(**kw):
    base = dict(batch_size=4, epochs=(2, 2, 1), seed=3, lr=1e-3)
    base.update(kw)
    return train.TrainConfig(**base)


def snapshot(net):
    return [p.data.copy() for p in net.parameters()]


def unchanged(net, snap):
    return all(np.array_equal(p.data, s) for p, s in zip(net.parameters(), snap))


# Adam


def test_adam_single_step_hand_oracle():
    # m = 0.1, v = 0.001; bias-corrected m_hat/sqrt(v_hat) = 1 -> w ~ -0.1
    w = Tensor(np.zeros(1), requires_grad=True)
    w.grad = np.ones(1, dtype=np.float32)
    opt = train.Adam([w])
    opt.step(0.1)
    assert w.data[0] == pytest.approx(-0.1, abs=1e-8)


def test_adam_recurrence_two_steps_hand_computed():
    w = Tensor(np.zeros(1), requires_grad=True)
    opt = train.Adam([w])
    m = v = 0.0
    ref = 0.0
    for t, g in [(1, 1.0), (2, -0.5)]:
        w.grad = np.full(1, g, dtype=np.float32)
        opt.step(0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert w.data[0] == pytest.approx(ref, rel=1e-5)


def test_adam_zero_gradient_is_noop():
    w = Tensor(np.full(3, 1.5), requires_grad=True)
    w.zero_grad()
    train.Adam([w]).step(0.1)
    np.testing.assert_array_equal(w.data, np.full(3, 1.5, dtype=np.float32))


def test_adam_aborts_on_non_finite_gradient():
    w = Tensor(np.zeros(2), requires_grad=True)
    w.grad = np.array([1.0, np.nan], dtype=np.float32)
    with pytest.raises(TrainingAborted):
        train.Adam([w]).step(0.1)


def test_config_validation():
    with pytest.raises(ValidationError):
        train.TrainConfig(lr=0.0)
    with pytest.raises(ValidationError):
        train.TrainConfig(decay_rate=1.5)
    with pytest.raises(ValidationError):
        train.TrainConfig(ablation="none")
    with pytest.raises(ValidationError):
        train.TrainConfig(epochs=(1, 2))


def test_lr_schedule_exact():
    ds = tiny_dataset()
    cfg = tiny_cfg(epochs=(3, 0, 0), lr=3e-4, decay_rate=0.98)
    arch = train.default_arch(ds, cfg, **ARCH_KW)
    bundle = model.build_bundle(arch, seed=1)
    log, _, _ = train.run_stage1(bundle, ds, cfg)
    got = [e["lr_t"] for e in log.epochs]
    assert got == [3e-4 * 0.98**e for e in range(3)]


# stage contracts


def test_stage1_zero_epochs_is_noop():
    ds = tiny_dataset()
    cfg = tiny_cfg(epochs=(0, 0, 0))
    arch = train.default_arch(ds, cfg, **ARCH_KW)
    bundle = model.build_bundle(arch, seed=2)
    snaps = {k: snapshot(n) for k, n in bundle.networks().items()}
    log, step, cache = train.run_stage1(bundle, ds, cfg)
    assert log.steps == [] and log.epochs == [] and step == 0
    assert all(unchanged(bundle.networks()[k], s) for k, s in snaps.items())
    assert cache is not None  # teacher cache exists even for an empty stage


def test_stage1_freezes_cognitive_encoder():
    ds = tiny_dataset()
    cfg = tiny_cfg(epochs=(1, 0, 0))
    arch = train.default_arch(ds, cfg, **ARCH_KW)
    bundle = model.build_bundle(arch, seed=4)
    cog_before = snapshot(bundle.e_cog)
    vis_before = snapshot(bundle.e_vis)
    train.run_stage1(bundle, ds, cfg)
    assert unchanged(bundle.e_cog, cog_before)
    assert not unchanged(bundle.e_vis, vis_before)
    for p in bundle.e_cog.parameters():
        assert p.grad is None or not p.grad.any()


def test_stage1_smoke_rec_decreases_on_toy_set():
    ds = tiny_dataset(n_train=20, n_test=2, hw=16, seed=5)
    cfg = tiny_cfg(epochs=(60, 0, 0), seed=7, batch_size=5, lr=3e-4, lambda_rec=100.0)
    arch = train.default_arch(ds, cfg, d_z=8, cog_hidden=32, conv_channels=(4, 8))
    bundle = model.build_bundle(arch, seed=8)
    log, _, cache = train.run_stage1(bundle, ds, cfg)
    assert log.epochs[-1]["rec"] < log.epochs[0]["rec"]
    assert cache.recon.shape == (20,) + ds.image_shape
    assert cache.mu_star.shape == (20, arch.d_z)


def test_stage2_requires_cache_and_freezes_generator():
    ds = tiny_dataset()
    cfg = tiny_cfg(epochs=(1, 2, 0))
    arch = train.default_arch(ds, cfg, **ARCH_KW)
    bundle = model.build_bundle(arch, seed=9)
    with pytest.raises(ContractError):
        train.run_stage2(bundle, ds, cfg, cache=None)
    _, _, cache = train.run_stage1(bundle, ds, cfg)
    gen_before = snapshot(bundle.gen)
    vis_before = snapshot(bundle.e_vis)
    cog_before = snapshot(bundle.e_cog)
    log, _ = train.run_stage2(bundle, ds, cfg, cache)
    assert unchanged(bundle.gen, gen_before)
    assert unchanged(bundle.e_vis, vis_before)
    assert not unchanged(bundle.e_cog, cog_before)
    for p in bundle.gen.parameters():
        assert not p.grad.any()
    assert log.baseline_gap is not None
    assert all("latent_gap" in e for e in log.epochs)


def test_stage2_latent_gap_decreases_on_toy_set():
    ds = tiny_dataset(n_train=16, n_test=2, seed=10)
    cfg = tiny_cfg(epochs=(6, 10, 0), seed=11, batch_size=4, lambda_rec=20.0)
    arch = train.default_arch(ds, cfg, **ARCH_KW)
    bundle = model.build_bundle(arch, seed=12)
    _, _, cache = train.run_stage1(bundle, ds, cfg)
    log, _ = train.run_stage2(bundle, ds, cfg, cache)
    assert log.epochs[-1]["latent_gap"] < log.baseline_gap


def test_stage2_skipped_under_vae_gan_ablation():
    ds = tiny_dataset()
    cfg = tiny_cfg(ablation="vae-gan")
    log, step = train.run_stage2(None, ds, cfg, cache=None)
    assert log.skipped and log.steps == [] and step == 0


def test_stage3_freezes_encoder_and_scales_lr():
    ds = tiny_dataset()
    cfg = tiny_cfg(epochs=(1, 1, 2))
    arch = train.default_arch(ds, cfg, **ARCH_KW)
    bundle = model.build_bundle(arch, seed=13)
    _, _, cache = train.run_stage1(bundle, ds, cfg)
    train.run_stage2(bundle, ds, cfg, cache)
    cog_before = snapshot(bundle.e_cog)
    log, _ = train.run_stage3(bundle, ds, cfg)
    assert unchanged(bundle.e_cog, cog_before)
    for p in bundle.e_cog.parameters():
        assert not p.grad.any()
    assert log.epochs[0]["lr_t"] == pytest.approx(cfg.lr * cfg.stage3_lr_scale)
    assert all(np.isfinite(s["gan_d"]) for s in log.steps)


def test_stage3_zero_scale_keeps_params():
    ds = tiny_dataset()
    cfg = tiny_cfg(epochs=(0, 0, 2), stage3_lr_scale=0.0)
    arch = train.default_arch(ds, cfg, **ARCH_KW)
    bundle = model.build_bundle(arch, seed=14)
    gen_before = snapshot(bundle.gen)
    disc_before = snapshot(bundle.disc)
    train.run_stage3(bundle, ds, cfg)
    assert unchanged(bundle.gen, gen_before)
    assert unchanged(bundle.disc, disc_before)


# full pipeline


def test_train_full_emits_three_checkpoints(tmp_path):
    ds = tiny_dataset(n_train=20, n_test=4, seed=15)
    cfg = tiny_cfg(epochs=(1, 1, 1), seed=16)
    bundle, tlog = train.train_full(ds, cfg, arch=train.default_arch(ds, cfg, **ARCH_KW), out_dir=tmp_path)
    assert sorted(tlog.checkpoints) == [1, 2, 3]
    for p in tlog.checkpoints.values():
        assert (tmp_path / p).exists() or p
    lines = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    stages = {l["stage"] for l in lines}
    assert stages == {1, 2, 3}
    step_lines = [l for l in lines if "step" in l]
    assert all({"stage", "epoch", "step", "lr_t", "rec", "prior", "gan_d", "gan_g"} <= set(l) for l in step_lines)


def test_train_full_vae_gan_ablation_skips_stage2(tmp_path):
    ds = tiny_dataset(seed=17)
    cfg = tiny_cfg(epochs=(1, 1, 1), ablation="vae-gan", seed=18)
    bundle, tlog = train.train_full(ds, cfg, arch=train.default_arch(ds, cfg, **ARCH_KW), out_dir=tmp_path)
    assert tlog.stages[2].skipped
    assert 2 not in tlog.checkpoints
    lines = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert {l["stage"] for l in lines} == {1, 3}


def test_cnn_encoder_ablation_drops_prior_and_sampling():
    ds = tiny_dataset(seed=19)
    cfg = tiny_cfg(epochs=(1, 1, 0), ablation="cnn-encoder", seed=20)
    arch = train.default_arch(ds, cfg, **ARCH_KW)
    assert not arch.variational
    bundle, tlog = train.train_full(ds, cfg, arch=arch)
    assert all(s["prior"] == 0.0 for s in tlog.stages[1].steps)


def test_determinism_bitwise_same_seed(tmp_path):
    ds = tiny_dataset(n_train=10, n_test=2, seed=21)
    cfg = tiny_cfg(epochs=(2, 1, 1), seed=22)
    arch = train.default_arch(ds, cfg, **ARCH_KW)
    b1, _ = train.train_full(ds, cfg, arch=arch, out_dir=tmp_path / "a")
    b2, _ = train.train_full(ds, cfg, arch=arch, out_dir=tmp_path / "b")
    for (n1, p1), (n2, p2) in zip(b1.named_parameters(), b2.named_parameters()):
        assert n1 == n2
        assert p1.data.tobytes() == p2.data.tobytes()
    assert (tmp_path / "a" / "stage3.ckpt").read_bytes() == (tmp_path / "b" / "stage3.ckpt").read_bytes()


def test_checkpoint_roundtrip_and_resume_equals_uninterrupted(tmp_path):
    ds = tiny_dataset(n_train=10, n_test=2, seed=23)
    cfg = tiny_cfg(epochs=(2, 1, 1), seed=24)
    arch = train.default_arch(ds, cfg, **ARCH_KW)
    _, tlog = train.train_full(ds, cfg, arch=arch, out_dir=tmp_path / "full")
    loaded, meta, report = train.load_checkpoint(tmp_path / "full" / "stage1.ckpt")
    assert meta["stage"] == 1 and meta["seed"] == 24
    assert set(report) == {"e_cog", "e_vis", "gen", "disc"}
    train.train_full(
        ds,
        cfg,
        arch=arch,
        out_dir=tmp_path / "resumed",
        bundle=loaded,
        start_stage=2,
        start_step=meta["step"],
    )
    assert (tmp_path / "full" / "stage3.ckpt").read_bytes() == (
        tmp_path / "resumed" / "stage3.ckpt"
    ).read_bytes()


def test_checkpoint_partial_load_reports_only_requested():
    ds = tiny_dataset(seed=25)
    cfg = tiny_cfg(epochs=(0, 0, 0), seed=26)
    arch = train.default_arch(ds, cfg, **ARCH_KW)
    bundle = model.build_bundle(arch, seed=27)
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        p = train.save_checkpoint(f"{d}/c.ckpt", bundle, 3, 0, 26)
        partial, _, report = train.load_checkpoint(p, only=("e_cog", "gen"))
        assert set(report) == {"e_cog", "gen"}
        assert all(v > 0 for v in report.values())
        for pa, pb in zip(partial.e_cog.parameters(), bundle.e_cog.parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)
        # networks outside the requested set keep zero init
        assert not any(p.data.any() for p in partial.e_vis.parameters())
        with pytest.raises(ValidationError):
            train.load_checkpoint(p, only=("e_cog", "nope"))


def test_parameter_count_stable_across_roundtrip(tmp_path):
    ds = tiny_dataset(seed=28)
    cfg = tiny_cfg(seed=29)
    arch = train.default_arch(ds, cfg, **ARCH_KW)
    bundle = model.build_bundle(arch, seed=30)
    p = train.save_checkpoint(tmp_path / "c.ckpt", bundle, 1, 0, 29)
    loaded, _, _ = train.load_checkpoint(p)
    assert loaded.parameter_count() == bundle.parameter_count()
