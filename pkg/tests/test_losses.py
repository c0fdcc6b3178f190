import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvaegan import autodiff as ad
from dvaegan import losses, model, nn
from dvaegan.autodiff import Tape, Tensor
from dvaegan.errors import ContractError, DomainError
from gradcheck_util import max_rel_error, numeric_grad

ARCH = model.ArchConfig(
    d_x=10, d_z=3, image_hw=8, image_channels=1, conv_channels=(2, 3), cog_hidden=6
)


def make_bundle(seed=0):
    return model.build_bundle(ARCH, seed=seed)


def code_from(mu, log_var):
    mu_t = Tensor(np.asarray(mu, dtype=np.float64), dtype=np.float64)
    lv_t = Tensor(np.asarray(log_var, dtype=np.float64), dtype=np.float64)
    return model.LatentCode(mu_t, lv_t, mu_t)


def prob_output(p):
    return model.DiscriminatorOutput(
        prob=Tensor(np.asarray(p, dtype=np.float64).reshape(-1, 1), dtype=np.float64),
        features=Tensor(np.zeros((1, 1))),
    )


def mc_kl_estimate(mu, log_var, n=100_000, seed=101):
    # independent oracle: E_q[log q(z) - log p(z)] by sampling
    rng = np.random.default_rng(seed)
    mu = np.asarray(mu, dtype=np.float64)
    sd = np.exp(0.5 * np.asarray(log_var, dtype=np.float64))
    z = mu + sd * rng.standard_normal((n, mu.size))
    log_q = -0.5 * (((z - mu) / sd) ** 2 + np.log(2 * np.pi) + np.log(sd**2)).sum(axis=1)
    log_p = -0.5 * (z**2 + np.log(2 * np.pi)).sum(axis=1)
    return float((log_q - log_p).mean())


def test_kl_prior_zero_at_prior():
    assert losses.kl_prior(code_from([0.0, 0.0], [0.0, 0.0])).item() == 0.0


def test_kl_prior_against_monte_carlo():
    analytic = losses.kl_prior(code_from([1.0], [0.0])).item()
    assert analytic == pytest.approx(0.5, abs=1e-12)
    mc = mc_kl_estimate([1.0], [0.0])
    assert abs(analytic - mc) / max(mc, 1e-9) < 0.01
    analytic2 = losses.kl_prior(code_from([0.4, -1.2], [0.3, -0.5])).item()
    mc2 = mc_kl_estimate([0.4, -1.2], [0.3, -0.5])
    assert abs(analytic2 - mc2) / mc2 < 0.01


@given(
    st.lists(st.floats(-3, 3), min_size=1, max_size=6),
    st.lists(st.floats(-3, 2), min_size=1, max_size=6),
)
@settings(max_examples=50, deadline=None)
def test_kl_prior_nonnegative(mu, lv):
    n = min(len(mu), len(lv))
    val = losses.kl_prior(code_from(mu[:n], lv[:n])).item()
    assert val >= 0.0


def test_kl_prior_rejects_non_finite():
    with pytest.raises(DomainError):
        losses.kl_prior(code_from([np.inf], [0.0]))


def test_kl_prior_batch_mean():
    # batched codes average per-row sums
    mu = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]), dtype=np.float64)
    lv = Tensor(np.zeros((2, 2)), dtype=np.float64)
    code = model.LatentCode(mu, lv, mu)
    assert losses.kl_prior(code).item() == pytest.approx(0.25)


def test_gan_loss_d_uninformative_discriminator():
    val = losses.gan_loss_d(prob_output(0.5), prob_output(0.5)).item()
    assert val == pytest.approx(2 * math.log(2), abs=1e-6)


def test_gan_loss_d_perfect_discriminator_limit():
    hi = 1.0 - model.PROB_EPS
    val = losses.gan_loss_d(prob_output(hi), prob_output(model.PROB_EPS)).item()
    assert val == pytest.approx(2 * math.log(1.0 / hi), rel=1e-3)
    assert val < 1e-5


def test_gan_loss_d_formula_oracle_on_random_probs():
    rng = np.random.default_rng(31)
    p_real = rng.uniform(0.05, 0.95, size=6)
    p_fake = rng.uniform(0.05, 0.95, size=6)
    got = losses.gan_loss_d(prob_output(p_real), prob_output(p_fake)).item()
    expected = -(np.log(p_real).mean() + np.log1p(-p_fake).mean())
    assert got == pytest.approx(expected, rel=1e-6)


def test_gan_loss_g_values_and_monotonicity():
    assert losses.gan_loss_g(prob_output(0.5)).item() == pytest.approx(math.log(2), abs=1e-7)
    assert losses.gan_loss_g(prob_output(1.0 - 1e-6)).item() == pytest.approx(1e-6, rel=1e-2)
    grid = np.linspace(0.05, 0.95, 19)
    vals = [losses.gan_loss_g(prob_output(p)).item() for p in grid]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_feat_match_rec_zero_and_nonnegative():
    rng = np.random.default_rng(37)
    f = rng.standard_normal((2, 5)).astype(np.float32)
    out_a = model.DiscriminatorOutput(Tensor([[0.5]]), Tensor(f))
    out_b = model.DiscriminatorOutput(Tensor([[0.5]]), Tensor(f.copy()))
    assert losses.feat_match_rec(out_a, out_b).item() == 0.0
    out_c = model.DiscriminatorOutput(Tensor([[0.5]]), Tensor(f + 1.0))
    assert losses.feat_match_rec(out_a, out_c).item() > 0.0
    with pytest.raises(ContractError):
        losses.feat_match_rec(out_a, model.DiscriminatorOutput(Tensor([[0.5]]), Tensor(np.zeros((2, 4)))))


def test_feat_match_gradient_wrt_recon_pixels():
    arch = model.ArchConfig(d_x=4, d_z=2, image_hw=8, conv_channels=(2,), cog_hidden=4)
    b = model.build_bundle(arch, seed=3, dtype=np.float64)
    rng = np.random.default_rng(41)
    target = Tensor(rng.random((1, 1, 8, 8)), dtype=np.float64)
    recon = Tensor(rng.random((1, 1, 8, 8)), requires_grad=True, dtype=np.float64)

    def f():
        return losses.feat_match_rec(
            model.discriminate_batch(b, target), model.discriminate_batch(b, recon)
        )

    with Tape() as tape:
        tape.backward(f())
    numeric = numeric_grad(f, recon)
    assert max_rel_error(recon.grad, numeric) <= 1e-4


def batch_images(seed, n=2, hw=8):
    rng = np.random.default_rng(seed)
    return rng.random((n, 1, hw, hw)).astype(np.float32)


def batch_signals(seed, n=2, d_x=10):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d_x)).astype(np.float32)


def test_stage1_report_identity_and_recomputation():
    bundle = make_bundle(5)
    y = batch_images(43)
    eps = np.random.default_rng(7).standard_normal((2, ARCH.d_z)).astype(np.float32)
    report = losses.stage1_loss(bundle, y, eps=eps)
    report.check_identity()
    assert report.stage == "I"
    assert report.total == pytest.approx(
        report.terms["rec"] + report.terms["prior"] + report.terms["gan_d"], abs=1e-5
    )
    # recompute every term from the same forward quantities
    code = model.encode_batch(bundle.e_vis, Tensor(y), bundle.arch, eps=eps)
    recon = bundle.gen(code.sample)
    d_real = model.discriminate_batch(bundle, Tensor(y))
    d_fake = model.discriminate_batch(bundle, recon)
    assert report.terms["rec"] == pytest.approx(losses.feat_match_rec(d_real, d_fake).item(), rel=1e-6)
    assert report.terms["prior"] == pytest.approx(losses.kl_prior(code).item(), rel=1e-6)
    assert report.terms["gan_d"] == pytest.approx(losses.gan_loss_d(d_real, d_fake).item(), rel=1e-6)
    assert report.terms["gan_g"] == pytest.approx(losses.gan_loss_g(d_fake).item(), rel=1e-6)


def test_stage1_custom_weights():
    bundle = make_bundle(6)
    y = batch_images(47)
    eps = np.zeros((2, ARCH.d_z), dtype=np.float32)
    r = losses.stage1_loss(bundle, y, eps=eps, lambda_rec=3.0, lambda_prior=0.5)
    assert r.total == pytest.approx(
        3.0 * r.terms["rec"] + 0.5 * r.terms["prior"] + r.terms["gan_d"], abs=1e-5
    )


def test_stage1_rec_zero_for_perfect_reconstruction():
    bundle = make_bundle(7)
    y = batch_images(53)
    d = model.discriminate_batch(bundle, Tensor(y))
    assert losses.feat_match_rec(d, model.discriminate_batch(bundle, Tensor(y.copy()))).item() == 0.0


def test_stage2_requires_frozen_generator():
    bundle = make_bundle(8)
    with pytest.raises(ContractError):
        losses.stage2_loss(bundle, batch_signals(1), batch_images(2))


def test_stage2_perfect_mimic_gives_zero_rec():
    bundle = make_bundle(9)
    y = batch_images(59, n=1)
    eps = np.random.default_rng(11).standard_normal((1, ARCH.d_z)).astype(np.float32)
    teacher_code = model.encode_batch(bundle.e_vis, Tensor(y), bundle.arch, eps=eps)
    y_teacher = bundle.gen(teacher_code.sample).data
    # cognitive encoder that emits exactly the teacher posterior for any input
    mimic = nn.Sequential(
        [nn.Dense(ARCH.d_x, ARCH.cog_hidden), nn.Activation("relu"), nn.Dense(ARCH.cog_hidden, 2 * ARCH.d_z)],
        input_shape=(ARCH.d_x,),
    )
    out_layer = mimic.layers[-1]
    out_layer.bias.data[:] = np.concatenate(
        [teacher_code.mu.data[0], teacher_code.log_var.data[0]]
    )
    bundle.e_cog = mimic
    nn.set_requires_grad(bundle.gen, False)
    nn.set_requires_grad(bundle.e_vis, False)
    report = losses.stage2_loss(bundle, batch_signals(3, n=1), y_teacher, eps=eps)
    assert report.terms["rec"] == pytest.approx(0.0, abs=1e-10)
    report.check_identity()


def test_stage3_total_is_gan_only_and_freeze_contract():
    bundle = make_bundle(10)
    with pytest.raises(ContractError):
        losses.stage3_loss(bundle, batch_signals(4), batch_images(5))
    nn.set_requires_grad(bundle.e_cog, False)
    r = losses.stage3_loss(bundle, batch_signals(4), batch_images(5), eps=np.zeros((2, ARCH.d_z), np.float32))
    assert set(r.terms) == {"gan_d", "gan_g"}
    assert r.total == pytest.approx(r.terms["gan_d"], abs=1e-7)
    r.check_identity()


def test_report_identity_violation_detected():
    r = losses.LossReport(stage="I", total=1.0, terms={"rec": 2.0}, weights={"rec": 1.0})
    with pytest.raises(ContractError):
        r.check_identity()
