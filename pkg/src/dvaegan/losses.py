"""Training objectives: Gaussian-prior KL, adversarial losses, and the
discriminator-feature reconstruction loss, composed into the three stage
criteria.

Reductions are means over batch (and feature elements for the feature loss);
the KL sums over latent dimensions, which is the exact divergence of the
diagonal Gaussian from the unit prior. The generator side uses the
non-saturating -log p(fake) form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as md
from .autodiff import Tensor
from .errors import ContractError, DomainError


def kl_prior(code):
    """KL(N(mu, diag exp(log_var)) || N(0, I)), summed over latent dims,
    averaged over the batch. Always >= 0, and 0 only at the prior itself."""
    mu, log_var = code.mu, code.log_var
    if not (np.isfinite(mu.data).all() and np.isfinite(log_var.data).all()):
        raise DomainError("non-finite latent parameters")
    # each term is >= 0 exactly; the clamp only absorbs float rounding where
    # exp(log_var) collapses onto 1.0 and the true value underflows
    per_dim = ad.relu(ad.sub(ad.sub(ad.add(ad.texp(log_var), ad.square(mu)), 1.0), log_var))
    axis = per_dim.data.ndim - 1
    per_row = ad.tsum(per_dim, axis=axis)
    return ad.mul(per_row.mean(), 0.5)


def gan_loss_d(real, fake):
    """-[log p(real) + log(1 - p(fake))], batch-averaged (minimization form)."""
    term_real = ad.tlog(real.prob).mean()
    term_fake = ad.tlog(ad.sub(1.0, fake.prob)).mean()
    return ad.neg(ad.add(term_real, term_fake))


def gan_loss_g(fake):
    """Non-saturating generator objective: -log p(fake), batch-averaged."""
    return ad.neg(ad.tlog(fake.prob).mean())


def feat_match_rec(target, recon):
    """Half mean squared distance between discriminator hidden features."""
    if target.features.shape != recon.features.shape:
        raise ContractError(
            f"feature shapes differ: {target.features.shape} vs {recon.features.shape}"
        )
    return ad.mul(ad.square(ad.sub(target.features, recon.features)).mean(), 0.5)


@dataclass
class LossReport:
    """Scalar summary of one composite objective evaluation.

    total must equal sum(weights[k] * terms[k]) to 1e-5; gan_g is reported
    with weight 0 (diagnostic, optimized separately from the composite).
    """

    stage: str
    total: float
    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def check_identity(self, tol=1e-5):
        s = sum(self.weights.get(k, 0.0) * v for k, v in self.terms.items())
        if abs(self.total - s) > tol:
            raise ContractError(f"loss report total {self.total} != weighted sum {s}")
        return True

    def to_dict(self):
        return {"stage": self.stage, "total": self.total, "terms": dict(self.terms)}


def _report(stage, terms, weights):
    total = sum(weights.get(k, 0.0) * v for k, v in terms.items())
    return LossReport(stage=stage, total=total, terms=terms, weights=weights)


def _as_batch_images(y):
    if isinstance(y, Tensor):
        return y
    arr = np.asarray(y, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr)


def _encode_images(bundle, y, eps):
    return md.encode_batch(bundle.e_vis, y, bundle.arch, eps=eps, deterministic=eps is None)


def _encode_signals(bundle, x, eps):
    return md.encode_batch(bundle.e_cog, x, bundle.arch, eps=eps, deterministic=eps is None)


def stage1_loss(bundle, y, eps=None, lambda_rec=1.0, lambda_prior=1.0):
    """Intra-modal criterion: reconstruct stimuli from their own visual codes.

    terms: rec (feature matching y vs y~), prior (visual KL), gan_d on
    (y real, y~ fake), gan_g diagnostic. total = l_rec*rec + l_prior*prior + gan_d.
    """
    y = _as_batch_images(y)
    code = _encode_images(bundle, y, eps)
    recon = bundle.gen(code.sample)
    d_real = md.discriminate_batch(bundle, y)
    d_fake = md.discriminate_batch(bundle, recon)
    terms = {
        "rec": feat_match_rec(d_real, d_fake).item(),
        "prior": kl_prior(code).item() if bundle.arch.variational else 0.0,
        "gan_d": gan_loss_d(d_real, d_fake).item(),
        "gan_g": gan_loss_g(d_fake).item(),
    }
    weights = {"rec": lambda_rec, "prior": lambda_prior, "gan_d": 1.0, "gan_g": 0.0}
    return _report("I", terms, weights)


def stage2_loss(bundle, x, y_teacher, eps=None, lambda_rec=1.0, lambda_prior=1.0):
    """Cross-modal distillation criterion: teacher reconstructions y~ play the
    real side, cognitive reconstructions y' the fake side. The generator is
    frozen in this stage; attempting to run it unfrozen is a contract error."""
    if any(p.requires_grad for p in bundle.gen.parameters()):
        raise ContractError("stage II requires a frozen generator")
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    y_teacher = _as_batch_images(y_teacher)
    code = _encode_signals(bundle, x, eps)
    recon = bundle.gen(code.sample)
    d_real = md.discriminate_batch(bundle, y_teacher)
    d_fake = md.discriminate_batch(bundle, recon)
    terms = {
        "rec": feat_match_rec(d_real, d_fake).item(),
        "prior": kl_prior(code).item() if bundle.arch.variational else 0.0,
        "gan_d": gan_loss_d(d_real, d_fake).item(),
        "gan_g": gan_loss_g(d_fake).item(),
    }
    weights = {"rec": lambda_rec, "prior": lambda_prior, "gan_d": 1.0, "gan_g": 0.0}
    return _report("II", terms, weights)


def stage3_loss(bundle, x, y, eps=None):
    """Fine-tuning criterion: adversarial term only, true stimuli as real."""
    if any(p.requires_grad for p in bundle.e_cog.parameters()):
        raise ContractError("stage III requires a frozen cognitive encoder")
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    y = _as_batch_images(y)
    code = _encode_signals(bundle, x, eps)
    recon = bundle.gen(code.sample)
    d_real = md.discriminate_batch(bundle, y)
    d_fake = md.discriminate_batch(bundle, recon)
    terms = {
        "gan_d": gan_loss_d(d_real, d_fake).item(),
        "gan_g": gan_loss_g(d_fake).item(),
    }
    weights = {"gan_d": 1.0, "gan_g": 0.0}
    return _report("III", terms, weights)
