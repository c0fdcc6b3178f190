"""Adam optimization and the staged training schedule.

Stage I learns the visual encoder, generator and discriminator on stimuli
alone (intra-modal); stage II freezes the generator and distills the visual
posterior into the cognitive encoder using the stage-I reconstructions as
the adversary's real side; stage III freezes the cognitive encoder and
fine-tunes generator and discriminator against the true stimuli at a reduced
learning rate. Each step updates the discriminator on the stage's
(real, fake) pair first, then the stage's generator-side parameters on a
fresh forward pass. All randomness derives from (seed, stage, epoch), so a
run resumed from any stage checkpoint is bit-identical to an uninterrupted
one.
"""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, nn
from . import model as md
from .autodiff import Tape, Tensor
from .data import tensor_from_bytes, tensor_to_bytes
from .errors import ContractError, TrainingAborted, ValidationError

ABLATIONS = ("full", "vae-gan", "cnn-encoder")


@dataclass
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_rate: float = 0.98
    batch_size: int = 32
    epochs: tuple = (10, 10, 5)
    seed: int = 0
    ablation: str = "full"
    stage3_lr_scale: float = 0.1
    lambda_rec: float = 1.0
    lambda_prior: float = 1.0
    reinit_disc_per_stage: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError("lr must be > 0")
        if not (0 < self.decay_rate <= 1):
            raise ValidationError("decay_rate must be in (0, 1]")
        self.epochs = tuple(int(e) for e in self.epochs)
        if len(self.epochs) != 3 or any(e < 0 for e in self.epochs):
            raise ValidationError("epochs must be three counts >= 0")
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"ablation must be one of {ABLATIONS}")

    def to_dict(self):
        d = self.__dict__.copy()
        d["epochs"] = list(self.epochs)
        return d


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def adam_step(params, grads, state, lr_t, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not np.isfinite(g).all():
            raise TrainingAborted(
                f"non-finite gradient for parameter of shape {p.data.shape}"
            )
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= lr_t * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState(
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    def step(self, lr_t):
        grads = []
        for p in self.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            grads.append(p.grad)
        adam_step(self.params, grads, self.state, lr_t, self.beta1, self.beta2, self.eps)


@dataclass
class StageLog:
    stage: int
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    skipped: bool = False
    baseline_gap: float | None = None


@dataclass
class TeacherCache:
    """Deterministic stage-I teacher outputs for every training pair."""

    recon: np.ndarray  # (n_train, C, H, W), generated from the posterior mean
    mu_star: np.ndarray  # (n_train, d_z)


@dataclass
class TrainLog:
    stages: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    log_path: str | None = None


def _epoch_rng(cfg, stage, epoch):
    return np.random.default_rng(np.random.SeedSequence((cfg.seed, stage, epoch)))


def _check_finite(value, stage, epoch, step, name):
    if not math.isfinite(value):
        raise TrainingAborted(
            f"non-finite {name} loss at stage {stage}, epoch {epoch}, step {step}: {value}"
        )
    return value


def _assert_frozen_zero(nets, stage):
    for net in nets:
        for p in net.parameters():
            if p.requires_grad:
                raise ContractError(f"stage {stage}: frozen parameter is trainable")
            if p.grad is not None and p.grad.any():
                raise ContractError(f"stage {stage}: frozen parameter received gradient")


def _set_stage_freeze(bundle, trainable_nets):
    for name, net in bundle.networks().items():
        nn.set_requires_grad(net, name in trainable_nets)
        nn.zero_grads(net.parameters())  # drop any gradient left by a prior stage


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _draw_eps(rng, shape, variational):
    return rng.standard_normal(shape).astype(np.float32) if variational else None


def _encode_for_training(bundle, net, x, eps):
    return md.encode_batch(net, x, bundle.arch, eps=eps, deterministic=eps is None)


class _StepWriter:
    def __init__(self, path):
        self.path = Path(path) if path else None
        self._fh = open(self.path, "a", encoding="utf-8") if self.path else None

    def write(self, record):
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()


def _run_adversarial_stage(
    bundle,
    dataset,
    cfg,
    *,
    stage,
    n_epochs,
    encoder_name,
    real_source,
    use_rec_prior,
    lr_scale=1.0,
    teacher=None,
    writer=None,
    step_offset=0,
):
    """Shared step loop. real_source(batch) gives the adversary's real images;
    the fake side is always gen(encoder(batch inputs))."""
    arch = bundle.arch
    trainable = {encoder_name, "disc"} if stage == 2 else {encoder_name, "gen", "disc"}
    if stage == 3:
        trainable = {"gen", "disc"}
    _set_stage_freeze(bundle, trainable)
    frozen_nets = [net for name, net in bundle.networks().items() if name not in trainable]
    encoder = bundle.networks()[encoder_name]
    g_side = [encoder] if stage == 2 else ([bundle.gen] if stage == 3 else [encoder, bundle.gen])
    g_params = [p for net in g_side for p in net.parameters()]
    adam_g = Adam(g_params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    adam_d = Adam(bundle.disc.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
    signals = dataset.signals(dataset.train_idx)
    images = dataset.images(dataset.train_idx)
    log = StageLog(stage=stage)
    if teacher is not None:
        log.baseline_gap = latent_gap(bundle, dataset, teacher)
        if writer:
            writer.write({"stage": stage, "epoch": -1, "latent_gap": log.baseline_gap})
    step = step_offset
    for epoch in range(n_epochs):
        lr_t = cfg.lr * cfg.decay_rate**epoch * lr_scale
        rng = _epoch_rng(cfg, stage, epoch)
        epoch_terms = []
        for batch in _batches(len(dataset.train_idx), cfg.batch_size, rng):
            x_in = images[batch] if encoder_name == "e_vis" else signals[batch]
            y_real = real_source(batch)
            x_t = Tensor(x_in)
            y_t = Tensor(y_real)

            # discriminator update on (real, fake); fake is generated tape-free
            eps = _draw_eps(rng, (len(batch), arch.d_z), arch.variational)
            fake = bundle.gen(_encode_for_training(bundle, encoder, x_t, eps).sample)
            with Tape() as tape:
                d_real = md.discriminate_batch(bundle, y_t)
                d_fake = md.discriminate_batch(bundle, Tensor(fake.data))
                d_loss = losses.gan_loss_d(d_real, d_fake)
                nn.zero_grads(bundle.disc.parameters())
                tape.backward(d_loss)
            gan_d = _check_finite(d_loss.item(), stage, epoch, step, "gan_d")
            adam_d.step(lr_t)

            # generator-side update on a fresh forward
            eps = _draw_eps(rng, (len(batch), arch.d_z), arch.variational)
            target = md.discriminate_batch(bundle, y_t) if use_rec_prior else None
            with Tape() as tape:
                code = _encode_for_training(bundle, encoder, x_t, eps)
                recon = bundle.gen(code.sample)
                d_out = md.discriminate_batch(bundle, recon)
                g_obj = losses.gan_loss_g(d_out)
                gan_g = g_obj.item()
                rec_val = prior_val = 0.0
                if use_rec_prior:
                    rec = losses.feat_match_rec(target, d_out)
                    rec_val = rec.item()
                    g_obj = g_obj + rec * cfg.lambda_rec
                    if arch.variational:
                        prior = losses.kl_prior(code)
                        prior_val = prior.item()
                        g_obj = g_obj + prior * cfg.lambda_prior
                _check_finite(gan_g, stage, epoch, step, "gan_g")
                _check_finite(rec_val, stage, epoch, step, "rec")
                _check_finite(prior_val, stage, epoch, step, "prior")
                nn.zero_grads(g_params)
                nn.zero_grads(bundle.disc.parameters())
                tape.backward(g_obj)
            adam_g.step(lr_t)
            _assert_frozen_zero(frozen_nets, stage)

            step += 1
            record = {
                "stage": stage,
                "epoch": epoch,
                "step": step,
                "lr_t": lr_t,
                "rec": rec_val,
                "prior": prior_val,
                "gan_d": gan_d,
                "gan_g": gan_g,
            }
            log.steps.append(record)
            epoch_terms.append(record)
            if writer:
                writer.write(record)
        summary = {
            "stage": stage,
            "epoch": epoch,
            "lr_t": lr_t,
            "steps": len(epoch_terms),
        }
        for key in ("rec", "prior", "gan_d", "gan_g"):
            summary[key] = float(np.mean([r[key] for r in epoch_terms])) if epoch_terms else 0.0
        if teacher is not None:
            summary["latent_gap"] = latent_gap(bundle, dataset, teacher)
            if writer:
                writer.write({"stage": stage, "epoch": epoch, "latent_gap": summary["latent_gap"]})
        log.epochs.append(summary)
    return log, step


def build_teacher_cache(bundle, dataset, batch_size=64):
    """Deterministic teacher outputs (eps = 0) for every training pair."""
    images = dataset.images(dataset.train_idx)
    recon = np.empty_like(images)
    mu_star = np.empty((len(images), bundle.arch.d_z), dtype=np.float32)
    for start in range(0, len(images), batch_size):
        y = Tensor(images[start : start + batch_size])
        code = md.encode_batch(bundle.e_vis, y, bundle.arch, deterministic=True)
        recon[start : start + batch_size] = bundle.gen(code.mu).data
        mu_star[start : start + batch_size] = code.mu.data
    return TeacherCache(recon=recon, mu_star=mu_star)


def latent_gap(bundle, dataset, cache, batch_size=64):
    """Mean squared distance between cognitive and teacher posterior means."""
    signals = dataset.signals(dataset.train_idx)
    total = 0.0
    for start in range(0, len(signals), batch_size):
        x = Tensor(signals[start : start + batch_size])
        code = md.encode_batch(bundle.e_cog, x, bundle.arch, deterministic=True)
        diff = code.mu.data - cache.mu_star[start : start + batch_size]
        total += float((diff * diff).sum(axis=1).sum())
    return total / len(signals)


def run_stage1(bundle, dataset, cfg, writer=None, step_offset=0):
    """Intra-modal stage; under the vae-gan ablation the cognitive encoder
    trains directly against the true stimuli instead (no teacher exists)."""
    if dataset.images().shape[1:] != (
        bundle.arch.image_channels,
        bundle.arch.image_hw,
        bundle.arch.image_hw,
    ):
        raise ContractError("dataset images do not match the architecture")
    encoder_name = "e_cog" if cfg.ablation == "vae-gan" else "e_vis"
    images = dataset.images(dataset.train_idx)
    log, step = _run_adversarial_stage(
        bundle,
        dataset,
        cfg,
        stage=1,
        n_epochs=cfg.epochs[0],
        encoder_name=encoder_name,
        real_source=lambda batch: images[batch],
        use_rec_prior=True,
        writer=writer,
        step_offset=step_offset,
    )
    cache = None
    if cfg.ablation != "vae-gan":
        cache = build_teacher_cache(bundle, dataset)
    return log, step, cache


def run_stage2(bundle, dataset, cfg, cache, writer=None, step_offset=0):
    """Cross-modal distillation; requires the stage-I teacher cache."""
    if cfg.ablation == "vae-gan":
        return StageLog(stage=2, skipped=True), step_offset
    if cache is None:
        raise ContractError("stage II needs the stage-I teacher cache")
    if cfg.reinit_disc_per_stage:
        bundle.disc.init_params(np.random.SeedSequence((cfg.seed, 2, 0xD15C)))
    log, step = _run_adversarial_stage(
        bundle,
        dataset,
        cfg,
        stage=2,
        n_epochs=cfg.epochs[1],
        encoder_name="e_cog",
        real_source=lambda batch: cache.recon[batch],
        use_rec_prior=True,
        teacher=cache,
        writer=writer,
        step_offset=step_offset,
    )
    return log, step


def run_stage3(bundle, dataset, cfg, writer=None, step_offset=0):
    """Adversarial fine-tune of generator and discriminator, encoder frozen."""
    if cfg.reinit_disc_per_stage:
        bundle.disc.init_params(np.random.SeedSequence((cfg.seed, 3, 0xD15C)))
    images = dataset.images(dataset.train_idx)
    log, step = _run_adversarial_stage(
        bundle,
        dataset,
        cfg,
        stage=3,
        n_epochs=cfg.epochs[2],
        encoder_name="e_cog",
        real_source=lambda batch: images[batch],
        use_rec_prior=False,
        lr_scale=cfg.stage3_lr_scale,
        writer=writer,
        step_offset=step_offset,
    )
    return log, step


def default_arch(dataset, cfg, d_z=64, cog_hidden=512, conv_channels=(32, 64, 128)):
    c, h, w = dataset.image_shape
    if h != w:
        raise ValidationError("images must be square")
    return md.ArchConfig(
        d_x=dataset.d_x,
        d_z=d_z,
        image_hw=h,
        image_channels=c,
        conv_channels=tuple(conv_channels),
        cog_hidden=cog_hidden,
        variational=cfg.ablation != "cnn-encoder",
    )


def train_full(dataset, cfg, arch=None, out_dir=None, bundle=None, start_stage=1, cache=None, start_step=0):
    """Run stages start_stage..3, checkpointing after each stage. Resuming
    from a stage checkpoint with the same config and seed is bit-identical to
    an uninterrupted run (pass the checkpoint's step as start_step)."""
    if arch is None:
        arch = default_arch(dataset, cfg)
    if arch.variational and cfg.ablation == "cnn-encoder":
        raise ValidationError("cnn-encoder ablation needs a non-variational arch")
    if bundle is None:
        bundle = md.build_bundle(arch, seed=cfg.seed)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    writer = _StepWriter(out / "train_log.jsonl" if out else None)
    tlog = TrainLog(log_path=str(writer.path) if out else None)
    step = int(start_step)
    try:
        if start_stage <= 1:
            log1, step, cache = run_stage1(bundle, dataset, cfg, writer, step)
            tlog.stages[1] = log1
            if out:
                tlog.checkpoints[1] = str(save_checkpoint(out / "stage1.ckpt", bundle, 1, step, cfg.seed))
        if start_stage <= 2:
            if cache is None and cfg.ablation != "vae-gan":
                cache = build_teacher_cache(bundle, dataset)
            log2, step = run_stage2(bundle, dataset, cfg, cache, writer, step)
            tlog.stages[2] = log2
            if out and not log2.skipped:
                tlog.checkpoints[2] = str(save_checkpoint(out / "stage2.ckpt", bundle, 2, step, cfg.seed))
        log3, step = run_stage3(bundle, dataset, cfg, writer, step)
        tlog.stages[3] = log3
        if out:
            tlog.checkpoints[3] = str(save_checkpoint(out / "stage3.ckpt", bundle, 3, step, cfg.seed))
    finally:
        writer.close()
    return bundle, tlog


# ---------------------------------------------------------------------------
# checkpoints: zip of one DVGT entry per parameter plus a JSON meta document


def save_checkpoint(path, bundle, stage, step, seed):
    path = Path(path)
    meta = {
        "arch": bundle.arch.to_dict(),
        "stage": int(stage),
        "step": int(step),
        "seed": int(seed),
    }
    entries = [("meta.json", json.dumps(meta, sort_keys=True).encode())]
    for name, p in sorted(bundle.named_parameters()):
        entries.append((f"params/{name}.dvgt", tensor_to_bytes(p)))
    # fixed timestamps + sorted members keep reruns byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, blob in entries:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, blob)
    return path


def load_checkpoint(path, only=None):
    """Rebuild a bundle from a checkpoint. only=('e_cog', 'gen') restricts the
    networks whose parameters are read; the rest keep their zero init and the
    returned report lists exactly what was loaded."""
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json"))
        arch = md.ArchConfig.from_dict(meta["arch"])
        e_cog = md.build_cognitive_encoder(arch)
        e_vis = md.build_visual_encoder(arch)
        gen = md.build_generator(arch)
        disc, feature_index = md.build_discriminator(arch)
        bundle = md.ModelBundle(e_cog, e_vis, gen, disc, arch, feature_index)
        wanted = set(only) if only is not None else set(bundle.networks())
        unknown = wanted - set(bundle.networks())
        if unknown:
            raise ValidationError(f"unknown networks requested: {sorted(unknown)}")
        report = {name: 0 for name in sorted(wanted)}
        for name, p in bundle.named_parameters():
            net_name = name.split("/")[0]
            if net_name not in wanted:
                continue
            t = tensor_from_bytes(zf.read(f"params/{name}.dvgt"), label=name)
            if t.data.shape != p.data.shape:
                raise ValidationError(
                    f"checkpoint tensor {name} has shape {t.data.shape}, expected {p.data.shape}"
                )
            p.data[...] = t.data
            report[net_name] += t.data.nbytes
    return bundle, meta, report
