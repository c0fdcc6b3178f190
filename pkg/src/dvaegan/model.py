"""The four networks (cognitive encoder, visual encoder, generator,
discriminator) plus latent reparameterization.

Both encoders emit 2*d_z values interpreted as mean || log-variance, so they
can share the generator. The generator mirrors the visual encoder's conv
stack with transposed convolutions whose kernel sizes are derived to invert
each spatial step exactly (odd intermediate extents need kernel 5).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ContractError, DimensionError, ValidationError


@dataclass(frozen=True)
class ArchConfig:
    d_x: int
    d_z: int = 64
    image_hw: int = 100
    image_channels: int = 1
    conv_channels: tuple = (32, 64, 128)
    kernel: int = 4
    stride: int = 2
    pad: int = 1
    cog_hidden: int = 512
    disc_alpha: float = 0.2
    variational: bool = True

    def to_dict(self):
        d = self.__dict__.copy()
        d["conv_channels"] = list(self.conv_channels)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        return ArchConfig(**d)


def conv_spatial_chain(arch):
    """Spatial extents [input, after conv1, after conv2, ...]."""
    sizes = [arch.image_hw]
    for _ in arch.conv_channels:
        sizes.append((sizes[-1] + 2 * arch.pad - arch.kernel) // arch.stride + 1)
    if sizes[-1] < 1:
        raise DimensionError(f"image {arch.image_hw} too small for conv stack")
    return sizes


def _deconv_kernel(source, target, stride, pad):
    # solve target = (source - 1) * stride - 2 * pad + k
    k = target - (source - 1) * stride + 2 * pad
    if k < 1:
        raise DimensionError(f"no transposed kernel maps {source} -> {target}")
    return k


def build_cognitive_encoder(arch, dtype=np.float32):
    return nn.Sequential(
        [
            nn.Dense(arch.d_x, arch.cog_hidden, dtype),
            nn.Activation("relu"),
            nn.Dense(arch.cog_hidden, 2 * arch.d_z, dtype),
        ],
        input_shape=(arch.d_x,),
    )


def build_visual_encoder(arch, dtype=np.float32):
    sizes = conv_spatial_chain(arch)
    chans = (arch.image_channels,) + tuple(arch.conv_channels)
    layers = []
    for c_in, c_out in zip(chans[:-1], chans[1:]):
        layers.append(nn.Conv(c_in, c_out, arch.kernel, arch.stride, arch.pad, dtype))
        layers.append(nn.Activation("relu"))
    flat = chans[-1] * sizes[-1] * sizes[-1]
    layers.append(nn.Reshape((flat,)))
    layers.append(nn.Dense(flat, arch.cog_hidden, dtype))
    layers.append(nn.Activation("relu"))
    layers.append(nn.Dense(arch.cog_hidden, 2 * arch.d_z, dtype))
    return nn.Sequential(layers, input_shape=(arch.image_channels, arch.image_hw, arch.image_hw))


def build_generator(arch, dtype=np.float32):
    sizes = conv_spatial_chain(arch)
    chans = (arch.image_channels,) + tuple(arch.conv_channels)
    s0 = sizes[-1]
    layers = [
        nn.Dense(arch.d_z, chans[-1] * s0 * s0, dtype),
        nn.Activation("relu"),
        nn.Reshape((chans[-1], s0, s0)),
    ]
    for i in range(len(arch.conv_channels), 0, -1):
        k = _deconv_kernel(sizes[i], sizes[i - 1], arch.stride, arch.pad)
        layers.append(nn.Deconv(chans[i], chans[i - 1], k, arch.stride, arch.pad, dtype))
        layers.append(nn.Activation("relu") if i > 1 else nn.Activation("tanh01"))
    return nn.Sequential(layers, input_shape=(arch.d_z,))


def build_discriminator(arch, dtype=np.float32):
    """Returns (net, feature_index): feature_index marks the activation of the
    last hidden conv layer, used by the feature-matching reconstruction loss."""
    sizes = conv_spatial_chain(arch)
    chans = (arch.image_channels,) + tuple(arch.conv_channels)
    layers = []
    for c_in, c_out in zip(chans[:-1], chans[1:]):
        layers.append(nn.Conv(c_in, c_out, arch.kernel, arch.stride, arch.pad, dtype))
        layers.append(nn.Activation("leaky-relu", arch.disc_alpha))
    feature_index = len(layers) - 1
    flat = chans[-1] * sizes[-1] * sizes[-1]
    layers.append(nn.Reshape((flat,)))
    layers.append(nn.Dense(flat, 1, dtype))
    layers.append(nn.Activation("sigmoid"))
    net = nn.Sequential(layers, input_shape=(arch.image_channels, arch.image_hw, arch.image_hw))
    return net, feature_index


PROB_EPS = 1e-6  # probabilities clamped to [PROB_EPS, 1 - PROB_EPS] before any log


@dataclass
class CognitiveSignal:
    """One high-dimensional measured activation vector, z-scored per dimension."""

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if not np.isfinite(self.values).all():
            raise ValidationError("cognitive signal contains non-finite values")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
            if self.mask.shape != self.values.shape:
                raise ValidationError(
                    f"mask length {self.mask.size} != signal length {self.values.size}"
                )

    @property
    def dim(self):
        return self.values.size

    def masked_values(self):
        if self.mask is None:
            return self.values
        return np.where(self.mask, self.values, 0.0).astype(np.float32)


@dataclass
class StimulusImage:
    """C x H x W pixels in [0, 1] with a stable identifier."""

    pixels: np.ndarray
    id: str

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[None]
        if self.pixels.ndim != 3:
            raise ValidationError(f"image must be CxHxW, got shape {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValidationError("pixels outside [0, 1]")


@dataclass
class LatentCode:
    """Gaussian posterior parameters plus the drawn (reparameterized) sample."""

    mu: Tensor
    log_var: Tensor
    sample: Tensor
    eps: np.ndarray | None = None


@dataclass
class DiscriminatorOutput:
    prob: Tensor  # clamped to [PROB_EPS, 1 - PROB_EPS]
    features: Tensor  # activations of the configured hidden layer


@dataclass
class ModelBundle:
    e_cog: nn.Sequential
    e_vis: nn.Sequential
    gen: nn.Sequential
    disc: nn.Sequential
    arch: ArchConfig
    disc_feature_index: int = field(default=0)

    def named_parameters(self):
        out = []
        for name, net in self.networks().items():
            out.extend(net.named_parameters(f"{name}/"))
        return out

    def networks(self):
        return {"e_cog": self.e_cog, "e_vis": self.e_vis, "gen": self.gen, "disc": self.disc}

    def parameter_count(self):
        return sum(net.parameter_count() for net in self.networks().values())


def build_bundle(arch, seed, dtype=np.float32):
    seeds = np.random.SeedSequence(seed).spawn(4)
    e_cog = build_cognitive_encoder(arch, dtype)
    e_vis = build_visual_encoder(arch, dtype)
    gen = build_generator(arch, dtype)
    disc, feature_index = build_discriminator(arch, dtype)
    for net, s in zip((e_cog, e_vis, gen, disc), seeds):
        net.init_params(s, dtype)
    return ModelBundle(e_cog, e_vis, gen, disc, arch, feature_index)


def reparameterize(mu, log_var, eps):
    """sample = mu + exp(log_var / 2) * eps, differentiable in mu and log_var."""
    eps_t = Tensor(np.asarray(eps, dtype=mu.dtype))
    return ad.add(mu, ad.mul(ad.texp(ad.mul(log_var, 0.5)), eps_t))


def encode_batch(net, x, arch, eps=None, deterministic=False, rng=None):
    """Run an encoder on a batched tensor and build the latent code.

    eps=None with deterministic=True collapses the sample onto the mean;
    otherwise eps is drawn from rng. Non-variational configurations always
    use the mean and ignore the log-variance head.
    """
    out = net(x)
    mu = ad.narrow(out, 1, 0, arch.d_z)
    log_var = ad.narrow(out, 1, arch.d_z, arch.d_z)
    if not arch.variational or (eps is None and deterministic):
        return LatentCode(mu, log_var, mu, eps=None)
    if eps is None:
        if rng is None:
            raise ContractError("stochastic encode needs eps or an rng")
        eps = rng.standard_normal(mu.shape)
    eps = np.asarray(eps, dtype=mu.dtype)
    if eps.shape != mu.shape:
        if eps.size != mu.data.size:
            raise ContractError(f"eps shape {eps.shape} incompatible with {mu.shape}")
        eps = eps.reshape(mu.shape)
    return LatentCode(mu, log_var, reparameterize(mu, log_var, eps), eps=eps)


def _flatten_code(code):
    d = code.mu.shape[-1]
    return LatentCode(
        ad.reshape(code.mu, (d,)),
        ad.reshape(code.log_var, (d,)),
        ad.reshape(code.sample, (d,)),
        eps=None if code.eps is None else code.eps.reshape(-1),
    )


def encode_cognitive(bundle, signal, eps=None, deterministic=False, rng=None):
    """Encode one cognitive signal into a latent code (masked voxels zeroed)."""
    values = signal.masked_values() if isinstance(signal, CognitiveSignal) else np.asarray(signal, dtype=np.float32)
    if values.size != bundle.arch.d_x:
        raise ContractError(f"signal dim {values.size} != d_x {bundle.arch.d_x}")
    x = Tensor(values.reshape(1, -1))
    if eps is not None:
        eps = np.asarray(eps, dtype=np.float32).reshape(1, -1)
        if eps.size != bundle.arch.d_z:
            raise ContractError(f"eps length {eps.size} != d_z {bundle.arch.d_z}")
    code = encode_batch(bundle.e_cog, x, bundle.arch, eps=eps, deterministic=deterministic, rng=rng)
    return _flatten_code(code)


def encode_visual(bundle, image, eps=None, deterministic=False, rng=None):
    """Encode one stimulus image into a latent code."""
    pixels = image.pixels if isinstance(image, StimulusImage) else np.asarray(image, dtype=np.float32)
    expected = (bundle.arch.image_channels, bundle.arch.image_hw, bundle.arch.image_hw)
    if tuple(pixels.shape) != expected:
        raise ContractError(f"image shape {pixels.shape} != {expected}")
    y = Tensor(pixels[None])
    if eps is not None:
        eps = np.asarray(eps, dtype=np.float32).reshape(1, -1)
        if eps.size != bundle.arch.d_z:
            raise ContractError(f"eps length {eps.size} != d_z {bundle.arch.d_z}")
    code = encode_batch(bundle.e_vis, y, bundle.arch, eps=eps, deterministic=deterministic, rng=rng)
    return _flatten_code(code)


def generate_batch(bundle, z):
    return bundle.gen(z)


def generate(bundle, z, image_id="generated"):
    """Decode one latent vector to a stimulus image in [0, 1]."""
    zd = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float32)
    zd = zd.reshape(-1)
    if zd.size != bundle.arch.d_z:
        raise ContractError(f"latent dim {zd.size} != d_z {bundle.arch.d_z}")
    out = bundle.gen(Tensor(zd.reshape(1, -1)))
    return StimulusImage(pixels=out.data[0], id=image_id)


def discriminate_batch(bundle, y):
    raw, features = bundle.disc.forward_with_capture(y, bundle.disc_feature_index)
    prob = ad.clip(raw, PROB_EPS, 1.0 - PROB_EPS)
    return DiscriminatorOutput(prob=prob, features=features)


def discriminate(bundle, image):
    """Score one image: probability of being a real stimulus, plus hidden features."""
    pixels = image.pixels if isinstance(image, StimulusImage) else np.asarray(image, dtype=np.float32)
    out = discriminate_batch(bundle, Tensor(pixels[None]))
    return DiscriminatorOutput(
        prob=ad.reshape(out.prob, ()),
        features=ad.reshape(out.features, out.features.shape[1:]),
    )


def reconstruct_batch(bundle, signals):
    """Deterministic test-time path: latent = posterior mean, no sampling."""
    x = Tensor(np.asarray(signals, dtype=np.float32))
    code = encode_batch(bundle.e_cog, x, bundle.arch, deterministic=True)
    return bundle.gen(code.sample).data


def clone_arch_with(arch, **kwargs):
    return replace(arch, **kwargs)
