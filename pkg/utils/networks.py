"""
Networks
--------

1. `SupernetWeights` - the shared generator weights: one parameter block for
   every architectural choice of every cell. Any genotype's child model is a
   slice of it, addressed by stable parameter names.
2. `DiscriminatorNet` - residual down-block discriminator, spectrally
   normalized, grown by one block per generator cell.
3. `ChildModel` - a standalone copy of one genotype's slice.
4. Hinge losses and `gan_train_step`, the alternating D/G update.

Parameter naming (generator):
  latent.{weight,bias}
  cell{s}.deconv.{weight,bias}
  cell{s}.{pre,post}.conv_{a,b}.{weight,bias}
  cell{s}.{pre,post}.norm_{a,b}.{batch,instance}.{gamma,beta}
  cell{s}.shortcut.{weight,bias}
  cell{s}.skip{j}.{weight,bias}, cell{s}.skip{j}.deconv.{weight,bias}
  to_image.{weight,bias}
"""

import math
from dataclasses import dataclass
from typing import Mapping

import structlog
import torch

from utils.errors import StageError
from utils.genotype import CONV_STYLE_NAMES, NORM_MODE_NAMES, CellGene, ConvType, Genotype, NormType, UpsampleType
from utils.tensor_core import (
    GAN_BETAS,
    GradientContext,
    Parameter,
    ParameterStore,
    Tensor,
    adam_update_all,
    avg_pool2,
    conv2d,
    gaussian_init,
    linear,
    normalize,
    spectral_power_iteration,
    transposed_conv2d,
    upsample,
)

log = structlog.get_logger(__name__)

RELU_GAIN = math.sqrt(2.0)
CONV_STYLES = ("pre", "post")
AFFINE_NORMS = ("batch", "instance")
UPSAMPLE_MODE_NAMES = {UpsampleType.BILINEAR: "bilinear", UpsampleType.NEAREST: "nearest"}


@dataclass(frozen=True)
class _Spec:
    shape: tuple[int, ...]
    kind: str  # weight | zeros | ones
    fan_in: int = 1
    gain: float = RELU_GAIN


def _conv_specs(prefix: str, out_ch: int, in_ch: int, k: int, gain: float = RELU_GAIN) -> dict[str, _Spec]:
    return {
        f"{prefix}.weight": _Spec((out_ch, in_ch, k, k), "weight", in_ch * k * k, gain),
        f"{prefix}.bias": _Spec((out_ch,), "zeros"),
    }


def _deconv_specs(prefix: str, channels: int) -> dict[str, _Spec]:
    # effective fan-in of a stride-2, 4x4 transposed convolution is C * 16 / 4
    return {
        f"{prefix}.weight": _Spec((channels, channels, 4, 4), "weight", channels * 4, RELU_GAIN),
        f"{prefix}.bias": _Spec((channels,), "zeros"),
    }


def _cell_specs(s: int, channels: int) -> dict[str, _Spec]:
    specs = {}
    specs.update(_deconv_specs(f"cell{s}.deconv", channels))
    for style in CONV_STYLES:
        for conv in ("a", "b"):
            specs.update(_conv_specs(f"cell{s}.{style}.conv_{conv}", channels, channels, 3))
            for norm in AFFINE_NORMS:
                specs[f"cell{s}.{style}.norm_{conv}.{norm}.gamma"] = _Spec((channels,), "ones")
                specs[f"cell{s}.{style}.norm_{conv}.{norm}.beta"] = _Spec((channels,), "zeros")
    specs.update(_conv_specs(f"cell{s}.shortcut", channels, channels, 1, gain=1.0))
    for j in range(s):
        specs.update(_conv_specs(f"cell{s}.skip{j}", channels, channels, 1, gain=1.0))
        specs.update(_deconv_specs(f"cell{s}.skip{j}.deconv", channels))
    return specs


def _materialize(specs: Mapping[str, _Spec], rng: torch.Generator) -> ParameterStore:
    params = {}
    for name, spec in specs.items():
        if spec.kind == "weight":
            value = gaussian_init(spec.shape, spec.fan_in, spec.gain, rng)
        elif spec.kind == "ones":
            value = torch.ones(spec.shape)
        else:
            value = torch.zeros(spec.shape)
        params[name] = Parameter(name, value)
    return params


def init_std(name: str, supernet: "SupernetWeights") -> float:
    """Target standard deviation the initialization scheme uses for a weight."""
    specs = supernet.parameter_specs()
    spec = specs[name]
    return spec.gain / math.sqrt(spec.fan_in)


# ---------------------------------------------------------------------------
# Generator supernet
# ---------------------------------------------------------------------------

@dataclass
class SupernetWeights:
    params: ParameterStore
    num_cells: int
    max_cells: int
    base_channels: int
    z_dim: int
    base_resolution: int = 4
    image_channels: int = 3

    @property
    def output_resolution(self) -> int:
        return self.base_resolution * 2 ** self.num_cells

    def geometry(self) -> dict:
        return {"base_resolution": self.base_resolution, "base_channels": self.base_channels, "z_dim": self.z_dim}

    def parameter_specs(self) -> dict[str, _Spec]:
        return _supernet_specs(self.num_cells, self.base_channels, self.z_dim, self.base_resolution, self.image_channels)

    def parameter_slice(self, genotype: Genotype) -> ParameterStore:
        self.check_genotype(genotype)
        return {name: self.params[name] for name in required_parameter_names(genotype)}

    def check_genotype(self, genotype: Genotype) -> None:
        if genotype.num_cells != self.num_cells:
            raise StageError(f"genotype has {genotype.num_cells} cells, supernet is at {self.num_cells}")
        if (genotype.base_resolution, genotype.base_channels, genotype.z_dim) != (
            self.base_resolution,
            self.base_channels,
            self.z_dim,
        ):
            raise StageError(f"genotype geometry {genotype.base_resolution, genotype.base_channels, genotype.z_dim} "
                             f"does not match supernet {self.base_resolution, self.base_channels, self.z_dim}")

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.params.values())


def _supernet_specs(num_cells, channels, z_dim, base_resolution, image_channels) -> dict[str, _Spec]:
    specs = {
        "latent.weight": _Spec((base_resolution * base_resolution * channels, z_dim), "weight", z_dim, RELU_GAIN),
        "latent.bias": _Spec((base_resolution * base_resolution * channels,), "zeros"),
    }
    for s in range(num_cells):
        specs.update(_cell_specs(s, channels))
    specs.update(_conv_specs("to_image", image_channels, channels, 1, gain=1.0))
    return specs


def build_supernet(
    num_cells: int,
    base_channels: int,
    z_dim: int,
    rng: torch.Generator,
    base_resolution: int = 4,
    image_channels: int = 3,
    max_cells: int | None = None,
) -> SupernetWeights:
    if num_cells < 1:
        raise ValueError("num_cells must be >= 1")
    max_cells = num_cells if max_cells is None else max_cells
    if max_cells < num_cells:
        raise StageError(f"max_cells {max_cells} < num_cells {num_cells}")
    specs = _supernet_specs(num_cells, base_channels, z_dim, base_resolution, image_channels)
    return SupernetWeights(
        params=_materialize(specs, rng),
        num_cells=num_cells,
        max_cells=max_cells,
        base_channels=base_channels,
        z_dim=z_dim,
        base_resolution=base_resolution,
        image_channels=image_channels,
    )


def required_parameter_names(genotype: Genotype) -> list[str]:
    """Names of the supernet parameters one genotype's child model uses."""
    names = ["latent.weight", "latent.bias"]
    for cell in genotype.cells:
        s = cell.cell_index
        deconv = cell.upsample_type == UpsampleType.DECONV
        if deconv:
            names += [f"cell{s}.deconv.weight", f"cell{s}.deconv.bias"]
        for j in cell.skip_sources():
            names += [f"cell{s}.skip{j}.weight", f"cell{s}.skip{j}.bias"]
            if deconv:
                names += [f"cell{s}.skip{j}.deconv.weight", f"cell{s}.skip{j}.deconv.bias"]
        style = CONV_STYLE_NAMES[cell.conv_type]
        for conv in ("a", "b"):
            names += [f"cell{s}.{style}.conv_{conv}.weight", f"cell{s}.{style}.conv_{conv}.bias"]
            if cell.norm_type != NormType.NONE:
                norm = NORM_MODE_NAMES[cell.norm_type]
                names += [f"cell{s}.{style}.norm_{conv}.{norm}.gamma", f"cell{s}.{style}.norm_{conv}.{norm}.beta"]
        if cell.shortcut:
            names += [f"cell{s}.shortcut.weight", f"cell{s}.shortcut.bias"]
    names += ["to_image.weight", "to_image.bias"]
    return names


def _value(params: ParameterStore, name: str) -> Tensor:
    return params[name].value


def _upsample_times(params: ParameterStore, prefix: str, x: Tensor, mode: UpsampleType, times: int) -> Tensor:
    for _ in range(times):
        if mode == UpsampleType.DECONV:
            x = transposed_conv2d(x, _value(params, f"{prefix}.weight"), _value(params, f"{prefix}.bias"))
        else:
            x = upsample(x, UPSAMPLE_MODE_NAMES[mode])
    return x


def _norm(params, prefix, h, cell: CellGene, training) -> Tensor:
    if cell.norm_type == NormType.NONE:
        return h
    mode = NORM_MODE_NAMES[cell.norm_type]
    return normalize(h, mode, _value(params, f"{prefix}.{mode}.gamma"), _value(params, f"{prefix}.{mode}.beta"), training)


def _conv(params, prefix, h, padding=1) -> Tensor:
    return conv2d(h, _value(params, f"{prefix}.weight"), _value(params, f"{prefix}.bias"), padding=padding)


def _cell_forward(params: ParameterStore, cell: CellGene, x: Tensor, previous: list[Tensor], training: bool) -> Tensor:
    s = cell.cell_index
    up = _upsample_times(params, f"cell{s}.deconv", x, cell.upsample_type, 1)
    h = up
    for j in cell.skip_sources():
        skip = _upsample_times(params, f"cell{s}.skip{j}.deconv", previous[j], cell.upsample_type, s - j)
        h = h + _conv(params, f"cell{s}.skip{j}", skip, padding=0)

    style = CONV_STYLE_NAMES[cell.conv_type]
    base = f"cell{s}.{style}"
    if cell.conv_type == ConvType.PRE:
        h = _conv(params, f"{base}.conv_a", torch.relu(_norm(params, f"{base}.norm_a", h, cell, training)))
        h = _conv(params, f"{base}.conv_b", torch.relu(_norm(params, f"{base}.norm_b", h, cell, training)))
    else:
        h = torch.relu(_norm(params, f"{base}.norm_a", _conv(params, f"{base}.conv_a", h), cell, training))
        h = torch.relu(_norm(params, f"{base}.norm_b", _conv(params, f"{base}.conv_b", h), cell, training))

    if cell.shortcut:
        h = h + _conv(params, f"cell{s}.shortcut", up, padding=0)
    return h


def generate(params: ParameterStore, genotype: Genotype, z: Tensor, training: bool = True) -> Tensor:
    """Images in [-1, 1] for one genotype, reading weights from `params`."""
    n = z.shape[0]
    channels, res = genotype.base_channels, genotype.base_resolution
    x = linear(z, _value(params, "latent.weight"), _value(params, "latent.bias")).view(n, channels, res, res)
    outputs: list[Tensor] = []
    for cell in genotype.cells:
        x = _cell_forward(params, cell, x, outputs, training)
        outputs.append(x)
    return torch.tanh(_conv(params, "to_image", torch.relu(x), padding=0))


def forward_child(generator: "SupernetWeights | ChildModel", genotype: Genotype, z: Tensor, training: bool = True) -> Tensor:
    if isinstance(generator, ChildModel):
        if generator.genotype != genotype:
            raise StageError("child model was extracted for a different genotype")
    else:
        generator.check_genotype(genotype)
    return generate(generator.params, genotype, z, training)


@dataclass
class ChildModel:
    genotype: Genotype
    params: ParameterStore
    image_channels: int = 3

    @property
    def z_dim(self) -> int:
        return self.genotype.z_dim

    @property
    def output_resolution(self) -> int:
        return self.genotype.output_resolution

    def parameter_slice(self, genotype: Genotype) -> ParameterStore:
        if genotype != self.genotype:
            raise StageError("child model was extracted for a different genotype")
        return self.params

    def forward(self, z: Tensor, training: bool = True) -> Tensor:
        return generate(self.params, self.genotype, z, training)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.params.values())


def extract_child(supernet: SupernetWeights, genotype: Genotype) -> ChildModel:
    """Standalone copy of the genotype's slice; later supernet updates do not leak into it."""
    params = {name: Parameter(name, p.value.detach().clone()) for name, p in supernet.parameter_slice(genotype).items()}
    return ChildModel(genotype, params, supernet.image_channels)


# ---------------------------------------------------------------------------
# Discriminator
# ---------------------------------------------------------------------------

def _disc_block_specs(res: int, channels: int) -> dict[str, _Spec]:
    specs = {}
    specs.update(_conv_specs(f"disc.block.r{res}.conv_a", channels, channels, 3))
    specs.update(_conv_specs(f"disc.block.r{res}.conv_b", channels, channels, 3))
    specs.update(_conv_specs(f"disc.block.r{res}.shortcut", channels, channels, 1, gain=1.0))
    return specs


def _from_rgb_specs(res: int, channels: int, image_channels: int) -> dict[str, _Spec]:
    return _conv_specs(f"disc.from_rgb.r{res}", channels, image_channels, 1)


def _unit_vector(size: int, rng: torch.Generator) -> Tensor:
    u = torch.randn(size, generator=rng)
    return u / u.norm().clamp(min=1e-12)


@dataclass
class DiscriminatorNet:
    params: ParameterStore
    u_vectors: dict[str, Tensor]
    num_stages: int
    max_stages: int
    channels: int
    base_resolution: int = 4
    image_channels: int = 3

    @property
    def resolution(self) -> int:
        return self.base_resolution * 2 ** self.num_stages

    def block_resolutions(self) -> list[int]:
        """Input resolutions of the active blocks, highest first."""
        return [self.base_resolution * 2 ** k for k in range(self.num_stages, 0, -1)]

    def active_parameters(self) -> ParameterStore:
        names = [f"disc.from_rgb.r{self.resolution}.weight", f"disc.from_rgb.r{self.resolution}.bias"]
        for res in self.block_resolutions():
            for conv in ("conv_a", "conv_b", "shortcut"):
                names += [f"disc.block.r{res}.{conv}.weight", f"disc.block.r{res}.{conv}.bias"]
        names += ["disc.head.weight", "disc.head.bias"]
        return {name: self.params[name] for name in names}


def _attach_u_vectors(params: ParameterStore, u_vectors: dict[str, Tensor], rng: torch.Generator) -> None:
    for name, param in params.items():
        if name.endswith(".weight") and name not in u_vectors:
            u_vectors[name] = _unit_vector(param.shape[0], rng)


def build_discriminator(
    num_stages: int,
    channels: int,
    rng: torch.Generator,
    base_resolution: int = 4,
    image_channels: int = 3,
    max_stages: int | None = None,
) -> DiscriminatorNet:
    max_stages = num_stages if max_stages is None else max_stages
    specs = {}
    for k in range(num_stages, 0, -1):
        specs.update(_disc_block_specs(base_resolution * 2 ** k, channels))
    specs.update(_from_rgb_specs(base_resolution * 2 ** num_stages, channels, image_channels))
    specs["disc.head.weight"] = _Spec((1, channels), "weight", channels, 1.0)
    specs["disc.head.bias"] = _Spec((1,), "zeros")
    params = _materialize(specs, rng)
    u_vectors: dict[str, Tensor] = {}
    _attach_u_vectors(params, u_vectors, rng)
    return DiscriminatorNet(params, u_vectors, num_stages, max_stages, channels, base_resolution, image_channels)


def _sn_weight(disc: DiscriminatorNet, name: str, training: bool) -> Tensor:
    weight = disc.params[name].value
    iters = 1 if training else 0
    sigma, u_next, _ = spectral_power_iteration(weight.reshape(weight.shape[0], -1), disc.u_vectors[name], iters)
    if training:
        disc.u_vectors[name] = u_next
    return weight / sigma


def _sn_conv(disc, prefix, h, training, padding=1) -> Tensor:
    return conv2d(h, _sn_weight(disc, f"{prefix}.weight", training), disc.params[f"{prefix}.bias"].value, padding=padding)


def discriminator_forward(disc: DiscriminatorNet, images: Tensor, training: bool = True) -> Tensor:
    """One score per image. Training mode advances each u vector by one power iteration."""
    if images.dim() != 4 or images.shape[2] != disc.resolution or images.shape[3] != disc.resolution:
        raise StageError(f"discriminator at stage {disc.num_stages} takes {disc.resolution}x{disc.resolution} "
                         f"images, got {tuple(images.shape[2:])}")
    h = _sn_conv(disc, f"disc.from_rgb.r{disc.resolution}", images, training, padding=0)
    for res in disc.block_resolutions():
        prefix = f"disc.block.r{res}"
        y = _sn_conv(disc, f"{prefix}.conv_a", torch.relu(h), training)
        y = _sn_conv(disc, f"{prefix}.conv_b", torch.relu(y), training)
        h = avg_pool2(y) + avg_pool2(_sn_conv(disc, f"{prefix}.shortcut", h, training, padding=0))
    features = torch.relu(h).sum(dim=(2, 3))
    head = linear(features, _sn_weight(disc, "disc.head.weight", training), disc.params["disc.head.bias"].value)
    return head.squeeze(1)


# ---------------------------------------------------------------------------
# Growth and reset
# ---------------------------------------------------------------------------

def grow(
    supernet: SupernetWeights, disc: DiscriminatorNet, rng: torch.Generator
) -> tuple[SupernetWeights, DiscriminatorNet]:
    """Append one generator cell and prepend one discriminator block.

    Existing Parameter objects are shared, not copied, so their values are
    preserved exactly.
    """
    if supernet.num_cells >= supernet.max_cells or disc.num_stages >= disc.max_stages:
        raise StageError(f"cannot grow beyond {supernet.max_cells} cells")
    if supernet.num_cells != disc.num_stages:
        raise StageError(f"generator has {supernet.num_cells} cells but discriminator {disc.num_stages} stages")

    new_cell = _materialize(_cell_specs(supernet.num_cells, supernet.base_channels), rng)
    g_params = dict(supernet.params)
    g_params.update(new_cell)
    grown_g = SupernetWeights(
        params=g_params,
        num_cells=supernet.num_cells + 1,
        max_cells=supernet.max_cells,
        base_channels=supernet.base_channels,
        z_dim=supernet.z_dim,
        base_resolution=supernet.base_resolution,
        image_channels=supernet.image_channels,
    )

    new_res = disc.resolution * 2
    specs = _disc_block_specs(new_res, disc.channels)
    specs.update(_from_rgb_specs(new_res, disc.channels, disc.image_channels))
    d_params = dict(disc.params)
    d_params.update(_materialize(specs, rng))
    u_vectors = dict(disc.u_vectors)
    _attach_u_vectors(d_params, u_vectors, rng)
    grown_d = DiscriminatorNet(
        d_params, u_vectors, disc.num_stages + 1, disc.max_stages, disc.channels, disc.base_resolution,
        disc.image_channels,
    )
    log.info("[networks] grown", cells=grown_g.num_cells, resolution=grown_d.resolution)
    return grown_g, grown_d


def reinitialize(
    supernet: SupernetWeights, disc: DiscriminatorNet, rng: torch.Generator
) -> tuple[SupernetWeights, DiscriminatorNet]:
    """Fresh weights (and optimizer state) at the current stage."""
    g = build_supernet(
        supernet.num_cells, supernet.base_channels, supernet.z_dim, rng, supernet.base_resolution,
        supernet.image_channels, supernet.max_cells,
    )
    d = build_discriminator(disc.num_stages, disc.channels, rng, disc.base_resolution, disc.image_channels, disc.max_stages)
    return g, d


# ---------------------------------------------------------------------------
# Losses and the adversarial step
# ---------------------------------------------------------------------------

def hinge_d_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("hinge_d_loss needs non-empty score tensors")
    return torch.relu(1.0 - real_scores).mean() + torch.relu(1.0 + fake_scores).mean()


def hinge_g_loss(fake_scores: Tensor) -> Tensor:
    if fake_scores.numel() == 0:
        raise ValueError("hinge_g_loss needs a non-empty score tensor")
    return -fake_scores.mean()


@dataclass(frozen=True)
class AdversarialHParams:
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    betas: tuple[float, float] = GAN_BETAS
    g_batch_size: int = 128


def gan_train_step(
    generator: "SupernetWeights | ChildModel",
    disc: DiscriminatorNet,
    genotype: Genotype,
    real_batch: Tensor,
    rng: torch.Generator,
    hparams: AdversarialHParams = AdversarialHParams(),
) -> tuple[float, float]:
    """
    1) One discriminator update on the real batch plus as many fakes.
    2) One generator update through the genotype's path only; parameters
       outside its slice receive no gradient and no optimizer step.
    Returns (d_loss, g_loss) as Python floats.
    """
    if real_batch.shape[2] != disc.resolution:
        raise StageError(f"real batch resolution {real_batch.shape[2]} != discriminator resolution {disc.resolution}")
    z_dim = genotype.z_dim
    n_real = real_batch.shape[0]

    z_d = torch.randn(n_real, z_dim, generator=rng)
    with torch.no_grad():
        fake = forward_child(generator, genotype, z_d, training=True)
    d_params = disc.active_parameters()
    with GradientContext(d_params.values()) as ctx:
        scores = discriminator_forward(disc, torch.cat([real_batch, fake], dim=0), training=True)
        d_loss = hinge_d_loss(scores[:n_real], scores[n_real:])
        ctx.backward(d_loss)
    adam_update_all(d_params.values(), hparams.lr_d, hparams.betas)

    z_g = torch.randn(hparams.g_batch_size, z_dim, generator=rng)
    g_params = generator.parameter_slice(genotype)
    with GradientContext(g_params.values()) as ctx:
        fake = forward_child(generator, genotype, z_g, training=True)
        g_loss = hinge_g_loss(discriminator_forward(disc, fake, training=False))
        ctx.backward(g_loss)
    adam_update_all(g_params.values(), hparams.lr_g, hparams.betas)
    return float(d_loss.detach()), float(g_loss.detach())
