"""
Tensor core
-----------

The numerical substrate every network in the engine is built from:
1. `Parameter` - a float32 leaf tensor plus its gradient and Adam moments.
2. `GradientContext` - reverse-mode differentiation of a scalar loss into
   the `gradient` field of every participating Parameter.
3. Shape-checked forward kernels (conv, deconv, upsample, normalization,
   LSTM step, spectral power iteration) on top of torch.
4. `adam_step` - explicit Adam update with bias correction.

All ops are pure functions over caller-owned tensors. Randomness only
enters through an explicit `torch.Generator`.
"""

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

import torch
import torch.nn.functional as F

from utils.errors import DegenerateBatchError, DimensionError, OptimizerError, TrainingStepError

Tensor = torch.Tensor
DTYPE = torch.float32

NORM_EPS = 1e-5
SN_EPS = 1e-12
ADAM_EPS = 1e-8

# (beta1, beta2)
GAN_BETAS = (0.0, 0.9)
CONTROLLER_BETAS = (0.9, 0.999)

NORM_MODES = ("batch", "instance", "none")
UPSAMPLE_MODES = ("nearest", "bilinear")


@dataclass
class Parameter:
    name: str
    value: Tensor
    gradient: Tensor = field(default=None)
    adam_m: Tensor = field(default=None)
    adam_v: Tensor = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        self.value = self.value.detach().to(DTYPE).clone().requires_grad_(True)
        if self.gradient is None:
            self.gradient = torch.zeros_like(self.value, requires_grad=False)
        if self.adam_m is None:
            self.adam_m = torch.zeros_like(self.value, requires_grad=False)
        if self.adam_v is None:
            self.adam_v = torch.zeros_like(self.value, requires_grad=False)
        for other in (self.gradient, self.adam_m, self.adam_v):
            if other.shape != self.value.shape:
                raise DimensionError(
                    f"parameter '{self.name}' state shape {tuple(other.shape)} != value shape {tuple(self.value.shape)}"
                )

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.value.shape)

    def numel(self) -> int:
        return self.value.numel()

    def zero_grad(self) -> None:
        self.gradient = torch.zeros_like(self.gradient)

    def copy(self) -> "Parameter":
        """Independent copy including optimizer state."""
        return Parameter(
            name=self.name,
            value=self.value.detach().clone(),
            gradient=self.gradient.clone(),
            adam_m=self.adam_m.clone(),
            adam_v=self.adam_v.clone(),
            step_count=self.step_count,
        )


ParameterStore = dict[str, Parameter]


class GradientContext:
    """
    Confined to one forward/backward pass on one thread. Torch records the
    operation tape during the forward pass; `backward` turns it into the
    `gradient` field of each watched Parameter (zeros when unused).
    """

    def __init__(self, params: Iterable[Parameter]):
        self.params = list(params)
        self._grad_mode = None

    def __enter__(self) -> "GradientContext":
        self._grad_mode = torch.is_grad_enabled()
        torch.set_grad_enabled(True)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        torch.set_grad_enabled(self._grad_mode)

    def backward(self, loss: Tensor) -> None:
        if loss.numel() != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}", axes=tuple(loss.shape))
        check_finite(loss, "loss")
        leaves = [p.value for p in self.params]
        grads = torch.autograd.grad(loss, leaves, allow_unused=True)
        for param, grad in zip(self.params, grads):
            param.gradient = torch.zeros_like(param.value).detach() if grad is None else grad.detach()


def check_finite(t: Tensor, what: str) -> Tensor:
    if not torch.isfinite(t).all():
        raise TrainingStepError(f"non-finite values in {what}: {t.detach().flatten()[:4].tolist()}")
    return t


def parameter_checksum(params: Mapping[str, Parameter]) -> str:
    """SHA-256 over parameter names and raw values, in name order."""
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode("utf-8"))
        digest.update(params[name].value.detach().contiguous().numpy().tobytes())
    return digest.hexdigest()


def gaussian_init(shape: tuple[int, ...], fan_in: int, gain: float, generator: torch.Generator) -> Tensor:
    """Scaled Gaussian: std = gain / sqrt(fan_in)."""
    std = gain / math.sqrt(fan_in)
    return torch.randn(shape, generator=generator, dtype=DTYPE) * std


def uniform_init(shape: tuple[int, ...], bound: float, generator: torch.Generator) -> Tensor:
    return (torch.rand(shape, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound


# ---------------------------------------------------------------------------
# Forward kernels
# ---------------------------------------------------------------------------

def _require_4d(t: Tensor, what: str) -> None:
    if t.dim() != 4:
        raise DimensionError(f"{what} must be NCHW, got {t.dim()}-D shape {tuple(t.shape)}", axes=tuple(t.shape))


def conv2d(input: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    _require_4d(input, "conv2d input")
    _require_4d(weight, "conv2d weight")
    out_ch, in_ch, kh, kw = weight.shape
    if input.shape[1] != in_ch:
        raise DimensionError(
            f"conv2d channel mismatch: input axis 1 = {input.shape[1]}, weight axis 1 = {in_ch}", axes=(1, 1)
        )
    if kh != kw or kh not in (1, 3):
        raise DimensionError(f"conv2d kernel must be 1x1 or 3x3, got {kh}x{kw}", axes=(2, 3))
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if bias.shape != (out_ch,):
        raise DimensionError(f"conv2d bias shape {tuple(bias.shape)} != ({out_ch},)", axes=(0,))
    if input.shape[2] + 2 * padding < kh or input.shape[3] + 2 * padding < kw:
        raise DimensionError(f"conv2d input {tuple(input.shape[2:])} smaller than kernel", axes=(2, 3))
    return F.conv2d(input, weight, bias, stride=stride, padding=padding)


DECONV_KERNEL = 4
DECONV_STRIDE = 2
DECONV_PADDING = 1


def transposed_conv2d(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-2 deconvolution, kernel 4, padding 1: output is exactly 2H x 2W.

    `weight` is laid out in_channels x out_channels x 4 x 4.
    """
    _require_4d(input, "transposed_conv2d input")
    _require_4d(weight, "transposed_conv2d weight")
    in_ch, out_ch, kh, kw = weight.shape
    if input.shape[1] != in_ch:
        raise DimensionError(
            f"transposed_conv2d channel mismatch: input axis 1 = {input.shape[1]}, weight axis 0 = {in_ch}",
            axes=(1, 0),
        )
    if (kh, kw) != (DECONV_KERNEL, DECONV_KERNEL):
        raise DimensionError(f"transposed_conv2d kernel must be 4x4, got {kh}x{kw}", axes=(2, 3))
    if bias.shape != (out_ch,):
        raise DimensionError(f"transposed_conv2d bias shape {tuple(bias.shape)} != ({out_ch},)", axes=(0,))
    return F.conv_transpose2d(input, weight, bias, stride=DECONV_STRIDE, padding=DECONV_PADDING)


def upsample(input: Tensor, mode: str) -> Tensor:
    """x2 upsampling. Bilinear samples at half-pixel centres (align_corners=False)."""
    _require_4d(input, "upsample input")
    if input.shape[2] < 1 or input.shape[3] < 1:
        raise DimensionError(f"upsample needs H, W >= 1, got {tuple(input.shape[2:])}", axes=(2, 3))
    if mode == "nearest":
        return F.interpolate(input, scale_factor=2, mode="nearest")
    if mode == "bilinear":
        return F.interpolate(input, scale_factor=2, mode="bilinear", align_corners=False)
    raise ValueError(f"unknown upsample mode '{mode}', expected one of {UPSAMPLE_MODES}")


def resize(input: Tensor, size: int) -> Tensor:
    """Bilinear resize to size x size (half-pixel convention)."""
    _require_4d(input, "resize input")
    if input.shape[2] == size and input.shape[3] == size:
        return input
    return F.interpolate(input, size=(size, size), mode="bilinear", align_corners=False)


def normalize(input: Tensor, mode: str, gamma: Tensor, beta: Tensor, training: bool) -> Tensor:
    """Batch norm over (N,H,W), instance norm over (H,W), or identity.

    Statistics always come from the current batch; there are no running
    averages.
    """
    if mode == "none":
        return input
    _require_4d(input, "normalize input")
    channels = input.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            f"normalize affine shapes {tuple(gamma.shape)}, {tuple(beta.shape)} != ({channels},)", axes=(1,)
        )
    if mode == "batch":
        if training and input.shape[0] < 2:
            raise DegenerateBatchError("batch normalization in training mode needs N >= 2, got N = 1")
        dims = (0, 2, 3)
    elif mode == "instance":
        dims = (2, 3)
    else:
        raise ValueError(f"unknown normalization mode '{mode}', expected one of {NORM_MODES}")
    mean = input.mean(dim=dims, keepdim=True)
    var = input.var(dim=dims, keepdim=True, unbiased=False)
    normed = (input - mean) / torch.sqrt(var + NORM_EPS)
    return normed * gamma.view(1, -1, 1, 1) + beta.view(1, -1, 1, 1)


def linear(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if input.dim() != 2 or weight.dim() != 2 or input.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear shape mismatch: input {tuple(input.shape)}, weight {tuple(weight.shape)}", axes=(1, 1)
        )
    return F.linear(input, weight, bias)


def avg_pool2(input: Tensor) -> Tensor:
    _require_4d(input, "avg_pool2 input")
    return F.avg_pool2d(input, 2)


class LSTMWeights(NamedTuple):
    w_ih: Tensor  # 4H x X
    w_hh: Tensor  # 4H x H
    bias: Tensor  # 4H


def lstm_step(x: Tensor, h: Tensor, c: Tensor, weights: LSTMWeights) -> tuple[Tensor, Tensor]:
    """One LSTM cell step. Gate order in the stacked weights: input, forget, candidate, output."""
    hidden = h.shape[-1]
    if weights.w_ih.shape != (4 * hidden, x.shape[-1]):
        raise DimensionError(f"lstm w_ih shape {tuple(weights.w_ih.shape)} != {(4 * hidden, x.shape[-1])}")
    if weights.w_hh.shape != (4 * hidden, hidden) or weights.bias.shape != (4 * hidden,):
        raise DimensionError(f"lstm w_hh/bias shapes do not match hidden size {hidden}")
    if c.shape != h.shape:
        raise DimensionError(f"lstm cell shape {tuple(c.shape)} != hidden shape {tuple(h.shape)}")
    gates = x @ weights.w_ih.T + h @ weights.w_hh.T + weights.bias
    i, f, g, o = gates.chunk(4, dim=-1)
    i, f, o = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o)
    g = torch.tanh(g)
    c_next = f * c + i * g
    h_next = o * torch.tanh(c_next)
    return h_next, c_next


def _unit(v: Tensor) -> Tensor:
    return v / torch.clamp(v.norm(), min=SN_EPS)


def spectral_power_iteration(weight: Tensor, u: Tensor, iters: int = 1) -> tuple[Tensor, Tensor, Tensor]:
    """Estimate the top singular value of a 2-D weight by power iteration.

    Returns (sigma, u', weight / sigma). u and v are treated as constants for
    differentiation; sigma keeps its dependence on the weight.
    """
    if weight.dim() != 2:
        raise DimensionError(f"spectral power iteration needs a 2-D weight, got {tuple(weight.shape)}")
    if u.shape != (weight.shape[0],):
        raise DimensionError(f"u shape {tuple(u.shape)} != ({weight.shape[0]},)", axes=(0,))
    with torch.no_grad():
        w = weight.detach()
        for _ in range(iters):
            v = _unit(w.T @ u)
            u_next = w @ v
            if u_next.norm() > SN_EPS:
                u = _unit(u_next)
        v = _unit(w.T @ u)
    sigma = torch.clamp(u @ (weight @ v), min=SN_EPS)
    return sigma, u.detach(), weight / sigma


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def adam_step(
    param: Parameter,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float = ADAM_EPS,
) -> Parameter:
    """In-place Adam update with bias correction. Returns the same Parameter."""
    grad = param.gradient
    if not torch.isfinite(grad).all():
        raise OptimizerError(param.name)
    param.step_count += 1
    t = param.step_count
    with torch.no_grad():
        param.adam_m = beta1 * param.adam_m + (1.0 - beta1) * grad
        param.adam_v = beta2 * param.adam_v + (1.0 - beta2) * grad * grad
        m_hat = param.adam_m / (1.0 - beta1 ** t)
        v_hat = param.adam_v / (1.0 - beta2 ** t)
        param.value.sub_(lr * m_hat / (torch.sqrt(v_hat) + eps))
    return param


def adam_update_all(
    params: Iterable[Parameter],
    lr: float,
    betas: tuple[float, float],
    eps: float = ADAM_EPS,
) -> None:
    for param in params:
        adam_step(param, lr, betas[0], betas[1], eps)
