"""Differentiable array primitives, Adam and a finite-difference gradient checker.

Arrays are ``torch.Tensor`` objects; torch's autograd records the graph and
runs the reverse pass. The functions here add the shape validation and error
contract the rest of the package relies on. Training runs in float32; gradient
checks run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

DiffArray = torch.Tensor


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""

    def __init__(self, op: str, a: Sequence[int], b: Sequence[int], detail: str = ""):
        self.op = op
        self.shapes = (tuple(a), tuple(b))
        msg = f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def array(values, requires_grad: bool = False, dtype=torch.float32) -> DiffArray:
    return torch.tensor(values, dtype=dtype, requires_grad=requires_grad)


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size - kernel + 2 * pad) // stride + 1


def conv_transpose_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + kernel


def _check_bias(op, bias, out_channels):
    if bias is not None and tuple(bias.shape) != (out_channels,):
        raise ShapeError(op, bias.shape, (out_channels,), "bias must be a vector over output channels")


def conv2d(input: DiffArray, weight: DiffArray, bias: DiffArray | None = None,
           stride: int = 1, pad: int = 0) -> DiffArray:
    """2-D cross-correlation over an NCHW batch with an OIKK kernel."""
    if input.dim() != 4 or weight.dim() != 4:
        raise ShapeError("conv2d", input.shape, weight.shape, "expected NCHW input and OIKK weight")
    if input.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", input.shape, weight.shape, "input channels differ")
    kh, kw = weight.shape[2:]
    if kh > input.shape[2] + 2 * pad or kw > input.shape[3] + 2 * pad:
        raise ShapeError("conv2d", input.shape, weight.shape, "kernel larger than padded input")
    _check_bias("conv2d", bias, weight.shape[0])
    return F.conv2d(input, weight, bias, stride=stride, padding=pad)


def conv_transpose2d(input: DiffArray, weight: DiffArray, bias: DiffArray | None = None,
                     stride: int = 1, pad: int = 0) -> DiffArray:
    """Transposed convolution; weight layout is (in, out, K, K)."""
    if input.dim() != 4 or weight.dim() != 4:
        raise ShapeError("conv_transpose2d", input.shape, weight.shape, "expected NCHW input and IOKK weight")
    if input.shape[1] != weight.shape[0]:
        raise ShapeError("conv_transpose2d", input.shape, weight.shape, "input channels differ")
    out_h = conv_transpose_out_size(input.shape[2], weight.shape[2], stride, pad)
    out_w = conv_transpose_out_size(input.shape[3], weight.shape[3], stride, pad)
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv_transpose2d", input.shape, weight.shape, "padding removes the whole output")
    _check_bias("conv_transpose2d", bias, weight.shape[1])
    return F.conv_transpose2d(input, weight, bias, stride=stride, padding=pad)


def batchnorm2d(input: DiffArray, gamma: DiffArray, beta: DiffArray,
                running_mean: torch.Tensor | None = None, running_var: torch.Tensor | None = None,
                training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> DiffArray:
    """Per-channel batch normalisation.

    In training mode the batch statistics are used and the running buffers
    (when given) are updated in place; in eval mode the running buffers are
    used and must be present.
    """
    if input.dim() != 4:
        raise ShapeError("batchnorm2d", input.shape, gamma.shape, "expected NCHW input")
    c = input.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm2d", input.shape, gamma.shape, "affine parameters must match channels")
    if training and input.shape[0] < 2:
        raise ValueError("batchnorm2d: batch of 1 in training mode has no variance estimate")
    if not training and (running_mean is None or running_var is None):
        raise ValueError("batchnorm2d: eval mode requires running statistics")
    return F.batch_norm(input, running_mean, running_var, gamma, beta,
                        training=training, momentum=momentum, eps=eps)


def activation(input: DiffArray, kind: str, alpha: float = 0.2) -> DiffArray:
    """Elementwise nonlinearity: ``relu``, ``leaky_relu``, ``tanh`` or ``sigmoid``.

    The ReLU subgradient at 0 is 0.
    """
    if kind == "relu":
        return torch.relu(input)
    if kind == "leaky_relu":
        return F.leaky_relu(input, alpha)
    if kind == "tanh":
        return torch.tanh(input)
    if kind == "sigmoid":
        return torch.sigmoid(input)
    raise ValueError(f"unknown activation {kind!r}")


def linear(input: DiffArray, weight: DiffArray, bias: DiffArray | None = None) -> DiffArray:
    """Affine map ``input @ weight + bias`` with weight laid out as F x O."""
    if input.dim() != 2 or weight.dim() != 2 or input.shape[1] != weight.shape[0]:
        raise ShapeError("linear", input.shape, weight.shape, "expected N x F input and F x O weight")
    _check_bias("linear", bias, weight.shape[1])
    out = input @ weight
    return out if bias is None else out + bias


def bce_with_logits(logits: DiffArray, targets: DiffArray) -> DiffArray:
    """Mean binary cross-entropy on logits, stable for large |logit|."""
    if logits.shape != targets.shape:
        raise ShapeError("bce_with_logits", logits.shape, targets.shape)
    t = targets.detach()
    if bool(((t < 0) | (t > 1)).any()):
        raise ValueError("bce_with_logits: targets must lie in [0, 1]")
    # max(x, 0) - x*t + log(1 + exp(-|x|))
    loss = torch.clamp(logits, min=0) - logits * targets + torch.log1p(torch.exp(-logits.abs()))
    return loss.mean()


def backward(seed: DiffArray) -> None:
    """Reverse pass from a scalar.

    Gradients accumulate into ``.grad``; a second call without zeroing adds to
    the existing values.
    """
    if seed.numel() != 1:
        raise ValueError(f"backward: seed must be scalar, got shape {tuple(seed.shape)}")
    seed.backward()


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = False
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)


class Adam:
    """Adam with L2 weight decay added to the gradient (``decoupled=False``)
    or applied directly to the weights (``decoupled=True``)."""

    def __init__(self, params: Iterable[torch.Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled: bool = False):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               weight_decay=weight_decay, decoupled=decoupled)
        self.state.m = [torch.zeros_like(p) for p in self.params]
        self.state.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        zero_grad(self.params)

    @torch.no_grad()
    def step(self) -> None:
        adam_step(self.params, self.state)

    def state_arrays(self) -> dict[str, torch.Tensor]:
        out = {}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, torch.Tensor], step: int) -> None:
        for i in range(len(self.params)):
            self.state.m[i].copy_(arrays[f"m.{i}"])
            self.state.v[i].copy_(arrays[f"v.{i}"])
        self.state.step = step


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], state: AdamState) -> None:
    for p in params:
        if p.grad is None:
            raise ValueError(f"adam_step: parameter of shape {tuple(p.shape)} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    step_size = state.lr / bias1
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        if state.weight_decay:
            if state.decoupled:
                p.mul_(1.0 - state.lr * state.weight_decay)
            else:
                g = g + state.weight_decay * p
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bias2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-step_size)


def grad_check(fn: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor,
               eps: float = 1e-4) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``fn`` must map a float64 tensor to a scalar. The relative error per
    coordinate is ``|ga - gfd| / max(1e-8, |ga| + |gfd|)``.
    """
    x = point.detach().to(torch.float64).clone().requires_grad_(True)
    out = fn(x)
    if out.numel() != 1:
        raise ValueError("grad_check: function must be scalar-valued")
    (analytic,) = torch.autograd.grad(out, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach().reshape(-1)

    flat = x.detach().clone().reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = fn(flat.view_as(x)).item()
            flat[i] = orig - eps
            f_minus = fn(flat.view_as(x)).item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2 * eps)
    denom = torch.clamp(analytic.abs() + numeric.abs(), min=1e-8)
    rel = (analytic - numeric).abs() / denom
    err = rel.max().item() if rel.numel() else 0.0
    return math.inf if math.isnan(err) else err


def seed_everything(seed: int) -> torch.Generator:
    """Seed torch's global RNG and return a dedicated generator."""
    torch.manual_seed(seed)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen
