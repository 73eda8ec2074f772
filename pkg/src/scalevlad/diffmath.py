"""Dense float64 kernels with hand-written derivatives.

Each numeric kernel is a ``torch.autograd.Function`` whose ``backward`` is
written out explicitly; torch only threads the pieces together. Structural
glue (reshape, slicing, concatenation, elementwise add, row max) uses
torch's own differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np
import torch

DTYPE = torch.float64

LAYER_NORM_EPS = 1e-5
L2_EPS = 1e-12


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# kernels


class _Linear(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight, bias):
        ctx.save_for_backward(x, weight)
        return x @ weight + bias

    @staticmethod
    def backward(ctx, g):
        x, weight = ctx.saved_tensors
        p, q = weight.shape
        gx = g @ weight.transpose(0, 1)
        gw = x.reshape(-1, p).transpose(0, 1) @ g.reshape(-1, q)
        gb = g.reshape(-1, q).sum(0)
        return gx, gw, gb


class _MatMul(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save_for_backward(a, b)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved_tensors
        return g @ b.transpose(-1, -2), a.transpose(-1, -2) @ g


class _Softmax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        z = x - x.amax(dim=-1, keepdim=True)
        e = torch.exp(z)
        y = e / e.sum(dim=-1, keepdim=True)
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved_tensors
        return y * (g - (g * y).sum(dim=-1, keepdim=True))


class _LogSoftmax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        z = x - x.amax(dim=-1, keepdim=True)
        y = z - torch.log(torch.exp(z).sum(dim=-1, keepdim=True))
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved_tensors
        return g - torch.exp(y) * g.sum(dim=-1, keepdim=True)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class _Gelu(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        cdf = 0.5 * (1.0 + torch.erf(x * _INV_SQRT2))
        ctx.save_for_backward(x, cdf)
        return x * cdf

    @staticmethod
    def backward(ctx, g):
        x, cdf = ctx.saved_tensors
        pdf = _INV_SQRT2PI * torch.exp(-0.5 * x * x)
        return g * (cdf + x * pdf)


class _LayerNorm(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, eps):
        mu = x.mean(dim=-1, keepdim=True)
        xc = x - mu
        var = (xc * xc).mean(dim=-1, keepdim=True)
        inv = 1.0 / torch.sqrt(var + eps)
        xhat = xc * inv
        ctx.save_for_backward(xhat, inv, gamma)
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, g):
        xhat, inv, gamma = ctx.saved_tensors
        d = xhat.shape[-1]
        gxhat = g * gamma
        gx = inv * (
            gxhat
            - gxhat.mean(dim=-1, keepdim=True)
            - xhat * (gxhat * xhat).mean(dim=-1, keepdim=True)
        )
        ggamma = (g * xhat).reshape(-1, d).sum(0)
        gbeta = g.reshape(-1, d).sum(0)
        return gx, ggamma, gbeta, None


class _L2Normalize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, v, eps):
        norm = torch.sqrt((v * v).sum(dim=-1, keepdim=True))
        guarded = norm <= eps
        denom = torch.where(guarded, torch.full_like(norm, eps), norm)
        y = v / denom
        ctx.save_for_backward(y, denom, guarded)
        return y

    @staticmethod
    def backward(ctx, g):
        y, denom, guarded = ctx.saved_tensors
        radial = y * (g * y).sum(dim=-1, keepdim=True)
        gv = torch.where(guarded, g, g - radial) / denom
        return gv, None


def _check_finite(t: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"{name}: non-finite values in output")
    return t


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    if weight.dim() != 2 or x.shape[-1] != weight.shape[0] or bias.shape != weight.shape[1:]:
        raise DimensionError(
            f"linear: x {tuple(x.shape)} incompatible with W {tuple(weight.shape)}, b {tuple(bias.shape)}"
        )
    return _Linear.apply(x, weight, bias)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    return _MatMul.apply(a, b)


def softmax(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    return _Softmax.apply(x)


def log_softmax(x: torch.Tensor) -> torch.Tensor:
    return _LogSoftmax.apply(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact erf-form GELU."""
    return _Gelu.apply(x)


def layer_norm(
    x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = LAYER_NORM_EPS
) -> torch.Tensor:
    return _LayerNorm.apply(x, gamma, beta, eps)


def l2_normalize(v: torch.Tensor, eps: float = L2_EPS) -> torch.Tensor:
    """``v / max(||v||, eps)`` along the last axis; all-zero rows stay zero."""
    return _L2Normalize.apply(v, eps)


# ---------------------------------------------------------------------------
# transformer encoder (post-norm)


def init_uniform(shape, bound: float, gen: torch.Generator) -> torch.Tensor:
    return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound


def init_transformer(
    params: Dict[str, torch.Tensor],
    prefix: str,
    dim: int,
    layers: int,
    heads: int,
    gen: torch.Generator,
    ffn_mult: int = 4,
) -> None:
    if dim % heads:
        raise ConfigurationError(f"{prefix}: hidden size {dim} not divisible by {heads} heads")
    ffn = ffn_mult * dim
    for i in range(layers):
        p = f"{prefix}.layer{i}"
        for name in ("q", "k", "v", "o"):
            params[f"{p}.attn.w{name}"] = init_uniform((dim, dim), math.sqrt(6.0 / (2 * dim)), gen)
            params[f"{p}.attn.b{name}"] = torch.zeros(dim, dtype=DTYPE)
        params[f"{p}.ln1.gamma"] = torch.ones(dim, dtype=DTYPE)
        params[f"{p}.ln1.beta"] = torch.zeros(dim, dtype=DTYPE)
        params[f"{p}.ffn.w1"] = init_uniform((dim, ffn), math.sqrt(6.0 / (dim + ffn)), gen)
        params[f"{p}.ffn.b1"] = torch.zeros(ffn, dtype=DTYPE)
        params[f"{p}.ffn.w2"] = init_uniform((ffn, dim), math.sqrt(6.0 / (dim + ffn)), gen)
        params[f"{p}.ffn.b2"] = torch.zeros(dim, dtype=DTYPE)
        params[f"{p}.ln2.gamma"] = torch.ones(dim, dtype=DTYPE)
        params[f"{p}.ln2.beta"] = torch.zeros(dim, dtype=DTYPE)


def multi_head_attention(
    x: torch.Tensor,
    mask: torch.Tensor,
    params: Mapping[str, torch.Tensor],
    prefix: str,
    heads: int,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Masked scaled dot-product self-attention.

    ``x`` is ``[..., n, d]`` and ``mask`` ``[..., n]``. Returns the projected
    output and the attention weights ``[..., heads, n, n]``.
    """
    *lead, n, d = x.shape
    if d % heads:
        raise ConfigurationError(f"hidden size {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return t.reshape(*lead, n, heads, dh).transpose(-2, -3)

    q = split(linear(x, params[f"{prefix}.wq"], params[f"{prefix}.bq"]))
    k = split(linear(x, params[f"{prefix}.wk"], params[f"{prefix}.bk"]))
    v = split(linear(x, params[f"{prefix}.wv"], params[f"{prefix}.bv"]))
    logits = matmul(q, k.transpose(-1, -2)) * (1.0 / math.sqrt(dh))
    key_mask = mask[..., None, None, :]
    logits = logits.masked_fill(~key_mask, float("-inf"))
    weights = softmax(logits)
    ctx = matmul(weights, v).transpose(-2, -3).reshape(*lead, n, d)
    return linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"]), weights


def transformer_encoder(
    x: torch.Tensor,
    mask: torch.Tensor,
    params: Mapping[str, torch.Tensor],
    prefix: str,
    layers: int,
    heads: int,
    eps: float = LAYER_NORM_EPS,
) -> torch.Tensor:
    """Post-norm encoder stack; rows at masked positions come out as zero."""
    if x.shape[-1] % heads:
        raise ConfigurationError(f"hidden size {x.shape[-1]} not divisible by {heads} heads")
    if not mask.any(dim=-1).all():
        raise EmptySequenceError(f"{prefix}: sequence has no valid positions")
    keep = mask[..., None].to(x.dtype)
    for i in range(layers):
        p = f"{prefix}.layer{i}"
        attn, _ = multi_head_attention(x, mask, params, f"{p}.attn", heads)
        x = layer_norm(x + attn, params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"], eps)
        h = gelu(linear(x, params[f"{p}.ffn.w1"], params[f"{p}.ffn.b1"]))
        h = linear(h, params[f"{p}.ffn.w2"], params[f"{p}.ffn.b2"])
        x = layer_norm(x + h, params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"], eps)
    return x * keep


# ---------------------------------------------------------------------------
# masked pooling


def pooling_matrix(mask: torch.Tensor, m: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Averaging operator for window/stride ``m`` over the valid tokens.

    ``mask`` is ``[B, n]``. Returns ``P`` of shape ``[B, n', n]`` and the
    window mask ``[B, n']`` with ``n' = ceil(max valid count / m)``. Valid
    tokens are compacted first; a final short window averages what it holds.
    """
    if m < 1:
        raise ConfigurationError(f"window size must be >= 1, got {m}")
    mask = mask.bool()
    counts = mask.sum(dim=-1)
    if (counts == 0).any():
        raise EmptySequenceError("pooling over a sequence with zero valid tokens")
    n_windows = (counts + m - 1) // m
    width = int(n_windows.max())
    rank = torch.cumsum(mask.long(), dim=-1) - 1
    window = torch.where(mask, rank // m, torch.zeros_like(rank))
    sizes = torch.clamp(counts[:, None] - window * m, max=m).to(DTYPE)
    onehot = torch.nn.functional.one_hot(window, width).to(DTYPE)  # [B, n, n']
    weights = mask.to(DTYPE) / sizes
    P = (onehot * weights[..., None]).transpose(1, 2).contiguous()
    out_mask = torch.arange(width)[None, :] < n_windows[:, None]
    return P, out_mask


def mean_pool_windows(
    x: torch.Tensor, mask: torch.Tensor, m: int
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean-pool ``x`` (``[n, d]`` or ``[B, n, d]``) with kernel = stride = ``m``."""
    single = x.dim() == 2
    if single:
        x, mask = x[None], mask[None]
    P, out_mask = pooling_matrix(mask, m)
    out = matmul(P, x)
    if single:
        return out[0], out_mask[0]
    return out, out_mask


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over valid rows of ``[B, n, d]``."""
    w = mask.to(DTYPE)
    w = w / w.sum(dim=-1, keepdim=True)
    return matmul(w[:, None, :], x)[:, 0, :]


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradPair:
    value: torch.Tensor
    partials: Dict[str, torch.Tensor]


def _leaves(inputs: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone().to(DTYPE).requires_grad_(True) for k, v in inputs.items()}


def _cotangent(shape, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=gen, dtype=DTYPE)


def value_and_partials(
    fn: Callable[..., torch.Tensor],
    inputs: Mapping[str, torch.Tensor],
    cotangent: Optional[torch.Tensor] = None,
    seed: int = 0,
) -> GradPair:
    """Evaluate ``fn(**inputs)`` and the partials of ``<out, cotangent>``.

    Scalar outputs use a unit cotangent; otherwise a seeded normal one.
    """
    leaves = _leaves(inputs)
    out = fn(**leaves)
    if cotangent is None:
        cotangent = torch.ones_like(out) if out.dim() == 0 else _cotangent(out.shape, seed)
    grads = torch.autograd.grad((out * cotangent).sum(), list(leaves.values()), allow_unused=True)
    partials = {
        k: torch.zeros_like(v) if g is None else g.detach()
        for (k, v), g in zip(leaves.items(), grads)
    }
    return GradPair(out.detach(), partials)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    per_input: Dict[str, float] = field(default_factory=dict)
    checked: int = 0

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:g} entries={self.checked}"


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
    wrt: Optional[list] = None,
) -> GradCheckReport:
    """Compare analytic partials with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps entries that are zero on both routes from dividing by zero. With
    ``max_entries`` set, a seeded random subset of each input is probed.
    """
    base = {k: v.detach().clone().to(DTYPE) for k, v in inputs.items()}
    with torch.no_grad():
        probe = fn(**base)
    cot = torch.ones_like(probe) if probe.dim() == 0 else _cotangent(probe.shape, seed)
    pair = value_and_partials(fn, base, cot)
    rng = np.random.default_rng(seed)

    def scalar(args) -> float:
        with torch.no_grad():
            return float((fn(**args) * cot).sum())

    names = list(base) if wrt is None else list(wrt)
    worst: Dict[str, float] = {}
    checked = 0
    for name in names:
        flat = base[name].reshape(-1)
        n = flat.numel()
        idx = np.arange(n)
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        analytic = pair.partials[name].reshape(-1)
        err = 0.0
        for i in idx:
            orig = float(flat[i])
            flat[i] = orig + eps
            up = scalar(base)
            flat[i] = orig - eps
            down = scalar(base)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = max(err, relative_error(float(analytic[i]), numeric, floor))
            checked += 1
        worst[name] = err
    max_err = max(worst.values(), default=0.0)
    return GradCheckReport(max_err, max_err <= tol, tol, worst, checked)
