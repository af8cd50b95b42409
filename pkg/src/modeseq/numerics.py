"""Array primitives, attention blocks and the optimizer used by the model.

Arrays are torch tensors and the autograd graph plays the role of the tape.
The precision switch is global: 64-bit for gradient checks, 32-bit for
training runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

_PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


class NumericalError(RuntimeError):
    """Raised when a value that must be finite is not."""


def set_precision(name: str) -> None:
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_PRECISIONS)}")
    torch.set_default_dtype(_PRECISIONS[name])


def get_dtype() -> torch.dtype:
    return torch.get_default_dtype()


def check_finite(x: torch.Tensor, what: str = "array") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite values in {what}")
    return x


def _same_shape(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# -- primitives --------------------------------------------------------------

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents {a.shape[-1]} and {b.shape[-2]} differ")
    return check_finite(a @ b, "matmul")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b, "add")
    return check_finite(a + b, "add")


def gelu(x: torch.Tensor) -> torch.Tensor:
    return check_finite(F.gelu(x), "gelu")


def softmax(x: torch.Tensor) -> torch.Tensor:
    return check_finite(torch.softmax(x, dim=-1), "softmax")


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ValueError("layer_norm: gain/bias must match the last axis")
    return check_finite(F.layer_norm(x, x.shape[-1:], gain, bias, eps), "layer_norm")


def concat(arrays: list[torch.Tensor], axis: int = -1) -> torch.Tensor:
    return check_finite(torch.cat(arrays, dim=axis), "concat")


def gather(x: torch.Tensor, index: torch.Tensor, axis: int) -> torch.Tensor:
    """Select entries of ``x`` along ``axis``; ``index`` is 1-D."""
    return torch.index_select(x, axis, index)


# -- building blocks ---------------------------------------------------------

def init_weights(module: nn.Module) -> None:
    """normal(0, 0.02) projections, zero biases, unit norm gains."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class MLP(nn.Sequential):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__(
            nn.Linear(d_in, d_hidden),
            nn.LayerNorm(d_hidden),
            nn.GELU(),
            nn.Linear(d_hidden, d_out),
        )


class AttentionBlock(nn.Module):
    """Pre-norm Transformer block: multi-head attention then a GELU feed-forward.

    query [..., Nq, D], key_value [..., Nk, D]. ``key_mask`` [..., Nk] marks
    valid keys; ``attn_mask`` [..., Nq, Nk] restricts keys per query (causal
    masks). Query rows that see no valid key skip the whole block and come
    out unchanged.
    """

    def __init__(self, dim: int, heads: int, dropout: float = 0.1, self_attention: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"hidden size {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.self_attention = self_attention
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = None if self_attention else nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)
        self.out_drop = nn.Dropout(dropout)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(4 * dim, dim),
        )
        self.ff_drop = nn.Dropout(dropout)

    @staticmethod
    def _combine(key_mask, attn_mask):
        mask = None if key_mask is None else key_mask.unsqueeze(-2)
        if attn_mask is not None:
            mask = attn_mask if mask is None else mask & attn_mask
        return mask

    def keys_values(self, key_value):
        """Key and value heads [..., H, Nk, dh]; reusable across queries."""
        kv_in = self.norm_q(key_value) if self.self_attention else self.norm_kv(key_value)
        return self._split(self.to_k(kv_in)), self._split(self.to_v(kv_in))

    def attention_weights(self, query, key_value=None, key_mask=None, attn_mask=None, kv=None):
        """Per-head attention weights [..., H, Nq, Nk] and the value heads."""
        if kv is None:
            kv = self.keys_values(query if self.self_attention else key_value)
        k, v = kv
        q = self._split(self.to_q(self.norm_q(query)))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dim // self.heads)
        mask = self._combine(key_mask, attn_mask)
        if mask is not None:
            scores = scores.masked_fill(~mask.unsqueeze(-3), torch.finfo(scores.dtype).min)
        return torch.softmax(scores, dim=-1), v

    def forward(self, query, key_value=None, key_mask=None, attn_mask=None, kv=None):
        if kv is None:
            if self.self_attention:
                key_value = query
            if key_value.shape[-2] == 0:
                return query
        elif kv[0].shape[-2] == 0:
            return query
        weights, v = self.attention_weights(query, key_value, key_mask, attn_mask, kv)
        mixed = (self.attn_drop(weights) @ v).transpose(-2, -3).reshape(query.shape)
        out = query + self.out_drop(self.to_out(mixed))
        out = out + self.ff_drop(self.ff(self.norm_ff(out)))
        mask = self._combine(key_mask, attn_mask)
        if mask is None:
            return out
        return torch.where(mask.any(-1).unsqueeze(-1), out, query)

    def _split(self, x):
        *lead, n, d = x.shape
        return x.reshape(*lead, n, self.heads, d // self.heads).transpose(-2, -3)


def multi_head_attention(block: AttentionBlock, query, key_value, key_mask=None):
    """Apply an attention block; raises when there are no keys at all."""
    if key_value.shape[-2] == 0:
        raise ValueError("multi_head_attention needs at least one key; bypass the block instead")
    return check_finite(block(query, key_value, key_mask=key_mask), "attention output")


# -- differentiation ---------------------------------------------------------

def backward(loss: torch.Tensor, leaves: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` for every named leaf (zeros if unreached)."""
    if loss.dim() != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    return {
        n: torch.zeros_like(leaves[n]) if g is None else g
        for n, g in zip(names, grads)
    }


def clip_grad_norm(grads: dict[str, torch.Tensor], max_norm: float = 5.0) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g.mul_(scale)
    return total


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 5e-4
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


def adamw_step(
    state: OptimizerState,
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    lr: float | None = None,
    no_decay: frozenset[str] = frozenset(),
) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    A non-finite gradient aborts the step before anything is modified.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name}; step aborted")
    lr = state.lr if lr is None else lr
    beta1, beta2 = state.betas
    state.step += 1
    bc1 = 1 - beta1 ** state.step
    bc2 = 1 - beta2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if name not in state.exp_avg:
                state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            m, v = state.exp_avg[name], state.exp_avg_sq[name]
            if name not in no_decay:
                p.mul_(1 - lr * state.weight_decay)
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)


def cosine_lr(step: int, total_steps: int, base_lr: float = 5e-4) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1 + math.cos(math.pi * step / total_steps)) / 2
