"""Neural-net building blocks on top of the tensor core.

``Module`` gives dotted-name parameter discovery (enough for checkpoints,
freezing, and SGD) without any of the usual framework machinery.  Blocks here
are shared by the toy multimodal LM, the grounding detector, and the fusion
adapter.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


class Module:
    """Base class: parameters are Tensor attributes, submodules are Module
    attributes (or lists of them), discovered by walking ``__dict__``."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in self.__dict__.items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor):
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters(prefix).items()}

    def load_state_arrays(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        params = self.named_parameters(prefix)
        missing = set(params) - set(state)
        if missing:
            raise T.UsageError(f"checkpoint missing parameters: {sorted(missing)[:4]}...")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise T.UsageError(
                    f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr.copy()


class Linear(Module):
    """y = x @ W + b with W of shape [d_in, d_out]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, scale: float | None = None):
        std = (1.0 / np.sqrt(d_in)) if scale is None else scale
        self.weight = Tensor(rng.standard_normal((d_in, d_out)) * std,
                             requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out

    def zero_(self) -> None:
        """Hard-set weights (and bias) to exact zeros, keeping trainability."""
        self.weight.data = np.zeros_like(self.weight.data)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)


class MLP(Module):
    """Two-layer GELU MLP."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.tmean(x, axis=-1, keepdims=True)
        xc = T.sub(x, mu)
        var = T.tmean(T.mul(xc, xc), axis=-1, keepdims=True)
        rstd = T.power(T.add(var, self._eps), -0.5)
        return T.add(T.mul(T.mul(xc, rstd), self.gamma), self.beta)


class MultiHeadAttention(Module):
    """Standard multi-head attention; optional RoPE on queries and keys.

    ``mask`` is an additive ndarray broadcastable to [B, h, Tq, Tk].  With
    ``return_scores`` the pre-softmax scaled scores come back as a plain
    ndarray (detached; meant for read-only diagnostics).
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator,
                 rope_base: float | None = None, d_kv: int | None = None):
        if d % heads:
            raise DimensionError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d // heads
        self.rope_base = rope_base
        d_kv = d if d_kv is None else d_kv
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d_kv, d, rng)
        self.wv = Linear(d_kv, d, rng)
        self.wo = Linear(d, d, rng)

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        return T.reshape(x, b, t, self.heads, self.d_head)

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask: np.ndarray | None = None,
                 pos_q=None, pos_k=None, return_scores: bool = False):
        b, tq, _ = x_q.shape
        tk = x_kv.shape[1]
        q = self._split(self.wq(x_q), b, tq)
        k = self._split(self.wk(x_kv), b, tk)
        v = self._split(self.wv(x_kv), b, tk)
        if self.rope_base is not None:
            q = T.rope_apply(q, np.arange(tq) if pos_q is None else pos_q,
                             base=self.rope_base)
            k = T.rope_apply(k, np.arange(tk) if pos_k is None else pos_k,
                             base=self.rope_base)
        q = T.transpose(q, (0, 2, 1, 3))
        k = T.transpose(k, (0, 2, 3, 1))
        v = T.transpose(v, (0, 2, 1, 3))
        scores = T.mul(T.matmul(q, k), 1.0 / np.sqrt(self.d_head))
        weights = T.softmax(scores, axis=-1, mask=mask)
        out = T.matmul(weights, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), b, tq, self.heads * self.d_head)
        out = self.wo(out)
        if return_scores:
            return out, scores.data.copy()
        return out


class TransformerBlock(Module):
    """Pre-LN decoder block: self-attention then MLP, both residual."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 2, rope_base: float | None = 10000.0):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng, rope_base=rope_base)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d, d, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None, positions=None,
                 return_scores: bool = False):
        h = self.ln1(x)
        if return_scores:
            a, scores = self.attn(h, h, mask=mask, pos_q=positions, pos_k=positions,
                                  return_scores=True)
        else:
            a = self.attn(h, h, mask=mask, pos_q=positions, pos_k=positions)
        x = T.add(x, a)
        x = T.add(x, self.mlp(self.ln2(x)))
        if return_scores:
            return x, scores
        return x


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of [N, C] logits against integer targets [N]."""
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} != ({n},)")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), targets] = 1.0
    logp = T.log_softmax(logits, axis=-1)
    return T.mul(T.tsum(T.mul(logp, T.constant(onehot))), -1.0 / n)
