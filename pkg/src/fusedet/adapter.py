"""Gated, zero-initialized cross-attention adapter in four variants.

The adapter turns LM hidden states into "adaptation prompts" and splices them
into the frozen detector:

* Arch I   - text-fused LM vision states are gated directly into the
             detector's vision features (no conv, no decoder injection).
* Arch II  - LM vision states cross-attend over LM text states, go through a
             strided conv to detector width, and the resulting prompts are
             injected before the last decoder layer.
* Arch III - same weights as Arch II but injected before the first decoder
             layer, so the prompt influence propagates through the stack.
* Arch IV  - text-free: the conv runs on raw LM vision states.

The injection is a two-segment cross-attention: decoder queries attend over
[prompts | themselves]; prompt-segment weights are softmax-normalized within
the segment and scaled by tanh(g) (one gate per head), self-segment weights
are a plain softmax.  With g = 0 and a zero output projection (both forced at
construction) the whole adapter is an exact identity, so a freshly attached
adapter cannot disturb the host detector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Linear, Module, MultiHeadAttention
from .tensor import ConfigurationError, DimensionError, Tensor

ARCHS = ("I", "II", "III", "IV")


@dataclass
class AdapterConfig:
    arch: str = "IV"
    l_lm: int = 2
    l_d: int = 6
    heads: int = 4
    d: int = 64
    d_lm: int = 64
    grid: tuple[int, int] = (2, 2)
    conv_k: int = 3
    conv_stride: int = 2
    conv_pad: int = 1
    n_lm: int = 4
    depth: int = 6
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigurationError(f"arch {self.arch!r} not one of {ARCHS}")
        if not 0 <= self.l_lm <= self.n_lm:
            raise ConfigurationError(f"l_lm {self.l_lm} outside [0, {self.n_lm}]")
        if not 1 <= self.l_d <= self.depth:
            raise ConfigurationError(f"l_d {self.l_d} outside [1, {self.depth}]")
        if self.d % self.heads:
            raise ConfigurationError(
                f"width {self.d} not divisible by {self.heads} heads")
        if self.arch != "I":
            h, w = self.prompt_grid
            if h < 1 or w < 1:
                raise ConfigurationError(
                    f"conv on grid {self.grid} yields empty prompt ({h}x{w})")

    @property
    def prompt_grid(self) -> tuple[int, int]:
        h, w = self.grid
        ho = (h + 2 * self.conv_pad - self.conv_k) // self.conv_stride + 1
        wo = (w + 2 * self.conv_pad - self.conv_k) // self.conv_stride + 1
        return ho, wo

    @property
    def prompt_len(self) -> int:
        if self.arch == "I":
            return self.grid[0] * self.grid[1]
        h, w = self.prompt_grid
        return h * w


class FusionState(Module):
    """All adapter weights.  Invariants at construction: every gate is exactly
    zero and the output projection (weight and bias) is exactly zero."""

    def __init__(self, cfg: AdapterConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, d_lm = cfg.d, cfg.d_lm
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.gate = Tensor(np.zeros(cfg.heads), requires_grad=True)
        self.out_proj = Linear(d, d, rng)
        self.out_proj.zero_()
        if cfg.arch in ("II", "III"):
            self.text_fusion = MultiHeadAttention(d_lm, cfg.heads, rng)
        if cfg.arch != "I":
            k = cfg.conv_k
            self.conv_kernel = Tensor(
                rng.standard_normal((d, d_lm, k, k)) / np.sqrt(d_lm * k * k),
                requires_grad=True)
            self.conv_bias = Tensor(np.zeros(d), requires_grad=True)
        if cfg.arch == "I":
            self.text_fusion = MultiHeadAttention(d_lm, cfg.heads, rng)
            self.proj_lm = Linear(d_lm, d, rng)

    def make_text_fusion_identity(self) -> None:
        """Surgery: zero the text-fusion output map so the fusion block
        becomes a residual no-op (Arch II degenerates to Arch IV)."""
        self.text_fusion.wo.zero_()


def make_prompts(e_v_l: Tensor, e_t: Tensor | None, e_v_d: Tensor | None,
                 cfg: AdapterConfig, state: FusionState,
                 e_t_valid: np.ndarray | None = None) -> Tensor:
    """LM states -> adaptation prompts A_P of shape [B, L, d].

    Arch IV needs only ``e_v_l``; II/III additionally fuse ``e_t`` into the
    vision states first; Arch I returns detector-width tokens for the vision
    gating path (no conv).
    """
    b, l_v, d_lm = e_v_l.shape
    h, w = cfg.grid
    if l_v != h * w:
        raise DimensionError(f"{l_v} vision tokens do not tile grid {h}x{w}")
    if cfg.arch in ("I", "II", "III"):
        if e_t is None:
            raise ConfigurationError(f"arch {cfg.arch} requires LM text states")
        mask = None
        if e_t_valid is not None:
            mask = T.additive_mask(e_t_valid)[:, None, None, :]
        e_v_l = T.add(e_v_l, state.text_fusion(e_v_l, e_t, mask=mask))
    if cfg.arch == "I":
        if e_v_d is None:
            raise ConfigurationError("arch I requires detector vision features")
        return state.proj_lm(e_v_l)
    x = T.transpose(e_v_l, (0, 2, 1))
    x = T.reshape(x, b, d_lm, h, w)
    x = T.conv2d(x, state.conv_kernel, stride=cfg.conv_stride,
                 padding=cfg.conv_pad, bias=state.conv_bias)
    _, d, ho, wo = x.shape
    x = T.reshape(x, b, d, ho * wo)
    return T.transpose(x, (0, 2, 1))


def zero_init_cross_attn(e_d_prev: Tensor, a_p: Tensor, state: FusionState,
                         mask: np.ndarray | None = None,
                         return_internals: bool = False):
    """Two-segment gated cross-attention (the injection step).

    Keys/values are [prompts | queries]; RoPE positions run 0..L-1 over the
    prompts and L..L+T-1 over the queries.  Per row and head the prompt
    segment sums to tanh(g) and the self segment sums to 1.  ``mask`` is an
    optional additive ndarray broadcastable to [B, heads, T, L+T].
    """
    cfg = state.cfg
    b, t, d = e_d_prev.shape
    l = a_p.shape[1]
    if l == 0:
        raise ConfigurationError("empty prompt sequence")
    if a_p.shape[2] != d:
        raise DimensionError(
            f"prompt width {a_p.shape[2]} != detector width {d}")
    heads, d_h = cfg.heads, d // cfg.heads

    def split(x, n):
        return T.reshape(x, b, n, heads, d_h)

    q = split(state.wq(e_d_prev), t)
    k = T.concat([split(state.wk(a_p), l), split(state.wk(e_d_prev), t)], axis=1)
    v = T.concat([split(state.wv(a_p), l), split(state.wv(e_d_prev), t)], axis=1)
    q = T.rope_apply(q, np.arange(l, l + t), base=cfg.rope_base)
    k = T.rope_apply(k, np.arange(l + t), base=cfg.rope_base)
    q = T.transpose(q, (0, 2, 1, 3))
    k = T.transpose(k, (0, 2, 3, 1))
    v = T.transpose(v, (0, 2, 1, 3))
    scores = T.mul(T.matmul(q, k), 1.0 / np.sqrt(d_h))        # [B, h, T, L+T]
    mask_p = mask_s = None
    if mask is not None:
        mask = np.broadcast_to(mask, (1,) * (4 - np.ndim(mask)) + np.shape(mask))
        mask_p, mask_s = mask[..., :l], mask[..., l:]
    w_prompt = T.softmax(T.slice_axis(scores, 3, 0, l), axis=-1, mask=mask_p)
    w_self = T.softmax(T.slice_axis(scores, 3, l, l + t), axis=-1, mask=mask_s)
    gate = T.reshape(T.tanh_gate(state.gate), 1, cfg.heads, 1, 1)
    w_tilde = T.concat([T.mul(gate, w_prompt), w_self], axis=3)
    out = T.matmul(w_tilde, v)                                # [B, h, T, d_h]
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), b, t, d)
    result = T.add(e_d_prev, state.out_proj(out))
    if return_internals:
        return result, {
            "scores": scores.data.copy(),
            "weights": w_tilde.data.copy(),
            "prompt_len": l,
        }
    return result


def fuse_vision(e_v_d: Tensor, a_p: Tensor, state: FusionState) -> Tensor:
    """Arch I: gate prompt content into the detector's vision features, with
    the same zero-init guarantees as the injection path."""
    cfg = state.cfg
    b, p, d = e_v_d.shape
    l = a_p.shape[1]
    heads, d_h = cfg.heads, d // cfg.heads

    def split(x, n):
        return T.reshape(x, b, n, heads, d_h)

    q = T.rope_apply(split(state.wq(e_v_d), p), np.arange(l, l + p),
                     base=cfg.rope_base)
    k = T.rope_apply(split(state.wk(a_p), l), np.arange(l), base=cfg.rope_base)
    v = split(state.wv(a_p), l)
    q = T.transpose(q, (0, 2, 1, 3))
    k = T.transpose(k, (0, 2, 3, 1))
    v = T.transpose(v, (0, 2, 1, 3))
    weights = T.softmax(T.mul(T.matmul(q, k), 1.0 / np.sqrt(d_h)), axis=-1)
    gate = T.reshape(T.tanh_gate(state.gate), 1, heads, 1, 1)
    out = T.matmul(T.mul(gate, weights), v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), b, p, d)
    return T.add(e_v_d, state.out_proj(out))


class FusionHook:
    """Binds computed prompts to a detector pass.  ``inject`` transforms query
    embeddings right before decoder layer ``l_d``; ``vision`` rewrites vision
    features before decoding (Arch I only)."""

    def __init__(self, state: FusionState, a_p: Tensor | None,
                 vision_delta: bool = False):
        self.state = state
        self.a_p = a_p
        self.l_d = None if vision_delta else state.cfg.l_d
        self._vision = vision_delta

    def inject(self, q: Tensor) -> Tensor:
        return zero_init_cross_attn(q, self.a_p, self.state)

    def vision(self, e_v_d: Tensor) -> Tensor:
        if not self._vision:
            return e_v_d
        return fuse_vision(e_v_d, self.a_p, self.state)


def bind(state: FusionState, e_v_l: Tensor, e_t: Tensor | None = None,
         e_v_d: Tensor | None = None,
         e_t_valid: np.ndarray | None = None) -> FusionHook:
    """Convenience: prompts + hook for one batch of LM states."""
    a_p = make_prompts(e_v_l, e_t, e_v_d, state.cfg, state, e_t_valid)
    return FusionHook(state, a_p, vision_delta=(state.cfg.arch == "I"))


# ---------------------------------------------------------------------------
# analytic parameter / FLOP accounting
# ---------------------------------------------------------------------------


def _linear_flops(b_rows: int, d_in: int, d_out: int, bias: bool = True) -> int:
    return 2 * b_rows * d_in * d_out + (b_rows * d_out if bias else 0)


def adapter_param_count(state: FusionState) -> int:
    return sum(p.size for p in state.parameters())


def adapter_param_flops(cfg: AdapterConfig, b: int = 1, t_queries: int = 4,
                        text_len: int = 8) -> tuple[int, int]:
    """(trainable parameter count, FLOPs for one adapter forward).

    The FLOP expression mirrors the op-level conventions of the tensor core;
    the acceptance suite checks it against a metered forward exactly.
    """
    d, d_lm, h = cfg.d, cfg.d_lm, cfg.heads
    gh, gw = cfg.grid
    l_v = gh * gw
    l = cfg.prompt_len

    params = 3 * (d * d + d) + h + (d * d + d)            # wq,wk,wv + gate + out_proj
    if cfg.arch != "I":
        params += d * d_lm * cfg.conv_k ** 2 + d
    if cfg.arch in ("I", "II", "III"):
        params += 4 * (d_lm * d_lm + d_lm)                # text-fusion mha
    if cfg.arch == "I":
        params += d_lm * d + d                            # proj_lm

    flops = 0
    if cfg.arch in ("I", "II", "III"):
        flops += _linear_flops(b * l_v, d_lm, d_lm)       # fusion wq
        flops += 2 * _linear_flops(b * text_len, d_lm, d_lm)
        flops += 2 * b * l_v * d_lm * text_len            # scores
        flops += b * h * l_v * text_len                   # scale
        flops += 3 * b * h * l_v * text_len               # softmax
        flops += 2 * b * l_v * d_lm * text_len            # values
        flops += _linear_flops(b * l_v, d_lm, d_lm)       # fusion wo
        flops += b * l_v * d_lm                           # residual add
    if cfg.arch != "I":
        ph, pw = cfg.prompt_grid
        flops += 2 * b * d * ph * pw * d_lm * cfg.conv_k ** 2
        flops += b * d * ph * pw                          # conv bias add
    if cfg.arch == "I":
        flops += _linear_flops(b * l_v, d_lm, d)          # proj_lm
        p = t_queries                                     # vision token count
        flops += _linear_flops(b * p, d, d)               # wq
        flops += 2 * _linear_flops(b * l, d, d)           # wk, wv on prompts
        flops += 3 * b * p * d + 3 * b * l * d            # rope on q, k
        flops += 2 * b * p * d * l                        # scores
        flops += b * h * p * l                            # scale
        flops += 3 * b * h * p * l                        # softmax
        flops += h + b * h * p * l                        # tanh(g) + gating
        flops += 2 * b * p * d * l                        # weights @ values
        flops += _linear_flops(b * p, d, d)               # out_proj
        flops += b * p * d                                # residual add
        return params, flops

    t = t_queries
    flops += _linear_flops(b * t, d, d)                   # wq
    flops += 2 * (_linear_flops(b * l, d, d) + _linear_flops(b * t, d, d))
    flops += 3 * b * t * d + 3 * b * (l + t) * d          # rope q, k
    flops += 2 * b * t * d * (l + t)                      # scores matmul
    flops += b * h * t * (l + t)                          # scale
    flops += 3 * b * h * t * l + 3 * b * h * t * t        # segment softmaxes
    flops += h + b * h * t * l                            # tanh(g) + gating
    flops += 2 * b * t * d * (l + t)                      # weighted values
    flops += _linear_flops(b * t, d, d)                   # out_proj
    flops += b * t * d                                    # residual add
    return params, flops
