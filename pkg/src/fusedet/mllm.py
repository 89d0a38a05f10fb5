"""Toy multimodal LM: frozen patch encoder, pixel-shuffle alignment with a
trainable projector, and a small causal decoder with per-layer hidden taps.

The sequence is always [system prefix | vision tokens | text tokens] under a
causal mask, so vision-position states never depend on the text that follows
them.  Hidden state 0 is the embedded sequence before any decoder layer (the
"vision encoder only" arm); state l is the output of decoder layer l.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Linear, MLP, LayerNorm, Module, TransformerBlock, cross_entropy
from .scenes import PAD, VOCAB
from .tensor import ConfigurationError, DimensionError, Tensor

TAG_SYSTEM, TAG_VISION, TAG_TEXT = 0, 1, 2


@dataclass
class MllmConfig:
    d_lm: int = 64
    n: int = 4
    heads: int = 4
    vocab: int = VOCAB
    patch: int = 4
    shuffle_r: int = 4
    canvas: int = 32
    proj_in: int = 768
    proj_hidden: int = 128
    sys_len: int = 2
    mlp_ratio: int = 2
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_lm % self.heads:
            raise ConfigurationError(
                f"d_lm {self.d_lm} not divisible by heads {self.heads}")
        if self.canvas % self.patch:
            raise ConfigurationError(
                f"canvas {self.canvas} not divisible by patch {self.patch}")
        if (self.canvas // self.patch) % self.shuffle_r:
            raise ConfigurationError(
                f"vision grid {self.canvas // self.patch} not divisible by "
                f"shuffle factor {self.shuffle_r}")

    @property
    def d_patch(self) -> int:
        return 3 * self.patch * self.patch

    @property
    def grid(self) -> tuple[int, int]:
        g = self.canvas // self.patch
        return (g, g)

    @property
    def aligned_grid(self) -> tuple[int, int]:
        g = self.canvas // self.patch // self.shuffle_r
        return (g, g)

    @property
    def l_v(self) -> int:
        h, w = self.aligned_grid
        return h * w


@dataclass
class TokenLayout:
    tags: np.ndarray                 # int per position
    vision_span: tuple[int, int]
    text_span: tuple[int, int]
    grid: tuple[int, int]            # vision grid feeding the vision span

    def __post_init__(self):
        n = len(self.tags)
        v0, v1 = self.vision_span
        t0, t1 = self.text_span
        if not (0 <= v0 <= v1 <= n and 0 <= t0 <= t1 <= n):
            raise ConfigurationError(f"spans outside sequence of length {n}")
        if max(v0, t0) < min(v1, t1):
            raise ConfigurationError("vision and text spans overlap")
        if v1 - v0 != self.grid[0] * self.grid[1]:
            raise ConfigurationError(
                f"vision span length {v1 - v0} != grid area {self.grid}")


class VisionEncoder(Module):
    """Frozen orthogonal patch embedding (lossless up to the bias)."""

    def __init__(self, cfg: MllmConfig, rng: np.random.Generator):
        q, _ = np.linalg.qr(rng.standard_normal((cfg.d_patch, cfg.d_patch)))
        self.weight = Tensor(q, requires_grad=False)
        self.bias = Tensor(np.zeros(cfg.d_patch), requires_grad=False)
        self._patch = cfg.patch

    def __call__(self, images: Tensor) -> Tensor:
        b = images.shape[0]
        patches = T.pixel_unshuffle(images, self._patch)      # [B, 3p^2, h, w]
        _, c, h, w = patches.shape
        tokens = T.reshape(patches, b, c, h * w)
        tokens = T.transpose(tokens, (0, 2, 1))               # row-major grid
        return T.add(T.matmul(tokens, self.weight), self.bias)


class Projector(Module):
    """Repeat-then-Truncate channel alignment followed by a 2-layer MLP."""

    def __init__(self, cfg: MllmConfig, rng: np.random.Generator):
        self.mlp = MLP(cfg.proj_in, cfg.proj_hidden, cfg.d_lm, rng)
        self._target = cfg.proj_in

    def repeat_truncate(self, x: Tensor) -> Tensor:
        c = x.shape[-1]
        if c == self._target:
            return x
        tile = -(-self._target // c)
        x = T.concat([x] * tile, axis=-1)
        return T.slice_axis(x, -1, 0, self._target)

    def __call__(self, x: Tensor) -> Tensor:
        if self.mlp.fc1.weight.shape[0] != self._target:
            raise ConfigurationError(
                f"projector expects width {self.mlp.fc1.weight.shape[0]}, "
                f"configured for {self._target}")
        return self.mlp(self.repeat_truncate(x))


class MiniMllm(Module):
    def __init__(self, cfg: MllmConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.vision = VisionEncoder(cfg, rng)
        self.projector = Projector(cfg, rng)
        self.tok_embed = Tensor(rng.standard_normal((cfg.vocab, cfg.d_lm)) * 0.1,
                                requires_grad=True)
        self.sys_embed = Tensor(rng.standard_normal((cfg.sys_len, cfg.d_lm)) * 0.1,
                                requires_grad=True)
        self.blocks = [TransformerBlock(cfg.d_lm, cfg.heads, rng,
                                        mlp_ratio=cfg.mlp_ratio,
                                        rope_base=cfg.rope_base)
                       for _ in range(cfg.n)]
        self.ln_f = LayerNorm(cfg.d_lm)
        self.lm_head = Linear(cfg.d_lm, cfg.vocab, rng)

    # -- vision pipeline ----------------------------------------------------

    def encode_image(self, images: Tensor) -> Tensor:
        """[B, 3, H, W] -> [B, h_v*w_v, d_patch] patch tokens (frozen)."""
        return self.vision(images)

    def regroup_patches(self, tokens: Tensor) -> Tensor:
        """Patch tokens [B, h*w, d_patch] -> [B, L_v, d_patch*r^2] groups.

        Pure index shuffling (no arithmetic), so the result of the frozen
        vision encoder can be cached at this boundary.
        """
        b, g, c = tokens.shape
        h, w = self.cfg.grid
        if g != h * w:
            raise DimensionError(f"got {g} patch tokens for grid {h}x{w}")
        x = T.transpose(tokens, (0, 2, 1))
        x = T.reshape(x, b, c, h, w)
        x = T.pixel_unshuffle(x, self.cfg.shuffle_r)
        _, c2, h2, w2 = x.shape
        x = T.reshape(x, b, c2, h2 * w2)
        return T.transpose(x, (0, 2, 1))                       # [B, L_v, c*r^2]

    def align_vision(self, tokens: Tensor) -> Tensor:
        """Patch tokens -> [B, L_v, d_lm] LM-width vision tokens."""
        return self.projector(self.regroup_patches(tokens))

    # -- sequence assembly --------------------------------------------------

    def embed_sequence(self, images: Tensor, text_ids: np.ndarray
                       ) -> tuple[Tensor, TokenLayout]:
        vis = self.align_vision(self.encode_image(images))
        return self.embed_from_aligned(vis, text_ids)

    def embed_from_aligned(self, vis: Tensor, text_ids: np.ndarray
                           ) -> tuple[Tensor, TokenLayout]:
        """Assemble [system | vision | text] given aligned vision tokens."""
        b = vis.shape[0]
        l_v = vis.shape[1]
        s = self.cfg.sys_len
        t = text_ids.shape[1] if text_ids.size else 0
        parts = [T.concat([T.reshape(self.sys_embed, 1, s, self.cfg.d_lm)] * b,
                          axis=0), vis]
        if t:
            parts.append(T.embedding(self.tok_embed, text_ids))
        x = T.concat(parts, axis=1)
        tags = np.array([TAG_SYSTEM] * s + [TAG_VISION] * l_v + [TAG_TEXT] * t)
        layout = TokenLayout(tags, (s, s + l_v), (s + l_v, s + l_v + t),
                             self.cfg.aligned_grid)
        return x, layout

    def sequence_mask(self, layout: TokenLayout,
                      text_valid: np.ndarray | None) -> np.ndarray:
        n = len(layout.tags)
        mask = T.causal_mask(n)[None, None]
        if text_valid is not None and text_valid.size:
            t0, t1 = layout.text_span
            b = text_valid.shape[0]
            key_ok = np.ones((b, n), dtype=bool)
            key_ok[:, t0:t1] = text_valid
            mask = mask + T.additive_mask(key_ok)[:, None, None, :]
        return mask

    def forward_collect(self, x: Tensor, layout: TokenLayout,
                        text_valid: np.ndarray | None = None,
                        upto_layer: int | None = None,
                        return_scores: bool = False):
        """Run the decoder, returning [h_0 .. h_n] (or up to ``upto_layer``)."""
        if x.shape[1] != len(layout.tags):
            raise DimensionError(
                f"sequence length {x.shape[1]} != layout length {len(layout.tags)}")
        mask = self.sequence_mask(layout, text_valid)
        positions = np.arange(len(layout.tags))
        hidden = [x]
        scores: list[np.ndarray] = []
        depth = self.cfg.n if upto_layer is None else upto_layer
        for block in self.blocks[:depth]:
            if return_scores:
                x, s = block(x, mask=mask, positions=positions, return_scores=True)
                scores.append(s)
            else:
                x = block(x, mask=mask, positions=positions)
            hidden.append(x)
        if return_scores:
            return hidden, scores
        return hidden

    def truncate(self, h: Tensor, layout: TokenLayout) -> tuple[Tensor, Tensor]:
        """Hidden state -> (vision slice, text slice), exact views by span."""
        v0, v1 = layout.vision_span
        t0, t1 = layout.text_span
        if v1 <= v0 or t1 <= t0:
            raise ConfigurationError(
                f"empty span: vision {layout.vision_span}, text {layout.text_span}")
        return (T.slice_axis(h, 1, v0, v1), T.slice_axis(h, 1, t0, t1))

    # -- training objective -------------------------------------------------

    def lm_loss(self, images: Tensor, text_ids: np.ndarray,
                text_valid: np.ndarray | None = None) -> Tensor:
        """Mean next-token cross-entropy over (valid) text positions."""
        vis = self.align_vision(self.encode_image(images))
        return self.lm_loss_from_aligned(vis, text_ids, text_valid)

    def lm_loss_from_aligned(self, vis: Tensor, text_ids: np.ndarray,
                             text_valid: np.ndarray | None = None) -> Tensor:
        if text_ids.size == 0 or text_ids.shape[1] == 0:
            raise ConfigurationError("lm_loss needs a non-empty text span")
        b, t = text_ids.shape
        if text_valid is None:
            text_valid = np.ones((b, t), dtype=bool)
        x, layout = self.embed_from_aligned(vis, text_ids)
        hidden = self.forward_collect(x, layout, text_valid)
        logits = self.lm_head(self.ln_f(hidden[-1]))
        t0, _ = layout.text_span
        # position t0 + j is predicted from the state at t0 + j - 1
        pred = T.slice_axis(logits, 1, t0 - 1, t0 + t - 1)
        flat = T.reshape(pred, b * t, self.cfg.vocab)
        keep = np.flatnonzero(text_valid.reshape(-1))
        picked = T.index_select(flat, 0, keep)
        return cross_entropy(picked, text_ids.reshape(-1)[keep])

    def hidden_for_adapter(self, images: Tensor, l_lm: int,
                           text_ids: np.ndarray | None = None,
                           text_valid: np.ndarray | None = None):
        """Vision-span (and text-span) states from layer ``l_lm``, running the
        shortest sufficient forward.  Text defaults to none (Arch IV)."""
        vis = self.align_vision(self.encode_image(images))
        return self.hidden_from_aligned(vis, l_lm, text_ids, text_valid)

    def hidden_from_aligned(self, vis: Tensor, l_lm: int,
                            text_ids: np.ndarray | None = None,
                            text_valid: np.ndarray | None = None):
        """`hidden_for_adapter` starting from aligned vision tokens, so the
        frozen encoder/regroup prefix can come from a cache."""
        if not 0 <= l_lm <= self.cfg.n:
            raise ConfigurationError(f"l_lm {l_lm} outside [0, {self.cfg.n}]")
        ids = np.zeros((vis.shape[0], 0), dtype=np.intp) \
            if text_ids is None else text_ids
        x, layout = self.embed_from_aligned(vis, ids)
        hidden = self.forward_collect(x, layout, text_valid, upto_layer=l_lm)
        h = hidden[l_lm]
        v0, v1 = layout.vision_span
        e_v = T.slice_axis(h, 1, v0, v1)
        if ids.shape[1] == 0:
            return e_v, None
        t0, t1 = layout.text_span
        return e_v, T.slice_axis(h, 1, t0, t1)
