"""Minimal DETR-style grounding detector.

Vision path: the shared frozen patch encoder, a trained projection, and a
learned positional table.  Text path: embedding plus one self-attention layer
over the scene's candidate phrases joined by "." separators.  A stack of
decoder layers (self-attention, vision cross-attention, text cross-attention,
MLP; all pre-LN) refines Q learned queries, read out by a sigmoid box head
and a phrase-alignment head with a learned background embedding.

An optional fusion hook (see the adapter module) may rewrite the vision
features before decoding and/or transform the query embeddings right before
one decoder layer; the detector itself knows nothing about how the hook's
content is produced.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .layers import Linear, MLP, LayerNorm, Module, MultiHeadAttention, cross_entropy
from .scenes import VOCAB, SyntheticScene, box_iou, encode
from .tensor import Tensor, UsageError


@dataclass
class DetectorConfig:
    d: int = 64
    heads: int = 4
    depth: int = 6
    queries: int = 4
    vocab: int = VOCAB
    mlp_ratio: int = 2
    rope_base: float = 10000.0
    box_weight: float = 5.0
    phrase_weight: float = 1.0
    background_weight: float = 0.5


class TextEncoder(Module):
    def __init__(self, cfg: DetectorConfig, rng: np.random.Generator):
        self.embed = Tensor(rng.standard_normal((cfg.vocab, cfg.d)) * 0.1,
                            requires_grad=True)
        self.attn = MultiHeadAttention(cfg.d, cfg.heads, rng,
                                       rope_base=cfg.rope_base)
        self.ln = LayerNorm(cfg.d)

    def __call__(self, ids: np.ndarray, valid: np.ndarray) -> Tensor:
        x = T.embedding(self.embed, ids)
        mask = T.additive_mask(valid)[:, None, None, :]
        x = T.add(x, self.attn(x, x, mask=mask))
        return self.ln(x)


class DecoderLayer(Module):
    def __init__(self, cfg: DetectorConfig, rng: np.random.Generator):
        d, h = cfg.d, cfg.heads
        self.ln_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, h, rng)
        self.ln_vis = LayerNorm(d)
        self.vis_attn = MultiHeadAttention(d, h, rng)
        self.ln_txt = LayerNorm(d)
        self.txt_attn = MultiHeadAttention(d, h, rng)
        self.ln_mlp = LayerNorm(d)
        self.mlp = MLP(d, cfg.mlp_ratio * d, d, rng)

    def __call__(self, q: Tensor, e_vis: Tensor, e_txt: Tensor,
                 txt_mask: np.ndarray) -> Tensor:
        h = self.ln_self(q)
        q = T.add(q, self.self_attn(h, h))
        q = T.add(q, self.vis_attn(self.ln_vis(q), e_vis))
        q = T.add(q, self.txt_attn(self.ln_txt(q), e_txt, mask=txt_mask))
        return T.add(q, self.mlp(self.ln_mlp(q)))


class GroundingDetector(Module):
    def __init__(self, cfg: DetectorConfig, d_patch: int, n_patches: int,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.vis_proj = Linear(d_patch, cfg.d, rng)
        self.vis_pos = Tensor(rng.standard_normal((n_patches, cfg.d)) * 0.1,
                              requires_grad=True)
        self.text = TextEncoder(cfg, rng)
        self.query_embed = Tensor(rng.standard_normal((cfg.queries, cfg.d)) * 0.5,
                                  requires_grad=True)
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.depth)]
        self.ln_out = LayerNorm(cfg.d)
        self.box_head = MLP(cfg.d, cfg.d, 4, rng)
        self.class_proj = Linear(cfg.d, cfg.d, rng)
        self.bg_embed = Tensor(rng.standard_normal(cfg.d) * 0.1,
                               requires_grad=True)

    # -- encoders -----------------------------------------------------------

    def encode_vision(self, patch_tokens: Tensor) -> Tensor:
        """Frozen patch tokens [B, P, d_patch] -> detector features [B, P, d]."""
        return T.add(self.vis_proj(patch_tokens), self.vis_pos)

    def encode_text(self, ids: np.ndarray, valid: np.ndarray) -> Tensor:
        return self.text(ids, valid)

    # -- decoder ------------------------------------------------------------

    def decode(self, e_vis: Tensor, e_txt: Tensor, txt_valid: np.ndarray,
               hook=None, collect: bool = False,
               start_state: Tensor | None = None, start_layer: int = 1):
        """Run decoder layers ``start_layer .. depth`` over the query set.

        ``start_state`` resumes from a cached mid-stack state (the default
        starts from the learned query embeddings).  A hook's ``inject`` fires
        right before its target layer.
        """
        b = e_vis.shape[0]
        if start_state is None:
            if start_layer != 1:
                raise UsageError("start_layer > 1 requires start_state")
            q = T.concat(
                [T.reshape(self.query_embed, 1, self.cfg.queries, self.cfg.d)] * b,
                axis=0)
        else:
            q = start_state
        if hook is not None and hook.l_d is not None and hook.l_d < start_layer:
            raise UsageError(
                f"hook targets layer {hook.l_d} before start layer {start_layer}")
        txt_mask = T.additive_mask(txt_valid)[:, None, None, :]
        states = []
        for i, layer in enumerate(self.layers[start_layer - 1:], start=start_layer):
            if hook is not None and hook.l_d == i:
                q = hook.inject(q)
            q = layer(q, e_vis, e_txt, txt_mask)
            if collect:
                states.append(q)
        q = self.ln_out(q)
        if collect:
            return q, states
        return q

    # -- heads --------------------------------------------------------------

    def boxes(self, q: Tensor) -> Tensor:
        return T.sigmoid(self.box_head(q))

    def phrase_logits(self, q: Tensor, pooled: Tensor) -> Tensor:
        """[B,Q,d] x [B,C,d] -> [B,Q,C+1] alignment logits; last column is the
        learned background class."""
        b, _, d = q.shape
        proj = self.class_proj(q)
        cand = T.transpose(pooled, (0, 2, 1))
        logits = T.mul(T.matmul(proj, cand), 1.0 / np.sqrt(d))
        bg = T.mul(T.matmul(proj, T.reshape(self.bg_embed, 1, d, 1)),
                   1.0 / np.sqrt(d))
        return T.concat([logits, bg], axis=2)


# ---------------------------------------------------------------------------
# candidate-phrase packing
# ---------------------------------------------------------------------------


def pack_candidates(scene_candidates: list[list[np.ndarray]],
                    width: int | None = None
                    ) -> tuple[np.ndarray, np.ndarray, list[list[tuple[int, int]]]]:
    """Join each scene's candidate phrases with "." separators into one text
    row per scene.  Returns (ids, valid, per-scene token spans per candidate).

    With ``width`` every batch is padded to that fixed size regardless of
    content; training uses this so differently composed batches keep the
    same shapes (and so the same summation order) everywhere downstream.
    """
    sep = encode(["."])
    rows, spans = [], []
    for cands in scene_candidates:
        toks: list[np.ndarray] = []
        sp = []
        pos = 0
        for j, c in enumerate(cands):
            if j:
                toks.append(sep)
                pos += 1
            sp.append((pos, pos + len(c)))
            toks.append(c)
            pos += len(c)
        rows.append(np.concatenate(toks))
        spans.append(sp)
    needed = max(len(r) for r in rows)
    if width is None:
        width = needed
    elif width < needed:
        raise UsageError(
            f"pack width {width} too small for {needed}-token candidates")
    ids = np.zeros((len(rows), width), dtype=np.intp)
    valid = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        valid[i, : len(r)] = True
    return ids, valid, spans


def pool_phrases(e_txt: Tensor, spans: list[list[tuple[int, int]]],
                 max_c: int) -> tuple[Tensor, np.ndarray]:
    """Per-candidate masked means of text features, padded to ``max_c``
    candidates.  Returns ([B, max_c, d], candidate-count array)."""
    b, w, _ = e_txt.shape
    weights = np.zeros((b, max_c, w))
    counts = np.array([len(sp) for sp in spans])
    for i, sp in enumerate(spans):
        for c, (lo, hi) in enumerate(sp):
            weights[i, c, lo:hi] = 1.0 / (hi - lo)
    return T.matmul(T.constant(weights), e_txt), counts


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


def match_hungarian(costs: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost injective assignment ground truth -> query for a [Q, G]
    cost matrix.  Returns (query, gt) pairs sorted by gt."""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise UsageError(f"cost matrix must be 2-d, got shape {costs.shape}")
    q, g = costs.shape
    if g > q:
        raise UsageError(f"more ground truths ({g}) than queries ({q})")
    if not np.all(np.isfinite(costs)):
        raise UsageError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(costs)
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda p: p[1])
    return [(int(r), int(c)) for r, c in pairs]


def match_bruteforce(costs: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    """Enumerate every injective assignment; the oracle for small Q, G."""
    q, g = costs.shape
    best, best_cost = None, np.inf
    for perm in permutations(range(q), g):
        c = sum(costs[perm[j], j] for j in range(g))
        if c < best_cost - 1e-15:
            best_cost = c
            best = [(perm[j], j) for j in range(g)]
    return best, float(best_cost)


# ---------------------------------------------------------------------------
# loss / eval
# ---------------------------------------------------------------------------


def detection_loss(boxes: Tensor, logits: Tensor, counts: np.ndarray,
                   scenes: list[SyntheticScene], cfg: DetectorConfig) -> Tensor:
    """Hungarian-matched loss, summed per scene and averaged over the batch.

    Per scene: box_weight * L1 on matched boxes, phrase_weight * CE on matched
    queries' candidate labels, background_weight * CE pushing unmatched
    queries to the background class.
    """
    b, nq, _ = boxes.shape
    terms = []
    for i, scene in enumerate(scenes):
        # drop this scene's padded candidate columns; background moves to the
        # last kept column
        keep = np.r_[np.arange(counts[i]), logits.shape[2] - 1]
        bg_label = int(counts[i])
        raw = logits.data[i][:, keep]
        shifted = np.exp(raw - raw.max(-1, keepdims=True))
        probs = shifted / shifted.sum(-1, keepdims=True)
        g = len(scene.gt_boxes)
        cost = np.zeros((nq, g))
        for j in range(g):
            l1 = np.abs(boxes.data[i] - scene.gt_boxes[j]).sum(-1)
            cost[:, j] = cfg.box_weight * l1 + cfg.phrase_weight * (
                1.0 - probs[:, scene.gt_labels[j]])
        pairs = match_hungarian(cost)
        matched = {qi for qi, _ in pairs}
        scene_logits = T.slice_axis(logits, 0, i, i + 1)
        scene_logits = T.reshape(scene_logits, nq, logits.shape[2])
        scene_logits = T.index_select(scene_logits, 1, keep)
        for qi, gj in pairs:
            box_q = T.reshape(T.slice_axis(T.slice_axis(boxes, 0, i, i + 1),
                                           1, qi, qi + 1), 4)
            diff = T.sub(box_q, T.constant(scene.gt_boxes[gj]))
            terms.append(T.mul(T.tsum(T.absval(diff)), cfg.box_weight))
            row = T.slice_axis(scene_logits, 0, qi, qi + 1)
            terms.append(T.mul(
                cross_entropy(row, np.array([scene.gt_labels[gj]])),
                cfg.phrase_weight))
        un = [qi for qi in range(nq) if qi not in matched]
        if un:
            rows = T.index_select(scene_logits, 0, np.array(un))
            terms.append(T.mul(
                cross_entropy(rows, np.full(len(un), bg_label)),
                cfg.background_weight * len(un)))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, 1.0 / len(scenes))


def query_column(scene: SyntheticScene) -> int:
    """Index of the query phrase within the scene's candidate list."""
    for j, cand in enumerate(scene.candidates):
        if len(cand) == len(scene.query.ids) and np.array_equal(cand, scene.query.ids):
            return j
    raise UsageError("query phrase is not among the scene candidates")


def eval_grounding(boxes: np.ndarray, logits: np.ndarray,
                   scenes: list[SyntheticScene], iou_thresh: float = 0.5
                   ) -> dict:
    """Single-phrase grounding accuracy at an IoU threshold, split by query
    kind.  The answer box comes from the query slot whose phrase distribution
    (over the scene's real candidates plus background) puts the most mass on
    the query phrase; padded candidate columns are excluded."""
    per_scene = []
    for i, scene in enumerate(scenes):
        n_cand = len(scene.candidates)
        keep = np.r_[np.arange(n_cand), logits.shape[2] - 1]
        row = logits[i][:, keep]
        shifted = np.exp(row - row.max(-1, keepdims=True))
        probs = shifted / shifted.sum(-1, keepdims=True)
        pick = int(np.argmax(probs[:, query_column(scene)]))
        iou = box_iou(boxes[i, pick], scene.query.target_box)
        per_scene.append({
            "kind": scene.query.kind,
            "iou": iou,
            "hit": bool(iou >= iou_thresh),
            "picked_query": pick,
        })
    out = {"n": len(scenes), "iou_thresh": iou_thresh}
    for kind in ("category", "spatial"):
        sub = [r for r in per_scene if r["kind"] == kind]
        if sub:
            out[f"acc_{kind}"] = float(np.mean([r["hit"] for r in sub]))
            out[f"n_{kind}"] = len(sub)
    out["acc"] = float(np.mean([r["hit"] for r in per_scene]))
    out["mean_iou"] = float(np.mean([r["iou"] for r in per_scene]))
    out["per_scene"] = per_scene
    return out


def substitution_index(grid: tuple[int, int], r: int) -> np.ndarray:
    """Patch-position -> aligned-token index map for nearest-neighbor
    upsampling of LM vision states onto the detector's patch grid."""
    h, w = grid
    rows = np.repeat(np.arange(h // r), r)
    cols = np.repeat(np.arange(w // r), r)
    return (rows[:, None] * (w // r) + cols[None, :]).reshape(-1)


class SubstitutionHead(Module):
    """Negative control: a single linear map from LM width onto the detector
    vision slots, replacing the detector's own vision features entirely."""

    def __init__(self, d_lm: int, d: int, grid: tuple[int, int], r: int,
                 rng: np.random.Generator):
        self.proj = Linear(d_lm, d, rng)
        self._index = substitution_index(grid, r)

    def __call__(self, e_v_l: Tensor) -> Tensor:
        mapped = self.proj(e_v_l)
        return T.index_select(mapped, 1, self._index)
