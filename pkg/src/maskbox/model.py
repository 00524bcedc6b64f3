"""The end-to-end network.

Tiny strided-conv backbone -> full self-attention over multi-scale tokens ->
stride-4 pixel embedding map fused from backbone and encoder features ->
query selection from top-ranked tokens (optionally replacing anchors with
boxes derived from the predicted masks) -> anchor-guided decoder layers with
box refinement in inverse-sigmoid space -> shared class/box/mask heads.

During training, denoising groups are appended as extra decoder queries.
Every partition (matching, each group) runs through the decoder in its own
block: that is the block-diagonal form of an additive -inf attention mask,
and it guarantees bit-identical matching-partition outputs whether or not
denoising queries exist.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as G
from . import nn
from . import tensor as T
from .config import RunConfig
from .denoise import DenoiseConfig, IsolationPlan, build_dn_groups


class BadExtent(ValueError):
    pass


class TokenCapExceeded(ValueError):
    pass


class KTooLarge(ValueError):
    pass


def inverse_sigmoid(x, eps=1e-4) -> np.ndarray:
    p = np.clip(np.asarray(x, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p / (1.0 - p))


def grid_centers(h: int, w: int) -> np.ndarray:
    """Normalized (x, y) cell centers in row-major token order, [h*w, 2]."""
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([(xs.reshape(-1) + 0.5) / w,
                     (ys.reshape(-1) + 0.5) / h], axis=1)


class Backbone(nn.Module):
    """Strided conv stack: stride-4 stem plus one extra stride-2 conv per level."""

    def __init__(self, rng, hidden, num_levels):
        self.num_levels = num_levels
        self.stem1 = nn.Conv(rng, 3, hidden // 2, 3, stride=2, pad=1)
        self.stem2 = nn.Conv(rng, hidden // 2, hidden, 3, stride=2, pad=1)
        self.downs = [nn.Conv(rng, hidden, hidden, 3, stride=2, pad=1)
                      for _ in range(num_levels - 1)]

    def __call__(self, image: T.Tensor):
        h, w = image.shape[1], image.shape[2]
        div = 4 * 2 ** (self.num_levels - 1)
        if h % div or w % div or h < div or w < div:
            raise BadExtent(f"image {h}x{w} must be a multiple of {div}")
        x = T.relu(self.stem1(image))
        x = T.relu(self.stem2(x))
        levels = [x]
        for conv in self.downs:
            x = T.relu(conv(x))
            levels.append(x)
        return levels        # levels[0] is the stride-4 backbone map C_b


class EncoderLayer(nn.Module):
    def __init__(self, rng, hidden, heads, ffn_mult):
        self.ln1 = nn.LayerNorm(hidden)
        self.attn = nn.SelfAttention(rng, hidden, heads)
        self.ln2 = nn.LayerNorm(hidden)
        self.ffn = nn.FeedForward(rng, hidden, ffn_mult)

    def __call__(self, x, pos):
        x = T.add(x, self.attn(self.ln1(x), pos=pos))
        return T.add(x, self.ffn(self.ln2(x)))


class Encoder(nn.Module):
    """Full self-attention over all flattened level tokens + level embeddings."""

    def __init__(self, rng, hidden, heads, layers, num_levels, ffn_mult,
                 token_cap):
        self.hidden = hidden
        self.token_cap = token_cap
        self.level_embed = nn.Embedding(rng, num_levels, hidden)
        self.layers = [EncoderLayer(rng, hidden, heads, ffn_mult)
                       for _ in range(layers)]

    def __call__(self, level_maps):
        shapes = [(m.shape[1], m.shape[2]) for m in level_maps]
        total = sum(h * w for h, w in shapes)
        if total > self.token_cap:
            raise TokenCapExceeded(f"{total} tokens exceed cap {self.token_cap}")
        flat, level_ids, centers = [], [], []
        for lvl, m in enumerate(level_maps):
            h, w = shapes[lvl]
            flat.append(T.reshape(T.transpose(m, (1, 2, 0)), (h * w, self.hidden)))
            level_ids.extend([lvl] * (h * w))
            centers.append(grid_centers(h, w))
        tokens = T.concat(flat, axis=0) if len(flat) > 1 else flat[0]
        sine = nn.sine_embed(np.concatenate(centers, axis=0), self.hidden)
        pos = T.add(T.tensor(sine), self.level_embed(level_ids))
        for layer in self.layers:
            tokens = layer(tokens, pos)
        maps, at = [], 0
        for lvl, (h, w) in enumerate(shapes):
            rows = T.gather_rows(tokens, np.arange(at, at + h * w))
            maps.append(T.transpose(T.reshape(rows, (h, w, self.hidden)),
                                    (2, 0, 1)))
            at += h * w
        return tokens, maps, shapes


class PixelHead(nn.Module):
    """Stride-4 pixel embedding map: M(T(C_b) + 2x-upsampled C_e)."""

    def __init__(self, rng, hidden):
        self.proj = nn.Conv(rng, hidden, hidden, 1)
        self.m1 = nn.Conv(rng, hidden, hidden, 3, pad=1)
        self.m2 = nn.Conv(rng, hidden, hidden, 1)

    def __call__(self, c_b: T.Tensor, c_e: T.Tensor) -> T.Tensor:
        if (c_b.shape[1] != 2 * c_e.shape[1]
                or c_b.shape[2] != 2 * c_e.shape[2]):
            raise T.ShapeMismatch(f"C_b {c_b.shape} vs C_e {c_e.shape}: "
                                  "encoder map must be half resolution")
        fused = T.add(self.proj(c_b), T.upsample2x(c_e))
        return self.m2(T.relu(self.m1(fused)))


def predict_masks(q_emb: T.Tensor, pixel_flat: T.Tensor, hw) -> T.Tensor:
    """Mask logits as the dot product of query embeddings with the pixel map."""
    if q_emb.shape[1] != pixel_flat.shape[0]:
        raise T.ShapeMismatch(f"{q_emb.shape} vs pixel map {pixel_flat.shape}")
    logits = T.matmul(q_emb, pixel_flat)
    return T.reshape(logits, (q_emb.shape[0], hw[0], hw[1]))


class Heads(nn.Module):
    """Shared class / box-delta / mask-embedding heads over normed content."""

    def __init__(self, rng, hidden, num_classes):
        self.norm = nn.LayerNorm(hidden)
        self.cls = nn.Linear(rng, hidden, num_classes)
        # focal prior: start every class logit near a 1% positive rate
        self.cls.b.data = np.full(num_classes, -math.log(99.0),
                                  dtype=self.cls.b.data.dtype)
        self.box = nn.MLP(rng, hidden, hidden, 4, depth=3, zero_last=True)
        self.mask = nn.Linear(rng, hidden, hidden)

    def __call__(self, content, anchor_logit, pixel_flat, hw):
        h = self.norm(content)
        cls_logits = self.cls(h)
        boxes = T.sigmoid(T.add(self.box(h), anchor_logit))
        masks = predict_masks(self.mask(h), pixel_flat, hw)
        return cls_logits, boxes, masks


class DecoderLayer(nn.Module):
    """Isolated self-attention + anchor-guided sparse cross-attention + FFN."""

    def __init__(self, rng, hidden, heads, num_levels, points, ffn_mult):
        self.hidden = hidden
        self.points = points
        self.num_levels = num_levels
        self.ln1 = nn.LayerNorm(hidden)
        self.self_attn = nn.SelfAttention(rng, hidden, heads)
        self.pos_mlp = nn.MLP(rng, hidden, hidden, hidden, depth=2)
        self.ln2 = nn.LayerNorm(hidden)
        self.value = nn.Linear(rng, hidden, hidden)
        self.offsets = [nn.Linear(rng, hidden, points * 2, zero_init=True)
                        for _ in range(num_levels)]
        self.weights = [nn.Linear(rng, hidden, points, zero_init=True)
                        for _ in range(num_levels)]
        for lvl, off in enumerate(self.offsets):
            angles = 2 * math.pi * (np.arange(points) + lvl / num_levels) / points
            radius = 0.5 * (np.arange(points) + 1) / points
            bias = np.stack([np.cos(angles) * radius,
                             np.sin(angles) * radius], axis=1).reshape(-1)
            off.b.data = bias.astype(off.b.data.dtype)
        self.out = nn.Linear(rng, hidden, hidden)
        self.ln3 = nn.LayerNorm(hidden)
        self.ffn = nn.FeedForward(rng, hidden, ffn_mult)

    def value_maps(self, tokens, shapes):
        """Value projection of all tokens, reshaped per level (shared by all
        query blocks within this layer)."""
        v = self.value(tokens)
        maps, at = [], 0
        for h, w in shapes:
            rows = T.gather_rows(v, np.arange(at, at + h * w))
            maps.append(T.transpose(T.reshape(rows, (h, w, self.hidden)),
                                    (2, 0, 1)))
            at += h * w
        return maps

    def __call__(self, content, anchors, vmaps, attn_mask=None):
        q = content.shape[0]
        pos = self.pos_mlp(T.tensor(nn.sine_embed(anchors, self.hidden)))
        x = T.add(content, self.self_attn(self.ln1(content), pos=pos,
                                          mask=attn_mask))

        h = self.ln2(x)
        center = anchors[:, None, :2]            # [Q,1,2]
        half = anchors[:, None, 2:] / 2.0
        weighted = []
        weights = T.concat([wl(h) for wl in self.weights], axis=1)
        weights = T.softmax(weights, axis=-1)    # over levels x points jointly
        for lvl, vmap in enumerate(vmaps):
            off = T.reshape(self.offsets[lvl](h), (q, self.points, 2))
            pts = T.add(T.mul(off, half), center)
            samp = sample_points_on_map(vmap, T.reshape(pts, (q * self.points, 2)))
            weighted.append(T.reshape(samp, (q, self.points, self.hidden)))
        stacked = T.concat(weighted, axis=1)     # [Q, levels*points, hidden]
        mixed = T.reshape(T.matmul(T.reshape(weights, (q, 1, -1)), stacked),
                          (q, self.hidden))
        x = T.add(x, self.out(mixed))
        return T.add(x, self.ffn(self.ln3(x)))


def sample_points_on_map(vmap, pts):
    return T.sample_bilinear(vmap, pts)


def mask_enhanced_init(anchors: np.ndarray, mask_logits: np.ndarray,
                       threshold: float = 0.5) -> np.ndarray:
    """Replace each anchor with the tight box of its predicted mask.

    Queries whose mask clears the threshold nowhere keep their original
    encoder-predicted anchor.
    """
    out = anchors.copy()
    probs = 1.0 / (1.0 + np.exp(-mask_logits))
    for i in range(anchors.shape[0]):
        try:
            out[i] = G.mask_to_box(probs[i], threshold).as_array()
        except G.EmptyMask:
            pass
    return G.sanitize(out)


@dataclass
class LayerPreds:
    class_logits: T.Tensor        # [Q, K]
    boxes: T.Tensor               # [Q, 4] cxcywh in (0, 1)
    mask_logits: T.Tensor         # [Q, H/4, W/4]
    anchors_in: np.ndarray | None = None   # anchors entering this layer


@dataclass
class PredictionSet:
    matching: dict                 # {"enc": LayerPreds, 0: ..., L-1: ...}
    dn: dict | None = None         # {0: LayerPreds, ...} over the DN partition
    dn_groups: list = field(default_factory=list)
    plan: IsolationPlan | None = None

    @property
    def final(self) -> LayerPreds:
        dec = [k for k in self.matching if isinstance(k, int)]
        return self.matching[max(dec)] if dec else self.matching["enc"]

    def layer_keys(self):
        return ["enc"] + sorted(k for k in self.matching if isinstance(k, int))


class Model(nn.Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        hid = cfg.hidden
        self.backbone = Backbone(rng, hid, cfg.num_levels)
        self.encoder = Encoder(rng, hid, cfg.heads, cfg.enc_layers,
                               cfg.num_levels, cfg.ffn_mult, cfg.token_cap)
        self.pixel = PixelHead(rng, hid)
        self.dec_heads = Heads(rng, hid, cfg.num_classes)
        if not cfg.share_enc_heads:
            self.enc_heads = Heads(rng, hid, cfg.num_classes)
        self.query_proj = nn.Linear(rng, hid, hid)
        self.query_norm = nn.LayerNorm(hid)
        self.label_embed = nn.Embedding(rng, cfg.num_classes, hid)
        self.dec_layers = [DecoderLayer(rng, hid, cfg.heads, cfg.num_levels,
                                        cfg.sampling_points, cfg.ffn_mult)
                           for _ in range(cfg.dec_layers)]

    def _enc_heads(self) -> Heads:
        return self.dec_heads if self.cfg.share_enc_heads else self.enc_heads

    def _base_boxes(self, shapes) -> np.ndarray:
        """One anchor per token: grid-cell center, level-scaled extent."""
        out = []
        for lvl, (h, w) in enumerate(shapes):
            stride = 4 * 2 ** lvl
            size = min(1.0, 2.0 * stride / self.cfg.image_size)
            c = grid_centers(h, w)
            out.append(np.concatenate(
                [c, np.full((c.shape[0], 2), size)], axis=1))
        return G.sanitize(np.concatenate(out, axis=0))

    def forward(self, image, targets=None, rng=None) -> PredictionSet:
        """Run the network; training mode iff targets is not None.

        Denoising groups are built only in training mode (and only if the
        config enables them); they never touch the matching partition.
        """
        cfg = self.cfg
        x = image if isinstance(image, T.Tensor) else T.tensor(image)
        if x.ndim != 3 or x.shape[0] != 3:
            raise BadExtent(f"image must be [3, H, W], got {x.shape}")
        levels = self.backbone(x)
        c_b = levels[0]
        tokens, enc_maps, shapes = self.encoder(levels)
        c_e = enc_maps[1]
        pixel_map = self.pixel(c_b, c_e)
        hw = (pixel_map.shape[1], pixel_map.shape[2])
        pixel_flat = T.reshape(pixel_map, (cfg.hidden, hw[0] * hw[1]))

        # unified query selection over every token
        base = self._base_boxes(shapes)
        n_tokens = tokens.shape[0]
        if cfg.num_queries > n_tokens:
            raise KTooLarge(f"K={cfg.num_queries} > {n_tokens} tokens")
        enc_heads = self._enc_heads()
        cls_all, box_all, mask_all = enc_heads(
            tokens, inverse_sigmoid(base), pixel_flat, hw)
        scores = _sigmoid_np(cls_all.data).max(axis=1)
        order = rank_tokens(scores, cfg.num_queries)
        enc_preds = LayerPreds(
            class_logits=T.gather_rows(cls_all, order),
            boxes=T.gather_rows(box_all, order),
            mask_logits=T.gather_rows(mask_all, order),
            anchors_in=None)
        content = self.query_norm(self.query_proj(T.gather_rows(tokens, order)))
        anchors = G.sanitize(enc_preds.boxes.data[:, :4].astype(np.float64))
        if cfg.mask_enhanced_init:
            anchors = mask_enhanced_init(anchors, enc_preds.mask_logits.data,
                                         cfg.mask_threshold)

        training = targets is not None
        blocks = [{"content": content, "anchors": anchors, "mask": None}]
        groups, plan = [], None
        if training and cfg.denoising and cfg.dn_groups > 0:
            if rng is None:
                raise ValueError("training forward needs a generator for noise")
            groups, plan = build_dn_groups(targets, cfg.dn_config(),
                                           cfg.num_classes, rng)
            plan.num_matching = cfg.num_queries
            if groups:
                # all groups share one block; the block-diagonal mask keeps
                # them isolated (exact zeros, so the Jacobian across groups
                # is exactly zero)
                dn_plan = IsolationPlan(0, plan.group_sizes)
                blocks.append({
                    "content": self.label_embed(np.concatenate(
                        [grp.noised_labels for grp in groups])),
                    "anchors": G.sanitize(np.concatenate(
                        [grp.noised_boxes for grp in groups], axis=0)),
                    "mask": dn_plan.allowed_mask(),
                })

        matching = {"enc": enc_preds}
        dn = {} if len(blocks) > 1 else None
        for li, layer in enumerate(self.dec_layers):
            vmaps = layer.value_maps(tokens, shapes)
            for bi, blk in enumerate(blocks):
                anchors_in = blk["anchors"]
                blk["content"] = layer(blk["content"], anchors_in, vmaps,
                                       attn_mask=blk["mask"])
                cls_l, box_l, mask_l = self.dec_heads(
                    blk["content"], inverse_sigmoid(anchors_in),
                    pixel_flat, hw)
                preds = LayerPreds(cls_l, box_l, mask_l, anchors_in)
                blk["anchors"] = G.sanitize(box_l.data.astype(np.float64))
                if bi == 0:
                    matching[li] = preds
                else:
                    dn[li] = preds
        return PredictionSet(matching=matching, dn=dn, dn_groups=groups,
                             plan=plan)


def _sigmoid_np(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def rank_tokens(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k token indices by score, descending; ties keep the lower index."""
    return np.argsort(-np.asarray(scores), kind="stable")[:k]


def build_model(cfg: RunConfig, seed=None) -> Model:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return Model(cfg, rng)


# -- task post-processing ------------------------------------------------------

def postprocess_instance(final: LayerPreds, num_thing_classes: int,
                         score_threshold: float = 0.25,
                         mask_threshold: float = 0.5) -> list:
    """Per-query (class, score, box, mask) over thing classes."""
    cls = _sigmoid_np(final.class_logits.data)[:, :num_thing_classes]
    out = []
    for q in range(cls.shape[0]):
        score = float(cls[q].max())
        if score < score_threshold:
            continue
        out.append({
            "class": int(cls[q].argmax()),
            "score": score,
            "box": final.boxes.data[q].astype(np.float64).copy(),
            "mask": final.mask_logits.data[q] >= _logit(mask_threshold),
        })
    out.sort(key=lambda d: -d["score"])
    return out


def _logit(p):
    return math.log(p / (1.0 - p))


def postprocess_panoptic(final: LayerPreds, num_thing_classes: int,
                         score_threshold: float = 0.25,
                         min_segment_area: int = 16,
                         mask_threshold: float = 0.5):
    """Pixel-wise argmax over score-weighted mask probabilities.

    Returns (segment id map with 0 = void, list of {id, class, is_thing}).
    Same-class stuff segments merge into one segment; segments smaller than
    the minimum area drop to void.
    """
    cls = _sigmoid_np(final.class_logits.data.astype(np.float64))
    probs = _sigmoid_np(final.mask_logits.data.astype(np.float64))
    h, w = probs.shape[1:]
    seg_map = np.zeros((h, w), dtype=np.int32)
    segments = []
    scores = cls.max(axis=1)
    classes = cls.argmax(axis=1)
    keep = np.nonzero(scores >= score_threshold)[0]
    if keep.size == 0:
        return seg_map, segments
    weighted = probs[keep] * scores[keep, None, None]
    winner = np.argmax(weighted, axis=0)
    confident = probs[keep][winner, np.arange(h)[:, None], np.arange(w)[None, :]] \
        >= mask_threshold
    stuff_seg_by_class = {}
    next_id = 1
    for j, q in enumerate(keep):
        pix = (winner == j) & confident
        if not pix.any():
            continue
        c = int(classes[q])
        is_thing = c < num_thing_classes
        if not is_thing and c in stuff_seg_by_class:
            seg_map[pix] = stuff_seg_by_class[c]
            continue
        seg_map[pix] = next_id
        segments.append({"id": next_id, "class": c, "is_thing": is_thing})
        if not is_thing:
            stuff_seg_by_class[c] = next_id
        next_id += 1
    # drop undersized segments
    kept = []
    for seg in segments:
        area = int((seg_map == seg["id"]).sum())
        if area < min_segment_area:
            seg_map[seg_map == seg["id"]] = 0
        else:
            kept.append(seg)
    return seg_map, kept


def postprocess_semantic(final: LayerPreds) -> np.ndarray:
    """Per-pixel argmax of sum_q p(class | q) * sigma(mask_q)."""
    cls = _sigmoid_np(final.class_logits.data.astype(np.float64))   # [Q, K]
    probs = _sigmoid_np(final.mask_logits.data.astype(np.float64))  # [Q, H, W]
    qn, h, w = probs.shape
    votes = np.einsum("qk,qhw->khw", cls, probs)
    return votes.argmax(axis=0).astype(np.int32)
