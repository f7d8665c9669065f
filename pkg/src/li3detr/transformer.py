"""Deformable-attention encoder and the query decoder with per-level
sigmoid-weighted BEV sampling, self-attention and reference refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .backbone import ConfigError
from .boxes import CODE_SIZE, decode_box
from .numcore import ContractError, Tensor, ops
from .params import Params


@dataclass
class EncoderConfig:
    layers: int = 2
    heads: int = 8
    levels: int = 4
    points: int = 4
    d_model: int = 64
    ffn_dim: int = 128

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")


@dataclass
class DecoderConfig:
    layers: int = 6
    num_queries: int = 900
    heads: int = 8
    d_model: int = 64
    ffn_dim: int = 128
    num_classes: int = 3
    query_std: float = 0.1
    detach_refs: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.num_queries < 1:
            raise ConfigError("num_queries must be >= 1")


@dataclass
class LayerPrediction:
    """Raw head outputs of one decoder layer.

    ``reg`` columns: delta (3, normalised), log size (3), sin, cos, vx, vy.
    ``ref`` is the reference the delta is relative to.
    """

    ref: Tensor
    reg: Tensor
    cls: Tensor

    def box_vector(self) -> Tensor:
        """Regression vector comparable with ``boxes.encode_boxes``."""
        centre = self.ref + self.reg[:, :3]
        return ops.concat([centre, self.reg[:, 3:]], axis=1)

    def __len__(self) -> int:
        return self.reg.shape[0]


# ---------------------------------------------------------------- encodings


def positional_encoding(points: np.ndarray | Tensor, d: int) -> Tensor:
    """Sinusoidal encoding of normalised coordinates, d // (2k) frequencies
    per coordinate spaced geometrically from pi to 64 pi; zero padded to d."""
    pts = points if isinstance(points, Tensor) else Tensor(points)
    k = pts.shape[1]
    nf = max(d // (2 * k), 1)
    freqs = np.pi * 64.0 ** (np.arange(nf) / max(nf - 1, 1))
    ang = ops.reshape(ops.reshape(pts, (-1, k, 1)) * freqs, (-1, k * nf))
    parts = [ops.sin(ang), ops.cos(ang)]
    used = 2 * k * nf
    if used < d:
        parts.append(Tensor(np.zeros((pts.shape[0], d - used))))
    out = ops.concat(parts, axis=1)
    return out[:, :d] if used > d else out


def pixel_location(ref_xy: Tensor, H: int, W: int) -> Tensor:
    """Normalised BEV (x, y) -> continuous (u=column, v=row) pixel coordinates
    on an H x W map whose rows run along x; pixel centres sit at index + 0.5."""
    u = ref_xy[:, 1:2] * float(W) - 0.5
    v = ref_xy[:, 0:1] * float(H) - 0.5
    return ops.concat([u, v], axis=1)


def level_reference_grid(H: int, W: int) -> np.ndarray:
    """Normalised (x, y) of every pixel centre of an H x W map, row-major."""
    ix, iy = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.stack([(ix.reshape(-1) + 0.5) / H, (iy.reshape(-1) + 0.5) / W], axis=1)


# ---------------------------------------------------------------- encoder


def init_deformable(p: Params, name: str, d: int, heads: int, levels: int, points: int) -> None:
    p.linear(name + ".value", d, d)
    p.add(name + ".off.w", np.zeros((d, heads * levels * points * 2)))
    theta = np.arange(heads) * (2.0 * np.pi / heads)
    grid = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    grid = grid / np.abs(grid).max(axis=1, keepdims=True)
    bias = np.tile(grid[:, None, None, :], (1, levels, points, 1))
    bias = bias * np.arange(1, points + 1)[None, None, :, None]
    p.add(name + ".off.b", bias.reshape(-1))
    p.add(name + ".att.w", np.zeros((d, heads * levels * points)))
    p.add(name + ".att.b", np.zeros(heads * levels * points))
    p.linear(name + ".out", d, d)


def ms_deformable_attention(query: Tensor, ref: Tensor | np.ndarray, values: list[Tensor],
                            p: Params, name: str, heads: int, points: int,
                            return_weights: bool = False):
    """Multi-scale deformable attention for a batch of queries.

    ``ref`` holds normalised BEV (x, y) per query; sampling offsets are in
    pixels of each level; attention is softmax-normalised jointly over
    levels and points within a head.
    """
    ref = ref if isinstance(ref, Tensor) else Tensor(ref)
    if np.any(ref.data < 0) or np.any(ref.data > 1):
        raise ContractError("ms_deformable_attention: reference points must lie in [0,1]^2")
    Q, d = query.shape
    L = len(values)
    dh = d // heads
    off = ops.reshape(nn.linear(p, name + ".off", query), (Q, heads, L, points, 2))
    att = ops.softmax(ops.reshape(nn.linear(p, name + ".att", query), (Q, heads, L * points)), -1)
    head_idx = np.tile(np.repeat(np.arange(heads), points), Q)
    samples = []
    for j, fmap in enumerate(values):
        H, W, _ = fmap.shape
        v = ops.reshape(nn.linear(p, name + ".value", ops.reshape(fmap, (H * W, d))),
                        (H, W, heads, dh))
        v = ops.transpose(v, (2, 0, 1, 3))
        base = ops.reshape(pixel_location(ref, H, W), (Q, 1, 1, 2))
        loc = ops.reshape(base + off[:, :, j], (Q * heads * points, 2))
        s = ops.bilinear_sample(v, loc, head_idx)
        samples.append(ops.reshape(s, (Q, heads, points, dh)))
    stacked = ops.concat(samples, axis=2)
    out = ops.sum(stacked * ops.reshape(att, (Q, heads, L * points, 1)), axis=2)
    out = nn.linear(p, name + ".out", ops.reshape(out, (Q, d)))
    if return_weights:
        return out, att
    return out


def init_encoder(p: Params, cfg: EncoderConfig) -> None:
    p.add("enc.level_embed", p.rng.normal(0.0, 0.1, size=(cfg.levels, cfg.d_model)))
    for i in range(cfg.layers):
        pre = f"enc.{i}"
        init_deformable(p, pre + ".attn", cfg.d_model, cfg.heads, cfg.levels, cfg.points)
        p.norm(pre + ".norm1", cfg.d_model)
        p.linear(pre + ".ffn.fc1", cfg.d_model, cfg.ffn_dim)
        p.linear(pre + ".ffn.fc2", cfg.ffn_dim, cfg.d_model)
        p.norm(pre + ".norm2", cfg.d_model)


def encode(pyramid: list[Tensor], cfg: EncoderConfig, p: Params) -> list[Tensor]:
    """Deformable self-attention over every pyramid pixel; shapes are preserved."""
    if cfg.layers == 0:
        return list(pyramid)
    shapes = [f.shape for f in pyramid]
    d = cfg.d_model
    refs = np.concatenate([level_reference_grid(H, W) for H, W, _ in shapes], axis=0)
    pos = positional_encoding(refs, d)
    level_rows = np.concatenate([np.full(H * W, j) for j, (H, W, _) in enumerate(shapes)])
    pos = pos + ops.gather(p["enc.level_embed"], level_rows)
    x = ops.concat([ops.reshape(f, (-1, d)) for f in pyramid], axis=0)
    bounds = np.cumsum([0] + [H * W for H, W, _ in shapes])
    maps = list(pyramid)
    for i in range(cfg.layers):
        pre = f"enc.{i}"
        attn = ms_deformable_attention(x + pos, refs, maps, p, pre + ".attn", cfg.heads,
                                       cfg.points)
        x = nn.norm(p, pre + ".norm1", x + attn)
        x = nn.norm(p, pre + ".norm2", x + nn.mlp(p, pre + ".ffn", x))
        maps = [ops.reshape(x[bounds[j]:bounds[j + 1]], shapes[j]) for j in range(len(shapes))]
    return maps


# ---------------------------------------------------------------- decoder


def init_decoder(p: Params, cfg: DecoderConfig) -> None:
    d = cfg.d_model
    p.add("dec.queries", p.rng.normal(0.0, cfg.query_std, size=(cfg.num_queries, d)))
    # wide enough to spread the initial references over the scene
    p.linear("dec.ref", d, 3, w_std=2.0 / (cfg.query_std * np.sqrt(d)))
    prior = -np.log((1 - 0.01) / 0.01)
    for l in range(cfg.layers):
        pre = f"dec.{l}"
        for nm in ("q", "k", "v", "o"):
            p.linear(f"{pre}.sa.{nm}", d, d)
        p.norm(pre + ".norm1", d)
        p.linear(pre + ".samp", d, 4)
        p.norm(pre + ".norm2", d)
        p.linear(pre + ".ffn.fc1", d, cfg.ffn_dim)
        p.linear(pre + ".ffn.fc2", cfg.ffn_dim, d)
        p.norm(pre + ".norm3", d)
        p.linear(pre + ".reg.fc1", d, d)
        p.linear(pre + ".reg.fc2", d, CODE_SIZE, w_std=0.01)
        p.linear(pre + ".cls", d, cfg.num_classes, bias=prior)


def init_reference_points(q: Tensor, p: Params) -> Tensor:
    return ops.sigmoid(nn.linear(p, "dec.ref", q))


def self_attention(q: Tensor, p: Params, name: str, heads: int) -> Tensor:
    N, d = q.shape
    dh = d // heads

    def split(t):
        return ops.transpose(ops.reshape(t, (N, heads, dh)), (1, 0, 2))

    qh = split(nn.linear(p, name + ".q", q))
    kh = split(nn.linear(p, name + ".k", q))
    vh = split(nn.linear(p, name + ".v", q))
    scores = ops.softmax((qh @ ops.transpose(kh, (0, 2, 1))) * (1.0 / np.sqrt(dh)), -1)
    out = ops.reshape(ops.transpose(scores @ vh, (1, 0, 2)), (N, d))
    return nn.linear(p, name + ".o", out)


def cross_attention_features(q: Tensor, refs: Tensor, pyramid: list[Tensor], p: Params,
                             name: str) -> tuple[Tensor, Tensor]:
    """Sum over levels of the BEV sample at each reference, weighted by a
    per-query, per-level sigmoid gate. Returns (features, gates)."""
    if len(pyramid) != 4:
        raise ConfigError(f"cross-attention expects 4 pyramid levels, got {len(pyramid)}")
    w = ops.sigmoid(nn.linear(p, name + ".samp", q))
    xy = refs[:, :2]
    total = None
    for j, fmap in enumerate(pyramid):
        H, W, _ = fmap.shape
        s = ops.bilinear_sample(fmap, pixel_location(xy, H, W)) * w[:, j:j + 1]
        total = s if total is None else total + s
    return total, w


def li3detr_cross_attention(q: Tensor, refs: Tensor, pyramid: list[Tensor], p: Params,
                            name: str) -> Tensor:
    feats, _ = cross_attention_features(q, refs, pyramid, p, name)
    return nn.norm(p, name + ".norm2", q + feats + positional_encoding(refs, q.shape[1]))


def decoder_layer(q: Tensor, refs: Tensor, pyramid: list[Tensor], p: Params, l: int,
                  cfg: DecoderConfig) -> tuple[Tensor, Tensor, LayerPrediction]:
    pre = f"dec.{l}"
    q = nn.norm(p, pre + ".norm1", q + self_attention(q, p, pre + ".sa", cfg.heads))
    q = li3detr_cross_attention(q, refs, pyramid, p, pre)
    q = nn.norm(p, pre + ".norm3", q + nn.mlp(p, pre + ".ffn", q))
    reg = nn.mlp(p, pre + ".reg", q)
    cls = nn.linear(p, pre + ".cls", q)
    pred = LayerPrediction(refs, reg, cls)
    nxt = ops.clamp(refs + reg[:, :3], 0.0, 1.0)
    if cfg.detach_refs:
        nxt = ops.detach(nxt)
    return q, nxt, pred


def decode(pyramid: list[Tensor], cfg: DecoderConfig, p: Params,
           queries: Tensor | None = None) -> list[LayerPrediction]:
    q = p["dec.queries"] if queries is None else queries
    refs = init_reference_points(q, p)
    preds = []
    for l in range(cfg.layers):
        q, refs, pred = decoder_layer(q, refs, pyramid, p, l, cfg)
        preds.append(pred)
    return preds


# ---------------------------------------------------------------- inference


def scores_and_labels(pred: LayerPrediction) -> tuple[np.ndarray, np.ndarray]:
    from scipy.special import expit

    prob = expit(pred.cls.data)
    return prob.max(axis=1), prob.argmax(axis=1)


def select_top_k(pred: LayerPrediction, k: int, pc_range) -> list:
    """Highest-scoring predictions decoded to boxes; no NMS. Ties keep query order."""
    if k <= 0:
        raise ConfigError(f"top-k must be positive, got {k}")
    scores, labels = scores_and_labels(pred)
    order = np.argsort(-scores, kind="stable")[: min(k, len(scores))]
    code = pred.box_vector().data
    return [decode_box(code[i], pc_range, int(labels[i]), float(scores[i])) for i in order]
