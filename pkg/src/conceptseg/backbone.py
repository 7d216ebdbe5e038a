"""Toy patchwise transformer encoder with per-sublayer adapter sites and a
per-class linear decoder over a growing label space.

Stands in for a large pretrained segmentation backbone at desk scale:
2-D images, a handful of blocks, and a token-to-pixel linear head. Every
(block, sublayer) location owns an :class:`AdapterSite`; only the sites
of the last blocks are expandable by default, everything else stays an
inert empty pool. Backbone weights train on the first task only and are
frozen for the rest of the stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .concepts import ConceptMatrix
from .errors import ShapeError, ValidationError
from .routing import AdapterSite, RoutingDecision, make_site


@dataclass
class BackboneDims:
    image_size: int = 32
    patch: int = 4
    channels: int = 2
    d: int = 32
    blocks: int = 4
    heads: int = 2
    mlp_hidden: int = 64
    d_t: int = 32
    use_pos: bool = True
    # softens attention so token content survives into the deep blocks,
    # where the expandable sites read their routing evidence
    attn_temp: float = 3.0

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


class Block:
    """One transformer block: LN -> MHSA (+site), LN -> MLP (+site)."""

    def __init__(self, dims: BackboneDims, index: int, lam: float, rank: int,
                 expandable: bool, m_concepts: int, rng: nm.Rng):
        d, h = dims.d, dims.heads
        if d % h != 0:
            raise ShapeError(f"heads {h} must divide width {d}")
        self.index = index
        self.heads = h
        self.head_dim = d // h
        self.attn_temp = dims.attn_temp
        std = 1.0 / math.sqrt(d)
        self.ln1_g = nm.Tensor(np.ones(d), requires_grad=True)
        self.ln1_b = nm.Tensor(np.zeros(d), requires_grad=True)
        self.wq = nm.Tensor(rng.normal((d, d), std=std), requires_grad=True)
        self.wk = nm.Tensor(rng.normal((d, d), std=std), requires_grad=True)
        self.wv = nm.Tensor(rng.normal((d, d), std=std), requires_grad=True)
        self.wo = nm.Tensor(rng.normal((d, d), std=std), requires_grad=True)
        self.ln2_g = nm.Tensor(np.ones(d), requires_grad=True)
        self.ln2_b = nm.Tensor(np.zeros(d), requires_grad=True)
        self.w1 = nm.Tensor(rng.normal((d, dims.mlp_hidden), std=std),
                            requires_grad=True)
        self.b1 = nm.Tensor(np.zeros(dims.mlp_hidden), requires_grad=True)
        self.w2 = nm.Tensor(rng.normal((dims.mlp_hidden, d),
                                       std=1.0 / math.sqrt(dims.mlp_hidden)),
                            requires_grad=True)
        self.b2 = nm.Tensor(np.zeros(d), requires_grad=True)
        self.site_attn = make_site((index, "attn"), d, dims.d_t, m_concepts,
                                   rank, lam, expandable, rng.child(101))
        self.site_ffn = make_site((index, "ffn"), d, dims.d_t, m_concepts,
                                  rank, lam, expandable, rng.child(102))

    def _mhsa(self, h: nm.Tensor) -> nm.Tensor:
        b, n, d = h.shape
        def split(t):
            return nm.transpose(nm.reshape(t, (b, n, self.heads, self.head_dim)),
                                (0, 2, 1, 3))
        q = split(nm.matmul(h, self.wq))
        k = split(nm.matmul(h, self.wk))
        v = split(nm.matmul(h, self.wv))
        scale = 1.0 / (math.sqrt(self.head_dim) * self.attn_temp)
        scores = nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))) * scale
        attn = nm.softmax(scores, axis=-1)
        ctx = nm.matmul(attn, v)
        merged = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
        return nm.matmul(merged, self.wo)

    def _mlp(self, h: nm.Tensor) -> nm.Tensor:
        hidden = nm.relu(nm.add(nm.matmul(h, self.w1), self.b1))
        return nm.add(nm.matmul(hidden, self.w2), self.b2)

    def forward(self, x: nm.Tensor, cm: ConceptMatrix,
                collector: "SiteCollector | None") -> nm.Tensor:
        h = nm.layer_norm(x, self.ln1_g, self.ln1_b)
        out, dec = self.site_attn.forward(h, self._mhsa(h), cm)
        if collector is not None:
            collector.record(self.site_attn, h, dec)
        x = nm.add(x, out)
        h2 = nm.layer_norm(x, self.ln2_g, self.ln2_b)
        out2, dec2 = self.site_ffn.forward(h2, self._mlp(h2), cm)
        if collector is not None:
            collector.record(self.site_ffn, h2, dec2)
        return nm.add(x, out2)

    def own_parameters(self, prefix: str):
        yield f"{prefix}.ln1_g", self.ln1_g
        yield f"{prefix}.ln1_b", self.ln1_b
        yield f"{prefix}.wq", self.wq
        yield f"{prefix}.wk", self.wk
        yield f"{prefix}.wv", self.wv
        yield f"{prefix}.wo", self.wo
        yield f"{prefix}.ln2_g", self.ln2_g
        yield f"{prefix}.ln2_b", self.ln2_b
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


class SiteCollector:
    """Captures per-site inputs and routing decisions during a forward."""

    def __init__(self, want_inputs: bool = False):
        self.want_inputs = want_inputs
        self.decisions: list[RoutingDecision] = []
        self.site_inputs: dict[tuple[int, str], np.ndarray] = {}
        self.sites: dict[tuple[int, str], AdapterSite] = {}

    def record(self, site: AdapterSite, h: nm.Tensor,
               dec: RoutingDecision | None) -> None:
        self.sites[site.site_id] = site
        if dec is not None:
            self.decisions.append(dec)
        if self.want_inputs:
            self.site_inputs[site.site_id] = h.data.copy()


class ToyBackbone:
    """Patch embed + positional table + transformer blocks + final norm."""

    def __init__(self, dims: BackboneDims, lam: float, rank: int,
                 expandable_blocks: tuple[int, ...], m_concepts: int, rng: nm.Rng):
        if dims.blocks < 2:
            raise ShapeError(f"need at least 2 blocks, got {dims.blocks}")
        if dims.image_size % dims.patch != 0:
            raise ShapeError(
                f"patch {dims.patch} must divide image size {dims.image_size}")
        self.dims = dims
        self.expandable_blocks = tuple(expandable_blocks)
        std = 1.0 / math.sqrt(dims.patch_dim)
        self.patch_embed = nm.Tensor(rng.normal((dims.patch_dim, dims.d), std=std),
                                     requires_grad=True)
        self.pos_embed = nm.Tensor(rng.normal((dims.tokens, dims.d), std=0.02),
                                   requires_grad=True)
        self.blocks = [
            Block(dims, i, lam, rank, expandable=(i in self.expandable_blocks),
                  m_concepts=m_concepts, rng=rng.child(10 + i))
            for i in range(dims.blocks)
        ]
        self.final_g = nm.Tensor(np.ones(dims.d), requires_grad=True)
        self.final_b = nm.Tensor(np.zeros(dims.d), requires_grad=True)

    def sites(self):
        for blk in self.blocks:
            yield blk.site_attn
            yield blk.site_ffn

    def expandable_sites(self):
        for site in self.sites():
            if site.expandable:
                yield site

    def patchify(self, images: np.ndarray) -> np.ndarray:
        p = self.dims.patch
        b, hh, ww, c = images.shape
        if hh % p or ww % p:
            raise ShapeError(f"image dims {hh}x{ww} not divisible by patch {p}")
        g_h, g_w = hh // p, ww // p
        x = images.reshape(b, g_h, p, g_w, p, c).transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(x.reshape(b, g_h * g_w, p * p * c))

    def unpatchify_map(self, t: nm.Tensor, hh: int, ww: int) -> nm.Tensor:
        """(B, N, p*p) token maps back to (B, H, W) pixel maps."""
        p = self.dims.patch
        b = t.shape[0]
        g_h, g_w = hh // p, ww // p
        x = nm.reshape(t, (b, g_h, g_w, p, p))
        x = nm.transpose(x, (0, 1, 3, 2, 4))
        return nm.reshape(x, (b, hh, ww))

    def encode(self, images: np.ndarray, cm: ConceptMatrix,
               collector: SiteCollector | None = None) -> nm.Tensor:
        """Images (B, H, W, C) to final token features (B, N, d)."""
        patches = self.patchify(np.asarray(images, dtype=np.float64))
        x = nm.matmul(nm.Tensor(patches), self.patch_embed)
        if self.dims.use_pos:
            x = nm.add(x, self.pos_embed)
        for blk in self.blocks:
            x = blk.forward(x, cm, collector)
        return nm.layer_norm(x, self.final_g, self.final_b)

    def own_parameters(self):
        """Backbone-proper weights (adapter sites excluded)."""
        yield "backbone.patch_embed", self.patch_embed
        yield "backbone.pos_embed", self.pos_embed
        for blk in self.blocks:
            yield from blk.own_parameters(f"backbone.block{blk.index}")
        yield "backbone.final_g", self.final_g
        yield "backbone.final_b", self.final_b

    def freeze_backbone(self) -> None:
        for _, p in self.own_parameters():
            p.freeze()


SHARED_TASK = -1  # owner tag for the background row, co-owned by every task


@dataclass
class ClassHead:
    name: str
    owner_task: int
    weight: nm.Tensor  # (d, p*p)
    bias: nm.Tensor    # (p*p,)

    def freeze(self) -> None:
        self.weight.freeze()
        self.bias.freeze()


@dataclass
class SegmentationHead:
    """Per-class token-to-pixel linear rows over a cumulative label space."""

    d: int
    patch: int
    classes: list[ClassHead] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def index_of(self, name: str) -> int:
        for i, c in enumerate(self.classes):
            if c.name == name:
                return i
        raise KeyError(f"unknown class {name!r}")

    def register_task_classes(self, names: list[str], owner_task: int) -> list[int]:
        """Append zero-initialized rows; returns the new class indices."""
        existing = set(self.class_names())
        for n in names:
            if n in existing or names.count(n) > 1:
                raise ValidationError(f"class name {n!r} already registered")
        idxs = []
        pp = self.patch * self.patch
        for n in names:
            self.classes.append(ClassHead(
                name=n, owner_task=owner_task,
                weight=nm.Tensor(np.zeros((self.d, pp)), requires_grad=True),
                bias=nm.Tensor(np.zeros(pp), requires_grad=True)))
            idxs.append(len(self.classes) - 1)
        return idxs

    def logits_for(self, class_idx: int, tokens: nm.Tensor) -> nm.Tensor:
        """(B, N, p*p) pixel logits of one class from token features."""
        c = self.classes[class_idx]
        return nm.add(nm.matmul(tokens, c.weight), c.bias)

    def named_parameters(self):
        for i, c in enumerate(self.classes):
            yield f"head.class{i}.{c.name}.weight", c.weight
            yield f"head.class{i}.{c.name}.bias", c.bias


def make_head(dims: BackboneDims) -> SegmentationHead:
    head = SegmentationHead(d=dims.d, patch=dims.patch)
    head.register_task_classes(["background"], SHARED_TASK)
    return head


def forward_logits(bb: ToyBackbone, head: SegmentationHead, images: np.ndarray,
                   cm: ConceptMatrix, class_indices: list[int],
                   collector: SiteCollector | None = None) -> dict[int, nm.Tensor]:
    """Per-pixel logit maps (B, H, W) for the requested classes."""
    hh, ww = images.shape[1], images.shape[2]
    tokens = bb.encode(images, cm, collector)
    return {ci: bb.unpatchify_map(head.logits_for(ci, tokens), hh, ww)
            for ci in class_indices}


def predict_labels(bb: ToyBackbone, head: SegmentationHead, images: np.ndarray,
                   cm: ConceptMatrix,
                   collector: SiteCollector | None = None) -> np.ndarray:
    """Task-agnostic per-pixel argmax over every registered class.

    Ties resolve to the lowest class index, hence to background when all
    logits are equal (index 0 by construction).
    """
    with nm.no_grad():
        logit_maps = forward_logits(bb, head, images, cm,
                                    list(range(head.num_classes)), collector)
    stack = np.stack([logit_maps[i].data for i in range(head.num_classes)], axis=0)
    return np.argmax(stack, axis=0)
