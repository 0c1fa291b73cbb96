"""Differentiable per-modality encoders and the joint fusion.

Six modality embeddings are produced per entity, each L2-normalized:

* ``structure``: trainable node vectors -> two graph-attention layers ->
  affine projection -> segment self-attention with a bottleneck adaptor,
* ``rel_bow`` / ``attr_bow``: bag-of-words counts -> affine projection ->
  cross-attention refinement with the text-side embedding as query,
* ``rel_text`` / ``attr_text``: text-model features -> affine projection,
* ``visual``: visual features -> affine projection.

The joint embedding is the softmax-weighted concatenation of all six,
re-normalized.  All modules run in float64; forward passes are pure
functions of (inputs, parameters).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .features import ModalFeatureBundle
from .kg import MMKGPair, build_adjacency

MODALITIES = ("structure", "rel_bow", "rel_text", "attr_bow", "attr_text", "visual")
MI_MODALITIES = ("structure", "rel_text", "attr_text", "visual")


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions and attention hyperparameters shared by all blocks."""

    embed_dim: int = 100
    node_dim: int = 100
    gat_heads: int = 1
    segments: int = 4
    attn_heads: int = 2
    attn_head_dim: int = 16
    adaptor_dim: int = 32
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.embed_dim % self.segments != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by segments {self.segments}")
        for field in ("embed_dim", "node_dim", "gat_heads", "segments", "attn_heads",
                      "attn_head_dim", "adaptor_dim"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1")
        if self.adaptor_dim >= self.embed_dim:
            raise ConfigError(f"adaptor_dim {self.adaptor_dim} must be < embed_dim {self.embed_dim}")


@dataclass(frozen=True)
class FeatureDims:
    """Raw input widths per side, read off the feature bundles."""

    n_source: int
    n_target: int
    bow_rel: int
    bow_attr: int
    text_rel: int
    text_attr: int
    visual: int

    @classmethod
    def from_bundles(cls, src: ModalFeatureBundle, tgt: ModalFeatureBundle) -> "FeatureDims":
        for name in ("bow_rel", "bow_attr", "text_rel", "text_attr", "visual"):
            if getattr(src, name).shape[1] != getattr(tgt, name).shape[1]:
                raise ConfigError(f"{name} width differs between sides")
        return cls(
            n_source=src.n_entities,
            n_target=tgt.n_entities,
            bow_rel=src.bow_rel.shape[1],
            bow_attr=src.bow_attr.shape[1],
            text_rel=src.text_rel.shape[1],
            text_attr=src.text_attr.shape[1],
            visual=src.visual.shape[1],
        )


@dataclass
class GraphInputs:
    """Per-side tensors consumed by the encoder forward pass."""

    side: str
    edge_row: torch.Tensor
    edge_col: torch.Tensor
    bow_rel: torch.Tensor
    bow_attr: torch.Tensor
    text_rel: torch.Tensor
    text_attr: torch.Tensor
    visual: torch.Tensor
    visual_present: torch.Tensor


@dataclass
class EmbeddingSet:
    """All six unit-norm modality embeddings plus the joint embedding."""

    modal: dict[str, torch.Tensor]
    joint: torch.Tensor

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.joint if name == "joint" else self.modal[name]

    @property
    def n_entities(self) -> int:
        return self.joint.shape[0]


def prepare_inputs(pair: MMKGPair,
                   bundles: tuple[ModalFeatureBundle, ModalFeatureBundle]) -> tuple[GraphInputs, GraphInputs]:
    """Build adjacency edge arrays and convert feature bundles to tensors."""
    out = []
    for side, kg, bundle in (("source", pair.source, bundles[0]), ("target", pair.target, bundles[1])):
        row, col = build_adjacency(kg).edge_arrays()
        out.append(GraphInputs(
            side=side,
            edge_row=torch.from_numpy(row),
            edge_col=torch.from_numpy(col),
            bow_rel=torch.from_numpy(np.ascontiguousarray(bundle.bow_rel)),
            bow_attr=torch.from_numpy(np.ascontiguousarray(bundle.bow_attr)),
            text_rel=torch.from_numpy(np.ascontiguousarray(bundle.text_rel)),
            text_attr=torch.from_numpy(np.ascontiguousarray(bundle.text_attr)),
            visual=torch.from_numpy(np.ascontiguousarray(bundle.visual)),
            visual_present=torch.from_numpy(np.ascontiguousarray(bundle.visual_present)),
        ))
    return out[0], out[1]


class GraphAttentionLayer(nn.Module):
    """One graph-attention layer over an explicit (center, neighbor) edge list.

    The coefficient of edge (i, j) is the softmax over neighbors(i) of
    ``leaky_relu(a^T [W h_i || W h_j])``; node i receives the attention-
    weighted sum of its neighbors' projected vectors, passed through ELU.
    """

    def __init__(self, in_dim: int, out_dim: int, heads: int = 1, concat: bool = True,
                 leaky_slope: float = 0.2):
        super().__init__()
        self.heads = heads
        self.out_dim = out_dim
        self.concat = concat
        self.leaky_slope = leaky_slope
        self.weight = nn.Parameter(torch.empty(in_dim, heads * out_dim))
        self.attn_src = nn.Parameter(torch.empty(heads, out_dim))
        self.attn_dst = nn.Parameter(torch.empty(heads, out_dim))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for p in (self.weight, self.attn_src, self.attn_dst):
            nn.init.xavier_uniform_(p)

    def forward(self, x: torch.Tensor, row: torch.Tensor, col: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        h = (x @ self.weight).view(n, self.heads, self.out_dim)
        score_src = (h * self.attn_src).sum(-1)
        score_dst = (h * self.attn_dst).sum(-1)
        e = F.leaky_relu(score_src[row] + score_dst[col], self.leaky_slope)

        # Segment softmax over each center's edges; the max shift is exact.
        idx = row.unsqueeze(1).expand(-1, self.heads)
        e_max = torch.full((n, self.heads), -torch.inf, dtype=e.dtype)
        e_max.scatter_reduce_(0, idx, e.detach(), reduce="amax", include_self=True)
        w = torch.exp(e - e_max[row])
        denom = torch.zeros(n, self.heads, dtype=e.dtype).index_add_(0, row, w)
        alpha = w / denom[row]

        out = torch.zeros(n, self.heads, self.out_dim, dtype=h.dtype)
        out = out.index_add(0, row, alpha.unsqueeze(-1) * h[col])
        out = out.reshape(n, self.heads * self.out_dim) if self.concat else out.mean(dim=1)
        return F.elu(out)


class SegmentSelfAttention(nn.Module):
    """Self-attention across segment tokens of each entity vector, plus a
    zero-initialized bottleneck adaptor added residually.

    The vector is split into ``segments`` tokens; every head projects tokens
    to its own ``head_dim`` for queries/keys/values, so the token width does
    not constrain the head count.
    """

    def __init__(self, dim: int, segments: int, heads: int, head_dim: int, adaptor_dim: int):
        super().__init__()
        if dim % segments != 0:
            raise ConfigError(f"dim {dim} not divisible by segments {segments}")
        self.segments = segments
        self.heads = heads
        self.head_dim = head_dim
        self.token_dim = dim // segments
        self.q_proj = nn.Parameter(torch.empty(self.token_dim, heads * head_dim))
        self.k_proj = nn.Parameter(torch.empty(self.token_dim, heads * head_dim))
        self.v_proj = nn.Parameter(torch.empty(self.token_dim, heads * head_dim))
        self.out_proj = nn.Parameter(torch.empty(heads * head_dim, self.token_dim))
        self.adaptor_down = nn.Linear(dim, adaptor_dim)
        self.adaptor_up = nn.Parameter(torch.empty(adaptor_dim, dim))
        self.adaptor_scale = nn.Parameter(torch.empty(()))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for p in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.xavier_uniform_(p)
        with torch.no_grad():
            self.adaptor_up.zero_()  # the adaptor residual starts inactive
            self.adaptor_scale.fill_(1.0)

    def _attend(self, tq: torch.Tensor, tk: torch.Tensor, tv: torch.Tensor) -> torch.Tensor:
        n, s_q = tq.shape[0], tq.shape[1]
        q = (tq @ self.q_proj).view(n, s_q, self.heads, self.head_dim).transpose(1, 2)
        k = (tk @ self.k_proj).view(n, -1, self.heads, self.head_dim).transpose(1, 2)
        v = (tv @ self.v_proj).view(n, -1, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(n, s_q, self.heads * self.head_dim)
        return (y @ self.out_proj).reshape(n, -1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = x.view(x.shape[0], self.segments, self.token_dim)
        y = self._attend(tokens, tokens, tokens)
        y = y + self.adaptor_scale * (F.gelu(self.adaptor_down(y)) @ self.adaptor_up)
        return F.normalize(y, dim=-1)


class SemanticCrossAttention(nn.Module):
    """Cross-attention that refines bag-of-words embeddings using the
    text-side embedding as query; keys and values come from the bag-of-words
    side, and the result is added residually onto it."""

    def __init__(self, dim: int, segments: int, heads: int, head_dim: int):
        super().__init__()
        if dim % segments != 0:
            raise ConfigError(f"dim {dim} not divisible by segments {segments}")
        self.segments = segments
        self.heads = heads
        self.head_dim = head_dim
        self.token_dim = dim // segments
        self.q_proj = nn.Parameter(torch.empty(self.token_dim, heads * head_dim))
        self.k_proj = nn.Parameter(torch.empty(self.token_dim, heads * head_dim))
        self.v_proj = nn.Parameter(torch.empty(self.token_dim, heads * head_dim))
        self.out_proj = nn.Parameter(torch.empty(heads * head_dim, self.token_dim))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for p in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.xavier_uniform_(p)

    def forward(self, char_emb: torch.Tensor, semantic_emb: torch.Tensor) -> torch.Tensor:
        n = char_emb.shape[0]
        tq = semantic_emb.view(n, self.segments, self.token_dim)
        tk = char_emb.view(n, self.segments, self.token_dim)
        q = (tq @ self.q_proj).view(n, self.segments, self.heads, self.head_dim).transpose(1, 2)
        k = (tk @ self.k_proj).view(n, self.segments, self.heads, self.head_dim).transpose(1, 2)
        v = (tk @ self.v_proj).view(n, self.segments, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(n, self.segments, self.heads * self.head_dim)
        y = (y @ self.out_proj).reshape(n, -1)
        return F.normalize(char_emb + y, dim=-1)


def project_modality(x: torch.Tensor, linear: nn.Linear) -> torch.Tensor:
    """Affine map into the shared modality width, then L2 normalization."""
    return F.normalize(linear(x), dim=-1)


def fuse_joint(modal: dict[str, torch.Tensor], fusion_logits: torch.Tensor) -> torch.Tensor:
    """Softmax-weight the six modality blocks, concatenate, re-normalize."""
    if set(modal) != set(MODALITIES):
        raise ConfigError(f"fusion needs exactly the modalities {MODALITIES}")
    weights = torch.softmax(fusion_logits, dim=0)
    joint = torch.cat([weights[k] * modal[name] for k, name in enumerate(MODALITIES)], dim=1)
    return F.normalize(joint, dim=-1)


class MultiModalEncoder(nn.Module):
    """The full per-side encoder producing an :class:`EmbeddingSet`.

    Parameters are shared between the two sides except for the per-entity
    node vectors feeding the structure branch.  ``role`` tags this instance
    as the gradient-trained copy or the momentum copy.
    """

    def __init__(self, config: EncoderConfig, dims: FeatureDims, seed: int = 0, role: str = "online"):
        super().__init__()
        self.config = config
        self.dims = dims
        self.role = role
        d = config.embed_dim
        self.node_source = nn.Parameter(torch.empty(dims.n_source, config.node_dim))
        self.node_target = nn.Parameter(torch.empty(dims.n_target, config.node_dim))
        self.gat1 = GraphAttentionLayer(config.node_dim, d, config.gat_heads, concat=True,
                                        leaky_slope=config.leaky_slope)
        self.gat2 = GraphAttentionLayer(config.gat_heads * d, d, config.gat_heads, concat=False,
                                        leaky_slope=config.leaky_slope)
        self.struct_affine = nn.Linear(d, d)
        self.struct_attn = SegmentSelfAttention(d, config.segments, config.attn_heads,
                                                config.attn_head_dim, config.adaptor_dim)
        self.rel_bow_proj = nn.Linear(dims.bow_rel, d)
        self.attr_bow_proj = nn.Linear(dims.bow_attr, d)
        self.rel_text_proj = nn.Linear(dims.text_rel, d)
        self.attr_text_proj = nn.Linear(dims.text_attr, d)
        self.visual_proj = nn.Linear(dims.visual, d)
        self.rel_cross = SemanticCrossAttention(d, config.segments, config.attn_heads,
                                                config.attn_head_dim)
        self.attr_cross = SemanticCrossAttention(d, config.segments, config.attn_heads,
                                                 config.attn_head_dim)
        self.fusion_logits = nn.Parameter(torch.empty(len(MODALITIES)))
        self.double()
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Deterministic initialization driven by a private generator."""
        gen = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            with torch.no_grad():
                if "node_source" in name or "node_target" in name:
                    p.normal_(0.0, 0.02, generator=gen)
                elif name.endswith("fusion_logits") or name.endswith("adaptor_up"):
                    p.zero_()
                elif name.endswith("adaptor_scale"):
                    p.fill_(1.0)
                elif p.ndim == 2:
                    bound = math.sqrt(6.0 / (p.shape[0] + p.shape[1]))
                    p.uniform_(-bound, bound, generator=gen)
                else:
                    p.zero_()

    def fusion_weights(self) -> torch.Tensor:
        return torch.softmax(self.fusion_logits, dim=0)

    def structure_forward(self, inputs: GraphInputs) -> torch.Tensor:
        node = self.node_source if inputs.side == "source" else self.node_target
        h = self.gat1(node, inputs.edge_row, inputs.edge_col)
        h = self.gat2(h, inputs.edge_row, inputs.edge_col)
        return self.struct_attn(self.struct_affine(h))

    def forward(self, inputs: GraphInputs) -> EmbeddingSet:
        rel_text = project_modality(inputs.text_rel, self.rel_text_proj)
        attr_text = project_modality(inputs.text_attr, self.attr_text_proj)
        modal = {
            "structure": self.structure_forward(inputs),
            "rel_bow": self.rel_cross(project_modality(inputs.bow_rel, self.rel_bow_proj), rel_text),
            "rel_text": rel_text,
            "attr_bow": self.attr_cross(project_modality(inputs.bow_attr, self.attr_bow_proj), attr_text),
            "attr_text": attr_text,
            "visual": project_modality(inputs.visual, self.visual_proj),
        }
        return EmbeddingSet(modal=modal, joint=fuse_joint(modal, self.fusion_logits))

    @property
    def joint_dim(self) -> int:
        return len(MODALITIES) * self.config.embed_dim


def encode_pair(encoder: MultiModalEncoder, inputs_src: GraphInputs,
                inputs_tgt: GraphInputs) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Forward both sides under one parameter snapshot."""
    return encoder(inputs_src), encoder(inputs_tgt)
