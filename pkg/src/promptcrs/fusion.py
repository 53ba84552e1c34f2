"""Bilinear word-entity semantic fusion and its entity-prediction pre-training loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .data import KnowledgeGraph, TrainingInstance, Vocab
from .encoders import Backbone, GraphEncoder


class FusionParams(nn.Module):
    """All tunable fusion parameters: bilinear map, graph encoder, optional bridge."""

    def __init__(self, kg: KnowledgeGraph, d_model: int, d_enc: int | None = None):
        super().__init__()
        d_enc = d_enc or d_model
        self.bilinear = nn.Parameter(torch.randn(d_model, d_model) * 0.02)
        self.graph = GraphEncoder(kg.num_entities, kg.num_relations, d_model)
        # projects encoder outputs (LayerNorm scale, row norm ~sqrt(d_enc))
        # into the decoder's small embedding regime; init keeps projected rows
        # near token-embedding norm so the prefix starts almost transparent
        self.bridge = nn.Linear(d_enc, d_model, bias=False)
        with torch.no_grad():
            # unit-norm input rows x weight std s give output entries of std s;
            # s = 0.02 then matches the embedding init after the sqrt(d) factor
            nn.init.normal_(self.bridge.weight, std=0.02 / math.sqrt(d_enc))

    def word_matrix(self, encoded: torch.Tensor) -> torch.Tensor:
        return self.bridge(encoded)


@dataclass
class FusedRepresentations:
    affinity: torch.Tensor  # (n_W, n_E)
    words: torch.Tensor  # (n_W, d)
    entities: torch.Tensor  # (n_E, d)


def fuse(
    words: torch.Tensor, entities: torch.Tensor, bilinear: torch.Tensor
) -> FusedRepresentations:
    """Cross interaction: a bilinear word-entity affinity matrix, then each
    side is enriched with the affinity-weighted sum of the other side."""
    d = bilinear.shape[0]
    if bilinear.shape != (d, d):
        raise ValueError("bilinear matrix must be square")
    if (words.numel() and words.shape[1] != d) or (
        entities.numel() and entities.shape[1] != d
    ):
        raise ValueError("fusion inputs must share the bilinear dimension")
    n_w = words.shape[0] if words.ndim == 2 else 0
    n_e = entities.shape[0] if entities.ndim == 2 else 0
    if n_w == 0 or n_e == 0:
        affinity = words.new_zeros(n_w, n_e) if n_w else entities.new_zeros(n_w, n_e)
        return FusedRepresentations(affinity, words, entities)
    affinity = words @ bilinear @ entities.T
    return FusedRepresentations(
        affinity, words + affinity @ entities, entities + affinity.T @ words
    )


def pool_context(hidden: torch.Tensor, mode: str = "last") -> torch.Tensor:
    if hidden.numel() == 0:
        raise ValueError("cannot pool an empty sequence")
    if mode == "last":
        return hidden[-1]
    if mode == "mean":
        return hidden.mean(dim=0)
    raise ValueError(f"unknown pooling mode {mode!r}")


def entity_distribution(h_u: torch.Tensor, entity_table: torch.Tensor) -> torch.Tensor:
    return torch.softmax(entity_table @ h_u, dim=0)


def mean_entity_nll(
    h_u: torch.Tensor, entity_table: torch.Tensor, target_entities: list[int]
) -> torch.Tensor:
    """Mean over target entities of -log Pr(e | context)."""
    if not target_entities:
        raise ValueError("no target entities to score")
    logp = torch.log_softmax(entity_table @ h_u, dim=0)
    return -logp[torch.tensor(target_entities, dtype=torch.long)].mean()


@dataclass
class EncodedInstance:
    """A TrainingInstance with token ids resolved against the vocabulary."""

    context_ids: torch.Tensor
    response_ids: torch.Tensor
    template_ids: torch.Tensor
    context_entities: list[int]
    target_entities: list[int]
    target_items: list[int]
    source: TrainingInstance | None = None

    @classmethod
    def from_instance(cls, inst: TrainingInstance, vocab: Vocab) -> "EncodedInstance":
        return cls(
            context_ids=torch.tensor(vocab.encode(inst.context_tokens), dtype=torch.long),
            response_ids=torch.tensor(vocab.encode(inst.target_response), dtype=torch.long),
            template_ids=torch.tensor(vocab.encode(inst.target_template), dtype=torch.long),
            context_entities=list(inst.context_entities),
            target_entities=list(inst.target_entities),
            target_items=list(inst.target_items),
            source=inst,
        )


def fused_context_entities(
    fusion: FusionParams,
    backbone: Backbone,
    entity_table: torch.Tensor,
    context_ids: torch.Tensor,
    context_entities: list[int],
    word_cache: dict | None = None,
    cache_key=None,
) -> FusedRepresentations:
    """Encode the context words and fuse them with the mentioned entities.

    The raw bidirectional encoding is frozen, so it may be cached across steps;
    the bridge/bilinear parts carry gradients and are recomputed every call.
    """
    if word_cache is not None and cache_key in word_cache:
        raw = word_cache[cache_key]
    else:
        raw = backbone.encoder(context_ids)
        if word_cache is not None:
            word_cache[cache_key] = raw
    words = fusion.word_matrix(raw)
    ents = entity_table[torch.tensor(context_entities, dtype=torch.long)] \
        if context_entities else entity_table.new_zeros(0, entity_table.shape[1])
    return fuse(words, ents, fusion.bilinear)


def fusion_pretrain_loss(
    backbone: Backbone,
    fusion: FusionParams,
    kg: KnowledgeGraph,
    batch: list[EncodedInstance],
    pooling: str = "last",
    word_cache: dict | None = None,
) -> torch.Tensor:
    """Mean over the batch of the per-instance mean entity cross-entropy.

    Prompt layout per instance: [fused context entities; C; R], pooled at the
    final position, scored against the raw graph-encoded entity table.
    """
    from .encoders import run_batched

    entity_table = fusion.graph(kg)
    seqs = []
    for inst in batch:
        if not inst.target_entities:
            raise ValueError("fusion pre-training instance without target entities")
        fused = fused_context_entities(
            fusion, backbone, entity_table, inst.context_ids, inst.context_entities,
            word_cache=word_cache, cache_key=id(inst),
        )
        tokens = torch.cat([inst.context_ids, inst.response_ids])
        seqs.append(torch.cat([fused.entities, backbone.decoder.tok_emb(tokens)]))
    hidden, lengths = run_batched(backbone.decoder, seqs)
    losses = []
    for i, inst in enumerate(batch):
        h_u = pool_context(hidden[i, : lengths[i]], pooling)
        losses.append(mean_entity_nll(h_u, entity_table, inst.target_entities))
    return torch.stack(losses).mean()
