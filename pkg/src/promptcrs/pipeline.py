"""Template -> recommend -> fill inference pipeline shared by eval and serving."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .fusion import fuse
from .prompts import (
    DecodeConfig,
    Template,
    assemble_gen,
    assemble_rec,
    fill_template,
    generate_template,
    recommend,
)
from .training import Artifacts


@dataclass
class TurnOutput:
    template: Template
    ranked: list[tuple[int, float]]  # full catalog ranking (id, probability)
    recommendations: list[tuple[int, float]]  # top-k slice shown to the user
    response_tokens: list[str]
    consistent: bool


class RecommenderPipeline:
    def __init__(self, arts: Artifacts, top_k: int = 3):
        self.arts = arts
        self.top_k = top_k
        with torch.no_grad():
            self.entity_table = arts.fusion.graph(arts.kg).detach()
            self.item_table = self.entity_table[
                torch.tensor(arts.kg.item_ids, dtype=torch.long)
            ]
        self.decode_cfg = DecodeConfig.parse(
            arts.prompt_cfg.decode, arts.prompt_cfg.max_new_tokens
        )

    def _fused(self, context_ids: torch.Tensor, context_entities: list[int]):
        arts = self.arts
        words = arts.fusion.word_matrix(arts.backbone.encoder(context_ids))
        if context_entities:
            ents = self.entity_table[torch.tensor(context_entities, dtype=torch.long)]
        else:
            ents = self.entity_table.new_zeros(0, self.entity_table.shape[1])
        return fuse(words, ents, arts.fusion.bilinear)

    @torch.no_grad()
    def respond(
        self,
        context_tokens: list[str],
        context_entities: list[int],
        top_k: int | None = None,
    ) -> TurnOutput:
        arts = self.arts
        top_k = top_k or self.top_k
        context_ids = torch.tensor(arts.vocab.encode(context_tokens), dtype=torch.long)
        fused = self._fused(context_ids, context_entities)

        gen_ctx = assemble_gen(
            fused.words, arts.bank, context_ids, arts.backbone.cfg.max_ctx,
            reserve=self.decode_cfg.max_new_tokens,
        )
        template = generate_template(
            arts.backbone.decoder, gen_ctx, self.decode_cfg, arts.vocab
        )

        ranked: list[tuple[int, float]] = []
        recommendations: list[tuple[int, float]] = []
        if template.slot_count > 0:
            ranked = self.rank_items(context_ids, fused.entities, template)
            recommendations = ranked[: min(top_k, len(ranked))]
            response_tokens = fill_template(
                template.tokens(arts.vocab),
                [iid for iid, _ in recommendations],
                arts.entity_names,
            )
        else:
            response_tokens = template.tokens(arts.vocab)

        consistent = self._check_consistency(template, recommendations, response_tokens)
        return TurnOutput(template, ranked, recommendations, response_tokens, consistent)

    @torch.no_grad()
    def rank_items(
        self,
        context_ids: torch.Tensor,
        fused_entities: torch.Tensor,
        template: Template,
    ) -> list[tuple[int, float]]:
        arts = self.arts
        rec_ctx = assemble_rec(
            fused_entities, arts.bank, context_ids,
            torch.tensor(template.token_ids, dtype=torch.long),
            arts.backbone.cfg.max_ctx,
        )
        return recommend(
            arts.backbone.decoder, rec_ctx, self.item_table,
            arts.kg.item_ids, k=len(arts.kg.item_ids),
            pooling=arts.prompt_cfg.pooling,
        )

    def _check_consistency(self, template, recommendations, response_tokens) -> bool:
        """Slot fills must equal the top-ranked items in rank order (cycling)."""
        if template.slot_count == 0:
            return not recommendations or True
        names = [
            self.arts.entity_names[recommendations[i % len(recommendations)][0]]
            for i in range(template.slot_count)
        ]
        expected = fill_template(
            template.tokens(self.arts.vocab),
            [iid for iid, _ in recommendations],
            self.arts.entity_names,
        )
        if response_tokens != expected:
            return False
        text = " ".join(response_tokens)
        return all(name in text for name in names)
