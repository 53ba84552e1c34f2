"""Soft-token banks, prompt assembly, template generation, slot filling, ranking."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .data import ITEM_SLOT, Vocab
from .encoders import TinyDecoder
from .fusion import pool_context


class PromptBank(nn.Module):
    """Learnable soft-token matrices for the generation and recommendation prompts."""

    def __init__(self, d_model: int, len_gen: int = 50, len_rec: int = 10):
        super().__init__()
        self.p_gen = nn.Parameter(torch.randn(len_gen, d_model) * 0.02)
        self.p_rec = nn.Parameter(torch.randn(len_rec, d_model) * 0.02)


@dataclass
class PromptedContext:
    prefix: torch.Tensor  # (P, d) latent vectors
    token_ids: torch.Tensor  # (T,) explicit tokens
    kind: str  # pretrain | generation | recommendation
    # segment lengths for layout audits: (n_fused, n_soft, n_context, n_template)
    segments: tuple = field(default=(0, 0, 0, 0))


def _truncate_context(fused_words, context_ids, budget: int):
    """Drop the oldest context tokens (and their aligned fused rows) to fit."""
    if budget < 0:
        budget = 0
    if len(context_ids) <= budget:
        return fused_words, context_ids
    keep = len(context_ids) - budget
    trimmed_ids = context_ids[keep:]
    trimmed_fused = fused_words[keep:] if fused_words is not None else None
    return trimmed_fused, trimmed_ids


def assemble_gen(
    fused_words: torch.Tensor,
    bank: PromptBank,
    context_ids: torch.Tensor,
    max_ctx: int,
    reserve: int = 0,
) -> PromptedContext:
    """Generation prompt: prefix = [fused words; P_gen], tokens = context.

    `reserve` positions are kept free for the continuation; on overflow the
    context (with its aligned fused rows) is truncated from the front, never
    the prompt.
    """
    if fused_words.shape[0] != context_ids.shape[0]:
        raise ValueError("fused word rows must align one-to-one with context tokens")
    n_soft = bank.p_gen.shape[0]
    budget = max_ctx - reserve - n_soft
    # each surviving context token costs two positions: its fused row + itself
    fused_words, context_ids = _truncate_context(fused_words, context_ids, budget // 2)
    prefix = torch.cat([fused_words, bank.p_gen])
    return PromptedContext(
        prefix=prefix,
        token_ids=context_ids,
        kind="generation",
        segments=(fused_words.shape[0], n_soft, len(context_ids), 0),
    )


def assemble_rec(
    fused_entities: torch.Tensor,
    bank: PromptBank,
    context_ids: torch.Tensor,
    template_ids: torch.Tensor,
    max_ctx: int,
) -> PromptedContext:
    """Recommendation prompt: prefix = [fused entities; P_rec], tokens = [C; S]."""
    n_soft = bank.p_rec.shape[0]
    n_ent = fused_entities.shape[0]
    budget = max_ctx - n_ent - n_soft - len(template_ids)
    _, context_ids = _truncate_context(None, context_ids, budget)
    prefix = torch.cat([fused_entities, bank.p_rec])
    return PromptedContext(
        prefix=prefix,
        token_ids=torch.cat([context_ids, template_ids]),
        kind="recommendation",
        segments=(n_ent, n_soft, len(context_ids), len(template_ids)),
    )


@dataclass
class Template:
    token_ids: list[int]
    slot_count: int

    @classmethod
    def from_ids(cls, ids: list[int], slot_id: int) -> "Template":
        return cls(list(ids), sum(1 for i in ids if i == slot_id))

    def tokens(self, vocab: Vocab) -> list[str]:
        return vocab.decode(self.token_ids)


@dataclass
class DecodeConfig:
    kind: str = "greedy"  # greedy | beam | topk
    beam_width: int = 3
    top_k: int = 5
    seed: int = 0
    max_new_tokens: int = 24

    @classmethod
    def parse(cls, spec: str, max_new_tokens: int = 24) -> "DecodeConfig":
        if spec == "greedy":
            return cls("greedy", max_new_tokens=max_new_tokens)
        if spec.startswith("beam:"):
            return cls("beam", beam_width=int(spec[5:]), max_new_tokens=max_new_tokens)
        if spec.startswith("topk:"):
            k, _, seed = spec[5:].partition(",")
            return cls("topk", top_k=int(k), seed=int(seed or 0),
                       max_new_tokens=max_new_tokens)
        raise ValueError(f"unknown decode spec {spec!r}")


def _continuation_logits(decoder: TinyDecoder, prefix, token_ids) -> torch.Tensor:
    _, logits = decoder(prefix, token_ids)
    return logits[-1]


@torch.no_grad()
def generate_template(
    decoder: TinyDecoder,
    ctx: PromptedContext,
    cfg: DecodeConfig,
    vocab: Vocab,
) -> Template:
    if ctx.kind != "generation":
        raise ValueError("template generation requires a generation prompt")
    if cfg.kind == "beam":
        ids = _beam_decode(decoder, ctx, cfg, vocab)
    else:
        gen = None
        if cfg.kind == "topk":
            gen = torch.Generator().manual_seed(cfg.seed)
        ids = []
        tokens = ctx.token_ids
        for _ in range(cfg.max_new_tokens):
            logits = _continuation_logits(decoder, ctx.prefix, tokens)
            if cfg.kind == "greedy":
                nxt = int(logits.argmax())
            else:
                top = torch.topk(logits, min(cfg.top_k, len(logits)))
                probs = torch.softmax(top.values, dim=0)
                nxt = int(top.indices[torch.multinomial(probs, 1, generator=gen)])
            if nxt == vocab.eos_id:
                break
            ids.append(nxt)
            tokens = torch.cat([tokens, torch.tensor([nxt], dtype=torch.long)])
    return Template.from_ids(ids, vocab.item_slot_id)


def _beam_decode(decoder, ctx, cfg, vocab) -> list[int]:
    beams = [(0.0, list(ctx.token_ids.tolist()), [], False)]
    base_len = len(ctx.token_ids)
    for _ in range(cfg.max_new_tokens):
        candidates = []
        for score, toks, new, done in beams:
            if done:
                candidates.append((score, toks, new, done))
                continue
            logits = _continuation_logits(
                decoder, ctx.prefix, torch.tensor(toks, dtype=torch.long)
            )
            logp = torch.log_softmax(logits, dim=0)
            top = torch.topk(logp, cfg.beam_width)
            for lp, idx in zip(top.values.tolist(), top.indices.tolist()):
                finished = idx == vocab.eos_id
                candidates.append(
                    (score + lp, toks + ([] if finished else [idx]),
                     new + ([] if finished else [idx]), finished)
                )
        candidates.sort(key=lambda c: (-c[0], c[2]))
        beams = candidates[: cfg.beam_width]
        if all(b[3] for b in beams):
            break
    return beams[0][2][: cfg.max_new_tokens]


def fill_template(
    template_tokens: list[str],
    ranked_items: list[int],
    name_table: dict[int, str],
) -> list[str]:
    """Replace the i-th slot by the i-th ranked item name, cycling on surplus slots."""
    slot_count = sum(1 for t in template_tokens if t == ITEM_SLOT)
    if slot_count > 0 and not ranked_items:
        raise ValueError("template has slots but no ranked items were provided")
    out: list[str] = []
    slot = 0
    for tok in template_tokens:
        if tok == ITEM_SLOT:
            item = ranked_items[slot % len(ranked_items)]
            out.extend(name_table[item].split())
            slot += 1
        else:
            out.append(tok)
    return out


def recommend(
    decoder: TinyDecoder,
    ctx: PromptedContext,
    item_table: torch.Tensor,
    item_ids: list[int],
    k: int,
    pooling: str = "last",
) -> list[tuple[int, float]]:
    """Top-k items by softmax probability; ties broken by ascending item id."""
    if ctx.kind != "recommendation":
        raise ValueError("recommend requires a recommendation prompt")
    if item_table.shape[0] != len(item_ids):
        raise ValueError("item table rows must match item ids")
    hidden, _ = decoder(ctx.prefix, ctx.token_ids)
    h_u = pool_context(hidden, pooling)
    probs = torch.softmax(item_table @ h_u, dim=0)
    scored = sorted(
        zip(item_ids, probs.tolist()), key=lambda p: (-p[1], p[0])
    )
    return scored[: min(k, len(scored))]
