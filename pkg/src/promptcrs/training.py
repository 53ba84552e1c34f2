"""Three-stage optimization: fusion pre-training, generation prompts, recommendation prompts.

The backbone is frozen before any stage runs and its digest is re-verified
after every stage.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .config import BackboneConfig, PromptConfig, TrainConfig
from .data import (
    DialogueCorpus,
    EntityLinker,
    KnowledgeGraph,
    Vocab,
    build_vocab,
    load_corpus,
    load_kg,
    make_instances,
)
from .encoders import Backbone, load_archive, run_batched, save_archive
from .fusion import (
    EncodedInstance,
    FusionParams,
    fused_context_entities,
    fusion_pretrain_loss,
    pool_context,
)
from .prompts import DecodeConfig, PromptBank, assemble_gen, assemble_rec, generate_template

STAGE_ORDER = ("fuse_pretrain", "generation", "recommendation")


class StagingError(RuntimeError):
    """A stage was run before its prerequisite checkpoints existed."""


def seed_everything(seed: int) -> None:
    random.seed(seed)
    torch.manual_seed(seed)
    torch.set_num_threads(1)  # keeps CPU reductions bit-deterministic


def init_prompts(seed: int, backbone: Backbone, prompt_cfg: PromptConfig) -> PromptBank:
    """Soft tokens start from random frozen token-embedding rows plus small noise."""
    gen = torch.Generator().manual_seed(seed)
    emb = backbone.decoder.tok_emb.weight
    bank = PromptBank(
        backbone.cfg.d_model, prompt_cfg.prompt_len_gen, prompt_cfg.prompt_len_rec
    )
    with torch.no_grad():
        for p in (bank.p_gen, bank.p_rec):
            idx = torch.randint(emb.shape[0], (p.shape[0],), generator=gen)
            noise = torch.randn(p.shape, generator=gen) * 0.01
            p.copy_(emb[idx] + noise)
    return bank


def gen_loss(
    backbone: Backbone,
    fusion: FusionParams,
    bank: PromptBank,
    kg: KnowledgeGraph,
    batch: list[EncodedInstance],
    vocab: Vocab,
    pooling: str = "last",
    word_cache: dict | None = None,
) -> torch.Tensor:
    """Teacher-forced NLL of the target template, averaged over target tokens."""
    entity_table = fusion.graph(kg)
    seqs, targets, starts = [], [], []
    for inst in batch:
        target = torch.cat(
            [inst.template_ids, torch.tensor([vocab.eos_id], dtype=torch.long)]
        )
        if len(inst.template_ids) == 0:
            continue  # empty target: instance skipped
        fused = fused_context_entities(
            fusion, backbone, entity_table, inst.context_ids, inst.context_entities,
            word_cache=word_cache, cache_key=id(inst),
        )
        ctx = assemble_gen(
            fused.words, bank, inst.context_ids, backbone.cfg.max_ctx,
            reserve=len(target),
        )
        emb = torch.cat([ctx.prefix, backbone.decoder.tok_emb(ctx.token_ids),
                         backbone.decoder.tok_emb(target)])
        seqs.append(emb)
        targets.append(target)
        starts.append(ctx.prefix.shape[0] + len(ctx.token_ids))
    if not seqs:
        raise ValueError("batch contains no instances with a nonempty target")
    hidden, _ = run_batched(backbone.decoder, seqs)
    total = hidden.new_zeros(())
    n_tokens = 0
    for i, (target, start) in enumerate(zip(targets, starts)):
        rows = hidden[i, start - 1 : start - 1 + len(target)]
        logits = backbone.decoder.logits(rows)
        total = total + F.cross_entropy(logits, target, reduction="sum")
        n_tokens += len(target)
    return total / n_tokens


def rec_scores(
    backbone: Backbone,
    fusion: FusionParams,
    bank: PromptBank,
    kg: KnowledgeGraph,
    batch: list[EncodedInstance],
    pooling: str = "last",
    word_cache: dict | None = None,
    templates: dict | None = None,
) -> torch.Tensor:
    """Softmax probabilities over the item catalog, one row per instance."""
    entity_table = fusion.graph(kg)
    item_table = entity_table[torch.tensor(kg.item_ids, dtype=torch.long)]
    seqs = []
    for inst in batch:
        fused = fused_context_entities(
            fusion, backbone, entity_table, inst.context_ids, inst.context_entities,
            word_cache=word_cache, cache_key=id(inst),
        )
        template_ids = inst.template_ids
        if templates is not None:
            template_ids = templates[id(inst)]
        ctx = assemble_rec(
            fused.entities, bank, inst.context_ids, template_ids, backbone.cfg.max_ctx
        )
        seqs.append(
            torch.cat([ctx.prefix, backbone.decoder.tok_emb(ctx.token_ids)])
        )
    hidden, lengths = run_batched(backbone.decoder, seqs)
    pooled = torch.stack(
        [pool_context(hidden[i, : lengths[i]], pooling) for i in range(len(batch))]
    )
    return torch.softmax(pooled @ item_table.T, dim=1)


def rec_loss(
    backbone: Backbone,
    fusion: FusionParams,
    bank: PromptBank,
    kg: KnowledgeGraph,
    batch: list[EncodedInstance],
    pooling: str = "last",
    word_cache: dict | None = None,
    templates: dict | None = None,
    kind: str = "bce",
) -> torch.Tensor:
    """Recommendation loss: literal summed BCE over softmax scores (default),
    or a standard softmax cross-entropy behind the "softmax_ce" flag."""
    probs = rec_scores(
        backbone, fusion, bank, kg, batch, pooling, word_cache, templates
    )
    item_index = {iid: j for j, iid in enumerate(kg.item_ids)}
    y = torch.zeros_like(probs)
    for i, inst in enumerate(batch):
        if not inst.target_items:
            raise ValueError("recommendation instance without target items")
        for iid in inst.target_items:
            y[i, item_index[iid]] = 1.0
    if kind == "softmax_ce":
        logp = torch.log(probs.clamp(min=1e-12))
        return -(y * logp).sum() / y.sum()
    if kind != "bce":
        raise ValueError(f"unknown rec loss kind {kind!r}")
    return literal_bce(probs, y)


def literal_bce(probs: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Summed binary cross-entropy over instances and items; probs are clamped
    away from 0/1 before the logs. The upper clamp must stay representable,
    so it backs off to one machine epsilon below 1 in low precision."""
    upper = 1.0 - max(1e-12, torch.finfo(probs.dtype).eps)
    p = probs.clamp(1e-12, upper)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).sum()


def tunable_parameters(stage: str, fusion: FusionParams, bank: PromptBank):
    if stage == "fuse_pretrain":
        return list(fusion.parameters())
    if stage == "generation":
        return [bank.p_gen] + list(fusion.parameters())
    if stage == "recommendation":
        return [bank.p_rec] + list(fusion.parameters())
    raise ValueError(f"unknown stage {stage!r}")


@dataclass
class Artifacts:
    """Everything loaded from a checkpoint directory plus the data it was built on."""

    backbone: Backbone
    vocab: Vocab
    kg: KnowledgeGraph
    entity_names: dict[int, str]
    linker: EntityLinker
    fusion: FusionParams
    bank: PromptBank
    prompt_cfg: PromptConfig
    ckpt_dir: Path

    def meta(self) -> dict:
        return json.loads((self.ckpt_dir / "meta.json").read_text())


def _meta_path(ckpt_dir) -> Path:
    return Path(ckpt_dir) / "meta.json"


def _read_meta(ckpt_dir) -> dict:
    path = _meta_path(ckpt_dir)
    if not path.exists():
        raise StagingError(f"no checkpoint metadata at {path}; pretrain a backbone first")
    return json.loads(path.read_text())


def _write_meta(ckpt_dir, meta: dict) -> None:
    _meta_path(ckpt_dir).write_text(json.dumps(meta, indent=2))


# --- backbone pre-training ----------------------------------------------------

def pretrain_backbone(
    data_dir,
    ckpt_dir,
    cfg: BackboneConfig | None = None,
    steps_decoder: int = 300,
    steps_encoder: int = 150,
    batch_size: int = 8,
    window: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
) -> Backbone:
    """Self-supervised runs on the corpus: causal LM for the decoder, masked-token
    prediction for the bidirectional encoder. Both are frozen afterwards."""
    seed_everything(seed)
    data_dir, ckpt_dir = Path(data_dir), Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    kg, names = load_kg(data_dir / "kg.tsv", data_dir / "entities.tsv")
    linker = EntityLinker.from_names(names)
    corpus = load_corpus(data_dir / "corpus.jsonl", linker, kg)
    vocab = build_vocab(corpus, names)

    cfg = cfg or BackboneConfig()
    cfg.vocab_size = len(vocab)
    backbone = Backbone.fresh(cfg, seed=seed)

    # two long token streams of role-separated conversations: the decoder sees
    # system turns in template form (item names already collapsed to the slot
    # token) because that is the shape of text it must later produce, while
    # the encoder sees the raw surface form it will encode at inference time
    from .data import SYSTEM_SEP, USER_SEP, make_template

    item_set = set(kg.item_ids)
    dec_stream: list[int] = []
    enc_stream: list[int] = []
    for conv in corpus.conversations:
        for turn in conv.turns:
            sep = USER_SEP if turn.speaker == "user" else SYSTEM_SEP
            enc_stream.extend(vocab.encode([sep] + turn.tokens))
            toks = turn.tokens
            if turn.speaker != "user":
                toks, _ = make_template(turn, item_set)
            dec_stream.extend(vocab.encode([sep] + toks))
        dec_stream.append(vocab.eos_id)
        enc_stream.append(vocab.eos_id)
    stream_t = torch.tensor(dec_stream, dtype=torch.long)
    enc_stream_t = torch.tensor(enc_stream, dtype=torch.long)

    rng = torch.Generator().manual_seed(seed)

    opt = torch.optim.AdamW(backbone.decoder.parameters(), lr=lr)
    for _ in range(steps_decoder):
        starts = torch.randint(0, len(stream_t) - window - 1, (batch_size,), generator=rng)
        x = torch.stack([stream_t[s : s + window] for s in starts])
        y = torch.stack([stream_t[s + 1 : s + window + 1] for s in starts])
        hidden = backbone.decoder.hidden_states(backbone.decoder.tok_emb(x))
        logits = backbone.decoder.logits(hidden)
        loss = F.cross_entropy(logits.reshape(-1, len(vocab)), y.reshape(-1))
        opt.zero_grad()
        loss.backward()
        opt.step()

    opt = torch.optim.AdamW(backbone.encoder.parameters(), lr=lr)
    for _ in range(steps_encoder):
        starts = torch.randint(0, len(enc_stream_t) - window, (batch_size,), generator=rng)
        x = torch.stack([enc_stream_t[s : s + window] for s in starts])
        mask = torch.rand(x.shape, generator=rng) < 0.15
        corrupted = x.masked_fill(mask, vocab.unk_id)
        h = torch.stack([backbone.encoder(row) for row in corrupted])
        logits = h @ backbone.encoder.tok_emb.weight.T
        loss = F.cross_entropy(logits[mask], x[mask]) if mask.any() else None
        if loss is None:
            continue
        opt.zero_grad()
        loss.backward()
        opt.step()

    digest = backbone.freeze()
    backbone.save(ckpt_dir / "backbone.npz")
    vocab.save(ckpt_dir / "vocab.json")
    _write_meta(
        ckpt_dir,
        {
            "backbone": {
                "d_model": cfg.d_model,
                "n_layers": cfg.n_layers,
                "n_heads": cfg.n_heads,
                "n_encoder_layers": cfg.n_encoder_layers,
                "max_ctx": cfg.max_ctx,
                "vocab_size": cfg.vocab_size,
            },
            "backbone_digest": digest,
            "data_dir": str(data_dir),
            "stages_done": [],
        },
    )
    return backbone


def load_artifacts(ckpt_dir, data_dir=None, prompt_cfg: PromptConfig | None = None) -> Artifacts:
    ckpt_dir = Path(ckpt_dir)
    meta = _read_meta(ckpt_dir)
    data_dir = Path(data_dir or meta["data_dir"])
    cfg = BackboneConfig(**meta["backbone"])
    backbone = Backbone.load(ckpt_dir / "backbone.npz", cfg)
    if backbone.digest != meta["backbone_digest"]:
        raise RuntimeError("backbone digest mismatch against recorded value")
    vocab = Vocab.load(ckpt_dir / "vocab.json")
    kg, names = load_kg(data_dir / "kg.tsv", data_dir / "entities.tsv")
    linker = EntityLinker.from_names(names)
    prompt_cfg = prompt_cfg or PromptConfig()

    fusion = FusionParams(kg, cfg.d_model)
    if (ckpt_dir / "fusion.npz").exists():
        fusion.load_state_dict(load_archive(ckpt_dir / "fusion.npz"))
    bank = init_prompts(meta.get("prompt_seed", 0), backbone, prompt_cfg)
    if (ckpt_dir / "bank.npz").exists():
        bank.load_state_dict(load_archive(ckpt_dir / "bank.npz"))
    return Artifacts(
        backbone=backbone,
        vocab=vocab,
        kg=kg,
        entity_names=names,
        linker=linker,
        fusion=fusion,
        bank=bank,
        prompt_cfg=prompt_cfg,
        ckpt_dir=ckpt_dir,
    )


def _batches(n: int, batch_size: int, steps: int, seed: int):
    """Seed-deterministic stream of index batches, reshuffled each epoch."""
    rng = random.Random(seed)
    order: list[int] = []
    for _ in range(steps):
        if len(order) < batch_size:
            fresh = list(range(n))
            rng.shuffle(fresh)
            order.extend(fresh)
        yield [order.pop(0) for _ in range(min(batch_size, n))]


def _generate_rec_templates(arts: Artifacts, instances, word_cache) -> dict:
    """Greedy-decode a response template per instance with the trained gen prompts."""
    cfg = DecodeConfig.parse(arts.prompt_cfg.decode, arts.prompt_cfg.max_new_tokens)
    entity_table = arts.fusion.graph(arts.kg)
    out = {}
    with torch.no_grad():
        for inst in instances:
            fused = fused_context_entities(
                arts.fusion, arts.backbone, entity_table,
                inst.context_ids, inst.context_entities,
                word_cache=word_cache, cache_key=id(inst),
            )
            ctx = assemble_gen(
                fused.words, arts.bank, inst.context_ids, arts.backbone.cfg.max_ctx,
                reserve=cfg.max_new_tokens,
            )
            tpl = generate_template(arts.backbone.decoder, ctx, cfg, arts.vocab)
            out[id(inst)] = torch.tensor(tpl.token_ids, dtype=torch.long)
    return out


def run_stage(
    stage: str,
    ckpt_dir,
    data_dir=None,
    config: TrainConfig | None = None,
    prompt_cfg: PromptConfig | None = None,
    corpus: DialogueCorpus | None = None,
    valid_corpus: DialogueCorpus | None = None,
) -> dict:
    """Train one stage, append its metrics log, and update the checkpoint dir."""
    if stage not in STAGE_ORDER:
        raise ValueError(f"unknown stage {stage!r}")
    config = config or TrainConfig.for_stage(stage)
    config.validate()
    ckpt_dir = Path(ckpt_dir)
    meta = _read_meta(ckpt_dir)
    done = meta.get("stages_done", [])
    required = STAGE_ORDER[: STAGE_ORDER.index(stage)]
    for prereq in required:
        if prereq not in done:
            raise StagingError(f"stage {stage!r} requires {prereq!r} to be trained first")

    seed_everything(config.seed)
    arts = load_artifacts(ckpt_dir, data_dir, prompt_cfg)
    if stage == "generation" and not (ckpt_dir / "bank.npz").exists():
        # soft tokens are randomly initialized when the subtask stages begin
        arts.bank = init_prompts(config.seed, arts.backbone, arts.prompt_cfg)
        meta["prompt_seed"] = config.seed
    data_dir = Path(data_dir or meta["data_dir"])
    if corpus is None:
        corpus = load_corpus(data_dir / "corpus.jsonl", arts.linker, arts.kg)
    raw = make_instances(corpus, stage, arts.kg, arts.prompt_cfg.max_context_tokens)
    if not raw:
        raise StagingError(f"no training instances for stage {stage!r}")
    instances = [EncodedInstance.from_instance(i, arts.vocab) for i in raw]

    word_cache: dict = {}
    templates = None
    if stage == "recommendation" and not config.gold_template:
        templates = _generate_rec_templates(arts, instances, word_cache)

    params = tunable_parameters(stage, arts.fusion, arts.bank)
    opt = torch.optim.AdamW(params, lr=config.lr)
    pooling = arts.prompt_cfg.pooling

    def batch_loss(batch):
        if stage == "fuse_pretrain":
            return fusion_pretrain_loss(
                arts.backbone, arts.fusion, arts.kg, batch, pooling, word_cache
            )
        if stage == "generation":
            return gen_loss(
                arts.backbone, arts.fusion, arts.bank, arts.kg, batch,
                arts.vocab, pooling, word_cache,
            )
        return rec_loss(
            arts.backbone, arts.fusion, arts.bank, arts.kg, batch,
            pooling, word_cache, templates, config.rec_loss_kind,
        )

    # optional early stopping: best validation recall@50 (rec) / loss (fuse, gen)
    valid_instances = None
    if valid_corpus is not None:
        vraw = make_instances(valid_corpus, stage, arts.kg, arts.prompt_cfg.max_context_tokens)
        valid_instances = [EncodedInstance.from_instance(i, arts.vocab) for i in vraw[:64]]

    def valid_metric() -> float:
        """Lower is better (recall is negated)."""
        with torch.no_grad():
            if stage == "recommendation":
                vtpl = {id(i): i.template_ids for i in valid_instances}
                probs = rec_scores(
                    arts.backbone, arts.fusion, arts.bank, arts.kg,
                    valid_instances, pooling, templates=vtpl,
                )
                ranked = probs.argsort(dim=1, descending=True)[:, :50]
                item_index = {iid: j for j, iid in enumerate(arts.kg.item_ids)}
                hits = sum(
                    any(item_index[t] in ranked[i].tolist() for t in inst.target_items)
                    for i, inst in enumerate(valid_instances)
                )
                return -hits / len(valid_instances)
            return float(batch_loss(valid_instances))

    eval_every = max(1, config.max_steps // 10)
    best = None  # (metric, fusion_state, bank_state)

    log_path = ckpt_dir / f"metrics_{stage}.jsonl"
    losses = []
    with open(log_path, "w") as log:
        for step, idxs in enumerate(
            _batches(len(instances), config.batch_size, config.max_steps, config.seed)
        ):
            batch = [instances[i] for i in idxs]
            loss = batch_loss(batch)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at step {step} of stage {stage!r}: {loss.item()}"
                )
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            losses.append(loss.item())
            log.write(json.dumps({"step": step, "loss": losses[-1]}) + "\n")
            if valid_instances and (step + 1) % eval_every == 0:
                metric = valid_metric()
                if best is None or metric < best[0]:
                    best = (
                        metric,
                        {k: v.clone() for k, v in arts.fusion.state_dict().items()},
                        {k: v.clone() for k, v in arts.bank.state_dict().items()},
                    )

    if best is not None:
        arts.fusion.load_state_dict(best[1])
        arts.bank.load_state_dict(best[2])

    arts.backbone.check_frozen()
    save_archive(ckpt_dir / "fusion.npz", dict(arts.fusion.state_dict()))
    save_archive(ckpt_dir / "bank.npz", dict(arts.bank.state_dict()))
    if stage not in done:
        done.append(stage)
    meta["stages_done"] = done
    meta.setdefault("stage_config", {})[stage] = {
        "lr": config.lr, "batch_size": config.batch_size,
        "max_steps": config.max_steps, "seed": config.seed,
    }
    _write_meta(ckpt_dir, meta)
    return {
        "stage": stage,
        "steps": len(losses),
        "first_loss": losses[0],
        "final_loss": losses[-1],
        "log_path": str(log_path),
    }
