"""Frozen decoder / bidirectional encoder backbone and the relational graph encoder."""

from __future__ import annotations

import hashlib
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BackboneConfig
from .data import KnowledgeGraph


class LengthError(ValueError):
    """Input exceeds the decoder's maximum context length."""


def _init_transformer(module: nn.Module) -> None:
    """Small-scale init (std 0.02). With the tied output head, default N(0,1)
    embeddings would give initial logits of std ~sqrt(d): a saturated softmax
    that barely trains."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, std=0.02)
            if isinstance(m, nn.Linear) and m.bias is not None:
                nn.init.zeros_(m.bias)


class _Block(nn.Module):
    """Pre-LN transformer block with optional causal masking."""

    def __init__(self, d_model: int, n_heads: int, causal: bool):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.causal = causal
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(),
            nn.Linear(4 * d_model, d_model),
        )

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None):
        # x: (B, L, d); pad_mask: (B, L) True where position is padding
        B, L, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(d, dim=-1)
        q = q.view(B, L, self.n_heads, self.d_head).transpose(1, 2)
        k = k.view(B, L, self.n_heads, self.d_head).transpose(1, 2)
        v = v.view(B, L, self.n_heads, self.d_head).transpose(1, 2)
        att = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if self.causal:
            causal = torch.triu(
                torch.ones(L, L, dtype=torch.bool, device=x.device), diagonal=1
            )
            att = att.masked_fill(causal, float("-inf"))
        if pad_mask is not None:
            att = att.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, L, d)
        x = x + self.proj(out)
        x = x + self.ff(self.ln2(x))
        return x


class TinyDecoder(nn.Module):
    """Autoregressive decoder that accepts a latent-vector prefix before tokens.

    Positions are absolute over the concatenated [prefix; tokens] sequence, so
    prefix vectors receive learned positional offsets like ordinary tokens.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_ctx, cfg.d_model)
        self.blocks = nn.ModuleList(
            _Block(cfg.d_model, cfg.n_heads, causal=True) for _ in range(cfg.n_layers)
        )
        self.ln_f = nn.LayerNorm(cfg.d_model)
        _init_transformer(self)

    def hidden_states(
        self, x: torch.Tensor, lengths: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Run the causal stack over pre-embedded inputs. x: (B, L, d)."""
        B, L, _ = x.shape
        if L > self.cfg.max_ctx:
            raise LengthError(f"sequence length {L} > max_ctx {self.cfg.max_ctx}")
        pos = self.pos_emb(torch.arange(L, device=x.device))
        h = x + pos
        pad_mask = None
        if lengths is not None:
            pad_mask = torch.arange(L, device=x.device)[None, :] >= lengths[:, None]
        for block in self.blocks:
            h = block(h, pad_mask)
        return self.ln_f(h)

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden @ self.tok_emb.weight.T  # tied output head

    def forward(self, prefix: torch.Tensor | None, tokens: torch.Tensor):
        """Single-sequence forward.

        prefix: (P, d) latent vectors or None; tokens: (T,) long.
        Returns (hidden (P+T, d), logit rows at the final prefix position and
        every token position).
        """
        parts = []
        n_prefix = 0
        if prefix is not None and len(prefix) > 0:
            parts.append(prefix)
            n_prefix = len(prefix)
        if tokens is not None and len(tokens) > 0:
            parts.append(self.tok_emb(tokens))
        if not parts:
            raise ValueError("decoder forward needs a nonempty input")
        x = torch.cat(parts, dim=0).unsqueeze(0)
        hidden = self.hidden_states(x).squeeze(0)
        start = max(n_prefix - 1, 0)
        return hidden, self.logits(hidden[start:])


class BiEncoder(nn.Module):
    """Frozen bidirectional token encoder producing the word embedding matrix T."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_ctx, cfg.d_model)
        self.blocks = nn.ModuleList(
            _Block(cfg.d_model, cfg.n_heads, causal=False)
            for _ in range(cfg.n_encoder_layers)
        )
        self.ln_f = nn.LayerNorm(cfg.d_model)
        _init_transformer(self)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if len(tokens) == 0:
            return torch.zeros(0, self.cfg.d_model, dtype=self.tok_emb.weight.dtype)
        if len(tokens) > self.cfg.max_ctx:
            raise LengthError(f"sequence length {len(tokens)} > max_ctx {self.cfg.max_ctx}")
        x = self.tok_emb(tokens) + self.pos_emb(torch.arange(len(tokens)))
        h = x.unsqueeze(0)
        for block in self.blocks:
            h = block(h)
        return self.ln_f(h).squeeze(0)


class GraphEncoder(nn.Module):
    """One-layer relational graph convolution with mean neighborhood normalization.

    Triples are treated as undirected within each relation: both endpoints see
    the other through the same relation matrix.
    """

    def __init__(self, num_entities: int, num_relations: int, d_model: int):
        super().__init__()
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.base_emb = nn.Parameter(torch.randn(num_entities, d_model) * 0.02)
        self.w_rel = nn.Parameter(torch.randn(num_relations, d_model, d_model) * 0.02)
        self.w_self = nn.Parameter(torch.randn(d_model, d_model) * 0.02)

    def forward(self, kg: KnowledgeGraph) -> torch.Tensor:
        if kg.num_entities != self.num_entities or kg.num_relations != self.num_relations:
            raise ValueError("knowledge graph shape does not match encoder parameters")
        x = self.base_emb
        out = x @ self.w_self.T
        for r in range(self.num_relations):
            src, dst = [], []
            for h, rel, t in kg.triples:
                if rel != r:
                    continue
                src.extend((h, t))
                dst.extend((t, h))
            if not src:
                continue
            src_t = torch.tensor(src, dtype=torch.long)
            dst_t = torch.tensor(dst, dtype=torch.long)
            msg = x[src_t] @ self.w_rel[r].T
            agg = torch.zeros_like(x).index_add_(0, dst_t, msg)
            deg = torch.zeros(self.num_entities, dtype=x.dtype).index_add_(
                0, dst_t, torch.ones(len(dst_t), dtype=x.dtype)
            )
            out = out + agg / deg.clamp(min=1.0)[:, None]
        return F.relu(out)


def graph_encode(kg: KnowledgeGraph, params: GraphEncoder) -> torch.Tensor:
    return params(kg)


def run_batched(decoder: TinyDecoder, seqs: list[torch.Tensor]):
    """Pad variable-length embedding sequences and run one decoder forward.

    Returns (hidden (B, Lmax, d), lengths). Positions at or beyond a sample's
    length are padding and must be ignored by the caller.
    """
    if not seqs:
        raise ValueError("empty batch")
    lengths = torch.tensor([s.shape[0] for s in seqs], dtype=torch.long)
    l_max = int(lengths.max())
    d = seqs[0].shape[1]
    x = seqs[0].new_zeros(len(seqs), l_max, d)
    for i, s in enumerate(seqs):
        x[i, : s.shape[0]] = s
    hidden = decoder.hidden_states(x, lengths)
    return hidden, lengths


def weight_digest(module: nn.Module) -> str:
    """Content digest of all parameters and buffers, as row-major float32 bytes."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().to(torch.float32).contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(module: nn.Module) -> str:
    """Freeze every parameter and return the recorded digest."""
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return weight_digest(module)


# --- tensor archive (npz: name -> row-major float32 array) -------------------

def save_archive(path, tensors: dict[str, torch.Tensor]) -> None:
    arrays = {
        name: t.detach().to(torch.float32).contiguous().numpy()
        for name, t in tensors.items()
    }
    np.savez(path, **arrays)


def load_archive(path) -> dict[str, torch.Tensor]:
    with np.load(path) as data:
        return {name: torch.from_numpy(data[name].copy()) for name in data.files}


def save_module(path, module: nn.Module) -> None:
    save_archive(path, dict(module.state_dict()))


def load_module(path, module: nn.Module) -> nn.Module:
    tensors = load_archive(path)
    current = module.state_dict()
    module.load_state_dict({k: v.to(current[k].dtype) for k, v in tensors.items()})
    return module


class Backbone:
    """The frozen decoder/encoder pair plus its recorded digest."""

    def __init__(self, cfg: BackboneConfig, decoder: TinyDecoder, encoder: BiEncoder):
        self.cfg = cfg
        self.decoder = decoder
        self.encoder = encoder
        self.digest = None

    @classmethod
    def fresh(cls, cfg: BackboneConfig, seed: int = 0) -> "Backbone":
        torch.manual_seed(seed)
        return cls(cfg, TinyDecoder(cfg), BiEncoder(cfg))

    def freeze(self) -> str:
        d1 = freeze(self.decoder)
        d2 = freeze(self.encoder)
        self.digest = hashlib.sha256((d1 + d2).encode()).hexdigest()
        return self.digest

    def current_digest(self) -> str:
        d1 = weight_digest(self.decoder)
        d2 = weight_digest(self.encoder)
        return hashlib.sha256((d1 + d2).encode()).hexdigest()

    def check_frozen(self) -> None:
        if self.digest is None:
            raise RuntimeError("backbone was never frozen")
        if self.current_digest() != self.digest:
            raise RuntimeError("frozen backbone weights changed")

    def save(self, path) -> None:
        path = Path(path)
        tensors = {f"decoder.{k}": v for k, v in self.decoder.state_dict().items()}
        tensors.update({f"encoder.{k}": v for k, v in self.encoder.state_dict().items()})
        save_archive(path, tensors)

    @classmethod
    def load(cls, path, cfg: BackboneConfig) -> "Backbone":
        tensors = load_archive(path)
        bb = cls(cfg, TinyDecoder(cfg), BiEncoder(cfg))
        bb.decoder.load_state_dict(
            {k[len("decoder."):]: v for k, v in tensors.items() if k.startswith("decoder.")}
        )
        bb.encoder.load_state_dict(
            {k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")}
        )
        bb.freeze()
        return bb
